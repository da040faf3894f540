pub mod chemvae;
pub mod corpus;
pub mod ddimodel;
pub mod eval;
pub mod lexicon;
pub mod nn;
pub mod smiles;
pub mod tokenizer;
pub mod train;
