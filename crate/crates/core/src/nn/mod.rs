//! Differentiable tensor ops, parameter storage, Adam, gradient checking and
//! the binary checkpoint format.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, softmax_rows, Graph, Var, PROB_FLOOR};
pub use layers::{attention_block, gru_step, init_attention_block, init_gru, init_linear, DetRng};
pub use optim::{adam_step, AdamConfig};
pub use params::{fnv1a, param_rng, Gradients, Param, ParamStore};
pub use tensor::{argmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter {0:?}")]
    MissingParam(String),
    #[error("index {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
