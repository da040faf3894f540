//! Relation classifier over a drug pair in a sentence.
//!
//! A small transformer encodes the subword sequence. The CLS state and the
//! mean of each entity span go through `tanh` and a linear map (the two entity
//! spans share one map), are concatenated and classified. In fused mode the
//! two chemical vectors are concatenated, projected, and appended before the
//! classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemvae::{fallback_param_name, ChemEmbedding, WordVectors, IMPORT_PROJECTION};
use crate::corpus::{drug_key, EntityMention, PairInstance, RelationLabel};
use crate::nn::{attention_block, init_attention_block, init_linear, DetRng, Graph, NnError, ParamStore, Tensor, Var};
use crate::tokenizer::{WordPieceTokenizer, CLS_ID, SEP_ID};

pub const N_CLASSES: usize = RelationLabel::COUNT;
const INIT_STD: f64 = 0.02;
const CHEM_STREAM: u64 = 0xc4e3_5eed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("tokenization error for pair {pair}: {message}")]
    Tokenize { pair: String, message: String },
    #[error("pair {pair} cannot fit both entities in {max_len} tokens (needs {needed})")]
    Truncation { pair: String, needed: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("empty or invalid entity range {start}..={end}")]
    Range { start: usize, end: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<ModelError> for NnError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(e) => e,
            other => NnError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TextOnly,
    Fused,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TextOnly => "text_only",
            Self::Fused => "fused",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text_only" | "text" => Ok(Self::TextOnly),
            "fused" => Ok(Self::Fused),
            other => Err(format!("unknown mode {other:?} (expected text_only or fused)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Width of the projected chemical feature.
    pub fusion_dim: usize,
    /// Length of each drug's chemical vector.
    pub chem_dim: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 300,
            dropout: 0.1,
            fusion_dim: 128,
            chem_dim: 292,
        }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            dropout: 0.1,
            fusion_dim: 8,
            chem_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 || self.d_model == 0 || self.max_seq_len < 4 || self.chem_dim == 0 || self.fusion_dim == 0 {
            return Err(ModelError::Config("sizes must be positive and max_seq_len at least 4".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Creates every model parameter for `mode`.
pub fn init_model(store: &mut ParamStore, cfg: &EncoderConfig, mode: Mode, seed: u64) -> Result<(), ModelError> {
    cfg.validate()?;
    let d = cfg.d_model;
    store.insert_normal("enc.tok_emb", &[cfg.vocab_size, d], INIT_STD, seed);
    store.insert_normal("enc.pos_emb", &[cfg.max_seq_len, d], INIT_STD, seed);
    for l in 0..cfg.n_layers {
        init_attention_block(store, &format!("enc.l{l}"), d, seed);
    }
    store.insert_full("enc.ln_f.g", &[d], 1.0);
    store.insert_zeros("enc.ln_f.b", &[d]);
    init_linear(store, "head.cls", d, d, seed);
    init_linear(store, "head.ent", d, d, seed);
    match mode {
        Mode::TextOnly => init_linear(store, "head.out", 3 * d, N_CLASSES, seed),
        Mode::Fused => {
            init_linear(store, "head.chem", 2 * cfg.chem_dim, cfg.fusion_dim, seed);
            init_linear(store, "head.out_fused", 3 * d + cfg.fusion_dim, N_CLASSES, seed);
        }
    }
    Ok(())
}

/// A tokenized pair with inclusive entity token ranges. Position 0 is
/// `[CLS]` and the last position is `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedInstance {
    pub token_ids: Vec<usize>,
    pub token_char_spans: Vec<(usize, usize)>,
    pub e1_range: (usize, usize),
    pub e2_range: (usize, usize),
    pub label: RelationLabel,
    pub truncated: bool,
}

fn overlap_range(
    spans: &[(usize, usize)],
    mention: &EntityMention,
    pair: &str,
) -> Result<(usize, usize), ModelError> {
    let hits: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < mention.char_end && mention.char_start < e)
        .map(|(i, _)| i)
        .collect();
    match (hits.first(), hits.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(ModelError::Tokenize {
            pair: pair.to_string(),
            message: format!("mention {:?} covers no token", mention.text),
        }),
    }
}

/// Tokenizes the sentence and locates both entities. Sequences longer than
/// `max_seq_len` keep a window of tokens containing both entities.
pub fn tokenize(
    instance: &PairInstance,
    tokenizer: &WordPieceTokenizer,
    max_seq_len: usize,
) -> Result<TokenizedInstance, ModelError> {
    let pair = &instance.pair_id;
    let toks = tokenizer.tokenize(&instance.sentence_text);
    let spans: Vec<(usize, usize)> = toks.iter().map(|t| (t.char_start, t.char_end)).collect();
    let (i, j) = overlap_range(&spans, &instance.e1, pair)?;
    let (k, m) = overlap_range(&spans, &instance.e2, pair)?;
    if j >= k {
        return Err(ModelError::Tokenize {
            pair: pair.clone(),
            message: format!("entity token ranges {i}..={j} and {k}..={m} overlap or are out of order"),
        });
    }
    let window = max_seq_len.saturating_sub(2);
    let needed = m - i + 1;
    if needed > window {
        return Err(ModelError::Truncation {
            pair: pair.clone(),
            needed: needed + 2,
            max_len: max_seq_len,
        });
    }
    let (start, truncated) = if toks.len() <= window {
        (0, false)
    } else {
        ((m + 1).saturating_sub(window).min(i), true)
    };
    let end = (start + window).min(toks.len());
    let mut token_ids = Vec::with_capacity(end - start + 2);
    let mut token_char_spans = Vec::with_capacity(end - start + 2);
    token_ids.push(CLS_ID);
    token_char_spans.push((0, 0));
    for t in &toks[start..end] {
        token_ids.push(t.id);
        token_char_spans.push((t.char_start, t.char_end));
    }
    let n = instance.sentence_text.chars().count();
    token_ids.push(SEP_ID);
    token_char_spans.push((n, n));
    let shift = |x: usize| x - start + 1;
    Ok(TokenizedInstance {
        token_ids,
        token_char_spans,
        e1_range: (shift(i), shift(j)),
        e2_range: (shift(k), shift(m)),
        label: instance.label,
        truncated,
    })
}

/// Final hidden states `H: [len, d]`. Dropout is active only when `rng` is given.
pub fn encode_text(
    g: &mut Graph,
    ids: &[usize],
    cfg: &EncoderConfig,
    mut rng: Option<&mut DetRng>,
) -> Result<Var, ModelError> {
    if ids.is_empty() || ids.len() > cfg.max_seq_len {
        return Err(ModelError::Config(format!(
            "sequence of {} tokens for max_seq_len {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::Vocab {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let tok = g.param("enc.tok_emb")?;
    let pos = g.param("enc.pos_emb")?;
    let te = g.gather_rows(tok, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pe = g.gather_rows(pos, &positions)?;
    let mut h = g.add(te, pe)?;
    for l in 0..cfg.n_layers {
        h = attention_block(g, h, &format!("enc.l{l}"), cfg.n_heads, cfg.dropout, rng.as_deref_mut())?;
    }
    let (gamma, beta) = (g.param("enc.ln_f.g")?, g.param("enc.ln_f.b")?);
    Ok(g.layer_norm(h, gamma, beta)?)
}

/// `W_ent · tanh(mean(H[a..=b])) + b_ent` as `[1, d]`.
pub fn pool_entity(g: &mut Graph, h: Var, range: (usize, usize)) -> Result<Var, ModelError> {
    let (a, b) = range;
    if a > b || b >= g.shape(h)[0] {
        return Err(ModelError::Range { start: a, end: b });
    }
    let span = g.slice_rows(h, a, b + 1)?;
    let mean = g.mean_rows(span)?;
    let act = g.tanh(mean)?;
    Ok(g.linear_named(act, "head.ent.w", "head.ent.b")?)
}

/// `W_cls · tanh(H[0]) + b_cls` as `[1, d]`.
pub fn cls_transform(g: &mut Graph, h: Var) -> Result<Var, ModelError> {
    let h0 = g.slice_rows(h, 0, 1)?;
    let act = g.tanh(h0)?;
    Ok(g.linear_named(act, "head.cls.w", "head.cls.b")?)
}

/// `softmax(W_out · [h0; h1; h2] + b_out)` as `[1, N]`.
pub fn classify_text(g: &mut Graph, h0: Var, h1: Var, h2: Var) -> Result<Var, ModelError> {
    let cat = g.concat_cols(&[h0, h1, h2])?;
    let logits = g.linear_named(cat, "head.out.w", "head.out.b")?;
    Ok(g.softmax(logits)?)
}

/// `W_chem · [c1; c2] + b_chem` as `[1, f]`.
pub fn fuse_chem(g: &mut Graph, c1: Var, c2: Var, chem_dim: usize) -> Result<Var, ModelError> {
    for c in [c1, c2] {
        if g.shape(c) != [1, chem_dim] {
            return Err(ModelError::Nn(NnError::Shape {
                op: "fuse_chem",
                detail: format!("chemical vector {:?}, expected [1, {chem_dim}]", g.shape(c)),
            }));
        }
    }
    let cat = g.concat_cols(&[c1, c2])?;
    Ok(g.linear_named(cat, "head.chem.w", "head.chem.b")?)
}

/// `softmax(W_fused · [h0; h1; h2; chm] + b_fused)` as `[1, N]`.
pub fn classify_fused(g: &mut Graph, h0: Var, h1: Var, h2: Var, chm: Var) -> Result<Var, ModelError> {
    let cat = g.concat_cols(&[h0, h1, h2, chm])?;
    let logits = g.linear_named(cat, "head.out_fused.w", "head.out_fused.b")?;
    Ok(g.softmax(logits)?)
}

/// Where a drug's chemical vector comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ChemRef {
    /// Frozen VAE posterior mean.
    Fixed(Vec<f64>),
    /// Imported word vector, passed through the trainable projection.
    Imported(Vec<f64>),
    /// Trainable per-name fallback parameter.
    Fallback(String),
}

/// Chemical vector lookup: VAE embedding by drug id, then imported word
/// vector by surface form, then the fallback table.
#[derive(Debug, Clone, Default)]
pub struct ChemTable {
    dim: usize,
    vae: BTreeMap<String, Vec<f64>>,
    imported: Option<WordVectors>,
    seed: u64,
}

impl ChemTable {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds VAE embeddings; vectors of the wrong length are an error.
    pub fn with_embeddings(mut self, embeddings: &[ChemEmbedding]) -> Result<Self, ModelError> {
        for e in embeddings {
            if e.vector.len() != self.dim {
                return Err(ModelError::Config(format!(
                    "embedding for {} has {} values, expected {}",
                    e.drug_id,
                    e.vector.len(),
                    self.dim
                )));
            }
            self.vae.insert(e.drug_id.clone(), e.vector.clone());
        }
        Ok(self)
    }

    pub fn with_word_vectors(mut self, wv: WordVectors) -> Self {
        self.imported = Some(wv);
        self
    }

    pub fn n_embeddings(&self) -> usize {
        self.vae.len()
    }

    pub fn resolve(&self, mention: &EntityMention) -> ChemRef {
        if let Some(v) = mention.drug_id.as_ref().and_then(|id| self.vae.get(id)) {
            return ChemRef::Fixed(v.clone());
        }
        if let Some(v) = self.imported.as_ref().and_then(|wv| wv.get(&mention.text)) {
            return ChemRef::Imported(v.to_vec());
        }
        ChemRef::Fallback(fallback_param_name(&drug_key(&mention.text)))
    }

    /// Adds fallback vectors and the import projection needed by `instances`.
    pub fn register(&self, store: &mut ParamStore, instances: &[PairInstance]) -> Result<usize, ModelError> {
        let before = store.len();
        for inst in instances {
            for m in [&inst.e1, &inst.e2] {
                match self.resolve(m) {
                    ChemRef::Fallback(name) => {
                        if !store.contains(&name) {
                            store.insert_normal(&name, &[self.dim], INIT_STD, self.seed);
                        }
                    }
                    ChemRef::Imported(v) => {
                        if !store.contains(IMPORT_PROJECTION) {
                            store.insert_normal(IMPORT_PROJECTION, &[self.dim, v.len()], INIT_STD, self.seed);
                        }
                    }
                    ChemRef::Fixed(_) => {}
                }
            }
        }
        Ok(store.len() - before)
    }

    /// The chemical vector of `r` as a `[1, dim]` node. Fallback names absent
    /// from the store get the vector they would have been initialised with.
    pub fn node(&self, g: &mut Graph, r: &ChemRef) -> Result<Var, ModelError> {
        match r {
            ChemRef::Fixed(v) => Ok(g.constant(Tensor::row(v))?),
            ChemRef::Imported(v) => {
                let x = g.constant(Tensor::row(v))?;
                let p = g.param(IMPORT_PROJECTION)?;
                Ok(g.linear(x, p, None)?)
            }
            ChemRef::Fallback(name) => {
                if g.store().contains(name) {
                    let p = g.param(name)?;
                    Ok(g.reshape(p, &[1, self.dim])?)
                } else {
                    let mut tmp = ParamStore::new();
                    tmp.insert_normal(name, &[self.dim], INIT_STD, self.seed);
                    let t = tmp.get(name)?.clone().reshaped(&[1, self.dim])?;
                    Ok(g.constant(t)?)
                }
            }
        }
    }
}

/// Full forward pass to `[1, N]` probabilities. `dropout_seed = Some(s)`
/// enables dropout: the encoder and text features draw from a generator
/// seeded with `s`, the chemical feature from a separate generator.
pub fn forward_graph(
    g: &mut Graph,
    inst: &TokenizedInstance,
    chem: Option<(&ChemTable, &ChemRef, &ChemRef)>,
    cfg: &EncoderConfig,
    mode: Mode,
    dropout_seed: Option<u64>,
) -> Result<Var, ModelError> {
    let mut rng = dropout_seed.map(DetRng::seed_from_u64);
    let h = encode_text(g, &inst.token_ids, cfg, rng.as_mut())?;
    let h0 = cls_transform(g, h)?;
    let h1 = pool_entity(g, h, inst.e1_range)?;
    let h2 = pool_entity(g, h, inst.e2_range)?;
    let drop = |g: &mut Graph, v: Var, r: Option<&mut DetRng>| -> Result<Var, ModelError> {
        match r {
            Some(r) => Ok(g.dropout(v, cfg.dropout, r)?),
            None => Ok(v),
        }
    };
    match mode {
        Mode::TextOnly => {
            let cat = g.concat_cols(&[h0, h1, h2])?;
            let cat = drop(g, cat, rng.as_mut())?;
            let logits = g.linear_named(cat, "head.out.w", "head.out.b")?;
            Ok(g.softmax(logits)?)
        }
        Mode::Fused => {
            let (table, r1, r2) = chem.ok_or_else(|| ModelError::Config("fused mode needs chemical vectors".into()))?;
            let text = g.concat_cols(&[h0, h1, h2])?;
            let text = drop(g, text, rng.as_mut())?;
            let c1 = table.node(g, r1)?;
            let c2 = table.node(g, r2)?;
            let chm = fuse_chem(g, c1, c2, cfg.chem_dim)?;
            let mut chem_rng = dropout_seed.map(|s| DetRng::seed_from_u64(s ^ CHEM_STREAM));
            let chm = drop(g, chm, chem_rng.as_mut())?;
            let cat = g.concat_cols(&[text, chm])?;
            let logits = g.linear_named(cat, "head.out_fused.w", "head.out_fused.b")?;
            Ok(g.softmax(logits)?)
        }
    }
}

/// Inference probabilities for one tokenized instance.
pub fn predict_probs(
    store: &ParamStore,
    inst: &TokenizedInstance,
    chem: Option<(&ChemTable, &ChemRef, &ChemRef)>,
    cfg: &EncoderConfig,
    mode: Mode,
) -> Result<[f64; N_CLASSES], ModelError> {
    let mut g = Graph::new(store);
    let p = forward_graph(&mut g, inst, chem, cfg, mode, None)?;
    let mut out = [0.0; N_CLASSES];
    out.copy_from_slice(g.value(p).data());
    Ok(out)
}

/// One prediction line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence_id: String,
    pub e1_id: String,
    pub e2_id: String,
    pub label: RelationLabel,
    pub probs: [f64; N_CLASSES],
}

impl Prediction {
    pub fn new(inst: &PairInstance, probs: [f64; N_CLASSES]) -> Self {
        Self {
            sentence_id: inst.sentence_id.clone(),
            e1_id: inst.e1.id.clone(),
            e2_id: inst.e2.id.clone(),
            label: RelationLabel::from_index(crate::nn::argmax(&probs)).expect("class index in range"),
            probs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand_distr::{Distribution, StandardNormal};

    fn mention(id: &str, text: &str, start: usize, drug_id: Option<&str>) -> EntityMention {
        EntityMention {
            id: id.into(),
            text: text.into(),
            char_start: start,
            char_end: start + text.chars().count(),
            entity_type: "drug".into(),
            raw_offsets: String::new(),
            drug_id: drug_id.map(String::from),
        }
    }

    fn sample_sentence() -> PairInstance {
        let text = "Glepafloxacin is a competitive inhibitor of the metabolism of theophylline.";
        PairInstance {
            sentence_id: "s0".into(),
            pair_id: "s0.p0".into(),
            sentence_text: text.into(),
            e1: mention("s0.e0", "Glepafloxacin", 0, None),
            e2: mention("s0.e1", "theophylline", 62, Some("DB00277")),
            label: RelationLabel::Mechanism,
        }
    }

    fn perturb(store: &mut ParamStore, scale: f64) {
        let mut rng = DetRng::seed_from_u64(17);
        for (_, p) in store.iter_mut() {
            for v in p.value.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += scale * n;
            }
        }
    }

    fn ranges_of(tok: &WordPieceTokenizer, inst: &PairInstance) -> ((usize, usize), (usize, usize)) {
        let t = tokenize(inst, tok, 300).unwrap();
        (t.e1_range, t.e2_range)
    }

    #[test]
    fn whole_word_mentions_take_one_token() {
        let inst = sample_sentence();
        let words: Vec<&str> = inst.sentence_text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let mut pieces = lower.clone();
        pieces.push(".".into());
        let tok = WordPieceTokenizer::from_pieces(&pieces).unwrap();
        let (e1, e2) = ranges_of(&tok, &sample_sentence());
        assert_eq!(e1, (1, 1));
        assert_eq!(e2, (10, 10));
    }

    #[test]
    fn split_mentions_cover_every_subword() {
        let tok = WordPieceTokenizer::from_pieces(&[
            "glep", "##aflox", "##acin", "is", "a", "competitive", "inhibitor", "of", "the", "metabolism",
            "theophylline", ".",
        ])
        .unwrap();
        let t = tokenize(&sample_sentence(), &tok, 300).unwrap();
        assert_eq!(t.e1_range, (1, 3));
        assert_eq!(t.token_ids[0], CLS_ID);
        assert_eq!(*t.token_ids.last().unwrap(), SEP_ID);
        for k in t.e1_range.0..=t.e1_range.1 {
            let (s, e) = t.token_char_spans[k];
            assert!(s < 13 && 0 < e);
        }
    }

    #[test]
    fn long_sentences_keep_both_entities() {
        let mut text = "x ".repeat(400);
        let s1 = text.chars().count();
        text.push_str("aspirin and warfarin");
        let inst = PairInstance {
            sentence_id: "s".into(),
            pair_id: "p".into(),
            sentence_text: text,
            e1: mention("e1", "aspirin", s1, None),
            e2: mention("e2", "warfarin", s1 + 12, None),
            label: RelationLabel::Effect,
        };
        let tok = WordPieceTokenizer::from_pieces(&["x", "aspirin", "and", "warfarin"]).unwrap();
        let t = tokenize(&inst, &tok, 300).unwrap();
        assert!(t.truncated);
        assert_eq!(t.token_ids.len(), 300);
        assert_eq!(t.e2_range, (298, 298));
        assert_eq!(t.e1_range, (296, 296));
        assert_eq!(tok.piece(t.token_ids[296]), Some("aspirin"));

        let mut far = inst.clone();
        far.e1 = mention("e1", "x", 0, None);
        assert!(matches!(tokenize(&far, &tok, 300), Err(ModelError::Truncation { .. })));
    }

    #[test]
    fn overlapping_or_missing_mentions_fail() {
        let tok = WordPieceTokenizer::from_pieces(&["ab"]).unwrap();
        let mut inst = sample_sentence();
        inst.sentence_text = "ab".into();
        inst.e1 = mention("a", "a", 0, None);
        inst.e2 = mention("b", "b", 1, None);
        assert!(matches!(tokenize(&inst, &tok, 300), Err(ModelError::Tokenize { .. })));
        inst.e2 = mention("b", "zz", 5, None);
        assert!(matches!(tokenize(&inst, &tok, 300), Err(ModelError::Tokenize { .. })));
    }

    fn setup(mode: Mode, d: usize) -> (ParamStore, EncoderConfig) {
        let mut cfg = EncoderConfig::tiny(20);
        cfg.d_model = d;
        cfg.chem_dim = 4;
        cfg.fusion_dim = 3;
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg, mode, 3).unwrap();
        (store, cfg)
    }

    fn tiny_instance() -> TokenizedInstance {
        TokenizedInstance {
            token_ids: vec![CLS_ID, 5, 6, 7, 8, SEP_ID],
            token_char_spans: vec![(0, 0); 6],
            e1_range: (1, 2),
            e2_range: (4, 4),
            label: RelationLabel::Advice,
            truncated: false,
        }
    }

    #[test]
    fn head_closed_forms() {
        let (mut store, _) = setup(Mode::TextOnly, 4);
        store.set("head.ent.w", Tensor::identity(4)).unwrap();
        store.set("head.cls.w", Tensor::identity(4)).unwrap();
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::matrix(3, 4, vec![0.0, 0.0, 0.0, 0.0, 0.5, -1.0, 2.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let zero = pool_entity(&mut g, h, (0, 0)).unwrap();
        assert!(g.value(zero).data().iter().all(|v| *v == 0.0));
        let cls = cls_transform(&mut g, h).unwrap();
        assert_eq!(g.value(cls).data(), &[0.0; 4]);
        let single = pool_entity(&mut g, h, (1, 1)).unwrap();
        let want: Vec<f64> = [0.5f64, -1.0, 2.0, 0.0].iter().map(|v| v.tanh()).collect();
        assert_eq!(g.value(single).data(), &want[..]);
        let a = pool_entity(&mut g, h, (1, 2)).unwrap();
        let b = pool_entity(&mut g, h, (1, 2)).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(pool_entity(&mut g, h, (2, 1)).is_err());
        assert!(pool_entity(&mut g, h, (2, 3)).is_err());

        let mut store2 = store.clone();
        store2.set("head.out.w", Tensor::zeros(&[5, 12])).unwrap();
        let mut g = Graph::new(&store2);
        let h = g.constant(Tensor::row(&[0.3, 0.1, -0.2, 0.9])).unwrap();
        let p = classify_text(&mut g, h, h, h).unwrap();
        assert!(g.value(p).data().iter().all(|v| *v == 0.2));
    }

    #[test]
    fn tied_entity_projection_is_one_entry() {
        let (mut store, cfg) = setup(Mode::TextOnly, 8);
        assert!(!store.contains("head.ent1.w"));
        let inst = tiny_instance();
        let run = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let h = encode_text(&mut g, &inst.token_ids, &cfg, None).unwrap();
            let a = pool_entity(&mut g, h, inst.e1_range).unwrap();
            let b = pool_entity(&mut g, h, inst.e2_range).unwrap();
            (g.value(a).clone(), g.value(b).clone())
        };
        let (a0, b0) = run(&store);
        store.get_mut("head.ent.b").unwrap().data_mut()[0] += 1.0;
        let (a1, b1) = run(&store);
        assert_eq!(a1.data()[0] - a0.data()[0], 1.0);
        assert_eq!(b1.data()[0] - b0.data()[0], 1.0);
    }

    #[test]
    fn shapes_match_the_configuration() {
        let mut cfg = EncoderConfig::new(50);
        cfg.d_model = 768;
        cfg.n_heads = 12;
        cfg.n_layers = 0;
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg, Mode::TextOnly, 1).unwrap();
        assert_eq!(store.get("head.out.w").unwrap().shape(), [5, 2304]);
        let cfg = EncoderConfig {
            d_model: 128,
            n_layers: 0,
            ..EncoderConfig::new(50)
        };
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg, Mode::Fused, 1).unwrap();
        assert_eq!(store.get("head.out_fused.w").unwrap().shape(), [5, 512]);
        assert_eq!(store.get("head.chem.w").unwrap().shape(), [128, 584]);
        assert!(init_model(&mut ParamStore::new(), &EncoderConfig { n_heads: 3, ..cfg }, Mode::Fused, 1).is_err());
    }

    #[test]
    fn fuse_chem_rules() {
        let (mut store, _) = setup(Mode::Fused, 4);
        let mut g = Graph::new(&store);
        let c1 = g.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let c2 = g.constant(Tensor::row(&[-1.0, 0.5, 0.0, 2.0])).unwrap();
        let ab = fuse_chem(&mut g, c1, c2, 4).unwrap();
        let ba = fuse_chem(&mut g, c2, c1, 4).unwrap();
        assert_ne!(g.value(ab), g.value(ba));
        let bad = g.constant(Tensor::row(&[1.0; 5])).unwrap();
        assert!(fuse_chem(&mut g, bad, c2, 4).is_err());
        store.set("head.chem.w", Tensor::zeros(&[3, 8])).unwrap();
        let mut g = Graph::new(&store);
        let c1 = g.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let z = fuse_chem(&mut g, c1, c1, 4).unwrap();
        assert_eq!(g.value(z).data(), &[0.0; 3]);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for mode in [Mode::TextOnly, Mode::Fused] {
            let (mut store, _) = setup(mode, 4);
            perturb(&mut store, 0.5);
            let keep: Vec<String> = store
                .names()
                .filter(|n| n.starts_with("head."))
                .cloned()
                .collect();
            let mut head = ParamStore::new();
            for n in keep {
                head.insert(n.clone(), store.get(&n).unwrap().clone());
            }
            let h = Tensor::matrix(5, 4, (0..20).map(|i| ((i * 7) as f64 * 0.37).sin()).collect()).unwrap();
            let report = grad_check(&mut head, 1e-5, |g| {
                let hv = g.constant(h.clone())?;
                let h0 = cls_transform(g, hv)?;
                let h1 = pool_entity(g, hv, (1, 2))?;
                let h2 = pool_entity(g, hv, (3, 4))?;
                let p = match mode {
                    Mode::TextOnly => classify_text(g, h0, h1, h2)?,
                    Mode::Fused => {
                        let c1 = g.constant(Tensor::row(&[0.3, -0.2, 0.8, 0.1]))?;
                        let c2 = g.constant(Tensor::row(&[-0.5, 0.4, 0.0, 0.9]))?;
                        let chm = fuse_chem(g, c1, c2, 4)?;
                        classify_fused(g, h0, h1, h2, chm)?
                    }
                };
                g.cross_entropy(p, &[2])
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{mode}: {report:?}");
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut cfg = EncoderConfig::tiny(12);
        cfg.d_model = 8;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.max_seq_len = 6;
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg, Mode::TextOnly, 5).unwrap();
        perturb(&mut store, 0.3);
        let ids = [CLS_ID, 4, 9, 11, 5, SEP_ID];
        let report = grad_check(&mut store, 1e-5, |g| {
            let h = encode_text(g, &ids, &cfg, None)?;
            let p = g.softmax(h)?;
            g.cross_entropy(p, &[0, 1, 2, 3, 4, 5])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let (mut store, cfg) = setup(Mode::Fused, 8);
        let table = ChemTable::new(4, 1);
        let mut inst = sample_sentence();
        inst.e1.drug_id = None;
        table.register(&mut store, &[inst.clone()]).unwrap();
        perturb(&mut store, 0.3);
        let t = tiny_instance();
        let r1 = table.resolve(&inst.e1);
        let r2 = ChemRef::Fixed(vec![0.5, -0.5, 0.25, 1.0]);
        let report = grad_check(&mut store, 1e-5, |g| {
            let p = forward_graph(g, &t, Some((&table, &r1, &r2)), &cfg, Mode::Fused, None)?;
            g.cross_entropy(p, &[1])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_chem_matches_text_only() {
        let (text_store, cfg) = setup(Mode::TextOnly, 8);
        let (mut fused_store, _) = setup(Mode::Fused, 8);
        let d3 = 3 * cfg.d_model;
        let w = text_store.get("head.out.w").unwrap();
        let mut wf = Tensor::zeros(&[5, d3 + cfg.fusion_dim]);
        for r in 0..5 {
            wf.data_mut()[r * (d3 + 3)..r * (d3 + 3) + d3].copy_from_slice(w.row_slice(r));
        }
        fused_store.set("head.out_fused.w", wf).unwrap();
        fused_store.set("head.out_fused.b", text_store.get("head.out.b").unwrap().clone()).unwrap();
        fused_store.set("head.chem.w", Tensor::zeros(&[3, 8])).unwrap();
        let table = ChemTable::new(4, 1);
        let r = ChemRef::Fixed(vec![1.0, 2.0, 3.0, 4.0]);
        let inst = tiny_instance();
        for seed in [None, Some(4)] {
            let mut g = Graph::new(&text_store);
            let a = forward_graph(&mut g, &inst, None, &cfg, Mode::TextOnly, seed).unwrap();
            let a = g.value(a).clone();
            let mut g = Graph::new(&fused_store);
            let b = forward_graph(&mut g, &inst, Some((&table, &r, &r)), &cfg, Mode::Fused, seed).unwrap();
            assert_eq!(&a, g.value(b));
        }
    }

    #[test]
    fn sample_sentence_runs_end_to_end() {
        let inst = sample_sentence();
        let tok = WordPieceTokenizer::train(&[inst.sentence_text.as_str()], 120).unwrap();
        let mut cfg = EncoderConfig::tiny(tok.vocab_size());
        cfg.chem_dim = 6;
        let mut store = ParamStore::new();
        init_model(&mut store, &cfg, Mode::Fused, 2).unwrap();
        let emb = ChemEmbedding {
            drug_id: "DB00277".into(),
            vector: vec![0.1; 6],
            source: crate::chemvae::EmbeddingSource::Vae,
        };
        let table = ChemTable::new(6, 2).with_embeddings(&[emb]).unwrap();
        assert_eq!(table.register(&mut store, std::slice::from_ref(&inst)).unwrap(), 1);
        assert!(matches!(table.resolve(&inst.e2), ChemRef::Fixed(_)));
        let t = tokenize(&inst, &tok, cfg.max_seq_len).unwrap();
        let (r1, r2) = (table.resolve(&inst.e1), table.resolve(&inst.e2));
        let p = predict_probs(&store, &t, Some((&table, &r1, &r2)), &cfg, Mode::Fused).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p, predict_probs(&store, &t, Some((&table, &r1, &r2)), &cfg, Mode::Fused).unwrap());
        let pred = Prediction::new(&inst, p);
        assert_eq!(pred.label.index(), crate::nn::argmax(&p));
        assert!(predict_probs(&store, &t, None, &cfg, Mode::Fused).is_err());
    }

    #[test]
    fn unseen_fallback_names_are_deterministic() {
        let store = ParamStore::new();
        let table = ChemTable::new(4, 9);
        let r = ChemRef::Fallback(fallback_param_name("novel drug"));
        let mut g = Graph::new(&store);
        let a = table.node(&mut g, &r).unwrap();
        let b = table.node(&mut g, &r).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let mut s2 = ParamStore::new();
        crate::chemvae::embed_fallback(&mut s2, "Novel Drug", None, 4, 9).unwrap();
        assert_eq!(g.value(a).data(), s2.get("fallback.novel drug").unwrap().data());
    }
}
