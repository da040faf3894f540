//! Supervised training of the relation classifier.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PairInstance, RelationLabel};
use crate::ddimodel::{
    forward_graph, init_model, predict_probs, tokenize, ChemRef, ChemTable, EncoderConfig, Mode, ModelError,
    TokenizedInstance, N_CLASSES,
};
use crate::eval::{evaluate, EvalError};
use crate::nn::{adam_step, argmax, fnv1a, AdamConfig, DetRng, Gradients, Graph, NnError, ParamStore};
use crate::tokenizer::WordPieceTokenizer;

const SPLIT_STREAM: u64 = 0x5b11_7000;
const SHUFFLE_STREAM: u64 = 0x5u64 << 40;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub fusion_dim: usize,
    /// Share of the training instances held out for model selection.
    pub dev_fraction: f64,
    pub clip_norm: f64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 300,
            batch_size: 16,
            lr: 2e-5,
            dropout: 0.1,
            epochs: 5,
            seed: 0,
            mode: Mode::TextOnly,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            fusion_dim: 128,
            dev_fraction: 0.1,
            clip_norm: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(TrainError::Config("dev_fraction must lie in [0, 1)".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder(&self, vocab_size: usize, chem_dim: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            fusion_dim: self.fusion_dim,
            chem_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub dev_macro_f1: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev macro F1 (the last epoch
    /// when there is no dev split).
    pub store: ParamStore,
    pub encoder: EncoderConfig,
    pub epochs: Vec<EpochLog>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    /// Pair ids that could not be tokenized.
    pub skipped: Vec<String>,
    pub train_indices: Vec<usize>,
    pub dev_indices: Vec<usize>,
}

/// A tokenized instance together with its chemical lookups.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub index: usize,
    pub tokens: TokenizedInstance,
    pub chem: Option<(ChemRef, ChemRef)>,
}

/// Tokenizes `instances`, dropping (and reporting) those that fail.
pub fn prepare(
    instances: &[PairInstance],
    tokenizer: &WordPieceTokenizer,
    chem: Option<&ChemTable>,
    max_seq_len: usize,
) -> (Vec<Prepared>, Vec<String>) {
    let mut ok = Vec::with_capacity(instances.len());
    let mut skipped = Vec::new();
    for (index, inst) in instances.iter().enumerate() {
        match tokenize(inst, tokenizer, max_seq_len) {
            Ok(tokens) => ok.push(Prepared {
                index,
                tokens,
                chem: chem.map(|t| (t.resolve(&inst.e1), t.resolve(&inst.e2))),
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", inst.pair_id);
                skipped.push(inst.pair_id.clone());
            }
        }
    }
    (ok, skipped)
}

/// Seed for the dropout masks of instance `slot` within optimizer step `step`.
pub fn dropout_seed(seed: u64, step: usize, slot: usize) -> u64 {
    let mut bytes = Vec::with_capacity(24);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&(step as u64).to_le_bytes());
    bytes.extend_from_slice(&(slot as u64).to_le_bytes());
    fnv1a(&bytes)
}

/// Seeded split into `(train, dev)` positions.
pub fn split_dev(n: usize, dev_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let n_dev = ((n as f64) * dev_fraction).round() as usize;
    if n_dev == 0 || n_dev >= n {
        return (order, Vec::new());
    }
    order.shuffle(&mut DetRng::seed_from_u64(seed ^ SPLIT_STREAM));
    let dev = order.split_off(n - n_dev);
    let (mut train, mut dev) = (order, dev);
    train.sort_unstable();
    dev.sort_unstable();
    (train, dev)
}

fn chem_arg<'a>(table: Option<&'a ChemTable>, p: &'a Prepared) -> Option<(&'a ChemTable, &'a ChemRef, &'a ChemRef)> {
    match (table, &p.chem) {
        (Some(t), Some((a, b))) => Some((t, a, b)),
        _ => None,
    }
}

/// Probabilities for every prepared instance, computed in parallel.
pub fn predict_prepared(
    store: &ParamStore,
    items: &[Prepared],
    table: Option<&ChemTable>,
    encoder: &EncoderConfig,
    mode: Mode,
) -> Result<Vec<[f64; N_CLASSES]>, ModelError> {
    items
        .par_iter()
        .map(|p| predict_probs(store, &p.tokens, chem_arg(table, p), encoder, mode))
        .collect()
}

fn macro_f1(
    store: &ParamStore,
    items: &[&Prepared],
    table: Option<&ChemTable>,
    encoder: &EncoderConfig,
    mode: Mode,
) -> Result<f64, TrainError> {
    let owned: Vec<Prepared> = items.iter().map(|p| (*p).clone()).collect();
    let probs = predict_prepared(store, &owned, table, encoder, mode)?;
    let gold: Vec<RelationLabel> = owned.iter().map(|p| p.tokens.label).collect();
    let pred: Vec<RelationLabel> = probs
        .iter()
        .map(|p| RelationLabel::from_index(argmax(p)).expect("class index in range"))
        .collect();
    Ok(evaluate(&gold, &pred)?.macro_f1_positive)
}

/// Initialises a fresh model and trains it.
pub fn train_ddi(
    instances: &[PairInstance],
    tokenizer: &WordPieceTokenizer,
    chem: Option<&ChemTable>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let chem_dim = chem.map(ChemTable::dim).unwrap_or(crate::chemvae::ChemVaeConfig::default().latent_dim);
    let encoder = cfg.encoder(tokenizer.vocab_size(), chem_dim);
    let mut store = ParamStore::new();
    init_model(&mut store, &encoder, cfg.mode, cfg.seed)?;
    train_ddi_from(store, instances, tokenizer, chem, cfg)
}

/// Trains starting from `store`, which must hold every model parameter for
/// `cfg.mode`. Fallback chemical vectors are added as needed.
pub fn train_ddi_from(
    mut store: ParamStore,
    instances: &[PairInstance],
    tokenizer: &WordPieceTokenizer,
    chem: Option<&ChemTable>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(TrainError::Config("no trainable parameters".into()));
    }
    if cfg.mode == Mode::Fused && chem.is_none() {
        return Err(TrainError::Config("fused mode needs chemical embeddings".into()));
    }
    let table = if cfg.mode == Mode::Fused { chem } else { None };
    let chem_dim = table.map(ChemTable::dim).unwrap_or(crate::chemvae::ChemVaeConfig::default().latent_dim);
    let encoder = cfg.encoder(tokenizer.vocab_size(), chem_dim);
    encoder.validate()?;
    if let Some(t) = table {
        t.register(&mut store, instances)?;
    }
    let (items, skipped) = prepare(instances, tokenizer, table, cfg.max_seq_len);
    if items.is_empty() {
        return Err(TrainError::Config("no tokenizable training instances".into()));
    }
    let (train_pos, dev_pos) = split_dev(items.len(), cfg.dev_fraction, cfg.seed);
    let train_items: Vec<&Prepared> = train_pos.iter().map(|&i| &items[i]).collect();
    let dev_items: Vec<&Prepared> = dev_pos.iter().map(|&i| &items[i]).collect();
    log::info!(
        "training {} on {} instances ({} dev, {} skipped)",
        cfg.mode,
        train_items.len(),
        dev_items.len(),
        skipped.len()
    );

    let adam = AdamConfig::new(cfg.lr);
    let mut shuffle_rng = DetRng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    'outer: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let first_step = step_losses.len();
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step_losses.len() >= m) {
                break;
            }
            let step = step_losses.len();
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<(f64, Gradients), NnError>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let p = train_items[i];
                    let mut g = Graph::new(&store);
                    let probs = forward_graph(
                        &mut g,
                        &p.tokens,
                        chem_arg(table, p),
                        &encoder,
                        cfg.mode,
                        Some(dropout_seed(cfg.seed, step, slot)),
                    )?;
                    let ce = g.cross_entropy(probs, &[p.tokens.label.index()])?;
                    let loss = g.affine(ce, scale, 0.0)?;
                    Ok((g.value(loss).item(), g.backward(loss)?))
                })
                .collect();
            let mut grads = Gradients::default();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, gr) = r.map_err(|e| TrainError::Divergence {
                    step,
                    detail: e.to_string(),
                })?;
                batch_loss += l;
                grads.merge(gr);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence {
                    step,
                    detail: format!("loss {batch_loss}"),
                });
            }
            store.accumulate(&grads).map_err(|e| TrainError::Divergence {
                step,
                detail: e.to_string(),
            })?;
            let norm = store.clip_grad_norm(cfg.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::Divergence {
                    step,
                    detail: format!("gradient norm {norm}"),
                });
            }
            adam_step(&mut store, &adam);
            log::debug!("step {step} loss {batch_loss:.6}");
            step_losses.push(batch_loss);
            loss_sum += batch_loss;
        }
        let steps = step_losses.len() - first_step;
        if steps == 0 {
            break 'outer;
        }
        let dev_macro_f1 = if dev_items.is_empty() {
            None
        } else {
            Some(macro_f1(&store, &dev_items, table, &encoder, cfg.mode)?)
        };
        let log_line = EpochLog {
            epoch,
            steps,
            train_loss: loss_sum / steps as f64,
            dev_macro_f1,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} train_loss {:.6} dev_macro_f1 {} wall_seconds {:.2}",
            epoch,
            log_line.train_loss,
            dev_macro_f1.map_or("n/a".to_string(), |f| format!("{f:.4}")),
            log_line.wall_seconds
        );
        epochs.push(log_line);
        let score = dev_macro_f1.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
            best = Some((score, epoch, store.clone()));
        }
    }
    let (_, best_epoch, best_store) = best.ok_or_else(|| TrainError::Config("no optimizer steps were taken".into()))?;
    Ok(TrainOutcome {
        store: best_store,
        encoder,
        epochs,
        step_losses,
        best_epoch,
        skipped,
        train_indices: train_pos.iter().map(|&i| items[i].index).collect(),
        dev_indices: dev_pos.iter().map(|&i| items[i].index).collect(),
    })
}
