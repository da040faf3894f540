//! Character-level SMILES variational autoencoder.
//!
//! The encoder runs three valid conv1d layers with tanh over the one-hot
//! matrix, flattens, applies a tanh hidden layer and a final linear layer
//! whose output is split into `(μ, log σ²)`. The decoder projects `z` to the
//! initial state of every GRU layer, feeds `z` at every step and maps the top
//! state to per-position symbol logits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::drug_key;
use crate::lexicon::LexiconEntry;
use crate::nn::{
    adam_step, gru_step, softmax_rows, AdamConfig, DetRng, Graph, NnError, ParamStore,
    Tensor, Var,
};
use crate::smiles::{encode_one_hot, SmilesError, SmilesOneHot, SmilesVocab};

pub const LOGVAR_CLAMP: f64 = 10.0;
/// Parameter-name prefix of per-drug fallback vectors.
pub const FALLBACK_PREFIX: &str = "fallback.";
/// Trainable projection from imported word vectors to the latent size.
pub const IMPORT_PROJECTION: &str = "import.proj";

#[derive(Debug, Error)]
pub enum ChemVaeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("embedding file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChemVaeConfig {
    pub max_len: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub conv_widths: [usize; 3],
    pub conv_channels: [usize; 3],
    pub gru_layers: usize,
    /// Fraction of training over which the KL weight rises linearly from 0 to 1.
    pub kl_warmup_fraction: f64,
}

impl Default for ChemVaeConfig {
    fn default() -> Self {
        Self {
            max_len: 120,
            latent_dim: 292,
            encoder_hidden: 200,
            decoder_hidden: 500,
            conv_widths: [9, 9, 10],
            conv_channels: [9, 9, 11],
            gru_layers: 3,
            kl_warmup_fraction: 0.5,
        }
    }
}

impl ChemVaeConfig {
    /// Small sizes for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            max_len: 24,
            latent_dim: 16,
            encoder_hidden: 48,
            decoder_hidden: 128,
            conv_widths: [3, 3, 4],
            conv_channels: [6, 6, 8],
            gru_layers: 3,
            kl_warmup_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), ChemVaeError> {
        if self.latent_dim == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 || self.gru_layers == 0 {
            return Err(ChemVaeError::Config("dimensions must be positive".into()));
        }
        if self.conv_widths.iter().chain(&self.conv_channels).any(|&v| v == 0) {
            return Err(ChemVaeError::Config("conv widths and channels must be positive".into()));
        }
        if self.conv_out_len() == 0 {
            return Err(ChemVaeError::Config(format!(
                "max_len {} too short for conv widths {:?}",
                self.max_len, self.conv_widths
            )));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return Err(ChemVaeError::Config("kl_warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Sequence length after the three valid convolutions (0 when too short).
    pub fn conv_out_len(&self) -> usize {
        let shrink: usize = self.conv_widths.iter().map(|w| w - 1).sum();
        self.max_len.saturating_sub(shrink)
    }

    fn flat_dim(&self) -> usize {
        self.conv_out_len() * self.conv_channels[2]
    }
}

/// Creates every VAE parameter. Weight matrices are Gaussian with standard
/// deviation `1 / sqrt(fan_in)`, biases start at zero, and the encoder's
/// output layer starts at zero so that `μ = 0` and `log σ² = 0` before
/// training.
pub fn init_vae(store: &mut ParamStore, cfg: &ChemVaeConfig, vocab_size: usize, seed: u64) -> Result<(), ChemVaeError> {
    cfg.validate()?;
    let normal = |store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize| {
        store.insert_normal(name, shape, 1.0 / (fan_in as f64).sqrt(), seed);
    };
    let mut input = vocab_size;
    for (i, (&w, &c)) in cfg.conv_widths.iter().zip(&cfg.conv_channels).enumerate() {
        normal(store, &format!("vae.enc.conv{i}.k"), &[w, input, c], w * input);
        store.insert_zeros(&format!("vae.enc.conv{i}.b"), &[c]);
        input = c;
    }
    normal(store, "vae.enc.fc.w", &[cfg.encoder_hidden, cfg.flat_dim()], cfg.flat_dim());
    store.insert_zeros("vae.enc.fc.b", &[cfg.encoder_hidden]);
    store.insert_zeros("vae.enc.out.w", &[2 * cfg.latent_dim, cfg.encoder_hidden]);
    store.insert_zeros("vae.enc.out.b", &[2 * cfg.latent_dim]);
    let h = cfg.decoder_hidden;
    for l in 0..cfg.gru_layers {
        normal(store, &format!("vae.dec.init{l}.w"), &[h, cfg.latent_dim], cfg.latent_dim);
        store.insert_zeros(&format!("vae.dec.init{l}.b"), &[h]);
        let inp = if l == 0 { cfg.latent_dim } else { h };
        normal(store, &format!("vae.dec.gru{l}.w_ih"), &[3 * h, inp], inp);
        normal(store, &format!("vae.dec.gru{l}.w_hh"), &[3 * h, h], h);
        store.insert_zeros(&format!("vae.dec.gru{l}.b_ih"), &[3 * h]);
        store.insert_zeros(&format!("vae.dec.gru{l}.b_hh"), &[3 * h]);
    }
    normal(store, "vae.dec.out.w", &[vocab_size, h], h);
    store.insert_zeros("vae.dec.out.b", &[vocab_size]);
    Ok(())
}

fn check_input(g: &Graph, x: &SmilesOneHot, cfg: &ChemVaeConfig) -> Result<(), ChemVaeError> {
    let vocab = g.store().get("vae.enc.conv0.k")?.shape()[1];
    if x.matrix.shape() != [cfg.max_len, vocab] {
        return Err(ChemVaeError::Config(format!(
            "one-hot input {:?} does not match max_len {} and vocabulary {}",
            x.matrix.shape(),
            cfg.max_len,
            vocab
        )));
    }
    Ok(())
}

/// Batched encoder: returns `(μ, log σ²)` as `[batch, latent]` nodes.
pub fn encode_graph(g: &mut Graph, xs: &[&SmilesOneHot], cfg: &ChemVaeConfig) -> Result<(Var, Var), ChemVaeError> {
    if xs.is_empty() {
        return Err(ChemVaeError::Config("empty batch".into()));
    }
    let mut flats = Vec::with_capacity(xs.len());
    for x in xs {
        check_input(g, x, cfg)?;
        let mut h = g.constant(x.matrix.clone())?;
        for i in 0..3 {
            let k = g.param(&format!("vae.enc.conv{i}.k"))?;
            let b = g.param(&format!("vae.enc.conv{i}.b"))?;
            let c = g.conv1d(h, k, Some(b))?;
            h = g.tanh(c)?;
        }
        flats.push(g.reshape(h, &[1, cfg.flat_dim()])?);
    }
    let flat = g.concat_rows(&flats)?;
    let hidden = g.linear_named(flat, "vae.enc.fc.w", "vae.enc.fc.b")?;
    let hidden = g.tanh(hidden)?;
    let out = g.linear_named(hidden, "vae.enc.out.w", "vae.enc.out.b")?;
    let mu = g.slice_cols(out, 0, cfg.latent_dim)?;
    let raw = g.slice_cols(out, cfg.latent_dim, 2 * cfg.latent_dim)?;
    let logvar = g.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok((mu, logvar))
}

/// `(μ, log σ²)` for one input, each of shape `[latent]`.
pub fn encode(x: &SmilesOneHot, store: &ParamStore, cfg: &ChemVaeConfig) -> Result<(Tensor, Tensor), ChemVaeError> {
    let mut g = Graph::new(store);
    let (mu, lv) = encode_graph(&mut g, &[x], cfg)?;
    let mu = g.value(mu).clone().reshaped(&[cfg.latent_dim])?;
    let lv = g.value(lv).clone().reshaped(&[cfg.latent_dim])?;
    Ok((mu, lv))
}

/// `z = μ + exp(log σ² / 2) ⊙ ε` inside a graph, with `ε` supplied.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, logvar: Var, eps: Tensor) -> Result<Var, ChemVaeError> {
    if eps.shape() != g.shape(mu) {
        return Err(ChemVaeError::Config(format!(
            "noise {:?} vs mean {:?}",
            eps.shape(),
            g.shape(mu)
        )));
    }
    let half = g.affine(logvar, 0.5, 0.0)?;
    let sigma = g.exp(half)?;
    let e = g.constant(eps)?;
    let scaled = g.mul(sigma, e)?;
    Ok(g.add(mu, scaled)?)
}

/// Tensor-level sampling; `rng = None` freezes the noise at zero so `z == μ`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: Option<&mut DetRng>) -> Result<Tensor, ChemVaeError> {
    if mu.shape() != logvar.shape() {
        return Err(ChemVaeError::Config(format!(
            "mean {:?} vs log-variance {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    let eps = noise(mu.shape(), rng);
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).exp() * e)
        .collect();
    Ok(Tensor::new(mu.shape().to_vec(), data)?)
}

fn noise(shape: &[usize], rng: Option<&mut DetRng>) -> Tensor {
    match rng {
        Some(rng) => {
            let n = shape.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("sized from shape")
        }
        None => Tensor::zeros(shape),
    }
}

/// Batched decoder: logits for step `t`, sample `b` sit in row `t * batch + b`.
pub fn decode_graph(g: &mut Graph, z: Var, cfg: &ChemVaeConfig) -> Result<Var, ChemVaeError> {
    if g.shape(z).len() != 2 || g.shape(z)[1] != cfg.latent_dim {
        return Err(ChemVaeError::Config(format!(
            "latent {:?} does not match latent_dim {}",
            g.shape(z),
            cfg.latent_dim
        )));
    }
    let mut hs = Vec::with_capacity(cfg.gru_layers);
    for l in 0..cfg.gru_layers {
        hs.push(g.linear_named(z, &format!("vae.dec.init{l}.w"), &format!("vae.dec.init{l}.b"))?);
    }
    let mut steps = Vec::with_capacity(cfg.max_len);
    for _ in 0..cfg.max_len {
        let mut input = z;
        for (l, h) in hs.iter_mut().enumerate() {
            *h = gru_step(g, input, *h, &format!("vae.dec.gru{l}"))?;
            input = *h;
        }
        steps.push(g.linear_named(input, "vae.dec.out.w", "vae.dec.out.b")?);
    }
    Ok(g.concat_rows(&steps)?)
}

/// Logits `[max_len, |X|]` for one latent vector of shape `[latent]`.
pub fn decode(z: &Tensor, store: &ParamStore, cfg: &ChemVaeConfig) -> Result<Tensor, ChemVaeError> {
    if z.len() != cfg.latent_dim {
        return Err(ChemVaeError::Config(format!(
            "latent of length {} for latent_dim {}",
            z.len(),
            cfg.latent_dim
        )));
    }
    let mut g = Graph::new(store);
    let zv = g.constant(z.clone().reshaped(&[1, cfg.latent_dim])?)?;
    let logits = decode_graph(&mut g, zv, cfg)?;
    Ok(g.value(logits).clone())
}

/// `-½ Σ (1 + log σ² - μ² - σ²)` for one sample.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Batch-mean ELBO terms. The reconstruction term sums the cross-entropy over
/// positions before `true_len` plus the first PAD position.
pub fn elbo_graph(
    g: &mut Graph,
    xs: &[&SmilesOneHot],
    logits: Var,
    mu: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<ElboTerms, ChemVaeError> {
    let batch = xs.len();
    let rows = g.shape(logits)[0];
    if batch == 0 || !rows.is_multiple_of(batch) || g.shape(mu) != g.shape(logvar) || g.shape(mu)[0] != batch {
        return Err(ChemVaeError::Config(format!(
            "inconsistent ELBO shapes: {} inputs, logits {:?}, mu {:?}, logvar {:?}",
            batch,
            g.shape(logits),
            g.shape(mu),
            g.shape(logvar)
        )));
    }
    let steps = rows / batch;
    let indices: Vec<Vec<usize>> = xs.iter().map(|x| x.indices()).collect();
    if indices.iter().any(|ix| ix.len() != steps) {
        return Err(ChemVaeError::Config("logit steps do not match input length".into()));
    }
    let mut targets = vec![0; rows];
    let mut weights = vec![0.0; rows];
    for t in 0..steps {
        for (b, x) in xs.iter().enumerate() {
            targets[t * batch + b] = indices[b][t];
            if t <= x.true_len {
                weights[t * batch + b] = 1.0 / batch as f64;
            }
        }
    }
    let probs = g.softmax(logits)?;
    let recon = g.weighted_cross_entropy(probs, &targets, &weights)?;

    let latent = g.shape(mu)[1];
    let ev = g.exp(logvar)?;
    let mu2 = g.mul(mu, mu)?;
    let a = g.sub(logvar, mu2)?;
    let b = g.sub(a, ev)?;
    let s = g.sum(b)?;
    let kl = g.affine(s, -0.5 / batch as f64, -0.5 * latent as f64)?;
    let weighted = g.affine(kl, kl_weight, 0.0)?;
    let total = g.add(recon, weighted)?;
    Ok(ElboTerms { total, recon, kl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling applied before each Adam step.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeStep {
    pub step: usize,
    pub kl_weight: f64,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// KL weight at `step` of `total_steps`.
pub fn kl_weight_at(step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    let warm = warmup_fraction * total_steps as f64;
    if warm <= 0.0 {
        1.0
    } else {
        (step as f64 / warm).min(1.0)
    }
}

/// Trains a fresh VAE on `smiles` with Adam and KL warm-up. The learning
/// rate decays linearly to a tenth of `tc.lr` over the run.
pub fn train_vae<S: AsRef<str>>(
    smiles: &[S],
    vocab: &SmilesVocab,
    cfg: &ChemVaeConfig,
    tc: &VaeTrainConfig,
) -> Result<(ParamStore, Vec<VaeStep>), ChemVaeError> {
    if smiles.len() < 2 {
        return Err(ChemVaeError::Config(format!(
            "need at least 2 SMILES strings, got {}",
            smiles.len()
        )));
    }
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(ChemVaeError::Config("batch_size and epochs must be positive".into()));
    }
    let data: Vec<SmilesOneHot> = smiles
        .iter()
        .map(|s| encode_one_hot(s.as_ref(), vocab, cfg.max_len))
        .collect::<Result<_, _>>()?;
    let mut store = ParamStore::new();
    init_vae(&mut store, cfg, vocab.len(), tc.seed)?;
    let mut adam = AdamConfig::new(tc.lr);
    let batches_per_epoch = data.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = DetRng::seed_from_u64(tc.seed);
    let mut noise_rng = DetRng::seed_from_u64(tc.seed ^ 0x5eed_0a5e);
    let mut trace = Vec::with_capacity(total_steps);
    for _ in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tc.batch_size) {
            let step = trace.len();
            let kl_weight = kl_weight_at(step, total_steps, cfg.kl_warmup_fraction);
            let xs: Vec<&SmilesOneHot> = chunk.iter().map(|&i| &data[i]).collect();
            let eps = noise(&[xs.len(), cfg.latent_dim], Some(&mut noise_rng));
            let (grads, record) = {
                let mut g = Graph::new(&store);
                let (mu, lv) = encode_graph(&mut g, &xs, cfg)?;
                let z = reparameterize_graph(&mut g, mu, lv, eps)?;
                let logits = decode_graph(&mut g, z, cfg)?;
                let terms = elbo_graph(&mut g, &xs, logits, mu, lv, kl_weight)?;
                let record = VaeStep {
                    step,
                    kl_weight,
                    total: g.value(terms.total).item(),
                    recon: g.value(terms.recon).item(),
                    kl: g.value(terms.kl).item(),
                };
                (g.backward(terms.total)?, record)
            };
            store.accumulate(&grads)?;
            if let Some(max) = tc.clip_norm {
                store.clip_grad_norm(max);
            }
            adam.lr = tc.lr * (1.0 - 0.9 * step as f64 / total_steps as f64);
            adam_step(&mut store, &adam);
            log::debug!(
                "vae step {} loss {:.4} recon {:.4} kl {:.4}",
                step,
                record.total,
                record.recon,
                record.kl
            );
            trace.push(record);
        }
    }
    Ok((store, trace))
}

/// Fraction of positions up to and including the first PAD that greedy
/// decoding of `μ` reproduces, pooled over `smiles`.
pub fn reconstruction_accuracy<S: AsRef<str>>(
    smiles: &[S],
    vocab: &SmilesVocab,
    store: &ParamStore,
    cfg: &ChemVaeConfig,
) -> Result<f64, ChemVaeError> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in smiles {
        let x = encode_one_hot(s.as_ref(), vocab, cfg.max_len)?;
        let (mu, _) = encode(&x, store, cfg)?;
        let pred = decode(&mu, store, cfg)?.argmax_rows();
        let gold = x.indices();
        let n = (x.true_len + 1).min(cfg.max_len);
        hit += (0..n).filter(|&t| pred[t] == gold[t]).count();
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Greedy string reconstruction through `μ`.
pub fn reconstruct(smiles: &str, vocab: &SmilesVocab, store: &ParamStore, cfg: &ChemVaeConfig) -> Result<String, ChemVaeError> {
    let x = encode_one_hot(smiles, vocab, cfg.max_len)?;
    let (mu, _) = encode(&x, store, cfg)?;
    let probs = softmax_rows(&decode(&mu, store, cfg)?);
    Ok(crate::smiles::decode_greedy(&probs, vocab)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Vae,
    Fallback,
    Imported,
}

impl fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vae => "vae",
            Self::Fallback => "fallback",
            Self::Imported => "imported",
        })
    }
}

impl FromStr for EmbeddingSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vae" => Ok(Self::Vae),
            "fallback" => Ok(Self::Fallback),
            "imported" => Ok(Self::Imported),
            other => Err(format!("unknown embedding source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChemEmbedding {
    pub drug_id: String,
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Posterior means for every lexicon entry with SMILES, in input order.
/// Entries without SMILES are skipped; entries whose SMILES contain symbols
/// outside `vocab` are returned separately.
pub fn embed_drugs<'e, I>(
    entries: I,
    vocab: &SmilesVocab,
    store: &ParamStore,
    cfg: &ChemVaeConfig,
) -> Result<(Vec<ChemEmbedding>, Vec<String>), ChemVaeError>
where
    I: IntoIterator<Item = &'e LexiconEntry>,
{
    let with_smiles: Vec<(&str, &str)> = entries
        .into_iter()
        .filter_map(|e| e.smiles.as_deref().map(|s| (e.drug_id.as_str(), s)))
        .collect();
    let results: Vec<Result<ChemEmbedding, (String, ChemVaeError)>> = with_smiles
        .par_iter()
        .map(|&(id, s)| {
            let x = encode_one_hot(s, vocab, cfg.max_len).map_err(|e| (id.to_string(), e.into()))?;
            let (mu, _) = encode(&x, store, cfg).map_err(|e| (id.to_string(), e))?;
            Ok(ChemEmbedding {
                drug_id: id.to_string(),
                vector: mu.into_data(),
                source: EmbeddingSource::Vae,
            })
        })
        .collect();
    let mut embeddings = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(e) => embeddings.push(e),
            Err((id, ChemVaeError::Smiles(err))) => {
                log::warn!("drug {id}: {err}; left to the fallback table");
                skipped.push(id);
            }
            Err((_, err)) => return Err(err),
        }
    }
    Ok((embeddings, skipped))
}

/// Parameter name of the fallback vector for a surface form.
pub fn fallback_param_name(surface: &str) -> String {
    format!("{FALLBACK_PREFIX}{}", drug_key(surface))
}

/// Word vectors keyed by case-folded surface form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<(), ChemVaeError> {
        if vector.len() != self.dim || vector.iter().any(|v| !v.is_finite()) {
            return Err(ChemVaeError::Config(format!(
                "word vector for {word:?} must hold {} finite values",
                self.dim
            )));
        }
        self.vectors.insert(drug_key(word), vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(&drug_key(word)).map(Vec::as_slice)
    }

    /// Text format: one `word v1 v2 ...` line per entry; multi-word keys use
    /// `_` in place of spaces. A leading `count dim` header line is skipped.
    pub fn read<R: BufRead>(r: R) -> Result<Self, ChemVaeError> {
        let mut out: Option<Self> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() || (i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok())) {
                continue;
            }
            let values: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| ChemVaeError::Format {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            let wv = out.get_or_insert_with(|| Self::new(values.len()));
            wv.insert(&fields[0].replace('_', " "), values)
                .map_err(|e| ChemVaeError::Format {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(out.unwrap_or_default())
    }
}

/// Creates (or reuses) the trainable fallback vector for `surface`.
///
/// With an imported word vector the vector is `P w` where `P` is the shared
/// trainable [`IMPORT_PROJECTION`]; otherwise it is a per-name parameter drawn
/// from Gaussian(0.02).
pub fn embed_fallback(
    store: &mut ParamStore,
    surface: &str,
    imported: Option<&WordVectors>,
    latent_dim: usize,
    seed: u64,
) -> Result<ChemEmbedding, ChemVaeError> {
    let key = drug_key(surface);
    if let Some(word) = imported.and_then(|wv| wv.get(&key)) {
        ensure_projection(store, latent_dim, word.len(), seed)?;
        let p = store.get(IMPORT_PROJECTION)?;
        let vector = (0..latent_dim)
            .map(|r| p.row_slice(r).iter().zip(word).map(|(a, b)| a * b).sum())
            .collect();
        return Ok(ChemEmbedding {
            drug_id: key,
            vector,
            source: EmbeddingSource::Imported,
        });
    }
    let name = fallback_param_name(&key);
    if !store.contains(&name) {
        store.insert_normal(&name, &[latent_dim], 0.02, seed);
    }
    let t = store.get(&name)?;
    if t.len() != latent_dim {
        return Err(ChemVaeError::Config(format!(
            "{name} has {} values, expected {latent_dim}",
            t.len()
        )));
    }
    Ok(ChemEmbedding {
        drug_id: key,
        vector: t.data().to_vec(),
        source: EmbeddingSource::Fallback,
    })
}

/// Adds the import projection `[latent, word_dim]` when absent.
pub fn ensure_projection(store: &mut ParamStore, latent_dim: usize, word_dim: usize, seed: u64) -> Result<(), ChemVaeError> {
    match store.get(IMPORT_PROJECTION) {
        Ok(p) if p.shape() != [latent_dim, word_dim] => Err(ChemVaeError::Config(format!(
            "{IMPORT_PROJECTION} is {:?}, expected [{latent_dim}, {word_dim}]",
            p.shape()
        ))),
        Ok(_) => Ok(()),
        Err(_) => {
            store.insert_normal(IMPORT_PROJECTION, &[latent_dim, word_dim], 0.02, seed);
            Ok(())
        }
    }
}

/// Tab-separated `drug_id`, source and space-separated values written with
/// 17 significant digits.
pub fn write_embeddings<W: Write>(mut w: W, embeddings: &[ChemEmbedding]) -> Result<(), ChemVaeError> {
    for e in embeddings {
        let values: Vec<String> = e.vector.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}\t{}\t{}", e.drug_id, e.source, values.join(" "))?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(r: R) -> Result<Vec<ChemEmbedding>, ChemVaeError> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ChemVaeError::Format { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let source = fields[1].parse::<EmbeddingSource>().map_err(err)?;
        let vector: Vec<f64> = fields[2]
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(err("vector must be non-empty and finite".into()));
        }
        if *dim.get_or_insert(vector.len()) != vector.len() {
            return Err(err(format!("vector length {} differs from earlier rows", vector.len())));
        }
        out.push(ChemEmbedding {
            drug_id: fields[0].to_string(),
            vector,
            source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    const FIVE: [&str; 5] = ["CCO", "OCC(=O)C", "c1ccccc1", "CC(C)Cl", "N#CC=O"];

    fn micro() -> ChemVaeConfig {
        ChemVaeConfig {
            max_len: 12,
            latent_dim: 4,
            encoder_hidden: 5,
            decoder_hidden: 3,
            conv_widths: [3, 2, 2],
            conv_channels: [2, 2, 3],
            gru_layers: 2,
            kl_warmup_fraction: 0.5,
        }
    }

    fn perturb(store: &mut ParamStore, scale: f64) {
        let mut rng = DetRng::seed_from_u64(9);
        for (_, p) in store.iter_mut() {
            for v in p.value.data_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += scale * n;
            }
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = ChemVaeConfig::default();
        let vocab = SmilesVocab::build(&FIVE).unwrap();
        let mut store = ParamStore::new();
        init_vae(&mut store, &cfg, vocab.len(), 1).unwrap();
        let x = encode_one_hot("CCO", &vocab, cfg.max_len).unwrap();
        let (mu, lv) = encode(&x, &store, &cfg).unwrap();
        assert_eq!(mu.shape(), [292]);
        assert_eq!(lv.shape(), [292]);
        assert!(mu.data().iter().chain(lv.data()).all(|v| *v == 0.0));
        let logits = decode(&mu, &store, &cfg).unwrap();
        assert_eq!(logits.shape(), [120, vocab.len()]);
        for r in 0..120 {
            let s: f64 = softmax_rows(&logits).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_checks() {
        let mut cfg = micro();
        cfg.max_len = 4;
        assert!(cfg.validate().is_err());
        cfg = micro();
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err());
        let vocab = SmilesVocab::build(&FIVE).unwrap();
        let mut store = ParamStore::new();
        init_vae(&mut store, &micro(), vocab.len(), 1).unwrap();
        let x = encode_one_hot("CCO", &vocab, 20).unwrap();
        assert!(matches!(encode(&x, &store, &micro()), Err(ChemVaeError::Config(_))));
        assert!(decode(&Tensor::zeros(&[5]), &store, &micro()).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&[0.0; 292], &[0.0; 292]), 0.0);
        assert!((kl_divergence(&[1.0; 292], &[0.0; 292]) - 146.0).abs() < 1e-9);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mu = g.constant(Tensor::full(&[2, 292], 1.0)).unwrap();
        let lv = g.constant(Tensor::zeros(&[2, 292])).unwrap();
        let vocab = SmilesVocab::build(&["CO"]).unwrap();
        let logits = g.constant(Tensor::zeros(&[2, vocab.len()])).unwrap();
        let x = encode_one_hot("C", &vocab, 1).unwrap();
        let t = elbo_graph(&mut g, &[&x, &x], logits, mu, lv, 1.0).unwrap();
        assert!((g.value(t.kl).item() - 146.0).abs() < 1e-9);
    }

    #[test]
    fn recon_vanishes_with_confident_logits() {
        let vocab = SmilesVocab::build(&["CO"]).unwrap();
        let x = encode_one_hot("CO", &vocab, 4).unwrap();
        let store = ParamStore::new();
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 40.0] {
            let mut g = Graph::new(&store);
            let logits = g.constant(x.matrix.clone()).unwrap();
            let logits = g.affine(logits, gap, 0.0).unwrap();
            let mu = g.constant(Tensor::zeros(&[1, 2])).unwrap();
            let lv = g.constant(Tensor::zeros(&[1, 2])).unwrap();
            let t = elbo_graph(&mut g, &[&x], logits, mu, lv, 1.0).unwrap();
            let r = g.value(t.recon).item();
            assert!(r < prev);
            prev = r;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn reparameterize_rules() {
        let mu = Tensor::from_vec(vec![0.5, -1.0]);
        let lv = Tensor::from_vec(vec![100.0, -100.0]);
        assert_eq!(reparameterize(&mu, &lv, None).unwrap(), mu);
        let mut rng = DetRng::seed_from_u64(3);
        let draws = 10_000;
        let mut sums = [0.0; 2];
        let lv = Tensor::from_vec(vec![0.0, 2.0]);
        for _ in 0..draws {
            let z = reparameterize(&mu, &lv, Some(&mut rng)).unwrap();
            sums[0] += z.data()[0];
            sums[1] += z.data()[1];
        }
        for (d, sigma) in [1.0f64, 1.0f64.exp()].iter().enumerate() {
            let mean = sums[d] / draws as f64;
            assert!((mean - mu.data()[d]).abs() < 3.0 * sigma / (draws as f64).sqrt());
        }
    }

    #[test]
    fn logvar_is_clamped() {
        let mu = Tensor::from_vec(vec![0.0]);
        let mut rng = DetRng::seed_from_u64(1);
        let z = reparameterize(&mu, &Tensor::from_vec(vec![1e6]), Some(&mut rng.clone())).unwrap();
        let n: f64 = StandardNormal.sample(&mut rng);
        assert_eq!(z.data()[0], 5f64.exp() * n);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let cfg = micro();
        let vocab = SmilesVocab::build(&FIVE).unwrap();
        let xs: Vec<SmilesOneHot> = ["CCO", "N#CC=O"]
            .iter()
            .map(|s| encode_one_hot(s, &vocab, cfg.max_len).unwrap())
            .collect();
        let mut store = ParamStore::new();
        init_vae(&mut store, &cfg, vocab.len(), 4).unwrap();
        perturb(&mut store, 0.3);
        let eps = noise(&[2, cfg.latent_dim], Some(&mut DetRng::seed_from_u64(2)));
        let report = grad_check(&mut store, 1e-5, |g| {
            let refs: Vec<&SmilesOneHot> = xs.iter().collect();
            let (mu, lv) = encode_graph(g, &refs, &cfg).map_err(to_nn)?;
            let z = reparameterize_graph(g, mu, lv, eps.clone()).map_err(to_nn)?;
            let logits = decode_graph(g, z, &cfg).map_err(to_nn)?;
            Ok(elbo_graph(g, &refs, logits, mu, lv, 0.7).map_err(to_nn)?.total)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    fn to_nn(e: ChemVaeError) -> NnError {
        match e {
            ChemVaeError::Nn(e) => e,
            other => NnError::Config(other.to_string()),
        }
    }

    #[test]
    fn training_is_deterministic_and_starts_with_zero_kl() {
        let cfg = micro();
        let vocab = SmilesVocab::build(&FIVE).unwrap();
        let tc = VaeTrainConfig {
            epochs: 6,
            batch_size: 2,
            lr: 5e-3,
            clip_norm: Some(1.0),
            seed: 11,
        };
        let (s1, t1) = train_vae(&FIVE, &vocab, &cfg, &tc).unwrap();
        let (s2, t2) = train_vae(&FIVE, &vocab, &cfg, &tc).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1[0].kl, 0.0);
        assert_eq!(t1[0].kl_weight, 0.0);
        assert_eq!(t1.last().unwrap().kl_weight, 1.0);
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        crate::nn::write_checkpoint(&s1, &mut b1).unwrap();
        crate::nn::write_checkpoint(&s2, &mut b2).unwrap();
        assert_eq!(b1, b2);
        assert!(train_vae(&["C"], &vocab, &cfg, &tc).is_err());
    }

    #[test]
    fn fallback_vectors() {
        let mut store = ParamStore::new();
        let a = embed_fallback(&mut store, "Grapefruit  Juice", None, 292, 3).unwrap();
        let b = embed_fallback(&mut store, "grapefruit juice", None, 292, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source, EmbeddingSource::Fallback);
        assert_eq!(a.vector.len(), 292);
        assert!(store.contains("fallback.grapefruit juice"));
        let mut wv = WordVectors::new(200);
        wv.insert("Alcohol", vec![0.1; 200]).unwrap();
        let c = embed_fallback(&mut store, "alcohol", Some(&wv), 292, 3).unwrap();
        assert_eq!(c.source, EmbeddingSource::Imported);
        assert_eq!(c.vector.len(), 292);
        assert_eq!(store.get(IMPORT_PROJECTION).unwrap().shape(), [292, 200]);
    }

    #[test]
    fn word_vector_file() {
        let text = "2 3\nalcohol 1 2 3\ngrapefruit_juice 0.5 0 -1\n";
        let wv = WordVectors::read(text.as_bytes()).unwrap();
        assert_eq!(wv.dim(), 3);
        assert_eq!(wv.get("Grapefruit Juice"), Some(&[0.5, 0.0, -1.0][..]));
        assert!(WordVectors::read("a 1 2\nb 1\n".as_bytes()).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let es = vec![
            ChemEmbedding {
                drug_id: "DB00001".into(),
                vector: vec![0.1, -1.0 / 3.0, 1e-300],
                source: EmbeddingSource::Vae,
            },
            ChemEmbedding {
                drug_id: "juice".into(),
                vector: vec![std::f64::consts::PI, 0.0, -0.0],
                source: EmbeddingSource::Fallback,
            },
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &es).unwrap();
        let back = read_embeddings(&buf[..]).unwrap();
        assert_eq!(back, es);
        assert!(read_embeddings("a\tvae\t1 2\nb\tvae\t1\n".as_bytes()).is_err());
        assert!(read_embeddings("a\tother\t1\n".as_bytes()).is_err());
    }

    #[test]
    fn embed_drugs_uses_the_mean() {
        let cfg = micro();
        let vocab = SmilesVocab::build(&FIVE).unwrap();
        let mut store = ParamStore::new();
        init_vae(&mut store, &cfg, vocab.len(), 5).unwrap();
        perturb(&mut store, 0.2);
        let entries = vec![
            LexiconEntry {
                name: "ethanol".into(),
                drug_id: "D1".into(),
                smiles: Some("CCO".into()),
            },
            LexiconEntry {
                name: "juice".into(),
                drug_id: "D2".into(),
                smiles: None,
            },
            LexiconEntry {
                name: "odd".into(),
                drug_id: "D3".into(),
                smiles: Some("[Na+]".into()),
            },
        ];
        let (e1, skipped) = embed_drugs(&entries, &vocab, &store, &cfg).unwrap();
        let (e2, _) = embed_drugs(&entries, &vocab, &store, &cfg).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 1);
        assert_eq!(e1[0].source, EmbeddingSource::Vae);
        assert_eq!(skipped, vec!["D3".to_string()]);
        let x = encode_one_hot("CCO", &vocab, cfg.max_len).unwrap();
        assert_eq!(e1[0].vector, encode(&x, &store, &cfg).unwrap().0.into_data());
    }
}
