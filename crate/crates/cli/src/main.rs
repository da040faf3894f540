//! `bertchem` command line: corpus preparation, ChemVAE training and
//! embedding, DDI training, evaluation and prediction.
//!
//! Exit codes: 0 success, 1 environment or IO failure, 2 invalid input,
//! failed validation or divergence.

mod conf;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bertchem::chemvae::{
    embed_drugs, read_embeddings, reconstruction_accuracy, train_vae, write_embeddings, ChemEmbedding,
    ChemVaeConfig, ChemVaeError, VaeTrainConfig, WordVectors,
};
use bertchem::corpus::{self, corpus_stats, list_corpus_files, make_instances, parse_document, CorpusError, PairInstance, RelationLabel};
use bertchem::ddimodel::{ChemTable, EncoderConfig, Mode, ModelError, Prediction};
use bertchem::eval::{evaluate, render_report, ReportStyle};
use bertchem::lexicon::{coverage_report, write_misses, DrugLexicon, LexiconError};
use bertchem::nn::{argmax, load_checkpoint, save_checkpoint, NnError, ParamStore};
use bertchem::smiles::{SmilesError, SmilesVocab};
use bertchem::tokenizer::{TokenizerError, WordPieceTokenizer};
use bertchem::train::{predict_prepared, prepare, train_ddi, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use conf::{triple, Conf, Invalid};

/// Offsets added to `--seed` for each component.
const VAE_SEED_OFFSET: u64 = 1;
const DDI_SEED_OFFSET: u64 = 2;
const CHEM_SEED_OFFSET: u64 = 3;

const DEFAULT_WORDPIECE_VOCAB: usize = 8000;

#[derive(Parser)]
#[command(name = "bertchem", version, about = "Drug-drug interaction extraction with chemical structure fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a corpus directory into an instance file plus statistics.
    Prepare(PrepareArgs),
    /// Train the SMILES variational autoencoder.
    TrainVae(TrainVaeArgs),
    /// Write posterior-mean embeddings for every lexicon drug with SMILES.
    Embed(EmbedArgs),
    /// Train the relation classifier.
    Train(TrainArgs),
    /// Score a checkpoint against gold instances.
    Eval(EvalArgs),
    /// Write per-pair predictions.
    Predict(PredictArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory searched recursively for corpus XML files.
    #[arg(long)]
    corpus: PathBuf,
    /// Drug lexicon TSV (name, drug id, SMILES).
    #[arg(long)]
    lexicon: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVaeArgs {
    /// One SMILES string per line.
    #[arg(long)]
    smiles: PathBuf,
    /// Checkpoint path; CKPT.vocab, CKPT.conf and CKPT.trace.tsv are written alongside.
    #[arg(long)]
    out: PathBuf,
    /// Flat key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; the VAE uses seed + 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Size preset: `default` or `tiny`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    encoder_hidden: Option<usize>,
    #[arg(long)]
    decoder_hidden: Option<usize>,
    /// Three comma-separated kernel widths.
    #[arg(long)]
    conv_widths: Option<String>,
    /// Three comma-separated channel counts.
    #[arg(long)]
    conv_channels: Option<String>,
    #[arg(long)]
    gru_layers: Option<usize>,
    #[arg(long)]
    kl_warmup_fraction: Option<f64>,
}

#[derive(Args)]
struct EmbedArgs {
    /// VAE checkpoint written by train-vae.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Embedding TSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Instance file written by prepare.
    #[arg(long)]
    instances: PathBuf,
    /// Checkpoint path; CKPT.conf, CKPT.vocab and CKPT.epochs.jsonl are written alongside.
    #[arg(long)]
    out: PathBuf,
    /// Embedding TSV from embed; required for fused mode.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// word2vec-format text vectors for drugs without SMILES.
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    /// Existing WordPiece vocabulary; trained on the instances when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Size of the WordPiece vocabulary to train.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `text` or `fused`.
    #[arg(long)]
    mode: Option<Mode>,
    /// Base seed; the classifier uses seed + 2 and fallback vectors seed + 3.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    fusion_dim: Option<usize>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    /// Text report; the JSON report goes next to it with a `.json` extension.
    #[arg(long)]
    report: PathBuf,
    /// Override the word vectors recorded at training time.
    #[arg(long)]
    word_vectors: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    /// JSON lines, one record per pair.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    word_vectors: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::TrainVae(a) => cmd_train_vae(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 when any cause is an IO failure, 2 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|c| {
        c.is::<std::io::Error>()
            || matches!(c.downcast_ref::<NnError>(), Some(NnError::Io(_)))
            || matches!(c.downcast_ref::<CorpusError>(), Some(CorpusError::Io { .. }))
            || matches!(c.downcast_ref::<LexiconError>(), Some(LexiconError::Io(_)))
            || matches!(c.downcast_ref::<SmilesError>(), Some(SmilesError::Io(_)))
            || matches!(c.downcast_ref::<TokenizerError>(), Some(TokenizerError::Io(_)))
            || matches!(c.downcast_ref::<ChemVaeError>(), Some(ChemVaeError::Io(_)))
    });
    if io {
        1
    } else {
        2
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

/// `CKPT` plus a suffix, e.g. `model.ckpt.conf`.
fn sidecar(ckpt: &Path, suffix: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn load_lexicon(path: &Path) -> Result<DrugLexicon> {
    DrugLexicon::load(open(path)?).with_context(|| format!("reading lexicon {}", path.display()))
}

fn load_instances(path: &Path) -> Result<Vec<PairInstance>> {
    let instances = corpus::read_instances(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    if instances.is_empty() {
        bail!(Invalid(format!("{} holds no instances", path.display())));
    }
    Ok(instances)
}

fn load_ckpt(path: &Path) -> Result<ParamStore> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

// ---------------------------------------------------------------------------

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let lexicon = load_lexicon(&a.lexicon)?;
    let files = list_corpus_files(&a.corpus).with_context(|| format!("listing {}", a.corpus.display()))?;
    if files.is_empty() {
        bail!(Invalid(format!("no XML files under {}", a.corpus.display())));
    }
    let mut documents = Vec::new();
    let mut failures = Vec::new();
    for path in &files {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        let name = path.strip_prefix(&a.corpus).unwrap_or(path).display().to_string();
        match parse_document(&bytes, &name) {
            Ok(doc) => documents.push(doc),
            Err(e) => {
                log::error!("{e}");
                failures.push(name);
            }
        }
    }
    if !failures.is_empty() {
        bail!(Invalid(format!("{} file(s) failed to parse: {}", failures.len(), failures.join(", "))));
    }

    let mut instances = Vec::new();
    let mut rejected = 0;
    for doc in &documents {
        let batch = make_instances(doc)?;
        rejected += batch.rejected.len();
        instances.extend(batch.instances);
    }
    let mismatches: usize = documents.iter().map(|d| d.text_mismatches.len()).sum();
    if mismatches > 0 {
        log::warn!("{mismatches} mention(s) disagree with their offsets; offsets were kept");
    }
    lexicon.annotate(&mut instances);
    let stats = corpus_stats(&instances, &documents);
    let coverage = coverage_report(&instances, &lexicon);

    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut w = create(&a.out.join("instances.jsonl"))?;
    corpus::write_instances(&mut w, &instances)?;
    w.flush()?;
    write_file(&a.out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    write_file(&a.out.join("coverage.json"), serde_json::to_string_pretty(&coverage)? + "\n")?;
    let mut w = create(&a.out.join("misses.txt"))?;
    write_misses(&mut w, &coverage)?;
    w.flush()?;
    log::info!(
        "{} documents, {} sentences, {} pairs ({rejected} rejected), {} unique drugs, {}/{} normalized",
        stats.n_documents,
        stats.n_sentences,
        stats.n_pairs,
        stats.n_unique_drugs,
        coverage.n_normalized,
        coverage.n_unique
    );
    Ok(())
}

// ---------------------------------------------------------------------------

const VAE_KEYS: &[&str] = &[
    "seed",
    "preset",
    "epochs",
    "batch_size",
    "lr",
    "clip_norm",
    "max_len",
    "latent_dim",
    "encoder_hidden",
    "decoder_hidden",
    "conv_widths",
    "conv_channels",
    "gru_layers",
    "kl_warmup_fraction",
];

fn vae_conf(cfg: &ChemVaeConfig) -> Conf {
    let mut c = Conf::default();
    let join = |v: [usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
    c.set("max_len", cfg.max_len);
    c.set("latent_dim", cfg.latent_dim);
    c.set("encoder_hidden", cfg.encoder_hidden);
    c.set("decoder_hidden", cfg.decoder_hidden);
    c.set("conv_widths", join(cfg.conv_widths));
    c.set("conv_channels", join(cfg.conv_channels));
    c.set("gru_layers", cfg.gru_layers);
    c.set("kl_warmup_fraction", cfg.kl_warmup_fraction);
    c
}

fn vae_from_conf(c: &Conf, base: ChemVaeConfig, flags: Option<&TrainVaeArgs>) -> Result<ChemVaeConfig> {
    let f = |get: fn(&TrainVaeArgs) -> Option<usize>| flags.and_then(get);
    let list = |flag: Option<&String>, key: &str, default: [usize; 3]| -> Result<[usize; 3]> {
        match flag.cloned().or(c.get::<String>(key)?) {
            Some(s) => triple(&s),
            None => Ok(default),
        }
    };
    let cfg = ChemVaeConfig {
        max_len: c.pick(f(|a| a.max_len), "max_len", base.max_len)?,
        latent_dim: c.pick(f(|a| a.latent_dim), "latent_dim", base.latent_dim)?,
        encoder_hidden: c.pick(f(|a| a.encoder_hidden), "encoder_hidden", base.encoder_hidden)?,
        decoder_hidden: c.pick(f(|a| a.decoder_hidden), "decoder_hidden", base.decoder_hidden)?,
        conv_widths: list(flags.and_then(|a| a.conv_widths.as_ref()), "conv_widths", base.conv_widths)?,
        conv_channels: list(flags.and_then(|a| a.conv_channels.as_ref()), "conv_channels", base.conv_channels)?,
        gru_layers: c.pick(f(|a| a.gru_layers), "gru_layers", base.gru_layers)?,
        kl_warmup_fraction: c.pick(flags.and_then(|a| a.kl_warmup_fraction), "kl_warmup_fraction", base.kl_warmup_fraction)?,
    };
    cfg.validate().map_err(|e| Invalid(e.to_string()))?;
    Ok(cfg)
}

fn read_smiles(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if let Some(s) = line.split_whitespace().next() {
            out.push(s.to_string());
        }
    }
    Ok(out)
}

fn cmd_train_vae(a: TrainVaeArgs) -> Result<()> {
    let c = Conf::load_optional(a.config.as_deref())?;
    c.warn_unknown(VAE_KEYS);
    let preset: String = c.pick(a.preset.clone(), "preset", "default".into())?;
    let base = match preset.as_str() {
        "default" => ChemVaeConfig::default(),
        "tiny" => ChemVaeConfig::tiny(),
        other => bail!(Invalid(format!("unknown preset {other:?} (expected default or tiny)"))),
    };
    let cfg = vae_from_conf(&c, base, Some(&a))?;
    let seed: u64 = c.pick(a.seed, "seed", 0)?;
    let defaults = VaeTrainConfig::default();
    let clip: f64 = c.pick(a.clip_norm, "clip_norm", defaults.clip_norm.unwrap_or(0.0))?;
    let tc = VaeTrainConfig {
        epochs: c.pick(a.epochs, "epochs", defaults.epochs)?,
        batch_size: c.pick(a.batch_size, "batch_size", defaults.batch_size)?,
        lr: c.pick(a.lr, "lr", defaults.lr)?,
        clip_norm: (clip > 0.0).then_some(clip),
        seed: seed.wrapping_add(VAE_SEED_OFFSET),
    };

    let smiles = read_smiles(&a.smiles)?;
    let vocab = SmilesVocab::build(&smiles).map_err(|e| Invalid(e.to_string()))?;
    let (store, trace) = train_vae(&smiles, &vocab, &cfg, &tc).map_err(|e| match e {
        ChemVaeError::Io(_) => anyhow::Error::from(e),
        other => Invalid(other.to_string()).into(),
    })?;
    if let Some(bad) = trace.iter().find(|s| !s.total.is_finite()) {
        bail!(Invalid(format!("training diverged at step {}: loss {}", bad.step, bad.total)));
    }
    let accuracy = reconstruction_accuracy(&smiles, &vocab, &store, &cfg)?;

    save_checkpoint(&store, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut w = create(&sidecar(&a.out, "vocab"))?;
    vocab.write(&mut w)?;
    w.flush()?;
    vae_conf(&cfg).save(&sidecar(&a.out, "conf"))?;
    let mut w = create(&sidecar(&a.out, "trace.tsv"))?;
    writeln!(w, "step\tkl_weight\ttotal\trecon\tkl")?;
    for s in &trace {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", s.step, s.kl_weight, s.total, s.recon, s.kl)?;
    }
    w.flush()?;
    let last = trace.last().expect("at least one step");
    log::info!("{} steps, final loss {:.4}", trace.len(), last.total);
    eprintln!("reconstruction accuracy {accuracy:.4}");
    Ok(())
}

fn load_vae(ckpt: &Path) -> Result<(ParamStore, SmilesVocab, ChemVaeConfig)> {
    let store = load_ckpt(ckpt)?;
    let vocab_path = sidecar(ckpt, "vocab");
    let vocab = SmilesVocab::read(open(&vocab_path)?).with_context(|| format!("reading {}", vocab_path.display()))?;
    let cfg = vae_from_conf(&Conf::load(&sidecar(ckpt, "conf"))?, ChemVaeConfig::default(), None)?;
    Ok((store, vocab, cfg))
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let (store, vocab, cfg) = load_vae(&a.ckpt)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let (embeddings, skipped) = embed_drugs(lexicon.entries(), &vocab, &store, &cfg)?;
    let mut w = create(&a.out)?;
    write_embeddings(&mut w, &embeddings)?;
    w.flush()?;
    log::info!(
        "{} embeddings written, {} skipped for unknown SMILES symbols",
        embeddings.len(),
        skipped.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

const TRAIN_KEYS: &[&str] = &[
    "seed",
    "mode",
    "vocab_size",
    "max_seq_len",
    "batch_size",
    "lr",
    "dropout",
    "epochs",
    "d_model",
    "n_layers",
    "n_heads",
    "fusion_dim",
    "dev_fraction",
    "clip_norm",
    "max_steps",
];

fn read_word_vectors(path: &Path) -> Result<WordVectors> {
    WordVectors::read(open(path)?).with_context(|| format!("reading word vectors {}", path.display()))
}

fn read_embedding_file(path: &Path) -> Result<Vec<ChemEmbedding>> {
    read_embeddings(open(path)?).with_context(|| format!("reading embeddings {}", path.display()))
}

fn chem_table(embeddings: &[ChemEmbedding], word_vectors: Option<&Path>, dim: usize, seed: u64) -> Result<ChemTable> {
    let mut table = ChemTable::new(dim, seed)
        .with_embeddings(embeddings)
        .map_err(|e| Invalid(e.to_string()))?;
    if let Some(p) = word_vectors {
        table = table.with_word_vectors(read_word_vectors(p)?);
    }
    Ok(table)
}

fn train_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Model(ModelError::Nn(NnError::Io(io))) => io.into(),
        other => Invalid(other.to_string()).into(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let c = Conf::load_optional(a.config.as_deref())?;
    c.warn_unknown(TRAIN_KEYS);
    let d = TrainConfig::default();
    let seed: u64 = c.pick(a.seed, "seed", 0)?;
    let max_steps: Option<usize> = a.max_steps.or(c.get("max_steps")?);
    let cfg = TrainConfig {
        max_seq_len: c.pick(a.max_seq_len, "max_seq_len", d.max_seq_len)?,
        batch_size: c.pick(a.batch_size, "batch_size", d.batch_size)?,
        lr: c.pick(a.lr, "lr", d.lr)?,
        dropout: c.pick(a.dropout, "dropout", d.dropout)?,
        epochs: c.pick(a.epochs, "epochs", d.epochs)?,
        seed: seed.wrapping_add(DDI_SEED_OFFSET),
        mode: c.pick(a.mode, "mode", d.mode)?,
        d_model: c.pick(a.d_model, "d_model", d.d_model)?,
        n_layers: c.pick(a.n_layers, "n_layers", d.n_layers)?,
        n_heads: c.pick(a.n_heads, "n_heads", d.n_heads)?,
        fusion_dim: c.pick(a.fusion_dim, "fusion_dim", d.fusion_dim)?,
        dev_fraction: c.pick(a.dev_fraction, "dev_fraction", d.dev_fraction)?,
        clip_norm: c.pick(a.clip_norm, "clip_norm", d.clip_norm)?,
        max_steps,
    };
    cfg.validate().map_err(train_error)?;
    if cfg.mode == Mode::Fused && a.embeddings.is_none() {
        bail!(Invalid("--mode fused requires --embeddings".into()));
    }

    let instances = load_instances(&a.instances)?;
    let tokenizer = match &a.vocab {
        Some(p) => WordPieceTokenizer::read(open(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let size = c.pick(a.vocab_size, "vocab_size", DEFAULT_WORDPIECE_VOCAB)?;
            let texts: Vec<&str> = instances.iter().map(|i| i.sentence_text.as_str()).collect();
            WordPieceTokenizer::train(&texts, size).map_err(|e| Invalid(e.to_string()))?
        }
    };
    let chem_seed = seed.wrapping_add(CHEM_SEED_OFFSET);
    let embeddings = match (&a.embeddings, cfg.mode) {
        (Some(p), Mode::Fused) => read_embedding_file(p)?,
        _ => Vec::new(),
    };
    let table = if cfg.mode == Mode::Fused {
        let dim = embeddings
            .first()
            .map(|e| e.vector.len())
            .ok_or_else(|| Invalid("embedding file is empty".into()))?;
        Some(chem_table(&embeddings, a.word_vectors.as_deref(), dim, chem_seed)?)
    } else {
        None
    };

    let outcome = train_ddi(&instances, &tokenizer, table.as_ref(), &cfg).map_err(train_error)?;
    if !outcome.skipped.is_empty() {
        log::warn!("{} instance(s) could not be tokenized and were skipped", outcome.skipped.len());
    }

    save_checkpoint(&outcome.store, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut w = create(&sidecar(&a.out, "vocab"))?;
    tokenizer.write(&mut w)?;
    w.flush()?;
    let mut side = encoder_conf(&outcome.encoder, cfg.mode);
    side.set("chem_seed", chem_seed);
    if let Some(p) = &a.word_vectors {
        side.set("word_vectors", p.display());
    }
    side.save(&sidecar(&a.out, "conf"))?;
    if cfg.mode == Mode::Fused {
        let mut w = create(&sidecar(&a.out, "chem.tsv"))?;
        write_embeddings(&mut w, &embeddings)?;
        w.flush()?;
    }
    let mut w = create(&sidecar(&a.out, "epochs.jsonl"))?;
    for e in &outcome.epochs {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    w.flush()?;
    log::info!("best epoch {} of {}", outcome.best_epoch, outcome.epochs.len());
    Ok(())
}

fn encoder_conf(enc: &EncoderConfig, mode: Mode) -> Conf {
    let mut c = Conf::default();
    c.set("mode", mode);
    c.set("vocab_size", enc.vocab_size);
    c.set("d_model", enc.d_model);
    c.set("n_layers", enc.n_layers);
    c.set("n_heads", enc.n_heads);
    c.set("max_seq_len", enc.max_seq_len);
    c.set("dropout", enc.dropout);
    c.set("fusion_dim", enc.fusion_dim);
    c.set("chem_dim", enc.chem_dim);
    c
}

/// A trained classifier with everything needed to run it.
struct Classifier {
    store: ParamStore,
    tokenizer: WordPieceTokenizer,
    encoder: EncoderConfig,
    mode: Mode,
    table: Option<ChemTable>,
}

fn load_classifier(ckpt: &Path, word_vectors: Option<&Path>) -> Result<Classifier> {
    let store = load_ckpt(ckpt)?;
    let vocab_path = sidecar(ckpt, "vocab");
    let tokenizer =
        WordPieceTokenizer::read(open(&vocab_path)?).with_context(|| format!("reading {}", vocab_path.display()))?;
    let c = Conf::load(&sidecar(ckpt, "conf"))?;
    let mode: Mode = c.require("mode")?;
    let encoder = EncoderConfig {
        vocab_size: c.require("vocab_size")?,
        d_model: c.require("d_model")?,
        n_layers: c.require("n_layers")?,
        n_heads: c.require("n_heads")?,
        max_seq_len: c.require("max_seq_len")?,
        dropout: c.require("dropout")?,
        fusion_dim: c.require("fusion_dim")?,
        chem_dim: c.require("chem_dim")?,
    };
    encoder.validate().map_err(|e| Invalid(e.to_string()))?;
    if encoder.vocab_size != tokenizer.vocab_size() {
        bail!(Invalid(format!(
            "{} has {} pieces but the checkpoint expects {}",
            vocab_path.display(),
            tokenizer.vocab_size(),
            encoder.vocab_size
        )));
    }
    let table = if mode == Mode::Fused {
        let embeddings = read_embedding_file(&sidecar(ckpt, "chem.tsv"))?;
        let recorded: Option<String> = c.get("word_vectors")?;
        let wv = word_vectors.map(Path::to_path_buf).or(recorded.map(PathBuf::from));
        Some(chem_table(&embeddings, wv.as_deref(), encoder.chem_dim, c.require("chem_seed")?)?)
    } else {
        None
    };
    Ok(Classifier {
        store,
        tokenizer,
        encoder,
        mode,
        table,
    })
}

/// Probabilities for every instance. Instances that cannot be tokenized are
/// assigned the negative class with certainty.
fn classify(m: &Classifier, instances: &[PairInstance]) -> Result<Vec<[f64; 5]>> {
    let (items, skipped) = prepare(instances, &m.tokenizer, m.table.as_ref(), m.encoder.max_seq_len);
    if !skipped.is_empty() {
        log::warn!("{} instance(s) could not be tokenized and are scored as negative", skipped.len());
    }
    let probs = predict_prepared(&m.store, &items, m.table.as_ref(), &m.encoder, m.mode)
        .map_err(|e| Invalid(e.to_string()))?;
    let mut negative = [0.0; 5];
    negative[RelationLabel::Negative.index()] = 1.0;
    let mut out = vec![negative; instances.len()];
    for (item, p) in items.iter().zip(probs) {
        out[item.index] = p;
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_classifier(&a.ckpt, a.word_vectors.as_deref())?;
    let instances = load_instances(&a.instances)?;
    let probs = classify(&model, &instances)?;
    let gold: Vec<RelationLabel> = instances.iter().map(|i| i.label).collect();
    let pred: Vec<RelationLabel> = probs
        .iter()
        .map(|p| RelationLabel::from_index(argmax(p)).expect("class index in range"))
        .collect();
    let report = evaluate(&gold, &pred).map_err(|e| Invalid(e.to_string()))?;
    let (name, embedding) = match model.mode {
        Mode::TextOnly => ("BERT-DDI", "none"),
        Mode::Fused => ("BERTChem-DDI", "ChemVAE"),
    };
    let json_path = if a.report.extension().is_some_and(|e| e == "json") {
        a.report.with_extension("report.json")
    } else {
        a.report.with_extension("json")
    };
    write_file(&a.report, render_report(&report, ReportStyle::Table2, name, embedding))?;
    write_file(&json_path, report.to_json() + "\n")?;
    log::info!(
        "macro F1 {:.4}, micro F1 {:.4} over {} instances",
        report.macro_f1_positive,
        report.micro_f1_positive,
        report.n_instances
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = load_classifier(&a.ckpt, a.word_vectors.as_deref())?;
    let instances = load_instances(&a.instances)?;
    let probs = classify(&model, &instances)?;
    let mut w = create(&a.out)?;
    for (inst, p) in instances.iter().zip(probs) {
        writeln!(w, "{}", serde_json::to_string(&Prediction::new(inst, p))?)?;
    }
    w.flush()?;
    log::info!("{} predictions written", instances.len());
    Ok(())
}
