use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bertchem::corpus::{write_instances, EntityMention, PairInstance, RelationLabel};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bertchem"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn mention(id: &str, text: &str, start: usize, drug_id: Option<String>) -> EntityMention {
    EntityMention {
        id: id.into(),
        text: text.into(),
        char_start: start,
        char_end: start + text.len(),
        entity_type: "drug".into(),
        raw_offsets: String::new(),
        drug_id,
    }
}

/// 40 pairs, 8 per class, with one class-specific word between the drugs.
fn leaked_corpus() -> Vec<PairInstance> {
    const FILLER: [&str; 8] = ["the", "patients", "receiving", "were", "observed", "during", "treatment", "study"];
    const CUES: [&str; 5] = ["inhibits", "potentiates", "avoid", "interacts", "alongside"];
    (0..40)
        .map(|i| {
            let c = i % 5;
            let k = i / 5;
            let (d1, d2) = (format!("drug{k}x"), format!("agent{k}y"));
            let pre = FILLER[(i * 3) % 8];
            let head = format!("{pre} {d1} ");
            let text = format!("{head}{} {d2} {} .", CUES[c], FILLER[(i * 7 + 2) % 8]);
            PairInstance {
                sentence_id: format!("syn.s{i}"),
                pair_id: format!("syn.s{i}.p0"),
                e1: mention(&format!("syn.s{i}.e0"), &d1, pre.len() + 1, Some(format!("D{c}.{k}a"))),
                e2: mention(&format!("syn.s{i}.e1"), &d2, head.len() + CUES[c].len() + 1, None),
                sentence_text: text,
                label: RelationLabel::from_index(c).unwrap(),
            }
        })
        .collect()
}

fn write_corpus(path: &Path, instances: &[PairInstance]) {
    let mut buf = Vec::new();
    write_instances(&mut buf, instances).unwrap();
    std::fs::write(path, buf).unwrap();
}

const TINY_TRAIN: &str = "\
# desk-scale overfit run
d_model = 16
n_layers = 1
n_heads = 2
fusion_dim = 8
max_seq_len = 32
batch_size = 8
lr = 3e-3
epochs = 60
max_steps = 300
vocab_size = 400
";

#[test]
fn prepare_writes_instances_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "prepare",
            "--corpus",
            s(&fixture("mini_corpus")),
            "--lexicon",
            s(&fixture("lexicon.tsv")),
            "--out",
            s(out),
        ]);
    }
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_pairs"], 6);
    assert_eq!(stats["n_unique_drugs"], 8);
    assert_eq!(stats["label_histogram"]["mechanism"], 2);
    let coverage: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("coverage.json")).unwrap()).unwrap();
    assert_eq!(coverage["n_normalized"], 6);
    for f in ["instances.jsonl", "stats.json", "coverage.json", "misses.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = std::fs::read_to_string(a.join("instances.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains("\"DB00945\""));
}

#[test]
fn prepare_missing_lexicon_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_lexicon.tsv");
    let out = run(&[
        "prepare",
        "--corpus",
        s(&fixture("mini_corpus")),
        "--lexicon",
        s(&missing),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_lexicon.tsv"));
}

#[test]
fn prepare_lists_files_that_fail_to_parse() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    std::fs::copy(fixture("mini_corpus/DDI-DrugBank.d1.xml"), corpus.join("good.xml")).unwrap();
    std::fs::write(corpus.join("broken.xml"), "<document id=\"x\"><sentence id=\"x.s0\" text=\"a\">").unwrap();
    std::fs::write(
        corpus.join("badlabel.xml"),
        r#"<document id="y"><sentence id="y.s0" text="A and B.">
<entity id="y.s0.e0" charOffset="0-0" type="drug" text="A"/>
<entity id="y.s0.e1" charOffset="6-6" type="drug" text="B"/>
<pair id="y.s0.p0" e1="y.s0.e0" e2="y.s0.e1" ddi="true" type="synergy"/>
</sentence></document>"#,
    )
    .unwrap();
    let out = run(&[
        "prepare",
        "--corpus",
        s(&corpus),
        "--lexicon",
        s(&fixture("lexicon.tsv")),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("broken.xml") && err.contains("badlabel.xml"), "{err}");
    assert!(!err.contains("2 file(s) failed to parse: good.xml"));
}

#[test]
fn train_vae_overfits_and_embed_covers_lexicon_smiles() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("vae.ckpt");
    let out = ok(&[
        "train-vae",
        "--smiles",
        s(&fixture("five_smiles.txt")),
        "--preset",
        "tiny",
        "--epochs",
        "500",
        "--batch-size",
        "5",
        "--lr",
        "5e-3",
        "--seed",
        "6",
        "--out",
        s(&ckpt),
    ]);
    let err = String::from_utf8_lossy(&out.stderr);
    let acc: f64 = err
        .lines()
        .find_map(|l| l.strip_prefix("reconstruction accuracy "))
        .expect("accuracy line")
        .trim()
        .parse()
        .unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
    let trace = std::fs::read_to_string(dir.path().join("vae.ckpt.trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 501);

    let lexicon = dir.path().join("lex.tsv");
    std::fs::write(&lexicon, "ethanol\tDB1\tCCO\nmystery\tDB2\t\ncyclohexylamine\tDB3\tC1CCC(CC1)N\n").unwrap();
    let tsv = dir.path().join("emb.tsv");
    ok(&["embed", "--ckpt", s(&ckpt), "--lexicon", s(&lexicon), "--out", s(&tsv)]);
    let rows: Vec<String> = std::fs::read_to_string(&tsv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split('\t').nth(2).unwrap().split(' ').count() == 16));
}

#[test]
fn train_vae_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("vae.conf");
    std::fs::write(&config, "preset = tiny\nepochs = 10\nbatch_size = 5\nseed = 3\n").unwrap();
    let paths: Vec<PathBuf> = ["a.ckpt", "b.ckpt"].iter().map(|n| dir.path().join(n)).collect();
    for p in &paths {
        ok(&[
            "train-vae",
            "--smiles",
            s(&fixture("five_smiles.txt")),
            "--config",
            s(&config),
            "--out",
            s(p),
        ]);
    }
    for suffix in ["", ".vocab", ".conf", ".trace.tsv"] {
        let read = |p: &PathBuf| std::fs::read(format!("{}{suffix}", p.display())).unwrap();
        assert_eq!(read(&paths[0]), read(&paths[1]), "{suffix}");
    }
    let conf = std::fs::read_to_string(dir.path().join("a.ckpt.conf")).unwrap();
    assert!(conf.contains("latent_dim = 16"));
}

#[test]
fn train_validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let instances = dir.path().join("train.jsonl");
    write_corpus(&instances, &leaked_corpus());
    let out = run(&[
        "train",
        "--instances",
        s(&instances),
        "--mode",
        "fused",
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--embeddings"));

    let text = std::fs::read_to_string(&instances).unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, text.replacen("\"mechanism\"", "\"synergy\"", 1)).unwrap();
    let out = run(&["train", "--instances", s(&bad), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&out), 2);

    let out = run(&[
        "train",
        "--instances",
        s(&instances),
        "--lr",
        "-1",
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 2);

    let out = run(&[
        "train",
        "--instances",
        s(&dir.path().join("absent.jsonl")),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn leaked_label_corpus_trains_evaluates_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let data = leaked_corpus();
    let instances = dir.path().join("train.jsonl");
    write_corpus(&instances, &data);
    let config = dir.path().join("run.conf");
    std::fs::write(&config, format!("{TINY_TRAIN}epochs = 1\n").replacen("epochs = 60\n", "", 1)).unwrap();
    let ckpts: Vec<PathBuf> = ["a.ckpt", "b.ckpt"].iter().map(|n| dir.path().join(n)).collect();
    for c in &ckpts {
        ok(&[
            "train",
            "--instances",
            s(&instances),
            "--config",
            s(&config),
            "--epochs",
            "60",
            "--seed",
            "0",
            "--out",
            s(c),
        ]);
    }
    let epochs = std::fs::read_to_string(dir.path().join("a.ckpt.epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 60, "flag must override the config file");
    for suffix in ["", ".vocab", ".conf"] {
        let read = |p: &PathBuf| std::fs::read(format!("{}{suffix}", p.display())).unwrap();
        assert_eq!(read(&ckpts[0]), read(&ckpts[1]), "{suffix}");
    }

    let reports: Vec<PathBuf> = ["a.txt", "b.txt"].iter().map(|n| dir.path().join(n)).collect();
    for r in &reports {
        ok(&[
            "eval",
            "--ckpt",
            s(&ckpts[0]),
            "--instances",
            s(&instances),
            "--report",
            s(r),
        ]);
    }
    assert_eq!(std::fs::read(&reports[0]).unwrap(), std::fs::read(&reports[1]).unwrap());
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    let macro_f1 = json["macro_f1_positive"].as_f64().unwrap();
    assert!(macro_f1 >= 0.95, "macro F1 {macro_f1}");
    assert!(std::fs::read_to_string(&reports[0]).unwrap().contains("BERT-DDI F1"));

    let three = dir.path().join("three.jsonl");
    write_corpus(&three, &data[..3]);
    let pred = dir.path().join("pred.jsonl");
    ok(&["predict", "--ckpt", s(&ckpts[0]), "--instances", s(&three), "--out", s(&pred)]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&pred)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (rec, inst) in lines.iter().zip(&data) {
        let total: f64 = rec["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(rec["sentence_id"], inst.sentence_id.as_str());
        assert_eq!(rec["label"], inst.label.as_str());
    }
}

#[test]
fn fused_pipeline_round_trips_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let data = leaked_corpus();
    let instances = dir.path().join("train.jsonl");
    write_corpus(&instances, &data);
    let emb = dir.path().join("emb.tsv");
    let rows: String = (0..5)
        .flat_map(|c| (0..8).map(move |k| (c, k)))
        .map(|(c, k)| {
            let v: Vec<String> = (0..6).map(|j| if j % 5 == c { "1" } else { "0" }.to_string()).collect();
            format!("D{c}.{k}a\tvae\t{}\n", v.join(" "))
        })
        .collect();
    std::fs::write(&emb, rows).unwrap();
    let config = dir.path().join("run.conf");
    std::fs::write(&config, TINY_TRAIN.replace("epochs = 60", "epochs = 3")).unwrap();
    let ckpt = dir.path().join("fused.ckpt");
    ok(&[
        "train",
        "--instances",
        s(&instances),
        "--config",
        s(&config),
        "--mode",
        "fused",
        "--embeddings",
        s(&emb),
        "--out",
        s(&ckpt),
    ]);
    let conf = std::fs::read_to_string(dir.path().join("fused.ckpt.conf")).unwrap();
    assert!(conf.contains("mode = fused") && conf.contains("chem_dim = 6"), "{conf}");
    let preds: Vec<PathBuf> = ["p1.jsonl", "p2.jsonl"].iter().map(|n| dir.path().join(n)).collect();
    for p in &preds {
        ok(&["predict", "--ckpt", s(&ckpt), "--instances", s(&instances), "--out", s(p)]);
    }
    assert_eq!(std::fs::read(&preds[0]).unwrap(), std::fs::read(&preds[1]).unwrap());
    assert_eq!(std::fs::read_to_string(&preds[0]).unwrap().lines().count(), 40);
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["prepare", "train-vae", "embed", "train", "eval", "predict"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--mode", "--embeddings", "--seed", "--config", "--max-steps"] {
        assert!(text.contains(flag), "{flag}");
    }
}
