//! Per-class precision, recall and F1, positive-class aggregates, and report
//! rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RelationLabel;

const K: usize = RelationLabel::COUNT;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<RelationLabel, ClassScores>,
    pub macro_f1_positive: f64,
    pub micro_precision_positive: f64,
    pub micro_recall_positive: f64,
    pub micro_f1_positive: f64,
    /// `confusion[gold][pred]` in class-index order.
    pub confusion: [[usize; K]; K],
    pub n_instances: usize,
}

/// `a / b`, or 0 when `b == 0`.
fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn confusion_matrix(gold: &[RelationLabel], pred: &[RelationLabel]) -> Result<[[usize; K]; K], EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::Input(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(EvalError::Input("no instances to evaluate".into()));
    }
    let mut m = [[0usize; K]; K];
    for (g, p) in gold.iter().zip(pred) {
        m[g.index()][p.index()] += 1;
    }
    Ok(m)
}

pub fn evaluate(gold: &[RelationLabel], pred: &[RelationLabel]) -> Result<EvalReport, EvalError> {
    report_from_confusion(confusion_matrix(gold, pred)?)
}

/// Builds a report from counts; reports over disjoint sets merge by summing
/// their confusion matrices.
pub fn report_from_confusion(confusion: [[usize; K]; K]) -> Result<EvalReport, EvalError> {
    let n: usize = confusion.iter().flatten().sum();
    if n == 0 {
        return Err(EvalError::Input("no instances to evaluate".into()));
    }
    let mut per_class = BTreeMap::new();
    for label in RelationLabel::ALL {
        let c = label.index();
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let (fp, fn_) = (predicted - tp, support - tp);
        let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        per_class.insert(
            label,
            ClassScores {
                precision: p,
                recall: r,
                f1: f1(p, r),
                support,
                tp,
                fp,
                fn_,
            },
        );
    }
    let positive: Vec<&ClassScores> = RelationLabel::POSITIVE.iter().map(|l| &per_class[l]).collect();
    let macro_f1_positive = positive.iter().map(|s| s.f1).sum::<f64>() / positive.len() as f64;
    let tp: usize = positive.iter().map(|s| s.tp).sum();
    let fp: usize = positive.iter().map(|s| s.fp).sum();
    let fn_: usize = positive.iter().map(|s| s.fn_).sum();
    let (mp, mr) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    Ok(EvalReport {
        per_class,
        macro_f1_positive,
        micro_precision_positive: mp,
        micro_recall_positive: mr,
        micro_f1_positive: f1(mp, mr),
        confusion,
        n_instances: n,
    })
}

impl EvalReport {
    pub fn f1(&self, label: RelationLabel) -> f64 {
        self.per_class[&label].f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    /// Per-relation F1 columns `Adv Eff Mch Int Tot`.
    Table2,
    /// One `model / embedding / macro-F1` row.
    Table3,
}

const TABLE2_ORDER: [(RelationLabel, &str); 4] = [
    (RelationLabel::Advice, "Adv"),
    (RelationLabel::Effect, "Eff"),
    (RelationLabel::Mechanism, "Mch"),
    (RelationLabel::Int, "Int"),
];

/// Plain-text rendering with three decimals. `Tot` is the positive-class
/// macro F1; the micro aggregate is printed on its own line.
pub fn render_report(report: &EvalReport, style: ReportStyle, model: &str, embedding: &str) -> String {
    match style {
        ReportStyle::Table2 => render_table2(report, model),
        ReportStyle::Table3 => render_table3(&[(model, embedding, report)]),
    }
}

type MetricRow = (&'static str, fn(&ClassScores) -> f64, f64);

fn render_table2(r: &EvalReport, model: &str) -> String {
    let width = model.len() + 3;
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "");
    for (_, name) in TABLE2_ORDER {
        let _ = write!(out, " {name:>6}");
    }
    let _ = writeln!(out, " {:>6}", "Tot");
    let rows: [MetricRow; 3] = [
        ("P", |s| s.precision, mean(r, |s| s.precision)),
        ("R", |s| s.recall, mean(r, |s| s.recall)),
        ("F1", |s| s.f1, r.macro_f1_positive),
    ];
    for (metric, get, tot) in rows {
        let _ = write!(out, "{:<width$}", format!("{model} {metric}"), width = width);
        for (label, _) in TABLE2_ORDER {
            let _ = write!(out, " {:>6.3}", get(&r.per_class[&label]));
        }
        let _ = writeln!(out, " {tot:>6.3}");
    }
    let _ = writeln!(
        out,
        "micro P {:.3} R {:.3} F1 {:.3} over {} instances",
        r.micro_precision_positive, r.micro_recall_positive, r.micro_f1_positive, r.n_instances
    );
    out
}

fn mean(r: &EvalReport, get: fn(&ClassScores) -> f64) -> f64 {
    TABLE2_ORDER.iter().map(|(l, _)| get(&r.per_class[l])).sum::<f64>() / TABLE2_ORDER.len() as f64
}

/// Rows of `model  embedding  macro-F1  micro-F1`.
pub fn render_table3(rows: &[(&str, &str, &EvalReport)]) -> String {
    let mw = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let ew = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(9);
    let mut out = format!("{:<mw$} {:<ew$} {:>8} {:>8}\n", "Model", "Embedding", "macro-F1", "micro-F1");
    for (model, emb, r) in rows {
        let _ = writeln!(
            out,
            "{model:<mw$} {emb:<ew$} {:>8.3} {:>8.3}",
            r.macro_f1_positive, r.micro_f1_positive
        );
    }
    out
}

/// F1 differences `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub per_class_f1: BTreeMap<RelationLabel, f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<RunComparison, EvalError> {
    if a.n_instances != b.n_instances {
        return Err(EvalError::Input(format!(
            "reports cover {} and {} instances",
            a.n_instances, b.n_instances
        )));
    }
    let gold_a: Vec<usize> = a.confusion.iter().map(|row| row.iter().sum()).collect();
    let gold_b: Vec<usize> = b.confusion.iter().map(|row| row.iter().sum()).collect();
    if gold_a != gold_b {
        return Err(EvalError::Input("reports were computed over different gold labels".into()));
    }
    Ok(RunComparison {
        per_class_f1: RelationLabel::ALL.iter().map(|l| (*l, b.f1(*l) - a.f1(*l))).collect(),
        macro_f1: b.macro_f1_positive - a.macro_f1_positive,
        micro_f1: b.micro_f1_positive - a.micro_f1_positive,
    })
}

impl RunComparison {
    /// One sign-tagged line per class plus the aggregates.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (l, d) in &self.per_class_f1 {
            let _ = writeln!(out, "{:<10} {d:+.3}", l.as_str());
        }
        let _ = writeln!(out, "{:<10} {:+.3}", "macro", self.macro_f1);
        let _ = writeln!(out, "{:<10} {:+.3}", "micro", self.micro_f1);
        out
    }
}
