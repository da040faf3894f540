//! DDIExtraction-2013 XML ingestion.
//!
//! A corpus file holds one `<document>` with `<sentence text="...">`
//! children, each listing gold `<entity>` mentions and the annotated drug
//! `<pair>` elements between them. Entity `charOffset` values are inclusive
//! `start-end` character ranges, semicolon-separated when the mention is
//! discontinuous; they are stored half-open (`end + 1`) and only the first
//! span is kept for pooling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}: XML error at byte {position}: {message}")]
    Xml {
        file: String,
        position: u64,
        message: String,
    },
    #[error("{file}: entity {entity}: {message}")]
    Offset {
        file: String,
        entity: String,
        message: String,
    },
    #[error("unknown interaction type {0:?}")]
    Label(String),
    #[error("{file}: pair {pair} references unknown entity {entity}")]
    Reference {
        file: String,
        pair: String,
        entity: String,
    },
    #[error("instance file line {line}: {message}")]
    InstanceFile { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Relation classes in classifier index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationLabel {
    Mechanism,
    Effect,
    Advice,
    Int,
    Negative,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 5] = [
        RelationLabel::Mechanism,
        RelationLabel::Effect,
        RelationLabel::Advice,
        RelationLabel::Int,
        RelationLabel::Negative,
    ];
    pub const POSITIVE: [RelationLabel; 4] = [
        RelationLabel::Mechanism,
        RelationLabel::Effect,
        RelationLabel::Advice,
        RelationLabel::Int,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationLabel::Mechanism => "mechanism",
            RelationLabel::Effect => "effect",
            RelationLabel::Advice => "advice",
            RelationLabel::Int => "int",
            RelationLabel::Negative => "negative",
        }
    }

    pub fn is_positive(self) -> bool {
        self != RelationLabel::Negative
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationLabel {
    type Err = CorpusError;

    /// Accepts the corpus spelling `advise` as well as `advice`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mechanism" => Ok(RelationLabel::Mechanism),
            "effect" => Ok(RelationLabel::Effect),
            "advise" | "advice" => Ok(RelationLabel::Advice),
            "int" => Ok(RelationLabel::Int),
            "negative" | "false" | "other" => Ok(RelationLabel::Negative),
            _ => Err(CorpusError::Label(s.to_string())),
        }
    }
}

/// A gold entity mention with half-open character offsets into its sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub id: String,
    pub text: String,
    #[serde(rename = "start")]
    pub char_start: usize,
    #[serde(rename = "end")]
    pub char_end: usize,
    #[serde(rename = "type")]
    pub entity_type: String,
    /// The raw `charOffset` attribute, kept for discontinuous spans.
    #[serde(rename = "offsets", default, skip_serializing_if = "String::is_empty")]
    pub raw_offsets: String,
    /// Lexicon identifier, filled in by normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drug_id: Option<String>,
}

impl EntityMention {
    pub fn is_discontinuous(&self) -> bool {
        self.raw_offsets.contains(';')
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairAnnotation {
    pub id: String,
    pub e1: String,
    pub e2: String,
    pub label: RelationLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub entities: Vec<EntityMention>,
    pub pairs: Vec<PairAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub source: String,
    pub sentences: Vec<Sentence>,
    /// Mentions whose offset slice disagreed with their `text` attribute.
    pub text_mismatches: Vec<String>,
}

/// One drug pair to classify.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairInstance {
    pub sentence_id: String,
    #[serde(default)]
    pub pair_id: String,
    #[serde(rename = "text")]
    pub sentence_text: String,
    pub e1: EntityMention,
    pub e2: EntityMention,
    pub label: RelationLabel,
}

/// Instances built from one document plus the pairs that were dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstanceBatch {
    pub instances: Vec<PairInstance>,
    /// Pair ids whose two mentions start at the same offset.
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_documents: usize,
    pub n_sentences: usize,
    pub n_pairs: usize,
    pub n_unique_drugs: usize,
    pub label_histogram: BTreeMap<RelationLabel, usize>,
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-folded, whitespace-collapsed surface form used as a drug key.
pub fn drug_key(s: &str) -> String {
    normalize_whitespace(&s.to_lowercase())
}

/// Substring by character offsets `[start, end)`.
pub fn char_slice(s: &str, start: usize, end: usize) -> &str {
    let mut it = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let b0 = it.clone().nth(start).unwrap_or(s.len());
    let b1 = it.nth(end).unwrap_or(s.len());
    &s[b0..b1.max(b0)]
}

fn parse_offsets(raw: &str) -> Option<Vec<(usize, usize)>> {
    raw.split(';')
        .map(|span| {
            let (a, b) = span.trim().split_once('-')?;
            let start: usize = a.trim().parse().ok()?;
            let end_incl: usize = b.trim().parse().ok()?;
            (end_incl >= start).then_some((start, end_incl + 1))
        })
        .collect()
}

fn attributes(
    e: &BytesStart,
    reader: &Reader<&[u8]>,
    file: &str,
) -> Result<BTreeMap<String, String>, CorpusError> {
    let xml_err = |message: String| CorpusError::Xml {
        file: file.to_string(),
        position: reader.buffer_position(),
        message,
    };
    let mut out = BTreeMap::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| xml_err(err.to_string()))?;
        let key = attr.key.as_ref().to_string();
        let value = attr
            .normalized_value(XmlVersion::Explicit1_0)
            .map_err(|err| xml_err(err.to_string()))?
            .into_owned();
        out.insert(key, value);
    }
    Ok(out)
}

fn required<'m>(
    attrs: &'m BTreeMap<String, String>,
    key: &str,
    element: &str,
    reader: &Reader<&[u8]>,
    file: &str,
) -> Result<&'m str, CorpusError> {
    attrs.get(key).map(String::as_str).ok_or_else(|| CorpusError::Xml {
        file: file.to_string(),
        position: reader.buffer_position(),
        message: format!("<{element}> lacks attribute {key:?}"),
    })
}

/// Parses one corpus file. `source` names the file in error messages.
pub fn parse_document(bytes: &[u8], source: &str) -> Result<Document, CorpusError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().check_end_names = true;
    let mut doc: Option<Document> = None;
    let mut current: Option<Sentence> = None;
    let mut buf = Vec::new();
    let mut mismatches = Vec::new();
    let mut open: Vec<String> = Vec::new();

    loop {
        let event = reader.read_event_into(&mut buf).map_err(|e| CorpusError::Xml {
            file: source.to_string(),
            position: reader.error_position(),
            message: e.to_string(),
        })?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                if !is_empty {
                    open.push(e.name().as_ref().to_string());
                }
                let attrs = attributes(e, &reader, source)?;
                match e.name().as_ref() {
                    "document" => {
                        let id = required(&attrs, "id", "document", &reader, source)?;
                        doc = Some(Document {
                            id: id.to_string(),
                            source: source.to_string(),
                            sentences: Vec::new(),
                            text_mismatches: Vec::new(),
                        });
                    }
                    "sentence" => {
                        let s = Sentence {
                            id: required(&attrs, "id", "sentence", &reader, source)?.to_string(),
                            text: required(&attrs, "text", "sentence", &reader, source)?.to_string(),
                            entities: Vec::new(),
                            pairs: Vec::new(),
                        };
                        if is_empty {
                            push_sentence(&mut doc, s, &reader, source)?;
                        } else {
                            current = Some(s);
                        }
                    }
                    "entity" => {
                        let s = current.as_mut().ok_or_else(|| CorpusError::Xml {
                            file: source.to_string(),
                            position: reader.buffer_position(),
                            message: "<entity> outside <sentence>".into(),
                        })?;
                        let id = required(&attrs, "id", "entity", &reader, source)?.to_string();
                        let raw = required(&attrs, "charOffset", "entity", &reader, source)?;
                        let text = required(&attrs, "text", "entity", &reader, source)?.to_string();
                        let entity_type = attrs.get("type").cloned().unwrap_or_default();
                        let offset_err = |message: String| CorpusError::Offset {
                            file: source.to_string(),
                            entity: id.clone(),
                            message,
                        };
                        let spans = parse_offsets(raw)
                            .ok_or_else(|| offset_err(format!("malformed charOffset {raw:?}")))?;
                        let sent_len = s.text.chars().count();
                        if let Some((a, b)) = spans.iter().find(|(_, b)| *b > sent_len) {
                            return Err(offset_err(format!(
                                "span {}-{} lies outside the {}-character sentence",
                                a,
                                b - 1,
                                sent_len
                            )));
                        }
                        let (char_start, char_end) = spans[0];
                        if spans.len() == 1
                            && normalize_whitespace(char_slice(&s.text, char_start, char_end))
                                != normalize_whitespace(&text)
                        {
                            mismatches.push(id.clone());
                        }
                        s.entities.push(EntityMention {
                            id,
                            text,
                            char_start,
                            char_end,
                            entity_type,
                            raw_offsets: if spans.len() > 1 { raw.to_string() } else { String::new() },
                            drug_id: None,
                        });
                    }
                    "pair" => {
                        let s = current.as_mut().ok_or_else(|| CorpusError::Xml {
                            file: source.to_string(),
                            position: reader.buffer_position(),
                            message: "<pair> outside <sentence>".into(),
                        })?;
                        let ddi = required(&attrs, "ddi", "pair", &reader, source)?;
                        let label = match ddi.trim().to_ascii_lowercase().as_str() {
                            "false" => RelationLabel::Negative,
                            "true" => {
                                let ty = attrs.get("type").map(String::as_str).unwrap_or("");
                                let label: RelationLabel = ty.parse()?;
                                if !label.is_positive() {
                                    return Err(CorpusError::Label(ty.to_string()));
                                }
                                label
                            }
                            other => return Err(CorpusError::Label(format!("ddi={other}"))),
                        };
                        s.pairs.push(PairAnnotation {
                            id: required(&attrs, "id", "pair", &reader, source)?.to_string(),
                            e1: required(&attrs, "e1", "pair", &reader, source)?.to_string(),
                            e2: required(&attrs, "e2", "pair", &reader, source)?.to_string(),
                            label,
                        });
                    }
                    _ => {}
                }
            }
            Event::End(ref e) => {
                open.pop();
                if e.name().as_ref() == "sentence" {
                    if let Some(s) = current.take() {
                        push_sentence(&mut doc, s, &reader, source)?;
                    }
                }
            }
            Event::Eof => {
                if let Some(name) = open.last() {
                    return Err(CorpusError::Xml {
                        file: source.to_string(),
                        position: reader.buffer_position(),
                        message: format!("file ends inside <{name}>"),
                    });
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }
    let mut doc = doc.ok_or_else(|| CorpusError::Xml {
        file: source.to_string(),
        position: reader.buffer_position(),
        message: "no <document> element".into(),
    })?;
    doc.text_mismatches = mismatches;
    Ok(doc)
}

fn push_sentence(
    doc: &mut Option<Document>,
    s: Sentence,
    reader: &Reader<&[u8]>,
    source: &str,
) -> Result<(), CorpusError> {
    let d = doc.as_mut().ok_or_else(|| CorpusError::Xml {
        file: source.to_string(),
        position: reader.buffer_position(),
        message: "<sentence> outside <document>".into(),
    })?;
    d.sentences.push(s);
    Ok(())
}

/// Parses a set of `(source name, bytes)` files concurrently, keeping input order.
pub fn parse_corpus(files: &[(String, Vec<u8>)]) -> Result<Vec<Document>, CorpusError> {
    files
        .par_iter()
        .map(|(name, bytes)| parse_document(bytes, name))
        .collect()
}

/// Every `*.xml` file under `dir`, recursively, in sorted path order.
pub fn list_corpus_files(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        };
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let files = list_corpus_files(dir)?
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|source| CorpusError::Io {
                path: p.clone(),
                source,
            })?;
            Ok((p.display().to_string(), bytes))
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    parse_corpus(&files)
}

/// One instance per annotated pair, in document order. The earlier mention
/// becomes `e1`; pairs whose mentions share a start offset are rejected.
pub fn make_instances(doc: &Document) -> Result<InstanceBatch, CorpusError> {
    let mut batch = InstanceBatch::default();
    for s in &doc.sentences {
        for p in &s.pairs {
            let find = |id: &str| {
                s.entities.iter().find(|e| e.id == id).ok_or_else(|| CorpusError::Reference {
                    file: doc.source.clone(),
                    pair: p.id.clone(),
                    entity: id.to_string(),
                })
            };
            let (mut e1, mut e2) = (find(&p.e1)?, find(&p.e2)?);
            if e1.char_start == e2.char_start || e1.id == e2.id {
                log::warn!("pair {} rejected: mentions start at the same offset", p.id);
                batch.rejected.push(p.id.clone());
                continue;
            }
            if e1.char_start > e2.char_start {
                std::mem::swap(&mut e1, &mut e2);
            }
            batch.instances.push(PairInstance {
                sentence_id: s.id.clone(),
                pair_id: p.id.clone(),
                sentence_text: s.text.clone(),
                e1: e1.clone(),
                e2: e2.clone(),
                label: p.label,
            });
        }
    }
    Ok(batch)
}

pub fn corpus_stats(instances: &[PairInstance], documents: &[Document]) -> CorpusStats {
    let mut label_histogram: BTreeMap<RelationLabel, usize> =
        RelationLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for inst in instances {
        *label_histogram.entry(inst.label).or_default() += 1;
    }
    let drugs: BTreeSet<String> = documents
        .iter()
        .flat_map(|d| &d.sentences)
        .flat_map(|s| &s.entities)
        .map(|e| drug_key(&e.text))
        .collect();
    CorpusStats {
        n_documents: documents.len(),
        n_sentences: documents.iter().map(|d| d.sentences.len()).sum(),
        n_pairs: instances.len(),
        n_unique_drugs: drugs.len(),
        label_histogram,
    }
}

/// Newline-delimited JSON, one instance per line.
pub fn write_instances<W: Write>(mut w: W, instances: &[PairInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_instances<R: BufRead>(r: R) -> Result<Vec<PairInstance>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::InstanceFile {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: PairInstance = serde_json::from_str(&line).map_err(|e| CorpusError::InstanceFile {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}
