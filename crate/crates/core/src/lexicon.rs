//! Drug name lexicon and longest-overlap mention normalization.
//!
//! A mention and a lexicon name are split into case-folded tokens on
//! whitespace and hyphens. Their overlap score is the character count of the
//! longest run of consecutive tokens the two share. The best-scoring name
//! wins, ties going to the lexicographically smaller name, and scores below
//! [`MIN_OVERLAP_CHARS`] count as no match.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{drug_key, PairInstance};
use crate::smiles;

pub const MIN_OVERLAP_CHARS: usize = 4;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub name: String,
    pub drug_id: String,
    pub smiles: Option<String>,
}

#[derive(Debug, Clone)]
struct IndexedName {
    key: String,
    key_chars: usize,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct DrugLexicon {
    entries: BTreeMap<String, LexiconEntry>,
    index: Vec<IndexedName>,
    duplicate_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NormalizationResult {
    pub mention_text: String,
    pub matched_name: Option<String>,
    pub drug_id: Option<String>,
    pub smiles: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    pub n_unique: usize,
    pub n_normalized: usize,
    pub misses: Vec<String>,
}

fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Character length of the longest run of equal consecutive tokens.
fn overlap_score(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    for ta in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, tb) in b.iter().enumerate() {
            if ta == tb {
                cur[j + 1] = prev[j] + ta.chars().count();
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

impl DrugLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; returns `false` (and keeps the existing entry) when the
    /// normalized name is already present.
    pub fn insert(&mut self, name: &str, drug_id: &str, smiles: Option<&str>) -> bool {
        let key = drug_key(name);
        if key.is_empty() || self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(
            key.clone(),
            LexiconEntry {
                name: name.trim().to_string(),
                drug_id: drug_id.trim().to_string(),
                smiles: smiles.map(str::to_string),
            },
        );
        let entry = IndexedName {
            key_chars: key.chars().count(),
            tokens: tokens(&key),
            key,
        };
        let pos = self
            .index
            .partition_point(|e| (std::cmp::Reverse(e.key_chars), &e.key) < (std::cmp::Reverse(entry.key_chars), &entry.key));
        self.index.insert(pos, entry);
        true
    }

    /// Reads `name \t drug_id \t smiles` rows. Blank lines are skipped; an
    /// empty SMILES field means the drug has no structure.
    pub fn load<R: BufRead>(r: R) -> Result<Self, LexiconError> {
        let mut lex = Self::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 {
                return Err(LexiconError::Format {
                    line: n + 1,
                    message: format!("expected name<TAB>drug_id[<TAB>smiles], got {line:?}"),
                });
            }
            let smiles = fields.get(2).map(|s| s.trim()).filter(|s| !s.is_empty());
            if let Some(s) = smiles {
                if !smiles::validate_chars(s) {
                    return Err(LexiconError::Format {
                        line: n + 1,
                        message: format!("invalid SMILES characters in {s:?}"),
                    });
                }
            }
            if !lex.insert(fields[0], fields[1], smiles) {
                log::warn!("lexicon line {}: duplicate name {:?} ignored", n + 1, fields[0]);
                lex.duplicate_rows += 1;
            }
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rows dropped because their name was already present.
    pub fn duplicate_rows(&self) -> usize {
        self.duplicate_rows
    }

    pub fn get(&self, name: &str) -> Option<&LexiconEntry> {
        self.entries.get(&drug_key(name))
    }

    pub fn entries(&self) -> impl Iterator<Item = &LexiconEntry> {
        self.entries.values()
    }

    /// Normalized names, longest first, ties in lexicographic order.
    pub fn index_order(&self) -> impl Iterator<Item = &str> {
        self.index.iter().map(|e| e.key.as_str())
    }

    pub fn normalize(&self, mention_text: &str) -> NormalizationResult {
        let mention_tokens = tokens(mention_text);
        let mut best: Option<(usize, &str)> = None;
        for cand in &self.index {
            if let Some((score, _)) = best {
                // index is sorted by length, and a name cannot score above its own length
                if cand.key_chars < score {
                    break;
                }
            }
            let score = overlap_score(&mention_tokens, &cand.tokens);
            if score < MIN_OVERLAP_CHARS {
                continue;
            }
            best = match best {
                Some((s, k)) if s > score || (s == score && k <= cand.key.as_str()) => Some((s, k)),
                _ => Some((score, cand.key.as_str())),
            };
        }
        let entry = best.and_then(|(_, key)| self.entries.get(key));
        NormalizationResult {
            mention_text: mention_text.to_string(),
            matched_name: entry.map(|e| e.name.clone()),
            drug_id: entry.map(|e| e.drug_id.clone()),
            smiles: entry.and_then(|e| e.smiles.clone()),
        }
    }

    /// Sets `drug_id` on both mentions of every instance that normalizes.
    pub fn annotate(&self, instances: &mut [PairInstance]) {
        let mut cache: HashMap<String, Option<String>> = HashMap::new();
        for inst in instances.iter_mut() {
            for m in [&mut inst.e1, &mut inst.e2] {
                let id = cache
                    .entry(drug_key(&m.text))
                    .or_insert_with(|| self.normalize(&m.text).drug_id)
                    .clone();
                m.drug_id = id;
            }
        }
    }
}

pub fn normalize_mention(mention_text: &str, lexicon: &DrugLexicon) -> NormalizationResult {
    lexicon.normalize(mention_text)
}

/// Unique case-folded drug mentions and how many map to an entry with SMILES.
pub fn coverage_report(instances: &[PairInstance], lexicon: &DrugLexicon) -> CoverageReport {
    let unique: BTreeSet<String> = instances
        .iter()
        .flat_map(|i| [drug_key(&i.e1.text), drug_key(&i.e2.text)])
        .collect();
    let mut misses = Vec::new();
    let mut n_normalized = 0;
    for name in &unique {
        if lexicon.normalize(name).smiles.is_some() {
            n_normalized += 1;
        } else {
            misses.push(name.clone());
        }
    }
    CoverageReport {
        n_unique: unique.len(),
        n_normalized,
        misses,
    }
}

/// Miss list as plain text, one name per line.
pub fn write_misses<W: Write>(mut w: W, report: &CoverageReport) -> std::io::Result<()> {
    for m in &report.misses {
        writeln!(w, "{m}")?;
    }
    Ok(())
}
