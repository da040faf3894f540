//! SMILES character vocabulary, one-hot encoding and greedy decoding.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::nn::{argmax, Tensor};

/// Default sequence length; longer strings are truncated.
pub const MAX_SMILES_LEN: usize = 120;
pub const PAD_TOKEN: &str = "<pad>";
/// Characters always present in the vocabulary.
pub const MANDATORY_CHARS: &str = "C=()OF123456789";

#[derive(Debug, Error)]
pub enum SmilesError {
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("character {ch:?} at position {position} of {smiles:?} is not in the vocabulary")]
    Encode {
        smiles: String,
        ch: char,
        position: usize,
    },
    #[error("row {row} sums to {sum}, not 1")]
    Distribution { row: usize, sum: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Character vocabulary with PAD fixed at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmilesVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl SmilesVocab {
    /// Mandatory set plus every observed character, sorted by code point after PAD.
    pub fn build<S: AsRef<str>>(smiles: &[S]) -> Result<Self, SmilesError> {
        if smiles.is_empty() {
            return Err(SmilesError::Vocab("no SMILES strings given".into()));
        }
        let mut set: BTreeSet<char> = MANDATORY_CHARS.chars().collect();
        for s in smiles {
            let s = s.as_ref();
            for ch in s.chars() {
                if !ch.is_ascii() {
                    return Err(SmilesError::Vocab(format!("non-ASCII character {ch:?} in {s:?}")));
                }
                if ch.is_ascii_whitespace() || ch.is_ascii_control() {
                    return Err(SmilesError::Vocab(format!("whitespace or control character in {s:?}")));
                }
                set.insert(ch);
            }
        }
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    fn from_chars(symbols: Vec<char>) -> Self {
        let mut chars = Vec::with_capacity(symbols.len() + 1);
        chars.push('\0');
        chars.extend(symbols);
        let index = chars.iter().enumerate().skip(1).map(|(i, c)| (*c, i)).collect();
        Self { chars, index }
    }

    /// Size including PAD.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    /// The character at `idx`, or `None` for PAD.
    pub fn char_at(&self, idx: usize) -> Option<char> {
        if idx == 0 {
            None
        } else {
            self.chars.get(idx).copied()
        }
    }

    /// Non-PAD symbols in index order.
    pub fn symbols(&self) -> &[char] {
        &self.chars[1..]
    }

    pub fn contains_all(&self, s: &str) -> bool {
        s.chars().all(|c| self.index.contains_key(&c))
    }

    /// One symbol per line, PAD first as `<pad>`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), SmilesError> {
        writeln!(w, "{PAD_TOKEN}")?;
        for c in self.symbols() {
            writeln!(w, "{c}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, SmilesError> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(l)) if l == PAD_TOKEN => {}
            _ => return Err(SmilesError::Vocab(format!("vocabulary file must start with {PAD_TOKEN}"))),
        }
        let mut symbols = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(SmilesError::Vocab(format!(
                        "line {} must hold exactly one character, got {line:?}",
                        n + 2
                    )))
                }
            }
        }
        let unique: BTreeSet<char> = symbols.iter().copied().collect();
        if unique.len() != symbols.len() {
            return Err(SmilesError::Vocab("duplicate symbol in vocabulary file".into()));
        }
        Ok(Self::from_chars(symbols))
    }
}

/// `max_len × |vocab|` one-hot matrix; rows at and beyond `true_len` are PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct SmilesOneHot {
    pub matrix: Tensor,
    pub true_len: usize,
}

impl SmilesOneHot {
    pub fn max_len(&self) -> usize {
        self.matrix.rows()
    }

    /// Class index per row.
    pub fn indices(&self) -> Vec<usize> {
        self.matrix.argmax_rows()
    }
}

/// One-hot encodes `smiles`, truncating to `max_len` characters.
pub fn encode_one_hot(smiles: &str, vocab: &SmilesVocab, max_len: usize) -> Result<SmilesOneHot, SmilesError> {
    let v = vocab.len();
    let mut data = vec![0.0; max_len * v];
    let mut true_len = 0;
    for (pos, ch) in smiles.chars().take(max_len).enumerate() {
        let idx = vocab.index_of(ch).ok_or_else(|| SmilesError::Encode {
            smiles: smiles.to_string(),
            ch,
            position: pos,
        })?;
        data[pos * v + idx] = 1.0;
        true_len = pos + 1;
    }
    for row in true_len..max_len {
        data[row * v] = 1.0;
    }
    let matrix = Tensor::matrix(max_len, v, data).expect("sized from dimensions");
    Ok(SmilesOneHot { matrix, true_len })
}

/// Per-row argmax (lowest index on ties), stopping at the first PAD.
pub fn decode_greedy(probs: &Tensor, vocab: &SmilesVocab) -> Result<String, SmilesError> {
    if probs.cols() != vocab.len() {
        return Err(SmilesError::Vocab(format!(
            "matrix has {} columns, vocabulary has {} symbols",
            probs.cols(),
            vocab.len()
        )));
    }
    let mut out = String::new();
    for r in 0..probs.rows() {
        let row = probs.row_slice(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|p| *p < 0.0) {
            return Err(SmilesError::Distribution { row: r, sum });
        }
        match vocab.char_at(argmax(row)) {
            Some(c) => out.push(c),
            None => break,
        }
    }
    Ok(out)
}

/// True when `s` is non-empty printable ASCII without whitespace, i.e. it
/// can be added to a vocabulary.
pub fn validate_chars(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_graphic())
}

/// Shallow syntax check: non-empty, parentheses balance, and each ring-closure
/// label outside bracket atoms occurs an even number of times.
pub fn validate_syntax(smiles: &str) -> bool {
    if smiles.is_empty() {
        return false;
    }
    let mut depth: i64 = 0;
    let mut in_bracket = false;
    let mut ring_counts: HashMap<u32, usize> = HashMap::new();
    let chars: Vec<char> = smiles.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '[' if !in_bracket => in_bracket = true,
            ']' if in_bracket => in_bracket = false,
            '[' | ']' => return false,
            _ if in_bracket => {}
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            '%' => {
                let label = chars.get(i + 1..i + 3).and_then(|d| {
                    let s: String = d.iter().collect();
                    s.parse::<u32>().ok().filter(|_| d.iter().all(|c| c.is_ascii_digit()))
                });
                match label {
                    Some(l) => {
                        *ring_counts.entry(100 + l).or_default() += 1;
                        i += 2;
                    }
                    None => return false,
                }
            }
            d if d.is_ascii_digit() => {
                *ring_counts.entry(d.to_digit(10).unwrap()).or_default() += 1;
            }
            _ => {}
        }
        i += 1;
    }
    depth == 0 && !in_bracket && ring_counts.values().all(|n| n % 2 == 0)
}
