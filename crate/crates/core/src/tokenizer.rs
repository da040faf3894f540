//! Greedy longest-match subword tokenizer with character spans.
//!
//! Text is lower-cased and split on whitespace, with every punctuation
//! character standing alone. Each word is then cut into the longest
//! vocabulary pieces from the left; continuation pieces carry a `##`
//! prefix. A word that cannot be covered becomes a single `[UNK]`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;
const MAX_PIECE_CHARS: usize = 10;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A token id with its `[start, end)` character span in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

fn fold(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

/// Words as `(lower-cased chars, char_start)`.
fn pre_tokenize(text: &str) -> Vec<(Vec<char>, usize)> {
    let mut out = Vec::new();
    let mut cur: Vec<char> = Vec::new();
    let mut start = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() || is_punct(c) {
            if !cur.is_empty() {
                out.push((std::mem::take(&mut cur), start));
            }
            if is_punct(c) {
                out.push((vec![c], i));
            }
        } else {
            if cur.is_empty() {
                start = i;
            }
            cur.push(fold(c));
        }
    }
    if !cur.is_empty() {
        out.push((cur, start));
    }
    out
}

impl WordPieceTokenizer {
    /// Builds a tokenizer from an explicit piece list; special tokens are
    /// prepended when missing.
    pub fn from_pieces<S: AsRef<str>>(pieces: &[S]) -> Result<Self, TokenizerError> {
        let mut vocab: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        for p in pieces {
            let p = p.as_ref();
            if p.is_empty() || p.contains(char::is_whitespace) {
                return Err(TokenizerError::Vocab(format!("invalid piece {p:?}")));
            }
            if !vocab.iter().any(|v| v == p) {
                vocab.push(p.to_string());
            }
        }
        let index = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { vocab, index })
    }

    /// Learns a vocabulary of at most `vocab_size` pieces from `texts`.
    ///
    /// Every character seen is kept both as a word-initial and as a `##`
    /// piece so that any word of seen characters can be covered. Remaining
    /// slots go to word prefixes and `##` continuations of 2 to 10
    /// characters, ranked by corpus frequency, then length, then text.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self, TokenizerError> {
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for (w, _) in pre_tokenize(t.as_ref()) {
                if w.len() <= MAX_WORD_CHARS {
                    *words.entry(w.into_iter().collect()).or_default() += 1;
                }
            }
        }
        let mut chars: BTreeMap<String, ()> = BTreeMap::new();
        let mut candidates: HashMap<String, usize> = HashMap::new();
        for (w, f) in &words {
            let cs: Vec<char> = w.chars().collect();
            for (i, c) in cs.iter().enumerate() {
                chars.insert(c.to_string(), ());
                if i > 0 {
                    chars.insert(format!("{CONTINUATION}{c}"), ());
                }
            }
            for end in 2..=cs.len().min(MAX_PIECE_CHARS) {
                *candidates.entry(cs[..end].iter().collect()).or_default() += f;
            }
            if cs.len() <= MAX_WORD_CHARS && cs.len() > MAX_PIECE_CHARS {
                *candidates.entry(w.clone()).or_default() += f;
            }
            for start in 1..cs.len() {
                for end in start + 2..=cs.len().min(start + MAX_PIECE_CHARS) {
                    let piece: String = cs[start..end].iter().collect();
                    *candidates.entry(format!("{CONTINUATION}{piece}")).or_default() += f;
                }
            }
        }
        let mut pieces: Vec<String> = chars.into_keys().collect();
        let mut ranked: Vec<(String, usize)> = candidates.into_iter().collect();
        ranked.sort_by(|(a, fa), (b, fb)| {
            fb.cmp(fa)
                .then_with(|| b.chars().count().cmp(&a.chars().count()))
                .then_with(|| a.cmp(b))
        });
        let budget = vocab_size.saturating_sub(4);
        if pieces.len() > budget {
            return Err(TokenizerError::Vocab(format!(
                "vocabulary size {vocab_size} cannot hold the {} single-character pieces",
                pieces.len()
            )));
        }
        for (p, _) in ranked {
            if pieces.len() >= budget {
                break;
            }
            pieces.push(p);
        }
        Self::from_pieces(&pieces)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    fn split_word(&self, word: &[char], start: usize, out: &mut Vec<Token>) {
        if word.len() > MAX_WORD_CHARS {
            out.push(Token {
                id: UNK_ID,
                char_start: start,
                char_end: start + word.len(),
            });
            return;
        }
        let mut pieces = Vec::new();
        let mut pos = 0;
        while pos < word.len() {
            let mut found = None;
            for end in (pos + 1..=word.len()).rev() {
                let body: String = word[pos..end].iter().collect();
                let key = if pos == 0 { body } else { format!("{CONTINUATION}{body}") };
                if let Some(id) = self.index.get(&key) {
                    found = Some((*id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(Token {
                        id,
                        char_start: start + pos,
                        char_end: start + end,
                    });
                    pos = end;
                }
                None => {
                    out.push(Token {
                        id: UNK_ID,
                        char_start: start,
                        char_end: start + word.len(),
                    });
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Subword tokens of `text` without `[CLS]`/`[SEP]`.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for (word, start) in pre_tokenize(text) {
            self.split_word(&word, start, &mut out);
        }
        out
    }

    /// One piece per line in id order.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), TokenizerError> {
        for p in &self.vocab {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let mut pieces = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.is_empty() {
                pieces.push(line);
            }
        }
        let expected = [PAD, UNK, CLS, SEP];
        if pieces.len() < 4 || pieces[..4] != expected {
            return Err(TokenizerError::Vocab(format!(
                "vocabulary must start with {expected:?}"
            )));
        }
        let tok = Self::from_pieces(&pieces[4..])?;
        if tok.vocab.len() != pieces.len() {
            return Err(TokenizerError::Vocab("duplicate pieces in vocabulary".into()));
        }
        Ok(tok)
    }
}
