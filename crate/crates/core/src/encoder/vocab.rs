use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{ensure, Error, Result};

pub const PAD: &str = "<pad>";
pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";
const SPECIALS: [&str; 4] = [PAD, CLS, SEP, UNK];

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Dense token↔id map; ids `0..4` are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Split on whitespace, then break every non-alphanumeric character out
/// into its own token. No case folding.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

impl Vocabulary {
    /// The `max_size` most frequent surface tokens (specials included in the
    /// count); ties break lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        ensure!(
            max_size >= SPECIALS.len(),
            Validation,
            "vocabulary size {max_size} cannot hold the {} special tokens",
            SPECIALS.len()
        );
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in split_tokens(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for s in SPECIALS {
            counts.remove(s);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t))
                .collect(),
        )
    }

    pub fn from_corpora(corpora: &[&Corpus], max_size: usize) -> Result<Self> {
        ensure!(!corpora.is_empty(), Validation, "no corpora to build a vocabulary from");
        Self::build(
            corpora.iter().flat_map(|c| c.records.iter().map(|r| r.text.as_str())),
            max_size,
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        ensure!(
            tokens.len() >= SPECIALS.len() && tokens[..4].iter().zip(SPECIALS).all(|(a, b)| a == b),
            Validation,
            "vocabulary must start with the special tokens {SPECIALS:?}"
        );
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS] + tokens`, truncated to `max_len` and PAD-extended to it.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        for tok in split_tokens(text) {
            if ids.len() == max_len {
                break;
            }
            ids.push(self.id(&tok).unwrap_or(UNK_ID));
        }
        ids.truncate(max_len.max(1));
        let real = ids.len();
        ids.resize(max_len.max(real), PAD_ID);
        let mask = (0..ids.len()).map(|i| u8::from(i < real)).collect();
        TokenSequence {
            ids,
            mask,
            cls_index: 0,
        }
    }

    /// Surface strings for a sequence's real (unmasked) positions.
    pub fn surface(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids[..seq.real_len()]
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub cls_index: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// The same sequence without its trailing PAD positions.
    pub fn trimmed(&self) -> TokenSequence {
        let n = self.real_len();
        TokenSequence {
            ids: self.ids[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
            cls_index: self.cls_index,
        }
    }

    /// Extend with `extra` PAD positions.
    pub fn padded(&self, extra: usize) -> TokenSequence {
        let mut s = self.clone();
        s.ids.extend(std::iter::repeat_n(PAD_ID, extra));
        s.mask.extend(std::iter::repeat_n(0, extra));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_frequency_then_lexicographically() {
        let v = Vocabulary::build(["a b a"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(&v.tokens()[4..], &["a".to_string(), "b".to_string()]);

        let v = Vocabulary::build(["zeta alpha"], 10).unwrap();
        assert!(v.id("alpha").unwrap() < v.id("zeta").unwrap());

        let texts = ["x y z x", "y q"];
        assert_eq!(Vocabulary::build(texts, 8).unwrap(), Vocabulary::build(texts, 8).unwrap());
        assert!(Vocabulary::build(texts, 3).is_err());
    }

    #[test]
    fn build_respects_max_size() {
        let v = Vocabulary::build(["a a a b b c"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn tokenize_pads_and_masks() {
        let v = Vocabulary::build(["hello world"], 10).unwrap();
        let s = v.tokenize("hello world", 8);
        let (h, w) = (v.id("hello").unwrap(), v.id("world").unwrap());
        assert_eq!(s.ids, vec![CLS_ID, h, w, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(s.mask, vec![1, 1, 1, 0, 0, 0, 0, 0]);
        assert_eq!(s.cls_index, 0);
    }

    #[test]
    fn tokenize_truncates_and_uses_unk() {
        let v = Vocabulary::build(["a b c d e f g h"], 20).unwrap();
        let s = v.tokenize("a b c d e f g h", 4);
        assert_eq!(s.len(), 4);
        assert!(s.mask.iter().all(|&m| m == 1));
        let s = v.tokenize("a mystery", 4);
        assert_eq!(s.ids[2], UNK_ID);
    }

    #[test]
    fn punctuation_splits_off() {
        assert_eq!(split_tokens("hi, you!!"), vec!["hi", ",", "you", "!", "!"]);
        assert_eq!(split_tokens("  don't  "), vec!["don", "'", "t"]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["één twee drie één"], 50).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
