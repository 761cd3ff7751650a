use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id mapping. Ids 0..4 are the reserved symbols; corpus tokens start at 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Encoded sentence that always ends with `EOS` and never contains `PAD`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    /// Wraps ids, appending `EOS` if missing.
    pub fn new(mut ids: Vec<usize>) -> Result<Self> {
        if ids.contains(&PAD) {
            return Err(Error::Input("token sequence contains PAD".into()));
        }
        if let Some(pos) = ids.iter().position(|&t| t == EOS) {
            ids.truncate(pos);
        }
        ids.push(EOS);
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// Ids without the closing `EOS`.
    pub fn content(&self) -> &[usize] {
        &self.0[..self.0.len() - 1]
    }

    /// Length including `EOS`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency and then lexically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                let tok = tok.as_ref();
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string())))
    }

    /// Vocabulary from corpus tokens in id order (reserved symbols are prepended).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().filter(|t| !RESERVED.contains(&t.as_str())));
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSeq {
        TokenSeq(
            tokens
                .iter()
                .map(|t| self.id(t.as_ref()))
                .chain(std::iter::once(EOS))
                .collect(),
        )
    }

    /// Tokens up to the first `EOS`, skipping `PAD` and `BOS`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    /// SHA-256 of the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One token per line; line `i` (0-based) holds id `i`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Input(format!(
                "{}: first four lines must be {:?}",
                path.display(),
                RESERVED
            )));
        }
        Ok(Self::from_tokens(
            lines[RESERVED.len()..].iter().map(|s| s.to_string()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn min_freq_filters_and_unknown_maps_to_unk() {
        let v = Vocabulary::build(&[toks("a a b")], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn ordering_is_frequency_then_lexical() {
        let v = Vocabulary::build(&[toks("a b"), toks("b c")], 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["b", "a", "c"]);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(&[toks("zebra")], 1).unwrap();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.token(EOS), "</s>");
        assert_eq!(v.token(BOS), "<s>");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(Vocabulary::build(&empty, 1).is_err());
        assert!(Vocabulary::build(&[Vec::<String>::new()], 1).is_err());
    }

    #[test]
    fn encode_appends_eos_and_decode_stops_there() {
        let v = Vocabulary::build(&[toks("x y")], 1).unwrap();
        let seq = v.encode(&toks("x q y"));
        assert_eq!(seq.ids(), &[4, UNK, 5, EOS]);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), toks("x y"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&[toks("b a b c")], 1).unwrap();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
    }
}
