use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::tokenize::{detokenize, tokenize};
use super::vocab::{TokenSeq, Vocabulary};
use super::Direction;
use crate::error::{Error, Result};
use crate::seed;

/// Tokenized sentence pair before id lookup. `source` is informal, `target` formal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl TextPair {
    /// (input, output) tokens for `direction`.
    pub fn oriented(&self, direction: Direction) -> (&[String], &[String]) {
        match direction {
            Direction::LowToHigh => (&self.source, &self.target),
            Direction::HighToLow => (&self.target, &self.source),
        }
    }
}

/// Encoded training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub direction: Direction,
}

impl ParallelPair {
    pub fn encode(pair: &TextPair, vocab: &Vocabulary, direction: Direction) -> Self {
        let (src, tgt) = pair.oriented(direction);
        ParallelPair {
            source: vocab.encode(src),
            target: vocab.encode(tgt),
            direction,
        }
    }

    pub fn encode_all(pairs: &[TextPair], vocab: &Vocabulary, direction: Direction) -> Vec<Self> {
        pairs
            .iter()
            .map(|p| Self::encode(p, vocab, direction))
            .collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Reads line-aligned `.src`/`.tgt` files.
pub fn load_corpus(src: &Path, tgt: &Path) -> Result<Vec<TextPair>> {
    let sources = read_lines(src)?;
    let targets = read_lines(tgt)?;
    if sources.len() != targets.len() {
        return Err(Error::Input(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src.display(),
            sources.len(),
            tgt.display(),
            targets.len()
        )));
    }
    Ok(sources
        .into_iter()
        .zip(targets)
        .map(|(source, target)| TextPair { source, target })
        .collect())
}

pub fn save_corpus(pairs: &[TextPair], src: &Path, tgt: &Path) -> Result<()> {
    let join = |side: fn(&TextPair) -> &Vec<String>| {
        pairs
            .iter()
            .map(|p| detokenize(side(p)) + "\n")
            .collect::<String>()
    };
    fs::write(src, join(|p| &p.source)).map_err(|e| Error::io(src, e))?;
    fs::write(tgt, join(|p| &p.target)).map_err(|e| Error::io(tgt, e))
}

/// Train/validation/test index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` by `seed` and cuts it into consecutive blocks.
pub fn split_indices(n: usize, n_valid: usize, n_test: usize, seed: u64) -> Result<Splits> {
    if n_valid + n_test >= n {
        return Err(Error::Input(format!(
            "{n} examples cannot hold {n_valid} validation and {n_test} test examples plus training data"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let test = idx.split_off(n - n_test);
    let valid = idx.split_off(n - n_test - n_valid);
    Ok(Splits {
        train: idx,
        valid,
        test,
    })
}

/// Train, validation and test pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Vec<TextPair>,
    pub valid: Vec<TextPair>,
    pub test: Vec<TextPair>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

impl CorpusSplits {
    /// Cuts `pairs` into consecutive train/validation/test blocks.
    pub fn contiguous(mut pairs: Vec<TextPair>, n_valid: usize, n_test: usize) -> Result<Self> {
        if n_valid + n_test >= pairs.len() {
            return Err(Error::Input(format!(
                "{} pairs cannot hold {n_valid} validation and {n_test} test pairs plus training data",
                pairs.len()
            )));
        }
        let test = pairs.split_off(pairs.len() - n_test);
        let valid = pairs.split_off(pairs.len() - n_valid);
        Ok(CorpusSplits { train: pairs, valid, test })
    }

    pub fn get(&self, name: &str) -> Option<&[TextPair]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Vocabulary over both sides of the training split.
    pub fn vocabulary(&self, min_freq: usize) -> Result<Vocabulary> {
        let sentences: Vec<&Vec<String>> = self
            .train
            .iter()
            .flat_map(|p| [&p.source, &p.target])
            .collect();
        let owned: Vec<Vec<&str>> = sentences
            .iter()
            .map(|s| s.iter().map(String::as_str).collect())
            .collect();
        Vocabulary::build(&owned, min_freq)
    }

    /// Writes `<split>.src` / `<split>.tgt` for every split into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in SPLIT_NAMES {
            let pairs = self.get(name).expect("known split");
            save_corpus(pairs, &dir.join(format!("{name}.src")), &dir.join(format!("{name}.tgt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| {
            load_corpus(&dir.join(format!("{name}.src")), &dir.join(format!("{name}.tgt")))
        };
        Ok(CorpusSplits {
            train: load("train")?,
            valid: load("valid")?,
            test: load("test")?,
        })
    }
}
