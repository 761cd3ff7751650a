//! Vocabulary, tokenization, corpus files, batching, and the synthetic style corpus.

mod batch;
mod corpus;
mod synthetic;
mod tokenize;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, sequential_batches, Batch, Padded};
pub use corpus::{
    load_corpus, save_corpus, split_indices, CorpusSplits, ParallelPair, Splits, TextPair, SPLIT_NAMES,
};
pub use synthetic::{
    gen_synthetic_corpus, mixed_register_sentences, synthetic_splits, StyleRules, Template, Templates,
};
pub use tokenize::{detokenize, tokenize, PUNCTUATION};
pub use vocab::{TokenSeq, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use crate::error::Error;

/// Transfer direction between the informal (low) and formal (high) registers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "low2high")]
    LowToHigh,
    #[serde(rename = "high2low")]
    HighToLow,
}

impl Direction {
    /// Style the output should have.
    pub fn target_style(self) -> Style {
        match self {
            Direction::LowToHigh => Style::High,
            Direction::HighToLow => Style::Low,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::LowToHigh => "low2high",
            Direction::HighToLow => "high2low",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "low2high" => Ok(Direction::LowToHigh),
            "high2low" => Ok(Direction::HighToLow),
            other => Err(Error::Config(format!(
                "unknown direction {other:?}, expected low2high or high2low"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Low,
    High,
}

impl Style {
    /// Classifier label: 1.0 for the formal register.
    pub fn label(self) -> f64 {
        match self {
            Style::Low => 0.0,
            Style::High => 1.0,
        }
    }
}
