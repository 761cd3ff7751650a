//! Text style transfer with a copy-enriched encoder-decoder trained on
//! cross-entropy plus two reward losses: BLEU-based content preservation
//! (self-critical policy gradient) and classifier-based transfer strength.

pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod optim;
pub mod rewards;
pub mod seed;
pub mod selfcheck;
pub mod seq2seq;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
