//! Attention encoder-decoder whose output mixes a vocabulary softmax with a
//! pointer distribution over source positions.

mod decode;
mod network;

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use decode::Hypothesis;
pub use network::{DecodeStep, Encoded, Weights};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_KIND: &str = "seq2seq";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    /// Decoding stops after this many tokens even without `EOS`.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            emb_dim: 32,
            hidden_dim: 64,
            max_len: 20,
        }
    }
}

/// Parameter layout, in slot order.
fn layout(c: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (v, e, h) = (c.vocab_size, c.emb_dim, c.hidden_dim);
    vec![
        ("src_emb", vec![v, e]),
        ("tgt_emb", vec![v, e]),
        ("enc_w", vec![e + h, 4 * h]),
        ("enc_b", vec![4 * h]),
        ("dec_w", vec![e + h, 4 * h]),
        ("dec_b", vec![4 * h]),
        ("attn_w", vec![h, h]),
        ("out_w", vec![2 * h, v]),
        ("out_b", vec![v]),
        ("gate_w", vec![2 * h + e, 1]),
        ("gate_b", vec![1]),
    ]
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: ModelConfig,
    store: ParamStore,
    gate_override: Option<f64>,
}

impl Seq2Seq {
    /// Weights uniform in `[-0.1, 0.1]`, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < crate::data::RESERVED.len() + 1
            || config.emb_dim == 0
            || config.hidden_dim == 0
            || config.max_len == 0
        {
            return Err(Error::Config(format!("invalid model config {config:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, "seq2seq-init"));
        let dist = Uniform::new_inclusive(-0.1, 0.1);
        let mut store = ParamStore::new();
        for (name, shape) in layout(&config) {
            let n = shape.iter().product();
            let data = if name.ends_with("_b") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            store.push(name, Tensor::new(shape, data)?);
        }
        Ok(Seq2Seq {
            config,
            store,
            gate_override: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Fixes the mixing gate to a constant in `[0, 1]`; `None` restores the learned gate.
    pub fn set_gate_override(&mut self, value: Option<f64>) -> Result<()> {
        if let Some(v) = value {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("gate override {v} outside [0, 1]")));
            }
        }
        self.gate_override = value;
        Ok(())
    }

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        checkpoint::save(
            path,
            CHECKPOINT_KIND,
            vocab_hash,
            serde_json::to_value(self.config)?,
            &self.store,
        )
    }

    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        let (header, _) = checkpoint::load(path)?;
        let config: ModelConfig =
            serde_json::from_value(header.config).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("model config: {e}"),
            })?;
        let mut model = Self::new(config, 0)?;
        checkpoint::load_into(path, CHECKPOINT_KIND, vocab_hash, &mut model.store)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Seq2Seq::new(ModelConfig::new(12), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p, "h").unwrap();
        let back = Seq2Seq::load(&p, "h").unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params().content_hash(), m.params().content_hash());
        assert!(Seq2Seq::load(&p, "other").is_err());
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::new(12);
        let a = Seq2Seq::new(c, 1).unwrap();
        assert_eq!(a.params(), Seq2Seq::new(c, 1).unwrap().params());
        assert_ne!(a.params(), Seq2Seq::new(c, 2).unwrap().params());
        assert!(Seq2Seq::new(ModelConfig::new(3), 1).is_err());
    }
}
