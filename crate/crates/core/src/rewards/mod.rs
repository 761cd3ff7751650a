//! BLEU and the reward-driven losses: a self-critical content-preservation
//! term and a classifier-driven transfer-strength term.

mod bleu;

pub use bleu::{corpus_bleu, sentence_bleu, sentence_bleu_with, BleuConfig, BleuStats};

use serde::{Deserialize, Serialize};

use crate::classifier::StyleClassifier;
use crate::data::{Batch, Direction, Padded, EOS};
use crate::error::{Error, Result};
use crate::seq2seq::{Encoded, Hypothesis, Seq2Seq, Weights};
use crate::tensor::{Graph, Tensor, Var};

/// Bounds on the classifier score before taking its log.
pub const SCORE_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Weight of the content-preservation term.
    pub beta: f64,
    /// Weight of the transfer-strength term.
    pub gamma: f64,
    pub direction: Direction,
    pub bleu: BleuConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 1.0,
            beta: 0.125,
            gamma: 1.0,
            direction: Direction::LowToHigh,
            bleu: BleuConfig::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a finite value ≥ 0, got {w}")));
            }
        }
        if self.bleu.max_order == 0 {
            return Err(Error::Config("BLEU max order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Content tokens of a padded row (trailing `EOS` removed).
pub fn row_content(rows: &Padded, b: usize) -> &[usize] {
    let row = rows.row(b);
    match row.last() {
        Some(&EOS) => &row[..row.len() - 1],
        _ => row,
    }
}

/// Sampled and greedy decodes with their BLEU rewards against the references.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub samples: Vec<Hypothesis>,
    pub greedy: Vec<Hypothesis>,
    pub sample_rewards: Vec<f64>,
    pub greedy_rewards: Vec<f64>,
}

impl Rollout {
    /// Per-sentence policy weights `r(greedy) - r(sample)`.
    pub fn advantages(&self) -> Vec<f64> {
        self.greedy_rewards
            .iter()
            .zip(&self.sample_rewards)
            .map(|(g, s)| g - s)
            .collect()
    }
}

pub fn rewards(hyps: &[Hypothesis], refs: &Padded, cfg: &BleuConfig) -> Vec<f64> {
    hyps.iter()
        .enumerate()
        .map(|(b, h)| sentence_bleu_with(h.content(), row_content(refs, b), cfg))
        .collect()
}

/// Samples and greedily decodes every source row, without recording gradients.
pub fn rollout(
    model: &Seq2Seq,
    batch: &Batch,
    greedy: Option<Vec<Hypothesis>>,
    seed: u64,
    cfg: &BleuConfig,
) -> Result<Rollout> {
    let max_len = model.config().max_len;
    let samples = model.sample(&batch.src, max_len, seed)?;
    let greedy = match greedy {
        Some(g) => g,
        None => model.greedy(&batch.src, max_len)?,
    };
    Ok(Rollout {
        sample_rewards: rewards(&samples, &batch.tgt, cfg),
        greedy_rewards: rewards(&greedy, &batch.tgt, cfg),
        samples,
        greedy,
    })
}

/// Batch mean of `weight_b * sum_t log P(sequence_b[t])`, with the sequences
/// teacher-forced through the decoder and the weights held constant.
pub fn weighted_log_likelihood(
    model: &Seq2Seq,
    g: &mut Graph,
    w: &Weights,
    enc: &Encoded,
    sequences: &[Vec<usize>],
    weights: &[f64],
) -> Result<Var> {
    if sequences.len() != enc.rows() || weights.len() != enc.rows() {
        return Err(Error::dim(
            "weighted_log_likelihood",
            &[enc.rows()],
            &[sequences.len(), weights.len()],
        ));
    }
    let rows = Padded::from_rows(sequences);
    let steps = model.teacher_force(g, w, enc, &rows)?;
    let lp = model.sequence_log_probs(g, &steps, &rows)?;
    let weights = g.constant(Tensor::vector(weights.to_vec()));
    let weighted = g.mul(lp, weights)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / enc.rows() as f64))
}

/// Self-critical content loss for a finished rollout.
pub fn content_loss(
    model: &Seq2Seq,
    g: &mut Graph,
    w: &Weights,
    enc: &Encoded,
    rollout: &Rollout,
) -> Result<Var> {
    let samples: Vec<Vec<usize>> = rollout.samples.iter().map(|h| h.tokens.clone()).collect();
    weighted_log_likelihood(model, g, w, enc, &samples, &rollout.advantages())
}

/// Samples with `seed`, decodes greedily, and returns the content loss on a fresh binding.
pub fn loss_cp(model: &Seq2Seq, g: &mut Graph, batch: &Batch, seed: u64, cfg: &BleuConfig) -> Result<Var> {
    let roll = rollout(model, batch, None, seed, cfg)?;
    let w = model.bind(g);
    let enc = model.encode(g, &w, &batch.src)?;
    content_loss(model, g, &w, &enc, &roll)
}

/// `-log s` toward the formal register, `-log(1 - s)` toward the informal one,
/// with `s` clamped to [`SCORE_CLAMP`].
pub fn strength_from_score(g: &mut Graph, score: Var, direction: Direction) -> Result<Var> {
    let s = g.clamp(score, SCORE_CLAMP.0, SCORE_CLAMP.1);
    let p = match direction {
        Direction::LowToHigh => s,
        Direction::HighToLow => g.affine(s, -1.0, 1.0),
    };
    let l = g.log(p)?;
    Ok(g.neg(l))
}

/// Transfer-strength loss on the greedy decodes: the decoder's step
/// distributions along each greedy path are scored by the soft classifier.
pub fn strength_loss(
    model: &Seq2Seq,
    clf: &StyleClassifier,
    g: &mut Graph,
    w: &Weights,
    enc: &Encoded,
    greedy: &[Hypothesis],
    direction: Direction,
) -> Result<Var> {
    let rows = enc.rows();
    if greedy.len() != rows {
        return Err(Error::dim("strength_loss", &[rows], &[greedy.len()]));
    }
    let vocab = model.config().vocab_size;
    let seqs: Vec<&[usize]> = greedy.iter().map(|h| h.tokens.as_slice()).collect();
    let paths = Padded::from_rows(&seqs);
    let steps = model.teacher_force(g, w, enc, &paths)?;
    let dists: Vec<Var> = steps.iter().map(|s| s.p).collect();
    let all = g.stack(&dists, 0)?;
    let cw = clf.bind_frozen(g);
    let mut losses = Vec::with_capacity(rows);
    for (b, hyp) in greedy.iter().enumerate() {
        let n = hyp.content().len();
        let index = (0..n)
            .flat_map(|t| {
                let base = (t * rows + b) * vocab;
                base..base + vocab
            })
            .collect();
        let d = g.gather(all, index, vec![n, vocab])?;
        let s = clf.score_soft(g, &cw, d)?;
        losses.push(strength_from_score(g, s, direction)?);
    }
    let stacked = g.stack(&losses, 0)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// Greedy-decodes `batch` and returns the transfer-strength loss on a fresh binding.
pub fn loss_ts(
    model: &Seq2Seq,
    clf: &StyleClassifier,
    g: &mut Graph,
    batch: &Batch,
    direction: Direction,
) -> Result<Var> {
    let greedy = model.greedy(&batch.src, model.config().max_len)?;
    let w = model.bind(g);
    let enc = model.encode(g, &w, &batch.src)?;
    strength_loss(model, clf, g, &w, &enc, &greedy, direction)
}

/// Which loss terms a training phase uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub ml: bool,
    pub cp: bool,
    pub ts: bool,
}

/// Computed loss terms; `None` for inactive ones.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub ml: Option<Var>,
    pub cp: Option<Var>,
    pub ts: Option<Var>,
}

/// `alpha * ml + beta * cp + gamma * ts` over the terms present.
pub fn combined_loss(g: &mut Graph, cfg: &RewardConfig, terms: &LossTerms) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for (term, weight) in [(terms.ml, cfg.alpha), (terms.cp, cfg.beta), (terms.ts, cfg.gamma)] {
        if let Some(v) = term {
            parts.push(g.scale(v, weight));
        }
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let stacked = g.stack(&parts, 0)?;
    Ok(g.sum(stacked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::data::{ParallelPair, TokenSeq};
    use crate::seq2seq::ModelConfig;
    use crate::tensor::grad_check_params;

    fn model(seed: u64) -> Seq2Seq {
        let c = ModelConfig {
            vocab_size: 9,
            emb_dim: 3,
            hidden_dim: 4,
            max_len: 5,
        };
        Seq2Seq::new(c, seed).unwrap()
    }

    fn batch() -> Batch {
        let pairs = [
            (vec![4, 5, 6], vec![4, 5, 6, 7]),
            (vec![8, 7], vec![8]),
        ]
        .map(|(s, t)| ParallelPair {
            source: TokenSeq::new(s).unwrap(),
            target: TokenSeq::new(t).unwrap(),
            direction: Direction::LowToHigh,
        });
        Batch::from_pairs(&pairs.iter().collect::<Vec<_>>())
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn combined_weights() {
        let cfg = RewardConfig::default();
        let mut g = Graph::new();
        let ml = g.constant(Tensor::scalar(2.0));
        let cp = g.constant(Tensor::scalar(4.0));
        let only_ml = combined_loss(&mut g, &cfg, &LossTerms { ml: Some(ml), ..Default::default() }).unwrap();
        assert_eq!(scalar(&g, only_ml), 2.0);
        let both = combined_loss(&mut g, &cfg, &LossTerms { ml: Some(ml), cp: Some(cp), ts: None }).unwrap();
        assert_eq!(scalar(&g, both), 2.5);
        let zero = RewardConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..cfg };
        let z = combined_loss(&mut g, &zero, &LossTerms { ml: Some(ml), cp: Some(cp), ts: Some(cp) }).unwrap();
        assert_eq!(scalar(&g, z), 0.0);
        assert!(RewardConfig { beta: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn strength_loss_values_and_clamp() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::scalar(0.5));
        for d in [Direction::LowToHigh, Direction::HighToLow] {
            let l = strength_from_score(&mut g, half, d).unwrap();
            assert!((scalar(&g, l) - 2f64.ln()).abs() < 1e-12);
        }
        let one = g.constant(Tensor::scalar(1.0));
        let up = strength_from_score(&mut g, one, Direction::LowToHigh).unwrap();
        assert!(scalar(&g, up) < 1e-5);
        let down = strength_from_score(&mut g, one, Direction::HighToLow).unwrap();
        assert!((scalar(&g, down) - 1e6f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn worked_content_loss_example() {
        // r(greedy) = 0.5, r(sample) = 0.7, sum log p = -10 gives +2.0.
        let mut g = Graph::new();
        let lp = g.constant(Tensor::vector(vec![-10.0]));
        let adv = g.constant(Tensor::vector(vec![0.5 - 0.7]));
        let l = g.mul(lp, adv).unwrap();
        let l = g.sum(l);
        assert!((scalar(&g, l) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_rewards_give_zero_content_loss() {
        let m = model(1);
        let b = batch();
        let mut g = Graph::new();
        let w = m.bind(&mut g);
        let enc = m.encode(&mut g, &w, &b.src).unwrap();
        let mut roll = rollout(&m, &b, None, 3, &BleuConfig::default()).unwrap();
        roll.greedy_rewards = roll.sample_rewards.clone();
        let l = content_loss(&m, &mut g, &w, &enc, &roll).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn content_loss_gradient_with_frozen_rewards() {
        let m = model(2);
        let b = batch();
        let roll = rollout(&m, &b, None, 5, &BleuConfig::default()).unwrap();
        let samples: Vec<Vec<usize>> = roll.samples.iter().map(|h| h.tokens.clone()).collect();
        let report = grad_check_params(
            |g, store| {
                let mut local = m.clone();
                local.params_mut().copy_values_from(store)?;
                let w = local.bind(g);
                let enc = local.encode(g, &w, &b.src)?;
                weighted_log_likelihood(&local, g, &w, &enc, &samples, &[0.3, -0.7])
            },
            m.params(),
            1e-5,
            1e-3,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().take(3).collect::<Vec<_>>());
    }

    #[test]
    fn strength_loss_gradient_matches_finite_differences() {
        let m = model(3);
        let clf = crate::classifier::StyleClassifier::new(
            ClassifierConfig { vocab_size: 9, emb_dim: 3, filters: 2, windows: vec![2, 3] },
            4,
        )
        .unwrap();
        let b = batch();
        let greedy = m.greedy(&b.src, 5).unwrap();
        let report = grad_check_params(
            |g, store| {
                let mut local = m.clone();
                local.params_mut().copy_values_from(store)?;
                let w = local.bind(g);
                let enc = local.encode(g, &w, &b.src)?;
                strength_loss(&local, &clf, g, &w, &enc, &greedy, Direction::HighToLow)
            },
            m.params(),
            1e-5,
            1e-3,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().take(3).collect::<Vec<_>>());
    }

    #[test]
    fn convenience_losses_are_finite() {
        let m = model(4);
        let clf = crate::classifier::StyleClassifier::new(ClassifierConfig::new(9), 1).unwrap();
        let b = batch();
        let mut g = Graph::new();
        let cp = loss_cp(&m, &mut g, &b, 1, &BleuConfig::default()).unwrap();
        let ts = loss_ts(&m, &clf, &mut g, &b, Direction::LowToHigh).unwrap();
        assert!(scalar(&g, cp).is_finite() && scalar(&g, ts) > 0.0);
    }
}
