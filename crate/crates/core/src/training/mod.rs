//! Multi-phase training: cross-entropy warm-up followed by reward phases, with
//! per-phase model selection on the validation overall score.

mod schedule;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use schedule::{schedule_phases, Phase, Schedule, ML_ONLY};

use crate::classifier::StyleClassifier;
use crate::data::{make_batches, Batch, ParallelPair};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, StyleScorer};
use crate::optim::{Adam, AdamConfig};
use crate::rewards::{combined_loss, content_loss, rollout, strength_loss, LossMask, LossTerms, RewardConfig};
use crate::seed;
use crate::seq2seq::Seq2Seq;
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub reward_epochs: usize,
    pub adam: AdamConfig,
    pub rewards: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            warmup_epochs: 10,
            reward_epochs: 5,
            adam: AdamConfig::default(),
            rewards: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup_epochs == 0 || self.reward_epochs == 0 {
            return Err(Error::Config("batch_size and epoch counts must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        self.rewards.validate()
    }
}

/// One epoch's mean loss terms and validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    /// 1-based within the phase.
    pub epoch: usize,
    pub loss_ml: Option<f64>,
    pub loss_cp: Option<f64>,
    pub loss_ts: Option<f64>,
    pub loss: f64,
    pub valid_bleu: f64,
    pub valid_accuracy: Option<f64>,
    pub valid_overall: f64,
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub mask: LossMask,
    pub start_hash: String,
    pub best_epoch: usize,
    pub best_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub phases: Vec<PhaseSummary>,
}

/// Index of the highest score; the earliest wins ties.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Training("no epochs to select from".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Inputs shared by every phase of a run.
pub struct TrainContext<'a> {
    pub train: &'a [ParallelPair],
    pub valid: &'a [ParallelPair],
    pub classifier: Option<&'a StyleClassifier>,
    pub config: &'a TrainConfig,
    pub seed: u64,
    /// Where checkpoints and `history.jsonl` go; nothing is written when `None`.
    pub run_dir: Option<&'a Path>,
    pub vocab_hash: &'a str,
}

struct EpochTotals {
    ml: f64,
    cp: f64,
    ts: f64,
    loss: f64,
    batches: usize,
}

impl<'a> TrainContext<'a> {
    fn validation(&self, model: &Seq2Seq) -> Result<(f64, Option<f64>, f64)> {
        let direction = self.config.rewards.direction;
        match self.classifier {
            Some(clf) => {
                let r = evaluate("valid", model, clf, self.valid, direction)?;
                Ok((r.bleu, Some(r.accuracy), r.overall))
            }
            None => {
                // Without a classifier the selection falls back to BLEU alone.
                let r = evaluate("valid", model, &NoScorer, self.valid, direction)?;
                Ok((r.bleu, None, r.bleu))
            }
        }
    }

    fn batch_step(
        &self,
        model: &mut Seq2Seq,
        opt: &mut Adam,
        batch: &Batch,
        mask: LossMask,
        sample_seed: u64,
        totals: &mut EpochTotals,
    ) -> Result<()> {
        let cfg = &self.config.rewards;
        let greedy = if mask.cp || mask.ts {
            Some(model.greedy(&batch.src, model.config().max_len)?)
        } else {
            None
        };
        let roll = if mask.cp {
            Some(rollout(model, batch, greedy.clone(), sample_seed, &cfg.bleu)?)
        } else {
            None
        };
        let mut g = Graph::new();
        let w = model.bind(&mut g);
        let enc = model.encode(&mut g, &w, &batch.src)?;
        let mut terms = LossTerms::default();
        if mask.ml {
            terms.ml = Some(model.loss_ml_encoded(&mut g, &w, &enc, &batch.tgt)?);
        }
        if let Some(roll) = &roll {
            terms.cp = Some(content_loss(model, &mut g, &w, &enc, roll)?);
        }
        if mask.ts {
            let clf = self.classifier.ok_or_else(|| {
                Error::Config("a transfer-strength phase needs a trained classifier".into())
            })?;
            let greedy = greedy.as_deref().expect("decoded above");
            terms.ts = Some(strength_loss(model, clf, &mut g, &w, &enc, greedy, cfg.direction)?);
        }
        let loss = combined_loss(&mut g, cfg, &terms)?;
        let value = |v: Option<crate::tensor::Var>| v.map_or(Ok(0.0), |v| g.value(v).item());
        totals.ml += value(terms.ml)?;
        totals.cp += value(terms.cp)?;
        totals.ts += value(terms.ts)?;
        totals.loss += g.value(loss).item()?;
        totals.batches += 1;
        let grads = g.backward(loss)?;
        g.accumulate_grads(&grads, model.params_mut());
        opt.step(model.params_mut())?;
        Ok(())
    }

    fn append_history(&self, record: &EpochRecord) -> Result<()> {
        let Some(dir) = self.run_dir else { return Ok(()) };
        let path = dir.join("history.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(record)? + "\n";
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Runs one phase in place, leaving `model` at the phase's best epoch.
    pub fn run_phase(
        &self,
        model: &mut Seq2Seq,
        index: usize,
        phase: &Phase,
        history: &mut History,
    ) -> Result<()> {
        if phase.mask.ts && self.classifier.is_none() {
            return Err(Error::Config(
                "a transfer-strength phase needs a trained classifier".into(),
            ));
        }
        if phase.epochs == 0 {
            return Err(Error::Config(format!("phase {index} has no epochs")));
        }
        let start_hash = model.params().content_hash();
        let mut opt = Adam::new(self.config.adam);
        let phase_seed = seed::derive_indexed(self.seed, "phase", index as u64);
        let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;
        for epoch in 1..=phase.epochs {
            let epoch_seed = seed::derive_indexed(phase_seed, "epoch", epoch as u64);
            let batches = make_batches(self.train, self.config.batch_size, seed::derive(epoch_seed, "shuffle"))?;
            let mut totals = EpochTotals { ml: 0.0, cp: 0.0, ts: 0.0, loss: 0.0, batches: 0 };
            for (i, batch) in batches.iter().enumerate() {
                let sample_seed = seed::derive_indexed(epoch_seed, "sample", i as u64);
                self.batch_step(model, &mut opt, batch, phase.mask, sample_seed, &mut totals)?;
            }
            let n = totals.batches as f64;
            let (bleu, accuracy, score) = self.validation(model)?;
            let record = EpochRecord {
                phase: index,
                epoch,
                loss_ml: phase.mask.ml.then_some(totals.ml / n),
                loss_cp: phase.mask.cp.then_some(totals.cp / n),
                loss_ts: phase.mask.ts.then_some(totals.ts / n),
                loss: totals.loss / n,
                valid_bleu: bleu,
                valid_accuracy: accuracy,
                valid_overall: score,
                params_hash: model.params().content_hash(),
            };
            if let Some(dir) = self.run_dir {
                model.save(&checkpoint_path(dir, index, epoch), self.vocab_hash)?;
            }
            self.append_history(&record)?;
            history.epochs.push(record);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, model.params().clone()));
            }
        }
        let (_, best_epoch, store) = best.expect("at least one epoch");
        model.params_mut().copy_values_from(&store)?;
        history.phases.push(PhaseSummary {
            phase: index,
            mask: phase.mask,
            start_hash,
            best_epoch,
            best_hash: model.params().content_hash(),
        });
        if let Some(dir) = self.run_dir {
            let best_file = dir.join("best");
            let name = checkpoint_name(index, best_epoch);
            fs::write(&best_file, name + "\n").map_err(|e| Error::io(&best_file, e))?;
        }
        Ok(())
    }

    /// Runs `phases` in order, numbering them from `first_index`.
    pub fn run_phases(
        &self,
        model: &mut Seq2Seq,
        phases: &[Phase],
        first_index: usize,
        history: &mut History,
    ) -> Result<()> {
        self.config.validate()?;
        if phases.iter().any(|p| p.mask.ts) && self.classifier.is_none() {
            return Err(Error::Config(
                "schedule has a transfer-strength phase but no classifier was given".into(),
            ));
        }
        if self.train.is_empty() || self.valid.is_empty() {
            return Err(Error::Input("training needs non-empty train and validation sets".into()));
        }
        if let Some(dir) = self.run_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for (i, phase) in phases.iter().enumerate() {
            self.run_phase(model, first_index + i, phase, history)?;
        }
        Ok(())
    }

    /// Trains `model` through every phase of `schedule`.
    pub fn train(&self, model: &mut Seq2Seq, schedule: Schedule) -> Result<History> {
        let phases = schedule.phases(self.config.warmup_epochs, self.config.reward_epochs);
        let mut history = History::default();
        self.run_phases(model, &phases, 0, &mut history)?;
        Ok(history)
    }
}

pub fn checkpoint_name(phase: usize, epoch: usize) -> String {
    format!("ckpt-{phase}-{epoch}")
}

pub fn checkpoint_path(dir: &Path, phase: usize, epoch: usize) -> PathBuf {
    dir.join(checkpoint_name(phase, epoch))
}

/// Checkpoint named by a run directory's `best` pointer.
pub fn best_checkpoint(dir: &Path) -> Result<PathBuf> {
    let pointer = dir.join("best");
    let name = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(dir.join(name.trim()))
}

struct NoScorer;

impl StyleScorer for NoScorer {
    fn score(&self, _: &[usize]) -> Result<f64> {
        Ok(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, TokenSeq};
    use crate::seq2seq::ModelConfig;

    #[test]
    fn select_best_examples() {
        assert_eq!(select_best(&[0.1, 0.3, 0.2]).unwrap(), 1);
        assert_eq!(select_best(&[0.3, 0.3]).unwrap(), 0);
        assert_eq!(select_best(&[0.7]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
    }

    fn toy_pairs(n: usize) -> Vec<ParallelPair> {
        (0..n)
            .map(|i| {
                let a = 4 + i % 5;
                let b = 4 + (i / 5) % 5;
                ParallelPair {
                    source: TokenSeq::new(vec![a, b, 9]).unwrap(),
                    target: TokenSeq::new(vec![a, b, 10]).unwrap(),
                    direction: Direction::LowToHigh,
                }
            })
            .collect()
    }

    fn tiny_model() -> Seq2Seq {
        Seq2Seq::new(
            ModelConfig { vocab_size: 11, emb_dim: 6, hidden_dim: 8, max_len: 6 },
            1,
        )
        .unwrap()
    }

    #[test]
    fn ts_phase_without_classifier_is_a_config_error() {
        let pairs = toy_pairs(10);
        let cfg = TrainConfig { warmup_epochs: 1, reward_epochs: 1, ..TrainConfig::default() };
        let ctx = TrainContext {
            train: &pairs,
            valid: &pairs,
            classifier: None,
            config: &cfg,
            seed: 1,
            run_dir: None,
            vocab_hash: "",
        };
        let err = ctx.train(&mut tiny_model(), Schedule::Ts).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn runs_are_deterministic_and_phases_hand_off_best_weights() {
        let pairs = toy_pairs(25);
        let cfg = TrainConfig {
            batch_size: 8,
            warmup_epochs: 3,
            reward_epochs: 2,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let path = dir.path().join(sub);
            let ctx = TrainContext {
                train: &pairs,
                valid: &pairs[..10],
                classifier: None,
                config: &cfg,
                seed: 3,
                run_dir: Some(&path),
                vocab_hash: "v",
            };
            let mut m = tiny_model();
            let h = ctx.train(&mut m, Schedule::Cp).unwrap();
            (m, h, path)
        };
        let (m1, h1, p1) = run("a");
        let (m2, h2, p2) = run("b");
        assert_eq!(h1, h2);
        assert_eq!(m1.params(), m2.params());
        assert_eq!(fs::read(p1.join("history.jsonl")).unwrap(), fs::read(p2.join("history.jsonl")).unwrap());
        assert_eq!(h1.epochs.len(), 5);
        assert_eq!(h1.phases[1].start_hash, h1.phases[0].best_hash);
        let best = best_checkpoint(&p1).unwrap();
        let loaded = Seq2Seq::load(&best, "v").unwrap();
        assert_eq!(loaded.params().content_hash(), m1.params().content_hash());
        for r in &h1.epochs {
            let w = cfg.rewards;
            let recomputed = w.alpha * r.loss_ml.unwrap_or(0.0)
                + w.beta * r.loss_cp.unwrap_or(0.0)
                + w.gamma * r.loss_ts.unwrap_or(0.0);
            assert!((recomputed - r.loss).abs() < 1e-9);
        }
        let first = h1.epochs.first().unwrap().loss_ml.unwrap();
        let last = h1.epochs[2].loss_ml.unwrap();
        assert!(last < first);
    }
}
