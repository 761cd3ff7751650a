//! Convolutional sentence classifier giving the probability that a sentence is
//! in the formal register.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{mixed_register_sentences, Style, StyleRules, TextPair, Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub filters: usize,
    pub windows: Vec<usize>,
}

impl ClassifierConfig {
    pub fn new(vocab_size: usize) -> Self {
        ClassifierConfig {
            vocab_size,
            emb_dim: 32,
            filters: 16,
            windows: vec![3, 4, 5],
        }
    }

    fn widest(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of replacing each training token with `UNK`, drawn afresh every epoch.
    pub token_dropout: f64,
    pub adam: AdamConfig,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            epochs: 6,
            batch_size: 32,
            token_dropout: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

/// Classifier parameters bound to one graph.
#[derive(Clone, Debug)]
pub struct ClassifierWeights {
    emb: Var,
    convs: Vec<(Var, Var)>,
    out_w: Var,
    out_b: Var,
}

#[derive(Clone, Debug)]
pub struct StyleClassifier {
    config: ClassifierConfig,
    store: ParamStore,
}

impl StyleClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.windows.is_empty() || config.windows.contains(&0) || config.filters == 0 || config.emb_dim == 0 {
            return Err(Error::Config(format!("invalid classifier config {config:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, "classifier-init"));
        let dist = Uniform::new_inclusive(-0.1, 0.1);
        let mut init = |n: usize| -> Vec<f64> { (0..n).map(|_| dist.sample(&mut rng)).collect() };
        let (e, f) = (config.emb_dim, config.filters);
        let mut store = ParamStore::new();
        store.push("emb", Tensor::new(vec![config.vocab_size, e], init(config.vocab_size * e))?);
        for &k in &config.windows {
            store.push(format!("conv{k}_w"), Tensor::new(vec![k * e, f], init(k * e * f))?);
            store.push(format!("conv{k}_b"), Tensor::zeros(&[f]));
        }
        let feats = f * config.windows.len();
        store.push("out_w", Tensor::new(vec![feats, 1], init(feats))?);
        store.push("out_b", Tensor::zeros(&[1]));
        Ok(StyleClassifier { config, store })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind(&self, g: &mut Graph) -> ClassifierWeights {
        let v = g.params(&self.store);
        self.weights_from(v)
    }

    /// Binds the parameters as constants, so no gradient is accumulated for them.
    pub fn bind_frozen(&self, g: &mut Graph) -> ClassifierWeights {
        let v = self.store.iter().map(|(_, t)| g.constant(t.clone())).collect();
        self.weights_from(v)
    }

    fn weights_from(&self, v: Vec<Var>) -> ClassifierWeights {
        let n = self.config.windows.len();
        ClassifierWeights {
            emb: v[0],
            convs: (0..n).map(|i| (v[1 + 2 * i], v[2 + 2 * i])).collect(),
            out_w: v[1 + 2 * n],
            out_b: v[2 + 2 * n],
        }
    }

    /// Logit from `[n, E]` input embeddings; short inputs are padded with `PAD` rows.
    fn logit_embedded(&self, g: &mut Graph, w: &ClassifierWeights, x: Option<Var>) -> Result<Var> {
        let e = self.config.emb_dim;
        let n = x.map_or(0, |x| g.shape(x)[0]);
        let widest = self.config.widest();
        let x = match x {
            Some(x) if n >= widest => x,
            _ => {
                let pad = g.embedding(w.emb, &vec![PAD; widest - n])?;
                match x {
                    Some(x) => g.concat(&[x, pad], 0)?,
                    None => pad,
                }
            }
        };
        let n = n.max(widest);
        let mut pooled = Vec::with_capacity(w.convs.len());
        for (&k, &(cw, cb)) in self.config.windows.iter().zip(&w.convs) {
            let rows = n - k + 1;
            let index = (0..rows)
                .flat_map(|r| (r * e)..((r + k) * e))
                .collect();
            let windows = g.gather(x, index, vec![rows, k * e])?;
            let z = g.matmul(windows, cw)?;
            let z = g.add(z, cb)?;
            let z = g.relu(z);
            pooled.push(g.max_rows(z)?);
        }
        let feats = g.concat(&pooled, 0)?;
        let len = g.shape(feats)[0];
        let feats = g.reshape(feats, vec![1, len])?;
        let z = g.matmul(feats, w.out_w)?;
        let z = g.reshape(z, vec![1])?;
        let z = g.add(z, w.out_b)?;
        g.reshape(z, vec![])
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(bad) => Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    pub fn logit_hard(&self, g: &mut Graph, w: &ClassifierWeights, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let x = if ids.is_empty() {
            None
        } else {
            Some(g.embedding(w.emb, ids)?)
        };
        self.logit_embedded(g, w, x)
    }

    /// Logit for a `[n, V]` sequence of token distributions; each step's input
    /// is the probability-weighted mean of embedding rows.
    pub fn logit_soft(&self, g: &mut Graph, w: &ClassifierWeights, dists: Var) -> Result<Var> {
        let s = g.shape(dists);
        if s.len() != 2 || s[1] != self.config.vocab_size {
            return Err(Error::dim("logit_soft", s, &[self.config.vocab_size]));
        }
        let x = if s[0] == 0 {
            None
        } else {
            Some(g.matmul(dists, w.emb)?)
        };
        self.logit_embedded(g, w, x)
    }

    /// Probability of the formal register for a token sequence (without `EOS`).
    pub fn score_hard(&self, ids: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let z = self.logit_hard(&mut g, &w, ids)?;
        let s = g.sigmoid(z);
        g.value(s).item()
    }

    pub fn score_soft(&self, g: &mut Graph, w: &ClassifierWeights, dists: Var) -> Result<Var> {
        let z = self.logit_soft(g, w, dists)?;
        Ok(g.sigmoid(z))
    }

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        checkpoint::save(
            path,
            CHECKPOINT_KIND,
            vocab_hash,
            serde_json::to_value(&self.config)?,
            &self.store,
        )
    }

    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        let (header, _) = checkpoint::load(path)?;
        let config: ClassifierConfig =
            serde_json::from_value(header.config).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("classifier config: {e}"),
            })?;
        let mut clf = Self::new(config, 0)?;
        checkpoint::load_into(path, CHECKPOINT_KIND, vocab_hash, &mut clf.store)?;
        Ok(clf)
    }
}

/// Fraction of scores on the `target` side of 0.5; exactly 0.5 is never a hit.
pub fn accuracy(scores: &[f64], target: Style) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Input("accuracy of an empty sentence list".into()));
    }
    let hits = scores
        .iter()
        .filter(|&&s| match target {
            Style::High => s > 0.5,
            Style::Low => s < 0.5,
        })
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Token ids (without `EOS`) tagged with their register.
pub type LabeledSentence = (Vec<usize>, Style);

/// Both sides of every pair: sources as informal, targets as formal.
pub fn labeled_sentences(pairs: &[TextPair], vocab: &Vocabulary) -> Vec<LabeledSentence> {
    pairs
        .iter()
        .flat_map(|p| {
            [
                (vocab.encode(&p.source).content().to_vec(), Style::Low),
                (vocab.encode(&p.target).content().to_vec(), Style::High),
            ]
        })
        .collect()
}

/// Every sentence tagged with the same style.
pub fn labeled_as(sentences: &[Vec<String>], style: Style, vocab: &Vocabulary) -> Vec<LabeledSentence> {
    sentences
        .iter()
        .map(|s| (vocab.encode(s).content().to_vec(), style))
        .collect()
}

/// Both sides of every pair, plus mixed-register informal sentences when rewrite
/// rules are known, so that a single surviving informal phrase reads as informal.
pub fn style_corpus(
    pairs: &[TextPair],
    rules: Option<&StyleRules>,
    vocab: &Vocabulary,
    seed: u64,
) -> Vec<LabeledSentence> {
    let mut out = labeled_sentences(pairs, vocab);
    if let Some(rules) = rules {
        out.extend(labeled_as(
            &mixed_register_sentences(pairs, rules, seed),
            Style::Low,
            vocab,
        ));
    }
    out
}

pub fn labeled_accuracy(clf: &StyleClassifier, data: &[LabeledSentence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("accuracy of an empty sentence list".into()));
    }
    let mut hits = 0;
    for (ids, style) in data {
        hits += (accuracy(&[clf.score_hard(ids)?], *style)? == 1.0) as usize;
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHistory {
    pub train_loss: Vec<f64>,
    pub valid_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

fn batch_loss(clf: &StyleClassifier, g: &mut Graph, batch: &[&LabeledSentence]) -> Result<Var> {
    let w = clf.bind(g);
    let mut terms = Vec::with_capacity(batch.len());
    for (ids, style) in batch {
        let z = clf.logit_hard(g, &w, ids)?;
        // Binary cross-entropy: softplus(z) for label 0, softplus(-z) for label 1.
        let signed = g.scale(z, 1.0 - 2.0 * style.label());
        terms.push(g.softplus(signed));
    }
    let stacked = g.stack(&terms, 0)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Binary cross-entropy training; returns the epoch with the best validation
/// accuracy (earliest on ties).
pub fn train_classifier(
    train: &[LabeledSentence],
    valid: &[LabeledSentence],
    config: ClassifierConfig,
    training: &ClassifierTraining,
    seed: u64,
) -> Result<(StyleClassifier, ClassifierHistory)> {
    let has = |s: Style| train.iter().any(|(_, l)| *l == s);
    if !has(Style::Low) || !has(Style::High) {
        return Err(Error::Input("classifier training data must contain both styles".into()));
    }
    if valid.is_empty() || training.batch_size == 0 || training.epochs == 0 {
        return Err(Error::Config(
            "classifier training needs validation data, batch_size ≥ 1 and epochs ≥ 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&training.token_dropout) {
        return Err(Error::Config(format!(
            "token_dropout must lie in [0, 1), got {}",
            training.token_dropout
        )));
    }
    let mut clf = StyleClassifier::new(config, seed)?;
    let mut opt = Adam::new(training.adam);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut history = ClassifierHistory {
        train_loss: Vec::new(),
        valid_accuracy: Vec::new(),
        best_epoch: 0,
    };
    for epoch in 0..training.epochs {
        let mut rng = seed::rng(seed::derive_indexed(seed, "classifier-epoch", epoch as u64));
        let dropped: Vec<LabeledSentence> = train
            .iter()
            .map(|(ids, style)| {
                let ids = ids
                    .iter()
                    .map(|&t| if rng.gen_bool(training.token_dropout) { UNK } else { t })
                    .collect();
                (ids, *style)
            })
            .collect();
        let mut order: Vec<&LabeledSentence> = dropped.iter().collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(training.batch_size) {
            let mut g = Graph::new();
            let loss = batch_loss(&clf, &mut g, chunk)?;
            total += g.value(loss).item()? * chunk.len() as f64;
            let grads = g.backward(loss)?;
            g.accumulate_grads(&grads, &mut clf.store);
            opt.step(&mut clf.store)?;
        }
        history.train_loss.push(total / train.len() as f64);
        let acc = labeled_accuracy(&clf, valid)?;
        history.valid_accuracy.push(acc);
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, clf.store.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, store) = best.expect("at least one epoch");
    clf.store = store;
    Ok((clf, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small(seed: u64) -> StyleClassifier {
        let c = ClassifierConfig {
            vocab_size: 8,
            emb_dim: 3,
            filters: 2,
            windows: vec![2, 3],
        };
        StyleClassifier::new(c, seed).unwrap()
    }

    #[test]
    fn accuracy_threshold_rules() {
        assert!((accuracy(&[0.6, 0.4, 0.51], Style::High).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[0.5, 0.5], Style::High).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.5, 0.5], Style::Low).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.6, 0.4], Style::Low).unwrap(), 0.5);
        assert!(accuracy(&[], Style::Low).is_err());
    }

    #[test]
    fn zero_parameters_score_half() {
        let mut c = small(1);
        c.params_mut().iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        assert_eq!(c.score_hard(&[4, 5, 6]).unwrap(), 0.5);
        assert_eq!(c.score_hard(&[]).unwrap(), 0.5);
    }

    #[test]
    fn flipping_output_sign_complements_score() {
        let mut c = small(2);
        c.params_mut().get_mut(5).data_mut()[0] = 0.3;
        let ids = [4, 7, 5, 6];
        let s = c.score_hard(&ids).unwrap();
        for slot in [5, 6] {
            c.params_mut().get_mut(slot).data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        assert!((s + c.score_hard(&ids).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_score_on_one_hot_equals_hard_score() {
        let c = small(3);
        for ids in [vec![], vec![4], vec![4, 5, 6, 7, 2, 1]] {
            let mut onehot = vec![0.0; ids.len() * 8];
            for (t, &id) in ids.iter().enumerate() {
                onehot[t * 8 + id] = 1.0;
            }
            let mut g = Graph::new();
            let w = c.bind(&mut g);
            let d = g.constant(Tensor::new(vec![ids.len(), 8], onehot).unwrap());
            let s = c.score_soft(&mut g, &w, d).unwrap();
            assert_eq!(g.value(s).item().unwrap(), c.score_hard(&ids).unwrap());
        }
    }

    #[test]
    fn uniform_input_matches_mean_embedding() {
        let c = small(4);
        let mut g = Graph::new();
        let w = c.bind(&mut g);
        let d = g.constant(Tensor::filled(&[3, 8], 1.0 / 8.0));
        let soft = c.score_soft(&mut g, &w, d).unwrap();
        let emb = c.params().get(0).data();
        let mean: Vec<f64> = (0..3).map(|j| (0..8).map(|v| emb[v * 3 + j]).sum::<f64>() / 8.0).collect();
        let x = g.constant(Tensor::new(vec![3, 3], [mean.clone(), mean.clone(), mean].concat()).unwrap());
        let z = c.logit_embedded(&mut g, &w, Some(x)).unwrap();
        let s = g.sigmoid(z);
        assert!((g.value(soft).item().unwrap() - g.value(s).item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn soft_score_gradient_matches_finite_differences() {
        let c = small(5);
        let raw = Tensor::new(vec![4, 8], (0..32).map(|i| 0.05 + ((i * 7) % 11) as f64 / 40.0).collect()).unwrap();
        let report = grad_check(
            |g, d| {
                let w = c.bind(g);
                c.score_soft(g, &w, d)
            },
            &raw,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().take(3).collect::<Vec<_>>());
    }

    fn toy_data(n: usize, flip: bool) -> Vec<LabeledSentence> {
        (0..n)
            .map(|i| {
                let high = i % 2 == 0;
                let marker = if high { 4 } else { 5 };
                let ids = vec![6 + i % 2, marker, 7, 6];
                let style = if high != flip { Style::High } else { Style::Low };
                (ids, style)
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_learns_markers() {
        let cfg = ClassifierConfig::new(8);
        let t = ClassifierTraining {
            epochs: 4,
            batch_size: 8,
            token_dropout: 0.0,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        };
        let data = toy_data(64, false);
        let (a, h) = train_classifier(&data, &data, cfg.clone(), &t, 9).unwrap();
        let (b, _) = train_classifier(&data, &data, cfg.clone(), &t, 9).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(h.valid_accuracy[h.best_epoch], 1.0);
        assert_eq!(labeled_accuracy(&a, &toy_data(64, true)).unwrap(), 0.0);
        let single: Vec<LabeledSentence> = data.iter().filter(|d| d.1 == Style::High).cloned().collect();
        assert!(train_classifier(&single, &data, cfg, &t, 9).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = small(6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p, "v").unwrap();
        let back = StyleClassifier::load(&p, "v").unwrap();
        assert_eq!(back.params(), c.params());
        assert_eq!(back.score_hard(&[4, 5]).unwrap(), c.score_hard(&[4, 5]).unwrap());
    }
}
