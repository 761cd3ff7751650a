use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    /// Added to matches and totals for orders above 1 at sentence level.
    pub smoothing: f64,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_order: 4,
            smoothing: 1.0,
        }
    }
}

/// Clipped n-gram matches and candidate n-gram totals per order, plus lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_default() += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn new<T: Eq + Hash>(candidate: &[T], reference: &[T], max_order: usize) -> Self {
        let mut stats = BleuStats {
            matches: vec![0; max_order],
            totals: vec![0; max_order],
            cand_len: candidate.len(),
            ref_len: reference.len(),
        };
        for n in 1..=max_order {
            let refs = ngram_counts(reference, n);
            for (gram, c) in ngram_counts(candidate, n) {
                stats.matches[n - 1] += c.min(refs.get(gram).copied().unwrap_or(0));
            }
            stats.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of precisions times the brevity penalty; orders above 1
    /// get `smoothing` added to numerator and denominator.
    pub fn score(&self, smoothing: f64) -> f64 {
        if self.cand_len == 0 || self.matches.is_empty() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..self.matches.len() {
            let s = if n == 0 { 0.0 } else { smoothing };
            let (m, t) = (self.matches[n] as f64 + s, self.totals[n] as f64 + s);
            if m == 0.0 || t == 0.0 {
                return 0.0;
            }
            log_sum += (m / t).ln();
        }
        let bp = if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / self.matches.len() as f64).exp()
    }
}

/// Smoothed sentence-level BLEU; an empty candidate scores 0.
pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    sentence_bleu_with(candidate, reference, &BleuConfig::default())
}

pub fn sentence_bleu_with<T: Eq + Hash>(candidate: &[T], reference: &[T], cfg: &BleuConfig) -> f64 {
    BleuStats::new(candidate, reference, cfg.max_order).score(cfg.smoothing)
}

/// Unsmoothed corpus BLEU from counts summed over all pairs. A corpus with
/// no candidate n-grams of some order scores 0.
pub fn corpus_bleu<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(
    candidates: &[C],
    references: &[R],
    max_order: usize,
) -> f64 {
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&BleuStats::new(c.as_ref(), r.as_ref(), max_order));
    }
    total.score(0.0)
}
