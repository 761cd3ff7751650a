use rand::Rng;

use super::Seq2Seq;
use crate::data::{Padded, BOS, EOS};
use crate::error::Result;
use crate::seed;
use crate::tensor::Graph;

/// Decoded token sequence with its per-step log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, including the closing `EOS` when one was produced.
    pub tokens: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Tokens without the closing `EOS`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Highest-probability index; the lowest id wins ties.
pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; only indices with positive mass can be returned.
pub(crate) fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = p.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 {
            acc += v;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

impl Seq2Seq {
    fn decode_with(
        &self,
        src: &Padded,
        max_len: usize,
        mut choose: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<Hypothesis>> {
        let rows = src.rows();
        let vocab = self.config.vocab_size;
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let enc = self.encode(&mut g, &w, src)?;
        let (mut h, mut c) = (enc.h, enc.c);
        let mut hyps = vec![
            Hypothesis {
                tokens: Vec::new(),
                step_log_probs: Vec::new(),
                log_prob: 0.0,
            };
            rows
        ];
        let mut prev = vec![BOS; rows];
        let mut done = vec![false; rows];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let step = self.decode_step(&mut g, &w, &enc, &prev, h, c)?;
            h = step.h;
            c = step.c;
            let p = g.value(step.p).data();
            for b in 0..rows {
                if done[b] {
                    prev[b] = EOS;
                    continue;
                }
                let dist = &p[b * vocab..(b + 1) * vocab];
                let tok = choose(dist);
                let lp = dist[tok].ln();
                let hyp = &mut hyps[b];
                hyp.tokens.push(tok);
                hyp.step_log_probs.push(lp);
                hyp.log_prob += lp;
                prev[b] = tok;
                done[b] = tok == EOS;
            }
        }
        Ok(hyps)
    }

    /// Argmax decoding for every source row.
    pub fn greedy(&self, src: &Padded, max_len: usize) -> Result<Vec<Hypothesis>> {
        self.decode_with(src, max_len, argmax)
    }

    /// Ancestral sampling; rows draw in order from one stream seeded by `seed`.
    pub fn sample(&self, src: &Padded, max_len: usize, seed: u64) -> Result<Vec<Hypothesis>> {
        let mut rng = seed::rng(seed);
        self.decode_with(src, max_len, |p| draw(p, &mut rng))
    }

    pub fn decode_greedy(&self, source: &[usize], max_len: usize) -> Result<Hypothesis> {
        Ok(self.greedy(&Padded::from_rows(&[source]), max_len)?.remove(0))
    }

    pub fn decode_sample(&self, source: &[usize], max_len: usize, seed: u64) -> Result<Hypothesis> {
        Ok(self.sample(&Padded::from_rows(&[source]), max_len, seed)?.remove(0))
    }
}
