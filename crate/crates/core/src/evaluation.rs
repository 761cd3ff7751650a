//! Corpus BLEU, classifier accuracy, their combined score, and report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, StyleClassifier};
use crate::data::{Direction, Padded, ParallelPair};
use crate::error::{Error, Result};
use crate::rewards::corpus_bleu;
use crate::seq2seq::Seq2Seq;

/// `bleu * accuracy / (bleu + accuracy)`, with `overall(0, 0) = 0`.
pub fn overall(bleu: f64, accuracy: f64) -> Result<f64> {
    for (name, v) in [("bleu", bleu), ("accuracy", accuracy)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("{name} {v} outside [0, 1]")));
        }
    }
    if bleu + accuracy == 0.0 {
        return Ok(0.0);
    }
    Ok(bleu * accuracy / (bleu + accuracy))
}

/// Anything that rewrites token sequences (ids without `EOS`, `EOS`-terminated input).
pub trait TransferModel {
    fn transfer(&self, sources: &[&[usize]]) -> Result<Vec<Vec<usize>>>;
}

/// Anything that scores a sentence's probability of being formal.
pub trait StyleScorer {
    fn score(&self, ids: &[usize]) -> Result<f64>;
}

const DECODE_BATCH: usize = 64;

impl TransferModel for Seq2Seq {
    fn transfer(&self, sources: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(DECODE_BATCH) {
            let hyps = self.greedy(&Padded::from_rows(chunk), self.config().max_len)?;
            out.extend(hyps.iter().map(|h| h.content().to_vec()));
        }
        Ok(out)
    }
}

impl StyleScorer for StyleClassifier {
    fn score(&self, ids: &[usize]) -> Result<f64> {
        self.score_hard(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub output: Vec<usize>,
    pub reference: Vec<usize>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub direction: Direction,
    pub bleu: f64,
    pub accuracy: f64,
    pub overall: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sentences: Vec<SentenceResult>,
}

/// Greedy-decodes every source and scores outputs against references and the classifier.
pub fn evaluate(
    name: &str,
    model: &dyn TransferModel,
    scorer: &dyn StyleScorer,
    pairs: &[ParallelPair],
    direction: Direction,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty test set".into()));
    }
    let sources: Vec<&[usize]> = pairs.iter().map(|p| p.source.ids()).collect();
    let outputs = model.transfer(&sources)?;
    let references: Vec<&[usize]> = pairs.iter().map(|p| p.target.content()).collect();
    let bleu = corpus_bleu(&outputs, &references, 4);
    let scores = outputs
        .iter()
        .map(|o| scorer.score(o))
        .collect::<Result<Vec<f64>>>()?;
    let acc = accuracy(&scores, direction.target_style())?;
    let sentences = outputs
        .into_iter()
        .zip(references)
        .zip(&scores)
        .map(|((output, reference), &score)| SentenceResult {
            output,
            reference: reference.to_vec(),
            score,
        })
        .collect();
    Ok(MetricsReport {
        model: name.to_string(),
        direction,
        bleu,
        accuracy: acc,
        overall: overall(bleu, acc)?,
        sentences,
    })
}

/// Human- and machine-readable renderings of several reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub text: String,
    pub csv: String,
    pub json: String,
}

/// One row per report; the best value of each column within a direction is starred.
pub fn compare(reports: &[MetricsReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::Input("nothing to compare".into()));
    }
    let best = |dir: Direction, f: fn(&MetricsReport) -> f64| {
        reports
            .iter()
            .filter(|r| r.direction == dir)
            .map(f)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut text = format!(
        "{:<width$}  {:<9}  {:>7}  {:>9}  {:>8}\n",
        "model", "direction", "bleu", "accuracy", "overall"
    );
    let mut csv = String::from("model,bleu,accuracy,overall,direction\n");
    let cols: [fn(&MetricsReport) -> f64; 3] = [|r| r.bleu, |r| r.accuracy, |r| r.overall];
    for r in reports {
        let cells: Vec<String> = cols
            .iter()
            .map(|f| {
                let mark = if f(r) == best(r.direction, *f) { "*" } else { " " };
                format!("{:.4}{mark}", f(r))
            })
            .collect();
        writeln!(
            text,
            "{:<width$}  {:<9}  {:>7}  {:>9}  {:>8}",
            r.model, r.direction, cells[0], cells[1], cells[2]
        )
        .expect("write to string");
        writeln!(csv, "{},{},{},{},{}", r.model, r.bleu, r.accuracy, r.overall, r.direction)
            .expect("write to string");
    }
    let rows: Vec<MetricsReport> = reports
        .iter()
        .map(|r| MetricsReport {
            sentences: Vec::new(),
            ..r.clone()
        })
        .collect();
    Ok(Comparison {
        text,
        csv,
        json: serde_json::to_string_pretty(&rows)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenSeq;
    use proptest::prelude::*;

    struct Copy;
    impl TransferModel for Copy {
        fn transfer(&self, sources: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
            Ok(sources.iter().map(|s| s[..s.len() - 1].to_vec()).collect())
        }
    }

    struct Constant(f64);
    impl StyleScorer for Constant {
        fn score(&self, _: &[usize]) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn identity_pairs() -> Vec<ParallelPair> {
        [vec![4, 5, 6, 7], vec![8, 9, 4, 5, 6]]
            .into_iter()
            .map(|ids| ParallelPair {
                source: TokenSeq::new(ids.clone()).unwrap(),
                target: TokenSeq::new(ids).unwrap(),
                direction: Direction::LowToHigh,
            })
            .collect()
    }

    fn report(model: &str, bleu: f64, acc: f64) -> MetricsReport {
        MetricsReport {
            model: model.into(),
            direction: Direction::LowToHigh,
            bleu,
            accuracy: acc,
            overall: overall(bleu, acc).unwrap(),
            sentences: Vec::new(),
        }
    }

    #[test]
    fn published_rows() {
        assert!((overall(0.286, 0.723).unwrap() - 0.205).abs() < 5e-4);
        assert!((overall(0.263, 0.774).unwrap() - 0.196).abs() < 5e-4);
        assert_eq!(overall(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(overall(0.0, 0.4).unwrap(), 0.0);
        assert!(overall(1.2, 0.5).is_err());
    }

    #[test]
    fn stubs_give_degenerate_scores() {
        let r = evaluate("copy", &Copy, &Constant(1.0), &identity_pairs(), Direction::LowToHigh).unwrap();
        assert_eq!(r.bleu, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.overall, overall(r.bleu, r.accuracy).unwrap());
        let low = evaluate("copy", &Copy, &Constant(1.0), &identity_pairs(), Direction::HighToLow).unwrap();
        assert_eq!(low.accuracy, 0.0);
        assert!(evaluate("copy", &Copy, &Constant(1.0), &[], Direction::LowToHigh).is_err());
    }

    #[test]
    fn comparison_marks_best_and_is_stable() {
        let reports = [report("TS->CP", 0.286, 0.723), report("CopyNMT", 0.263, 0.774)];
        let c = compare(&reports).unwrap();
        let lines: Vec<&str> = c.text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].trim_end().ends_with("0.2049*"));
        assert!(!lines[2].trim_end().ends_with('*'));
        assert_eq!(c, compare(&reports).unwrap());
        assert!(c.csv.starts_with("model,bleu,accuracy,overall,direction\n"));
        assert_eq!(compare(&reports[..1]).unwrap().csv.lines().count(), 2);
        assert!(compare(&[]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(b in 0.001f64..=1.0, a in 0.001f64..=1.0) {
            prop_assert_eq!(overall(b, a).unwrap(), overall(a, b).unwrap());
            prop_assert!(overall(b, a).unwrap() <= b.min(a));
            prop_assert!((overall(b, b).unwrap() - b / 2.0).abs() < 1e-15);
        }
    }
}
