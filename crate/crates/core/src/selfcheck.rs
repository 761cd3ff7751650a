//! Randomized finite-difference checks of every differentiable graph op and of
//! the three training losses.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{ClassifierConfig, StyleClassifier};
use crate::data::{Batch, Direction, ParallelPair, TokenSeq, RESERVED};
use crate::error::{Error, Result};
use crate::rewards::{content_loss, rollout, strength_loss, BleuConfig};
use crate::seed;
use crate::seq2seq::{ModelConfig, Seq2Seq};
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, Graph, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;

pub const OPS: [&str; 25] = [
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "affine",
    "neg",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "log",
    "clamp",
    "softmax",
    "masked_softmax",
    "gather",
    "embedding",
    "scatter_add",
    "narrow",
    "concat",
    "stack",
    "reshape",
    "sum",
    "max_rows",
];

pub const LOSSES: [&str; 3] = ["loss_ml", "loss_cp", "loss_ts"];

/// Worst-case agreement of one op or loss over several random instances.
#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub elements: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    /// `(label, analytic, numeric)` of the worst element.
    pub worst: Option<(String, f64, f64)>,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    fn from_reports(name: &str, tol: f64, reports: Vec<GradCheckReport>) -> Self {
        let instances = reports.len();
        let mut elements = 0;
        let mut max_rel_error = 0.0;
        let mut worst = None;
        for r in reports {
            elements += r.entries.len();
            for (label, a, n, err) in r.entries {
                if worst.is_none() || !(err <= max_rel_error) {
                    max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                    worst = Some((label, a, n));
                }
            }
        }
        CheckSummary {
            name: name.to_string(),
            instances,
            elements,
            max_rel_error,
            tol,
            worst,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-1.5..1.5);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(2..5)
}

/// Projects an op's output onto fixed random weights so every element matters.
fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn unary<F>(rng: &mut ChaCha8Rng, x: Tensor, out_shape: &[usize], op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let r = uniform(rng, out_shape, -1.0, 1.0);
    grad_check(|g, x| {
        let y = op(g, x)?;
        project(g, y, &r)
    }, &x, STEP, OP_TOLERANCE)
}

/// Checks both operands of a binary op, each with the other held constant.
fn binary<F>(rng: &mut ChaCha8Rng, a: Tensor, b: Tensor, out_shape: &[usize], op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var, Var) -> Result<Var>,
{
    let r = uniform(rng, out_shape, -1.0, 1.0);
    let mut report = grad_check(|g, x| {
        let bv = g.constant(b.clone());
        let y = op(g, x, bv)?;
        project(g, y, &r)
    }, &a, STEP, OP_TOLERANCE)?;
    report.merge(grad_check(|g, x| {
        let av = g.constant(a.clone());
        let y = op(g, av, x)?;
        project(g, y, &r)
    }, &b, STEP, OP_TOLERANCE)?);
    Ok(report)
}

fn op_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (m, n) = (dim(rng), dim(rng));
    match name {
        "matmul" => {
            let k = dim(rng);
            let (a, b) = (uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0));
            binary(rng, a, b, &[m, n], |g, a, b| g.matmul(a, b))
        }
        "bmm" => {
            let (bs, k) = (dim(rng), dim(rng));
            let a = uniform(rng, &[bs, m, k], -1.0, 1.0);
            let b = uniform(rng, &[bs, k, n], -1.0, 1.0);
            binary(rng, a, b, &[bs, m, n], |g, a, b| g.bmm(a, b))
        }
        "add" => {
            let (a, b) = (uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0));
            binary(rng, a, b, &[m, n], |g, a, b| g.add(a, b))
        }
        "sub" => {
            let (a, b) = (uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0));
            binary(rng, a, b, &[m, n], |g, a, b| g.sub(a, b))
        }
        "mul" => {
            let (a, b) = (uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0));
            binary(rng, a, b, &[m, n], |g, a, b| g.mul(a, b))
        }
        "affine" => {
            let (s, t) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            let x = uniform(rng, &[m, n], -1.0, 1.0);
            unary(rng, x, &[m, n], move |g, x| Ok(g.affine(x, s, t)))
        }
        "neg" => {
            let x = uniform(rng, &[m, n], -1.0, 1.0);
            unary(rng, x, &[m, n], |g, x| Ok(g.neg(x)))
        }
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            let x = uniform(rng, &[m, n], -1.0, 1.0);
            unary(rng, x, &[m, n], move |g, x| Ok(g.scale(x, s)))
        }
        "sigmoid" => {
            let x = uniform(rng, &[m, n], -3.0, 3.0);
            unary(rng, x, &[m, n], |g, x| Ok(g.sigmoid(x)))
        }
        "tanh" => {
            let x = uniform(rng, &[m, n], -2.0, 2.0);
            unary(rng, x, &[m, n], |g, x| Ok(g.tanh(x)))
        }
        "relu" => {
            let x = away_from(rng, &[m, n], &[0.0], 0.05);
            unary(rng, x, &[m, n], |g, x| Ok(g.relu(x)))
        }
        "softplus" => {
            let x = uniform(rng, &[m, n], -3.0, 3.0);
            unary(rng, x, &[m, n], |g, x| Ok(g.softplus(x)))
        }
        "log" => {
            let x = uniform(rng, &[m, n], 0.5, 2.0);
            unary(rng, x, &[m, n], |g, x| g.log(x))
        }
        "clamp" => {
            let x = away_from(rng, &[m, n], &[-0.5, 0.5], 0.05);
            unary(rng, x, &[m, n], |g, x| Ok(g.clamp(x, -0.5, 0.5)))
        }
        "softmax" => {
            let axis = rng.gen_range(0..2);
            let x = uniform(rng, &[m, n], -2.0, 2.0);
            unary(rng, x, &[m, n], move |g, x| g.softmax(x, axis))
        }
        "masked_softmax" => {
            let mut mask: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.7)).collect();
            for row in mask.chunks_mut(n) {
                let keep = rng.gen_range(0..n);
                row[keep] = true;
            }
            let x = uniform(rng, &[m, n], -2.0, 2.0);
            unary(rng, x, &[m, n], move |g, x| g.masked_softmax(x, 1, &mask))
        }
        "gather" => {
            let x = uniform(rng, &[m, n], -1.0, 1.0);
            let k = dim(rng) * 2;
            let index: Vec<usize> = (0..k).map(|_| rng.gen_range(0..m * n)).collect();
            unary(rng, x, &[k], move |g, x| g.gather(x, index.clone(), vec![k]))
        }
        "embedding" => {
            let table = uniform(rng, &[m + 2, n], -1.0, 1.0);
            let k = dim(rng) + 1;
            let ids: Vec<usize> = (0..k).map(|_| rng.gen_range(0..m + 2)).collect();
            unary(rng, table, &[k, n], move |g, t| g.embedding(t, &ids))
        }
        "scatter_add" => {
            let k = dim(rng) * 2;
            let x = uniform(rng, &[k], -1.0, 1.0);
            let index: Vec<usize> = (0..k).map(|_| rng.gen_range(0..m)).collect();
            unary(rng, x, &[m], move |g, x| g.scatter_add(x, index.clone(), vec![m]))
        }
        "narrow" => {
            let axis = rng.gen_range(0..2);
            let len_axis = if axis == 0 { m } else { n };
            let start = rng.gen_range(0..len_axis - 1);
            let len = rng.gen_range(1..=len_axis - start);
            let out = if axis == 0 { [len, n] } else { [m, len] };
            let x = uniform(rng, &[m, n], -1.0, 1.0);
            unary(rng, x, &out, move |g, x| g.narrow(x, axis, start, len))
        }
        "concat" => {
            let axis = rng.gen_range(0..2);
            let k = dim(rng);
            let (sb, out) = if axis == 0 { ([k, n], [m + k, n]) } else { ([m, k], [m, n + k]) };
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let b = uniform(rng, &sb, -1.0, 1.0);
            binary(rng, a, b, &out, move |g, a, b| g.concat(&[a, b], axis))
        }
        "stack" => {
            let axis = rng.gen_range(0..3);
            let mut out = vec![m, n];
            out.insert(axis, 2);
            let (a, b) = (uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0));
            binary(rng, a, b, &out, move |g, a, b| g.stack(&[a, b], axis))
        }
        "reshape" => {
            let x = uniform(rng, &[m, n], -1.0, 1.0);
            unary(rng, x, &[n, m], move |g, x| g.reshape(x, vec![n, m]))
        }
        "sum" => {
            let x = uniform(rng, &[m, n], -1.0, 1.0);
            unary(rng, x, &[], |g, x| Ok(g.sum(x)))
        }
        "max_rows" => {
            // Distinct values on a 0.1 grid keep every column's maximum well separated.
            let mut values: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.1 - 1.0).collect();
            values.shuffle(rng);
            for v in &mut values {
                *v += rng.gen_range(-0.02..0.02);
            }
            let x = Tensor::new(vec![m, n], values)?;
            unary(rng, x, &[n], |g, x| g.max_rows(x))
        }
        other => Err(Error::Input(format!("no gradient check for op {other:?}"))),
    }
}

/// Checks op `name` on `instances` random inputs.
pub fn check_op(name: &str, root: u64, instances: usize) -> Result<CheckSummary> {
    let reports = (0..instances)
        .map(|i| op_instance(name, &mut seed::rng(seed::derive_indexed(root, name, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckSummary::from_reports(name, OP_TOLERANCE, reports))
}

const VOCAB: usize = 10;

fn random_batch(rng: &mut ChaCha8Rng) -> Result<Batch> {
    let rows = rng.gen_range(1..4);
    let first = RESERVED.len();
    let seq = |rng: &mut ChaCha8Rng| -> Result<TokenSeq> {
        let len = rng.gen_range(1..5);
        TokenSeq::new((0..len).map(|_| rng.gen_range(first..VOCAB)).collect())
    };
    let pairs = (0..rows)
        .map(|_| {
            Ok(ParallelPair {
                source: seq(rng)?,
                target: seq(rng)?,
                direction: Direction::LowToHigh,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch::from_pairs(&pairs.iter().collect::<Vec<_>>()))
}

fn loss_instance(name: &str, root: u64, index: usize) -> Result<GradCheckReport> {
    let s = seed::derive_indexed(root, name, index as u64);
    let mut rng = seed::rng(s);
    let config = ModelConfig {
        vocab_size: VOCAB,
        emb_dim: 3,
        hidden_dim: 4,
        max_len: 5,
    };
    let mut model = Seq2Seq::new(config, seed::derive(s, "model"))?;
    // Larger weights than the default init so the check sees non-trivial curvature.
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let batch = random_batch(&mut rng)?;
    let max_len = model.config().max_len;
    let rebind = |store: &crate::tensor::ParamStore| -> Result<Seq2Seq> {
        let mut local = model.clone();
        local.params_mut().copy_values_from(store)?;
        Ok(local)
    };
    match name {
        "loss_ml" => grad_check_params(
            |g, store| rebind(store)?.loss_ml(g, &batch),
            model.params(),
            STEP,
            LOSS_TOLERANCE,
            None,
        ),
        "loss_cp" => {
            let mut roll = rollout(&model, &batch, None, seed::derive(s, "sample"), &BleuConfig::default())?;
            // Random rewards keep the advantage away from zero on an untrained model.
            for r in roll.greedy_rewards.iter_mut().chain(roll.sample_rewards.iter_mut()) {
                *r = rng.gen_range(0.0..1.0);
            }
            grad_check_params(
                |g, store| {
                    let local = rebind(store)?;
                    let w = local.bind(g);
                    let enc = local.encode(g, &w, &batch.src)?;
                    content_loss(&local, g, &w, &enc, &roll)
                },
                model.params(),
                STEP,
                LOSS_TOLERANCE,
                None,
            )
        }
        "loss_ts" => {
            let mut clf_config = ClassifierConfig::new(VOCAB);
            clf_config.emb_dim = 3;
            clf_config.filters = 2;
            clf_config.windows = vec![2, 3];
            let mut clf = StyleClassifier::new(clf_config, seed::derive(s, "classifier"))?;
            for (_, t) in clf.params_mut().iter_mut() {
                for v in t.data_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            let direction = if rng.gen_bool(0.5) { Direction::LowToHigh } else { Direction::HighToLow };
            let greedy = model.greedy(&batch.src, max_len)?;
            grad_check_params(
                |g, store| {
                    let local = rebind(store)?;
                    let w = local.bind(g);
                    let enc = local.encode(g, &w, &batch.src)?;
                    strength_loss(&local, &clf, g, &w, &enc, &greedy, direction)
                },
                model.params(),
                STEP,
                LOSS_TOLERANCE,
                None,
            )
        }
        other => Err(Error::Input(format!("no gradient check for loss {other:?}"))),
    }
}

/// Checks loss `name` with respect to every model parameter on `instances`
/// random models and batches.
pub fn check_loss(name: &str, root: u64, instances: usize) -> Result<CheckSummary> {
    let reports = (0..instances)
        .map(|i| loss_instance(name, root, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckSummary::from_reports(name, LOSS_TOLERANCE, reports))
}

/// Every op and every loss.
pub fn check_all(root: u64, instances: usize) -> Result<Vec<CheckSummary>> {
    let mut out = Vec::with_capacity(OPS.len() + LOSSES.len());
    for op in OPS {
        out.push(check_op(op, root, instances)?);
    }
    for loss in LOSSES {
        out.push(check_loss(loss, root, instances)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_instances() {
        for op in OPS {
            let s = check_op(op, 1, 3).unwrap();
            assert!(s.passed(), "{s:?}");
            assert!(s.elements > 0);
        }
    }

    #[test]
    fn every_loss_passes_on_one_instance() {
        for loss in LOSSES {
            let s = check_loss(loss, 1, 1).unwrap();
            assert!(s.passed(), "{s:?}");
        }
    }

    #[test]
    fn unknown_names_are_errors() {
        assert!(check_op("nope", 0, 1).is_err());
        assert!(check_loss("nope", 0, 1).is_err());
    }

    #[test]
    fn a_wrong_gradient_is_reported() {
        let report = grad_check(|g, x| Ok(g.sum(x)), &Tensor::vector(vec![1.0]), STEP, OP_TOLERANCE).unwrap();
        let mut bad = report.clone();
        bad.entries[0].1 = 2.0;
        bad.entries[0].3 = 0.5;
        assert!(!CheckSummary::from_reports("sum", OP_TOLERANCE, vec![bad]).passed());
        assert!(CheckSummary::from_reports("sum", OP_TOLERANCE, vec![report]).passed());
    }
}
