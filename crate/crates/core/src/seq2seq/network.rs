use super::Seq2Seq;
use crate::data::{Batch, Padded, BOS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Model parameters bound to one graph.
#[derive(Clone, Copy, Debug)]
pub struct Weights {
    src_emb: Var,
    tgt_emb: Var,
    enc_w: Var,
    enc_b: Var,
    dec_w: Var,
    dec_b: Var,
    attn_w: Var,
    out_w: Var,
    out_b: Var,
    gate_w: Var,
    gate_b: Var,
}

/// Encoder output for a padded source batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, L, H]`; positions past a row's length repeat its last state.
    pub states: Var,
    pub h: Var,
    pub c: Var,
    /// `[B * L]`, true at real source tokens.
    pub mask: Vec<bool>,
    /// Flat `[B, V]` index of each source position's token, for the pointer scatter.
    copy_index: Vec<usize>,
    rows: usize,
    width: usize,
}

impl Encoded {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// One decoder step. Distributions are `[B, V]` except `att`/`p_ptr` (`[B, L]`) and `delta` (`[B, 1]`).
#[derive(Clone, Copy, Debug)]
pub struct DecodeStep {
    pub h: Var,
    pub c: Var,
    pub att: Var,
    pub ctx: Var,
    pub p_rnn: Var,
    /// Pointer distribution over source positions (the attention weights).
    pub p_ptr: Var,
    /// Pointer mass scattered onto vocabulary ids.
    pub p_copy: Var,
    pub delta: Var,
    pub p: Var,
}

fn lstm_cell(g: &mut Graph, w: Var, b: Var, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hid = g.shape(h)[1];
    let xh = g.concat(&[x, h], 1)?;
    let z = g.matmul(xh, w)?;
    let z = g.add(z, b)?;
    let gate = |g: &mut Graph, k: usize| g.narrow(z, 1, k * hid, hid);
    let i = gate(g, 0)?;
    let i = g.sigmoid(i);
    let f = gate(g, 1)?;
    let f = g.sigmoid(f);
    let cand = gate(g, 2)?;
    let cand = g.tanh(cand);
    let o = gate(g, 3)?;
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// `m * new + (1 - m) * old` with a per-row 0/1 mask.
fn hold_finished(g: &mut Graph, live: &[bool], new: Var, old: Var) -> Result<Var> {
    if live.iter().all(|&l| l) {
        return Ok(new);
    }
    let m: Vec<f64> = live.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    let m = g.constant(Tensor::new(vec![live.len(), 1], m)?);
    let inv = g.constant(Tensor::new(vec![live.len(), 1], inv)?);
    let a = g.mul(new, m)?;
    let b = g.mul(old, inv)?;
    g.add(a, b)
}

impl Seq2Seq {
    pub fn bind(&self, g: &mut Graph) -> Weights {
        let v = g.params(&self.store);
        Weights {
            src_emb: v[0],
            tgt_emb: v[1],
            enc_w: v[2],
            enc_b: v[3],
            dec_w: v[4],
            dec_b: v[5],
            attn_w: v[6],
            out_w: v[7],
            out_b: v[8],
            gate_w: v[9],
            gate_b: v[10],
        }
    }

    pub fn encode(&self, g: &mut Graph, w: &Weights, src: &Padded) -> Result<Encoded> {
        let (rows, width) = (src.rows(), src.width);
        if rows == 0 || width == 0 || src.lens.contains(&0) {
            return Err(Error::Contract("encode needs non-empty source rows".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = src.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Contract(format!(
                "source id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let hid = self.config.hidden_dim;
        let mut h = g.constant(Tensor::zeros(&[rows, hid]));
        let mut c = g.constant(Tensor::zeros(&[rows, hid]));
        let mut states = Vec::with_capacity(width);
        for t in 0..width {
            let ids: Vec<usize> = (0..rows).map(|b| src.at(b, t)).collect();
            let x = g.embedding(w.src_emb, &ids)?;
            let (hn, cn) = lstm_cell(g, w.enc_w, w.enc_b, x, h, c)?;
            let live: Vec<bool> = src.lens.iter().map(|&l| t < l).collect();
            h = hold_finished(g, &live, hn, h)?;
            c = hold_finished(g, &live, cn, c)?;
            states.push(h);
        }
        let states = g.stack(&states, 1)?;
        let copy_index = (0..rows)
            .flat_map(|b| (0..width).map(move |l| (b, l)))
            .map(|(b, l)| b * vocab + src.at(b, l))
            .collect();
        Ok(Encoded {
            states,
            h,
            c,
            mask: src.mask(),
            copy_index,
            rows,
            width,
        })
    }

    /// One decoder step from `prev` tokens and the previous `(h, c)`.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        w: &Weights,
        enc: &Encoded,
        prev: &[usize],
        h: Var,
        c: Var,
    ) -> Result<DecodeStep> {
        let (rows, width, hid) = (enc.rows, enc.width, self.config.hidden_dim);
        if prev.len() != rows {
            return Err(Error::dim("decode_step", &[rows], &[prev.len()]));
        }
        let e = g.embedding(w.tgt_emb, prev)?;
        let (h, c) = lstm_cell(g, w.dec_w, w.dec_b, e, h, c)?;

        let q = g.matmul(h, w.attn_w)?;
        let q = g.reshape(q, vec![rows, hid, 1])?;
        let scores = g.bmm(enc.states, q)?;
        let scores = g.reshape(scores, vec![rows, width])?;
        let att = g.masked_softmax(scores, 1, &enc.mask)?;
        let att3 = g.reshape(att, vec![rows, 1, width])?;
        let ctx = g.bmm(att3, enc.states)?;
        let ctx = g.reshape(ctx, vec![rows, hid])?;

        let ctx_h = g.concat(&[ctx, h], 1)?;
        let logits = g.matmul(ctx_h, w.out_w)?;
        let logits = g.add(logits, w.out_b)?;
        let p_rnn = g.softmax(logits, 1)?;

        let delta = match self.gate_override {
            Some(v) => g.constant(Tensor::filled(&[rows, 1], v)),
            None => {
                let feats = g.concat(&[ctx, h, e], 1)?;
                let z = g.matmul(feats, w.gate_w)?;
                let z = g.add(z, w.gate_b)?;
                g.sigmoid(z)
            }
        };
        let vocab = self.config.vocab_size;
        let p_copy = g.scatter_add(att, enc.copy_index.clone(), vec![rows, vocab])?;
        let gen = g.mul(delta, p_rnn)?;
        let one_minus = g.affine(delta, -1.0, 1.0);
        let copy = g.mul(one_minus, p_copy)?;
        let p = g.add(gen, copy)?;
        Ok(DecodeStep {
            h,
            c,
            att,
            ctx,
            p_rnn,
            p_ptr: att,
            p_copy,
            delta,
            p,
        })
    }

    /// Runs the decoder over `targets`, feeding the reference token of the previous step.
    pub fn teacher_force(
        &self,
        g: &mut Graph,
        w: &Weights,
        enc: &Encoded,
        targets: &Padded,
    ) -> Result<Vec<DecodeStep>> {
        if targets.rows() != enc.rows {
            return Err(Error::dim("teacher_force", &[enc.rows], &[targets.rows()]));
        }
        let (mut h, mut c) = (enc.h, enc.c);
        let mut steps = Vec::with_capacity(targets.width);
        for t in 0..targets.width {
            let prev: Vec<usize> = (0..enc.rows)
                .map(|b| if t == 0 { BOS } else { targets.at(b, t - 1) })
                .collect();
            let step = self.decode_step(g, w, enc, &prev, h, c)?;
            h = step.h;
            c = step.c;
            steps.push(step);
        }
        Ok(steps)
    }

    /// `[B]` per-sentence sums of `log P_t(target_t)` over each row's real steps.
    pub fn sequence_log_probs(
        &self,
        g: &mut Graph,
        steps: &[DecodeStep],
        targets: &Padded,
    ) -> Result<Var> {
        let (rows, vocab) = (targets.rows(), self.config.vocab_size);
        let mut picked = Vec::with_capacity(steps.len());
        for (t, step) in steps.iter().enumerate() {
            let idx = (0..rows).map(|b| b * vocab + targets.at(b, t)).collect();
            picked.push(g.gather(step.p, idx, vec![rows])?);
        }
        let picked = g.stack(&picked, 0)?;
        let logp = g.log(picked)?;
        let mask: Vec<f64> = (0..steps.len())
            .flat_map(|t| targets.lens.iter().map(move |&l| if t < l { 1.0 } else { 0.0 }))
            .collect();
        let mask = g.constant(Tensor::new(vec![steps.len(), rows], mask)?);
        let logp = g.mul(logp, mask)?;
        let ones = g.constant(Tensor::filled(&[1, steps.len()], 1.0));
        let per_row = g.matmul(ones, logp)?;
        g.reshape(per_row, vec![rows])
    }

    /// Mean over the batch of each sentence's summed negative log-likelihood.
    pub fn loss_ml(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let w = self.bind(g);
        let enc = self.encode(g, &w, &batch.src)?;
        self.loss_ml_encoded(g, &w, &enc, &batch.tgt)
    }

    pub fn loss_ml_encoded(
        &self,
        g: &mut Graph,
        w: &Weights,
        enc: &Encoded,
        targets: &Padded,
    ) -> Result<Var> {
        let steps = self.teacher_force(g, w, enc, targets)?;
        let lp = self.sequence_log_probs(g, &steps, targets)?;
        let total = g.sum(lp);
        Ok(g.scale(total, -1.0 / targets.rows() as f64))
    }
}
