use super::{ParamStore, Tensor, PROB_FLOOR};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Log,
    Relu,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    // Index maps are present only when an operand was broadcast.
    Add {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        probs: Vec<f64>,
        // Per row, when flooring kicked in: sum of unfloored probs, their
        // rescale factor, and which entries were pinned to the floor.
        floored: Vec<Option<(f64, f64, Vec<bool>)>>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        index: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        inner: usize,
        dims: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    MaxRows {
        x: Var,
        cols: usize,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b, .. }
            | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Unary { x, .. }
            | Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::MaxRows { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

/// Gradients of a scalar with respect to every leaf it depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf or parameter node; `None` if the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Record of the operations executed during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast. Returns the output shape plus, for each operand
/// whose shape differs from it, the flat source index for every output element.
fn broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>)> {
    if a == b {
        return Ok((a.to_vec(), None, None));
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(Error::dim(op, a, b));
        }
    }
    let map_for = |p: &[usize]| -> Option<Vec<usize>> {
        if p == out.as_slice() {
            return None;
        }
        // Strides of the operand, zeroed on broadcast axes.
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            strides[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        let numel: usize = out.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..numel {
            map.push(src);
            for d in (0..rank).rev() {
                idx[d] += 1;
                src += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                src -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        Some(map)
    };
    let ma = map_for(&pa);
    let mb = map_for(&pb);
    Ok((out, ma, mb))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn node(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        self.push(Tensor::new(shape, data).expect("op produced consistent shape"), op)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Records a value with no recorded history. Gradients still reach it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Tensor {
            grad: None,
            ..t
        };
        self.push(t, Op::Leaf)
    }

    /// Copies parameter `slot` of `store` into the graph.
    pub fn param(&mut self, store: &ParamStore, slot: usize) -> Var {
        let t = store.get(slot);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
        };
        self.push(value, Op::Param(slot))
    }

    /// Binds every parameter of `store`, in slot order.
    pub fn params(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len()).map(|s| self.param(store, s)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.values[a.0].data;
        let bv = &self.values[b.0].data;
        let mut out = vec![0.0; m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        Ok(self.node(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let av = &self.values[a.0].data;
        let bv = &self.values[b.0].data;
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            matmul_into(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.node(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, map_a, map_b) = broadcast("add", self.shape(a), self.shape(b))?;
        let data = self.binary_values(a, b, &map_a, &map_b, |x, y| x + y);
        Ok(self.node(shape, data, Op::Add { a, b, map_a, map_b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, map_a, map_b) = broadcast("mul", self.shape(a), self.shape(b))?;
        let data = self.binary_values(a, b, &map_a, &map_b, |x, y| x * y);
        Ok(self.node(shape, data, Op::Mul { a, b, map_a, map_b }))
    }

    fn binary_values(
        &self,
        a: Var,
        b: Var,
        map_a: &Option<Vec<usize>>,
        map_b: &Option<Vec<usize>>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let av = &self.values[a.0].data;
        let bv = &self.values[b.0].data;
        match (map_a, map_b) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (Some(ma), None) => ma.iter().zip(bv).map(|(&i, &y)| f(av[i], y)).collect(),
            (None, Some(mb)) => av.iter().zip(mb).map(|(&x, &j)| f(x, bv[j])).collect(),
            (Some(ma), Some(mb)) => ma.iter().zip(mb).map(|(&i, &j)| f(av[i], bv[j])).collect(),
        }
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = &self.values[x.0];
        let data = t.data.iter().map(|v| scale * v + shift).collect();
        let shape = t.shape.clone();
        self.node(shape, data, Op::Affine { x, scale })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let t = &self.values[x.0];
        if kind == Unary::Log {
            if let Some(bad) = t.data.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Log => f64::ln,
            Unary::Relu => |v| v.max(0.0),
            Unary::Softplus => softplus,
        };
        let data = t.data.iter().map(|&v| f(v)).collect();
        let shape = t.shape.clone();
        Ok(self.node(shape, data, Op::Unary { x, kind }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("tanh is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus).expect("softplus is total")
    }

    /// Natural log; any non-positive input is a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = &self.values[x.0];
        let data = t.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = t.shape.clone();
        self.node(shape, data, Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax where entries with `mask[i] == false` are excluded and output exactly 0.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.values[x.0].len() {
            return Err(Error::dim("masked_softmax", self.shape(x), &[mask.len()]));
        }
        self.softmax_impl(x, axis, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = &self.values[x.0].data;
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut probs = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut floored = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if keep(at(j)) {
                        max = max.max(xv[at(j)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::Contract("softmax row fully masked".into()));
                }
                let mut sum = 0.0;
                for j in 0..n {
                    if keep(at(j)) {
                        let e = (xv[at(j)] - max).exp();
                        probs[at(j)] = e;
                        sum += e;
                    }
                }
                let mut any_floored = false;
                for j in 0..n {
                    let p = probs[at(j)] / sum;
                    probs[at(j)] = p;
                    out[at(j)] = p;
                    if keep(at(j)) && p < PROB_FLOOR {
                        any_floored = true;
                    }
                }
                if !any_floored {
                    floored.push(None);
                    continue;
                }
                // Pin floored entries at exactly PROB_FLOOR and rescale the rest.
                let mut flags = vec![false; n];
                let mut kept = 0.0;
                let mut count = 0usize;
                for (j, flag) in flags.iter_mut().enumerate() {
                    if !keep(at(j)) {
                        continue;
                    }
                    if probs[at(j)] < PROB_FLOOR {
                        *flag = true;
                        count += 1;
                    } else {
                        kept += probs[at(j)];
                    }
                }
                let r = (1.0 - count as f64 * PROB_FLOOR) / kept;
                for (j, &flag) in flags.iter().enumerate() {
                    if !keep(at(j)) {
                        continue;
                    }
                    out[at(j)] = if flag { PROB_FLOOR } else { probs[at(j)] * r };
                }
                floored.push(Some((kept, r, flags)));
            }
        }
        Ok(self.node(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                n,
                inner,
                probs,
                floored,
            },
        ))
    }

    /// `out[i] = x.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = &self.values[x.0].data;
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("gather", &shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                xv.len()
            )));
        }
        let data = index.iter().map(|&i| xv[i]).collect();
        Ok(self.node(shape, data, Op::Gather { x, index }))
    }

    /// Rows of a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("embedding", s, &[2]));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of {rows}"
            )));
        }
        let index = ids.iter().flat_map(|&id| id * d..(id + 1) * d).collect();
        self.gather(table, index, vec![ids.len(), d])
    }

    /// `out.flat[index[i]] += x.flat[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = &self.values[x.0].data;
        let numel: usize = shape.iter().product();
        if index.len() != xv.len() {
            return Err(Error::dim("scatter_add", self.shape(x), &[index.len()]));
        }
        let mut out = vec![0.0; numel];
        for (&i, &v) in index.iter().zip(xv) {
            if i >= numel {
                return Err(Error::Contract(format!(
                    "scatter index {i} out of range for {numel} elements"
                )));
            }
            out[i] += v;
        }
        Ok(self.node(shape, out, Op::ScatterAdd { x, index }))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = &self.values[x.0].data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.node(
            out_shape,
            data,
            Op::Narrow {
                x,
                outer,
                dim,
                inner,
                start,
                len,
            },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut dims = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::dim("concat", &first, s));
            }
            dims.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &d) in xs.iter().zip(&dims) {
                let xv = &self.values[x.0].data;
                data.extend_from_slice(&xv[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.node(
            shape,
            data,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                inner,
                dims,
            },
        ))
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("stack of nothing".into()))?)
            .to_vec();
        if axis > first.len() {
            return Err(Error::dim("stack", &first, &[axis]));
        }
        let mut expanded = first.clone();
        expanded.insert(axis, 1);
        let parts = xs
            .iter()
            .map(|&x| self.reshape(x, expanded.clone()))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&parts, axis)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.values[x.0];
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::dim("reshape", t.shape(), &shape));
        }
        let data = t.data.clone();
        Ok(self.node(shape, data, Op::Reshape { x }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data.iter().sum();
        self.node(Vec::new(), vec![s], Op::Sum { x })
    }

    /// Column-wise maximum of a `[rows, cols]` tensor; ties go to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::dim("max_rows", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = &self.values[x.0].data;
        let mut argmax = vec![0usize; cols];
        let mut out = xv[..cols].to_vec();
        for r in 1..rows {
            for c in 0..cols {
                let v = xv[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.node(vec![cols], out, Op::MaxRows { x, cols, argmax }))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let op = &self.ops[id];
            if matches!(op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_adjoint(id, op, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter node into `store`.
    pub fn accumulate_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (id, op) in self.ops.iter().enumerate() {
            if let (Op::Param(slot), Some(g)) = (op, grads.grads[id].as_ref()) {
                if let Some(dst) = store.get_mut(*slot).grad_mut() {
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
        }
    }

    fn apply_adjoint(&self, id: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.values[id].data;
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                let av = &self.values[a.0].data;
                let bv = &self.values[b.0].data;
                matmul_grad_a(g, bv, self.grad_buf(grads, *a), *m, *k, *n);
                matmul_grad_b(g, av, self.grad_buf(grads, *b), *m, *k, *n);
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.values[a.0].data;
                let bv = &self.values[b.0].data;
                for t in 0..*batch {
                    let gs = &g[t * m * n..(t + 1) * m * n];
                    let ga = &mut self.grad_buf(grads, *a)[t * m * k..(t + 1) * m * k];
                    matmul_grad_a(gs, &bv[t * k * n..(t + 1) * k * n], ga, m, k, n);
                    let gb = &mut self.grad_buf(grads, *b)[t * k * n..(t + 1) * k * n];
                    matmul_grad_b(gs, &av[t * m * k..(t + 1) * m * k], gb, m, k, n);
                }
            }
            Op::Add { a, b, map_a, map_b } => {
                scatter_grad(self.grad_buf(grads, *a), g, map_a.as_deref(), |_, v| v);
                scatter_grad(self.grad_buf(grads, *b), g, map_b.as_deref(), |_, v| v);
            }
            Op::Mul { a, b, map_a, map_b } => {
                let av = &self.values[a.0].data;
                let bv = &self.values[b.0].data;
                let b_at = |i: usize| match map_b {
                    Some(m) => bv[m[i]],
                    None => bv[i],
                };
                let a_at = |i: usize| match map_a {
                    Some(m) => av[m[i]],
                    None => av[i],
                };
                scatter_grad(self.grad_buf(grads, *a), g, map_a.as_deref(), |i, v| {
                    v * b_at(i)
                });
                scatter_grad(self.grad_buf(grads, *b), g, map_b.as_deref(), |i, v| {
                    v * a_at(i)
                });
            }
            Op::Affine { x, scale } => {
                let gx = self.grad_buf(grads, *x);
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += scale * v);
            }
            Op::Unary { x, kind } => {
                let xv = &self.values[x.0].data;
                let gx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Sigmoid => out[i] * (1.0 - out[i]),
                        Unary::Tanh => 1.0 - out[i] * out[i],
                        Unary::Log => 1.0 / xv[i],
                        Unary::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Softplus => sigmoid(xv[i]),
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.values[x.0].data;
                let gx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                n,
                inner,
                probs,
                floored,
            } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let gx = self.grad_buf(grads, *x);
                let mut gp = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        match &floored[o * inner + i] {
                            None => (0..n).for_each(|j| gp[j] = g[at(j)]),
                            Some((kept, r, flags)) => {
                                let s: f64 = (0..n)
                                    .filter(|&j| !flags[j])
                                    .map(|j| g[at(j)] * out[at(j)])
                                    .sum();
                                for j in 0..n {
                                    gp[j] = if flags[j] { 0.0 } else { r * g[at(j)] - s / kept };
                                }
                            }
                        }
                        let dot: f64 = (0..n).map(|j| probs[at(j)] * gp[j]).sum();
                        for j in 0..n {
                            gx[at(j)] += probs[at(j)] * (gp[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let gx = self.grad_buf(grads, *x);
                for (&i, &v) in index.iter().zip(g) {
                    gx[i] += v;
                }
            }
            Op::ScatterAdd { x, index } => {
                let gx = self.grad_buf(grads, *x);
                for (d, &i) in gx.iter_mut().zip(index) {
                    *d += g[i];
                }
            }
            Op::Narrow {
                x,
                outer,
                dim,
                inner,
                start,
                len,
            } => {
                let gx = self.grad_buf(grads, *x);
                let chunk = len * inner;
                for o in 0..*outer {
                    let base = o * dim * inner + start * inner;
                    gx[base..base + chunk]
                        .iter_mut()
                        .zip(&g[o * chunk..(o + 1) * chunk])
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::Concat {
                xs,
                outer,
                inner,
                dims,
            } => {
                let total: usize = dims.iter().sum();
                let mut offset = 0;
                for (&x, &d) in xs.iter().zip(dims) {
                    let gx = self.grad_buf(grads, x);
                    for o in 0..*outer {
                        let src = o * total * inner + offset * inner;
                        gx[o * d * inner..(o + 1) * d * inner]
                            .iter_mut()
                            .zip(&g[src..src + d * inner])
                            .for_each(|(dst, v)| *dst += v);
                    }
                    offset += d;
                }
            }
            Op::Reshape { x } => {
                let gx = self.grad_buf(grads, *x);
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::Sum { x } => {
                let gx = self.grad_buf(grads, *x);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MaxRows { x, cols, argmax } => {
                let gx = self.grad_buf(grads, *x);
                for c in 0..*cols {
                    gx[argmax[c] * cols + c] += g[c];
                }
            }
        }
    }

    // Lazily allocated gradient buffer for node `v`.
    #[allow(clippy::mut_from_ref)]
    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.values[v.0].len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Inputs of the node behind `v`, in recording order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.ops[v.0].inputs()
    }
}

fn scatter_grad(dst: &mut [f64], g: &[f64], map: Option<&[usize]>, f: impl Fn(usize, f64) -> f64) {
    match map {
        None => dst
            .iter_mut()
            .zip(g)
            .enumerate()
            .for_each(|(i, (d, &v))| *d += f(i, v)),
        Some(map) => {
            for (i, (&j, &v)) in map.iter().zip(g).enumerate() {
                dst[j] += f(i, v);
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
}

// dA += dC . B^T
fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// dB += A^T . dC
fn matmul_grad_b(g: &[f64], a: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            gb[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(d, &v)| *d += aip * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let d = g.matmul(r, c).unwrap();
        assert_eq!(g.value(d).shape(), &[1, 1]);
        assert_eq!(g.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let one = g.constant(Tensor::scalar(1.0));
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        let l = g.log(one).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(t).data(), &[0.0]);
        assert_eq!(g.value(l).data(), &[0.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
        let x = g.constant(Tensor::vector(vec![-2.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn broadcast_rows_and_columns() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let row = g.constant(Tensor::vector(vec![10., 20., 30.]));
        let col = g.constant(Tensor::matrix(2, 1, vec![2., 3.]).unwrap());
        let a = g.add(m, row).unwrap();
        assert_eq!(g.value(a).data(), &[11., 22., 33., 14., 25., 36.]);
        let b = g.mul(m, col).unwrap();
        assert_eq!(g.value(b).data(), &[2., 4., 6., 12., 15., 18.]);
        let bad = g.constant(Tensor::vector(vec![1., 2.]));
        assert!(g.add(m, bad).is_err());
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let row = g.constant(Tensor::vector(vec![1., 1., 1.]));
        let p = g.mul(m, row).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(row).unwrap(), &[5., 7., 9.]);
    }

    #[test]
    fn softmax_symmetry_and_floor() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let p = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let p = g.softmax(x, 0).unwrap();
        let v = g.value(p).data();
        assert!(approx(v[0], 1.0, 1e-11));
        assert!(v[1] >= PROB_FLOOR);
        assert!(approx(v[0] + v[1], 1.0, 1e-12));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, -0.7]));
        let p = g.softmax(x, 0).unwrap();
        let s: f64 = g.value(p).data().iter().sum();
        assert!(approx(s, 1.0, 1e-12));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 1., 1., 9.]).unwrap());
        let p = g
            .masked_softmax(x, 1, &[true, true, false, true, true, false])
            .unwrap();
        let v = g.value(p).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!(approx(v[3], 0.5, 1e-15));
        assert!(approx(v[0] + v[1], 1.0, 1e-15));
    }

    #[test]
    fn backward_square_and_log_sigmoid() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        let l = g.log(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(approx(grads.wrt(x).unwrap()[0], 0.5, 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.7, 1.3, 0.2, -0.9]).unwrap());
        let b = g.constant(Tensor::matrix(3, 2, vec![0.5, 0.1, -0.3, 0.8, 0.6, -0.2]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let t = g.tanh(c);
        let p = g.softmax(t, 1).unwrap();
        let l = g.log(p).unwrap();
        let s = g.sum(l);
        let g1 = g.backward(s).unwrap();
        let g2 = g.backward(s).unwrap();
        assert_eq!(g1.wrt(a).unwrap(), g2.wrt(a).unwrap());
        assert_eq!(g1.wrt(b).unwrap(), g2.wrt(b).unwrap());
    }

    #[test]
    fn params_accumulate_across_backward_calls() {
        let mut store = ParamStore::new();
        let slot = store.push("w", Tensor::vector(vec![2.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, slot);
            let y = g.mul(w, w).unwrap();
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            g.accumulate_grads(&grads, &mut store);
        }
        assert_eq!(store.get(slot).grad().unwrap(), &[8.0]);
        store.zero_grad();
        assert_eq!(store.get(slot).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn reused_var_gradients_add() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.5, -2.0]));
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn structural_ops_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let left = g.narrow(x, 1, 0, 1).unwrap();
        let right = g.narrow(x, 1, 1, 2).unwrap();
        let back = g.concat(&[left, right], 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let st = g.stack(&[left, left], 1).unwrap();
        assert_eq!(g.value(st).shape(), &[2, 2, 1]);
        assert_eq!(g.value(st).data(), &[1., 1., 4., 4.]);
        let mx = g.max_rows(x).unwrap();
        assert_eq!(g.value(mx).data(), &[4., 5., 6.]);
        let sc = g.scatter_add(left, vec![1, 1], vec![3]).unwrap();
        assert_eq!(g.value(sc).data(), &[0., 5., 0.]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[4, 2]));
        assert!(g.embedding(t, &[0, 3]).is_ok());
        assert!(matches!(g.embedding(t, &[4]), Err(Error::Contract(_))));
    }
}
