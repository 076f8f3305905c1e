use std::borrow::Cow;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalMask {
        x: Var,
        offset: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
    GatherLogSoftmax {
        logits: Var,
        ids: Vec<usize>,
        probs: Vec<f32>,
    },
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        rows: Vec<usize>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for one forward/backward computation.
///
/// Leaves may borrow their values (`param_ref`), so parameters do not need to
/// be copied into every graph. Nodes are appended in evaluation order, which
/// is a topological order; `backward` walks it in reverse.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by values the graph owns (borrowed leaves excluded).
    pub fn owned_bytes(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| matches!(n.value, Cow::Owned(_)))
            .map(|n| 4 * n.value.numel() as u64)
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf owning its value.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_cow(Cow::Owned(t), Op::Leaf, true)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_cow(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let batched = sa.len() == 3;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            kernels::matmul_acc(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), &[a, b]))
    }

    /// `a[..., d] + bias[d]`, the only broadcast the graph supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = last_dim(self.shape(a));
        if self.shape(bias) != [d] {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, &b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = map(self.value(a), |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(Error::dim(
                "transpose",
                format!("axes ({d0},{d1}) of rank {rank}"),
            ));
        }
        let t = self.value(a);
        let (data, shape) = kernels::swap_axes(t.data(), t.shape(), d0, d1);
        Ok(self.push(Tensor::new(shape, data)?, Op::Transpose(a, d0, d1), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = last_dim(x.shape());
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::softmax_row(xr, or);
        }
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: out,
        };
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = last_dim(x.shape());
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::log_softmax_row(xr, or);
        }
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: out,
        };
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xt = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xt.numel() / d;
        let mut out = vec![0.0; xt.numel()];
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let span = r * d..(r + 1) * d;
            rstd.push(kernels::layer_norm_row(
                &xt.data()[span.clone()],
                g,
                b,
                &mut xhat[span.clone()],
                &mut out[span],
            ));
        }
        let t = Tensor {
            shape: xt.shape().to_vec(),
            data: out,
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = map(self.value(a), kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = map(self.value(a), kernels::sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = map(self.value(a), kernels::log_sigmoid);
        self.push(t, Op::LogSigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f32::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    /// Gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let t = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(t, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let data = zip_map(self.value(a), self.value(b), f32::min);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Minimum(a, b), &[a, b]))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let data = zip_map(self.value(a), self.value(b), f32::max);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Maximum(a, b), &[a, b]))
    }

    // ---- indexing -------------------------------------------------------

    /// Rows of `table[vocab, d]` selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::dim("embedding", format!("table {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::dim(
                "embedding",
                format!("id {bad} out of range for vocab {vocab}"),
            ));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Masks attention scores `[..., T, S]` so query row `i` (absolute
    /// position `offset + i`) only sees keys `j <= offset + i`.
    pub fn causal_mask(&mut self, scores: Var, offset: usize) -> Result<Var> {
        let shape = self.shape(scores);
        if shape.len() < 2 {
            return Err(Error::dim("causal_mask", format!("{shape:?}")));
        }
        let (t, s) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if offset + t > s {
            return Err(Error::dim(
                "causal_mask",
                format!("{t} queries at offset {offset} exceed {s} keys"),
            ));
        }
        let mut data = self.value(scores).data().to_vec();
        for block in data.chunks_mut(t * s) {
            for i in 0..t {
                for v in &mut block[i * s + offset + i + 1..(i + 1) * s] {
                    *v = f32::NEG_INFINITY;
                }
            }
        }
        let shape = shape.to_vec();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::CausalMask { x: scores, offset },
            &[scores],
        ))
    }

    /// Mean next-token cross entropy of `logits[n, vocab]` over the rows
    /// whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let v = shape[1];
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no targets".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::dim(
                "cross_entropy",
                format!("target {bad} out of range for vocab {v}"),
            ));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.numel()];
        let mut total = 0.0f32;
        let mut lsm = vec![0.0; v];
        for (r, tgt) in targets.iter().enumerate() {
            let row = x.row(r);
            kernels::softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            if let Some(t) = tgt {
                kernels::log_softmax_row(row, &mut lsm);
                total -= lsm[*t];
            }
        }
        let out = Tensor::scalar(total / count as f32);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// `log_softmax(logits[n, vocab])[r, ids[r]]`, shape `[n]`.
    pub fn gather_log_softmax(&mut self, logits: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != ids.len() {
            return Err(Error::dim(
                "gather_log_softmax",
                format!("logits {shape:?} vs {} ids", ids.len()),
            ));
        }
        let v = shape[1];
        if let Some(bad) = ids.iter().find(|&&t| t >= v) {
            return Err(Error::dim(
                "gather_log_softmax",
                format!("id {bad} out of range for vocab {v}"),
            ));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.numel()];
        let mut out = Vec::with_capacity(ids.len());
        let mut lsm = vec![0.0; v];
        for (r, &id) in ids.iter().enumerate() {
            let row = x.row(r);
            kernels::softmax_row(row, &mut probs[r * v..(r + 1) * v]);
            kernels::log_softmax_row(row, &mut lsm);
            out.push(lsm[id]);
        }
        Ok(self.push(
            Tensor::from_vec(out),
            Op::GatherLogSoftmax {
                logits,
                ids: ids.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("{shape:?} axis {axis} range {start}..{end}"),
            ));
        }
        let (outer, dim, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { x: a, axis, start },
            &[a],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let d = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Selects entries along axis 0.
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("index_select", "scalar input".to_string()));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::dim(
                "index_select",
                format!("row {bad} of {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::IndexSelect {
                x: a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f32 = t.data().iter().sum::<f32>() / t.numel().max(1) as f32;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    ///
    /// Gradients accumulate across calls; call [`Graph::zero_grad`] between
    /// passes for fresh values.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                lt.shape()
            )));
        }
        let seed = Tensor::full(lt.shape(), 1.0);
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, t) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v, t);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, t: Tensor) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (x, y) in g.data.iter_mut().zip(&t.data) {
                    *x += y;
                }
            }
            None => node.grad = Some(t),
        }
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f32>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = if sa.len() == 3 {
                    (sa[0], sa[1], sa[2], sb[2])
                } else {
                    (1, sa[0], sa[1], sb[1])
                };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for t in 0..batch {
                    let gs = &gd[t * m * n..(t + 1) * m * n];
                    kernels::matmul_nt_acc(
                        gs,
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut da[t * m * k..(t + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    kernels::matmul_tn_acc(
                        &av[t * m * k..(t + 1) * m * k],
                        gs,
                        &mut db[t * k * n..(t + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(a, bias) => {
                let d = last_dim(out.shape());
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (x, y) in db.iter_mut().zip(row) {
                        *x += y;
                    }
                }
                vec![(*a, g.clone()), (*bias, like(*bias, db))]
            }
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |x| -x))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Scale(a, s) => vec![(*a, map(g, |x| x * s))],
            Op::Transpose(a, d0, d1) => {
                let (data, _) = kernels::swap_axes(gd, out.shape(), *d0, *d1);
                vec![(*a, like(*a, data))]
            }
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec()))],
            Op::Softmax(a) => {
                let d = last_dim(out.shape());
                let mut dx = vec![0.0; gd.len()];
                for ((y, gy), dxr) in out.data().chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = y[j] * (gy[j] - dot);
                    }
                }
                vec![(*a, like(*a, dx))]
            }
            Op::LogSoftmax(a) => {
                let d = last_dim(out.shape());
                let mut dx = vec![0.0; gd.len()];
                for ((y, gy), dxr) in out.data().chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s: f32 = gy.iter().sum();
                    for j in 0..d {
                        dxr[j] = gy[j] - y[j].exp() * s;
                    }
                }
                vec![(*a, like(*a, dx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = last_dim(out.shape());
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let gy = &gd[span.clone()];
                    let xh = &xhat[span.clone()];
                    for j in 0..d {
                        dg[j] += gy[j] * xh[j];
                        db[j] += gy[j];
                        dxhat[j] = gy[j] * gam[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f32>() / d as f32;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                    for j in 0..d {
                        dx[span.start + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                vec![
                    (*x, like(*x, dx)),
                    (*gamma, like(*gamma, dg)),
                    (*beta, like(*beta, db)),
                ]
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let dx = gd.iter().zip(xv).map(|(g, &x)| g * kernels::gelu_grad(x)).collect();
                vec![(*a, like(*a, dx))]
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                vec![(*table, like(*table, dt))]
            }
            Op::CausalMask { x, offset } => {
                let shape = out.shape();
                let (t, s) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut dx = gd.to_vec();
                for block in dx.chunks_mut(t * s) {
                    for i in 0..t {
                        block[i * s + offset + i + 1..(i + 1) * s].fill(0.0);
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = gd[0] / *count as f32;
                let mut dx = vec![0.0; probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    if let Some(t) = tgt {
                        for j in 0..v {
                            dx[r * v + j] = probs[r * v + j] * scale;
                        }
                        dx[r * v + t] -= scale;
                    }
                }
                vec![(*logits, like(*logits, dx))]
            }
            Op::GatherLogSoftmax { logits, ids, probs } => {
                let v = self.shape(*logits)[1];
                let mut dx = vec![0.0; probs.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let gr = gd[r];
                    for j in 0..v {
                        dx[r * v + j] = -probs[r * v + j] * gr;
                    }
                    dx[r * v + id] += gr;
                }
                vec![(*logits, like(*logits, dx))]
            }
            Op::Sigmoid(a) => {
                let dx = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*a, like(*a, dx))]
            }
            Op::LogSigmoid(a) => {
                let xv = self.value(*a).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * kernels::sigmoid(-x))
                    .collect();
                vec![(*a, like(*a, dx))]
            }
            Op::Exp(a) => {
                let dx = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                vec![(*a, like(*a, dx))]
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, dx))]
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; gd.len()];
                let mut db = vec![0.0; gd.len()];
                for j in 0..gd.len() {
                    let a_wins = if take_min { av[j] <= bv[j] } else { av[j] >= bv[j] };
                    if a_wins {
                        da[j] = gd[j];
                    } else {
                        db[j] = gd[j];
                    }
                }
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                vec![(*a, like(*a, vec![gd[0]; n]))]
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, like(*a, vec![gd[0] / n as f32; n]))]
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, dim, inner) = outer_inner(in_shape, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = outer_inner(out.shape(), *axis);
                let mut grads: Vec<Vec<f32>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                for o in 0..outer {
                    let mut pos = o * total * inner;
                    for (k, v) in inputs.iter().enumerate() {
                        let d = self.shape(*v)[*axis] * inner;
                        grads[k].extend_from_slice(&gd[pos..pos + d]);
                        pos += d;
                    }
                }
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(v, data)| (*v, like(*v, data)))
                    .collect()
            }
            Op::IndexSelect { x, rows } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..inner {
                        dx[r * inner + j] += gd[k * inner + j];
                    }
                }
                vec![(*x, like(*x, dx))]
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&x| f(x)).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let r = g.matmul(a, b).unwrap();
        assert_eq!(g.value(r).data(), &[11.0]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let o = g.constant(Tensor::ones(&[3, 2]));
        let r = g.matmul(z, o).unwrap();
        assert_eq!(g.value(r).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn add_rejects_general_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.add_bias(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[3, 4], 1.0, &mut rand::rng()));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn uniform_cross_entropy_gradient_is_p_minus_onehot() {
        let v = 5;
        let mut g = Graph::new();
        let logits = g.param(Tensor::zeros(&[1, v]));
        let ce = g.cross_entropy(logits, &[Some(3)]).unwrap();
        assert!((g.value(ce).item().unwrap() - (v as f32).ln()).abs() < 1e-6);
        g.backward(ce).unwrap();
        let grad = g.grad(logits).unwrap().data();
        for (j, &d) in grad.iter().enumerate() {
            let expect = 0.2 - if j == 3 { 1.0 } else { 0.0 };
            assert!((d - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut rng = rand::rng();
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[4, 6], 1.0, &mut rng));
        let w = g.param(Tensor::randn(&[6, 3], 1.0, &mut rng));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let p = g.softmax(h);
        let l = g.sum(p);
        let l2 = g.mul(h, p).unwrap();
        let l2 = g.mean(l2);
        let loss = g.add(l, l2).unwrap();
        g.backward(loss).unwrap();
        let first = (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone());
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), first.0.data());
        assert_eq!(g.grad(w).unwrap().data(), first.1.data());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_layer_norm_standardises() {
        let mut rng = rand::rng();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[8, 16], 3.0, &mut rng));
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(16) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let gam = g.constant(Tensor::ones(&[16]));
        let bet = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gam, bet).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f32>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn causal_mask_blocks_future_keys() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 3]));
        let m = g.causal_mask(x, 0).unwrap();
        let p = g.softmax(m);
        let v = g.value(p).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert!((v[3] - 0.5).abs() < 1e-7 && v[5] == 0.0);
    }
}
