//! f64 reference implementations of every graph op and of the transformer
//! forward pass, plus the finite-difference comparison harness.
//!
//! Nothing here calls into the graph for values; the graph is only used for
//! the analytic gradients under test.
#![allow(dead_code)]

use deskrlhf_core::model::{HeadKind, Model, ModelConfig};
use deskrlhf_core::tensor::gradcheck::{finite_difference_gradient, relative_error};
use deskrlhf_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        T64 { shape: shape.to_vec(), data }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> T64 {
        T64::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    fn zip(&self, o: &T64, f: impl Fn(f64, f64) -> f64) -> T64 {
        assert_eq!(self.shape, o.shape);
        T64::new(&self.shape, self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect())
    }

    fn last(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

pub fn matmul(a: &T64, b: &T64) -> T64 {
    let (batch, m, k, n) = if a.shape.len() == 2 {
        (1, a.shape[0], a.shape[1], b.shape[1])
    } else {
        (a.shape[0], a.shape[1], a.shape[2], b.shape[2])
    };
    let mut out = vec![0.0; batch * m * n];
    for t in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data[t * m * k + i * k + p] * b.data[t * k * n + p * n + j];
                }
                out[t * m * n + i * n + j] = s;
            }
        }
    }
    let shape = if a.shape.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
    T64::new(&shape, out)
}

pub fn add(a: &T64, b: &T64) -> T64 {
    a.zip(b, |x, y| x + y)
}

pub fn sub(a: &T64, b: &T64) -> T64 {
    a.zip(b, |x, y| x - y)
}

pub fn mul(a: &T64, b: &T64) -> T64 {
    a.zip(b, |x, y| x * y)
}

pub fn add_bias(a: &T64, b: &T64) -> T64 {
    let d = a.last();
    T64::new(&a.shape, a.data.iter().enumerate().map(|(i, x)| x + b.data[i % d]).collect())
}

pub fn scale(a: &T64, s: f64) -> T64 {
    a.map(|x| x * s)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn transpose(a: &T64, d0: usize, d1: usize) -> T64 {
    let mut shape = a.shape.clone();
    shape.swap(d0, d1);
    let (si, so) = (strides(&a.shape), strides(&shape));
    let mut out = vec![0.0; a.data.len()];
    for (flat, v) in a.data.iter().enumerate() {
        let mut idx: Vec<usize> = si.iter().zip(&a.shape).map(|(s, n)| flat / s % n).collect();
        idx.swap(d0, d1);
        out[idx.iter().zip(&so).map(|(i, s)| i * s).sum::<usize>()] = *v;
    }
    T64::new(&shape, out)
}

pub fn reshape(a: &T64, shape: &[usize]) -> T64 {
    T64::new(shape, a.data.clone())
}

pub fn softmax(a: &T64) -> T64 {
    let d = a.last();
    let mut out = Vec::with_capacity(a.data.len());
    for row in a.data.chunks(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / s));
    }
    T64::new(&a.shape, out)
}

pub fn log_softmax(a: &T64) -> T64 {
    let d = a.last();
    let mut out = Vec::with_capacity(a.data.len());
    for row in a.data.chunks(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    T64::new(&a.shape, out)
}

pub fn layer_norm(x: &T64, g: &T64, b: &T64) -> T64 {
    let d = x.last();
    let mut out = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * r * g.data[i] + b.data[i]));
    }
    T64::new(&x.shape, out)
}

pub fn gelu(a: &T64) -> T64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    a.map(|x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
}

pub fn sigmoid(a: &T64) -> T64 {
    a.map(|x| 1.0 / (1.0 + (-x).exp()))
}

pub fn log_sigmoid(a: &T64) -> T64 {
    a.map(|x| -(1.0 + (-x).exp()).ln())
}

pub fn exp(a: &T64) -> T64 {
    a.map(f64::exp)
}

pub fn embedding(table: &T64, ids: &[usize]) -> T64 {
    let d = table.shape[1];
    let data = ids.iter().flat_map(|&i| table.data[i * d..(i + 1) * d].to_vec()).collect();
    T64::new(&[ids.len(), d], data)
}

pub fn causal_mask(a: &T64) -> T64 {
    let n = a.shape.len();
    let (t, s) = (a.shape[n - 2], a.shape[n - 1]);
    let mut out = a.data.clone();
    for (flat, v) in out.iter_mut().enumerate() {
        let (i, j) = (flat / s % t, flat % s);
        if j > i {
            *v = f64::NEG_INFINITY;
        }
    }
    T64::new(&a.shape, out)
}

pub fn cross_entropy(logits: &T64, targets: &[Option<usize>]) -> f64 {
    let lsm = log_softmax(logits);
    let v = logits.shape[1];
    let mut total = 0.0;
    let mut n = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            total -= lsm.data[r * v + t];
            n += 1;
        }
    }
    total / n as f64
}

pub fn gather_log_softmax(logits: &T64, ids: &[usize]) -> T64 {
    let lsm = log_softmax(logits);
    let v = logits.shape[1];
    T64::new(&[ids.len()], ids.iter().enumerate().map(|(r, &i)| lsm.data[r * v + i]).collect())
}

pub fn slice(a: &T64, axis: usize, start: usize, end: usize) -> T64 {
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let dim = a.shape[axis];
    let mut data = Vec::new();
    for o in 0..outer {
        data.extend_from_slice(&a.data[(o * dim + start) * inner..(o * dim + end) * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = end - start;
    T64::new(&shape, data)
}

pub fn concat(parts: &[&T64], axis: usize) -> T64 {
    let base = &parts[0].shape;
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut data = Vec::new();
    for o in 0..outer {
        for p in parts {
            let d = p.shape[axis];
            data.extend_from_slice(&p.data[o * d * inner..(o + 1) * d * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    T64::new(&shape, data)
}

pub fn index_select(a: &T64, rows: &[usize]) -> T64 {
    let inner: usize = a.shape[1..].iter().product();
    let data = rows.iter().flat_map(|&r| a.data[r * inner..(r + 1) * inner].to_vec()).collect();
    let mut shape = a.shape.clone();
    shape[0] = rows.len();
    T64::new(&shape, data)
}

/// Reference transformer over f64 parameters in canonical order. Attention
/// is computed head by head with explicit loops.
pub fn transformer(cfg: &ModelConfig, p: &[T64], tokens: &[usize]) -> T64 {
    let (t, d, h) = (tokens.len(), cfg.d_model, cfg.n_heads);
    let dh = d / h;
    let pos: Vec<usize> = (0..t).collect();
    let mut x = add(&embedding(&p[0], tokens), &embedding(&p[1], &pos));
    for l in 0..cfg.n_layers {
        let w = |i: usize| &p[2 + l * 16 + i];
        let hn = layer_norm(&x, w(0), w(1));
        let q = add_bias(&matmul(&hn, w(2)), w(3));
        let k = add_bias(&matmul(&hn, w(4)), w(5));
        let v = add_bias(&matmul(&hn, w(6)), w(7));
        let mut ctx = vec![0.0; t * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| q.data[i * d + off + c] * k.data[j * d + off + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let probs = softmax(&T64::new(&[i + 1], scores));
                for (j, pj) in probs.data.iter().enumerate() {
                    for c in 0..dh {
                        ctx[i * d + off + c] += pj * v.data[j * d + off + c];
                    }
                }
            }
        }
        let attn = add_bias(&matmul(&T64::new(&[t, d], ctx), w(8)), w(9));
        x = add(&x, &attn);
        let hn = layer_norm(&x, w(10), w(11));
        let ff = gelu(&add_bias(&matmul(&hn, w(12)), w(13)));
        let ff = add_bias(&matmul(&ff, w(14)), w(15));
        x = add(&x, &ff);
    }
    let base = 2 + cfg.n_layers * 16;
    let xf = layer_norm(&x, &p[base], &p[base + 1]);
    match cfg.head_kind {
        HeadKind::Lm => matmul(&xf, &p[base + 2]),
        HeadKind::Scalar => {
            let v = add_bias(&matmul(&xf, &p[base + 2]), &p[base + 3]);
            reshape(&v, &[t])
        }
    }
}

// ---- harness ------------------------------------------------------------

type Build = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Var>;
type Reference = Box<dyn Fn(&[T64]) -> T64>;

/// One op under test: input shapes, the graph construction, its f64 twin,
/// and a predicate that keeps sample points away from kinks.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    pub reference: Reference,
    pub smooth_at: fn(&[Vec<f32>]) -> bool,
}

fn any(_: &[Vec<f32>]) -> bool {
    true
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph<'_>, &[Var]) -> Var + 'static,
    reference: impl Fn(&[T64]) -> T64 + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
        reference: Box::new(reference),
        smooth_at: any,
    }
}

fn scalar(x: f64) -> T64 {
    T64::new(&[], vec![x])
}

pub fn op_cases() -> Vec<OpCase> {
    let mut v = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]).unwrap(), |x| matmul(&x[0], &x[1])),
        case(
            "matmul_batched",
            &[&[2, 3, 4], &[2, 4, 3]],
            |g, x| g.matmul(x[0], x[1]).unwrap(),
            |x| matmul(&x[0], &x[1]),
        ),
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1]).unwrap(), |x| add(&x[0], &x[1])),
        case("add_bias", &[&[2, 3, 4], &[4]], |g, x| g.add_bias(x[0], x[1]).unwrap(), |x| add_bias(&x[0], &x[1])),
        case("sub", &[&[5], &[5]], |g, x| g.sub(x[0], x[1]).unwrap(), |x| sub(&x[0], &x[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, x| g.mul(x[0], x[1]).unwrap(), |x| mul(&x[0], &x[1])),
        case("scale", &[&[6]], |g, x| g.scale(x[0], -0.7), |x| scale(&x[0], -0.7f32 as f64)),
        case("neg", &[&[6]], |g, x| g.neg(x[0]), |x| scale(&x[0], -1.0)),
        case("transpose", &[&[2, 3, 4]], |g, x| g.transpose(x[0], 0, 2).unwrap(), |x| transpose(&x[0], 0, 2)),
        case("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4]).unwrap(), |x| reshape(&x[0], &[3, 4])),
        case("softmax", &[&[3, 5]], |g, x| g.softmax(x[0]), |x| softmax(&x[0])),
        case("log_softmax", &[&[3, 5]], |g, x| g.log_softmax(x[0]), |x| log_softmax(&x[0])),
        case(
            "layer_norm",
            &[&[3, 6], &[6], &[6]],
            |g, x| g.layer_norm(x[0], x[1], x[2]).unwrap(),
            |x| layer_norm(&x[0], &x[1], &x[2]),
        ),
        case("gelu", &[&[8]], |g, x| g.gelu(x[0]), |x| gelu(&x[0])),
        case("sigmoid", &[&[8]], |g, x| g.sigmoid(x[0]), |x| sigmoid(&x[0])),
        case("log_sigmoid", &[&[8]], |g, x| g.log_sigmoid(x[0]), |x| log_sigmoid(&x[0])),
        case("exp", &[&[8]], |g, x| g.exp(x[0]), |x| exp(&x[0])),
        case(
            "embedding",
            &[&[5, 3]],
            |g, x| g.embedding(x[0], &[4, 0, 4, 2]).unwrap(),
            |x| embedding(&x[0], &[4, 0, 4, 2]),
        ),
        case(
            "causal_mask",
            &[&[2, 4, 4]],
            |g, x| {
                let m = g.causal_mask(x[0], 0).unwrap();
                g.softmax(m)
            },
            |x| softmax(&causal_mask(&x[0])),
        ),
        case(
            "cross_entropy",
            &[&[4, 5]],
            |g, x| g.cross_entropy(x[0], &[Some(1), None, Some(4), Some(0)]).unwrap(),
            |x| scalar(cross_entropy(&x[0], &[Some(1), None, Some(4), Some(0)])),
        ),
        case(
            "gather_log_softmax",
            &[&[3, 5]],
            |g, x| g.gather_log_softmax(x[0], &[2, 2, 0]).unwrap(),
            |x| gather_log_softmax(&x[0], &[2, 2, 0]),
        ),
        case("slice", &[&[3, 5]], |g, x| g.slice(x[0], 1, 1, 4).unwrap(), |x| slice(&x[0], 1, 1, 4)),
        case(
            "concat",
            &[&[2, 3], &[2, 2]],
            |g, x| g.concat(&[x[0], x[1]], 1).unwrap(),
            |x| concat(&[&x[0], &x[1]], 1),
        ),
        case(
            "index_select",
            &[&[4, 3]],
            |g, x| g.index_select(x[0], &[3, 1, 3]).unwrap(),
            |x| index_select(&x[0], &[3, 1, 3]),
        ),
        case("sum", &[&[2, 3]], |g, x| g.sum(x[0]), |x| scalar(x[0].data.iter().sum())),
        case("mean", &[&[2, 3]], |g, x| g.mean(x[0]), |x| scalar(x[0].data.iter().sum::<f64>() / 6.0)),
    ];
    let mut clamp = case(
        "clamp",
        &[&[8]],
        |g, x| g.clamp(x[0], -0.5, 0.5),
        |x| x[0].map(|v| v.clamp(-0.5, 0.5)),
    );
    clamp.smooth_at = |x| x[0].iter().all(|v| (v.abs() - 0.5).abs() > 1e-3);
    let mut minimum = case("minimum", &[&[8], &[8]], |g, x| g.minimum(x[0], x[1]).unwrap(), |x| x[0].zip(&x[1], f64::min));
    minimum.smooth_at = apart;
    let mut maximum = case("maximum", &[&[8], &[8]], |g, x| g.maximum(x[0], x[1]).unwrap(), |x| x[0].zip(&x[1], f64::max));
    maximum.smooth_at = apart;
    v.extend([clamp, minimum, maximum]);
    v
}

fn apart(x: &[Vec<f32>]) -> bool {
    x[0].iter().zip(&x[1]).all(|(a, b)| (a - b).abs() > 1e-3)
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Relative error between the graph gradient and the f64 central difference
/// for one random point.
pub fn check_op(c: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f32>> = loop {
        let draw: Vec<Vec<f32>> = c
            .shapes
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.random_range(-1.5f32..1.5)).collect())
            .collect();
        if (c.smooth_at)(&draw) {
            break draw;
        }
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = c
        .shapes
        .iter()
        .zip(&inputs)
        .map(|(s, d)| g.param(Tensor::new(s.clone(), d.clone()).unwrap()))
        .collect();
    let out = (c.build)(&mut g, &vars);
    let n = g.value(out).numel();
    let weights: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let w = g.constant(Tensor::new(g.shape(out).to_vec(), weights.clone()).unwrap());
    let wo = g.mul(out, w).unwrap();
    let loss = g.sum(wo);
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| to64(g.grad(v).unwrap().data())).collect();

    let sizes: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|v| to64(v)).collect();
    let w64 = to64(&weights);
    let f = |x: &[f64]| {
        let mut at = 0;
        let ts: Vec<T64> = c
            .shapes
            .iter()
            .zip(&sizes)
            .map(|(s, &n)| {
                let t = T64::new(s, x[at..at + n].to_vec());
                at += n;
                t
            })
            .collect();
        let y = (c.reference)(&ts);
        y.data.iter().zip(&w64).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = finite_difference_gradient(f, &flat, 1e-6).unwrap();
    relative_error(&analytic, &numeric, 1e-8)
}

pub fn gradcheck_config(head: HeadKind) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 11,
        max_seq_len: 8,
        head_kind: head,
    }
}

/// Graph gradient of a 2-layer transformer loss against the f64 reference,
/// on `coords` randomly chosen parameter coordinates.
pub fn check_transformer(head: HeadKind, seed: u64, coords: usize) -> f64 {
    let cfg = gradcheck_config(head);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(cfg.clone(), seed).unwrap();
    // move off the zero init so every parameter matters
    for p in &mut model.params {
        for x in p.data_mut() {
            *x += rng.random_range(-0.2f32..0.2);
        }
    }
    let t = rng.random_range(3..=cfg.max_seq_len);
    let tokens: Vec<usize> = (0..t).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let targets: Vec<Option<usize>> = (0..t).map(|_| Some(rng.random_range(0..cfg.vocab_size))).collect();
    let weights: Vec<f32> = (0..t).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let ids: Vec<u32> = tokens.iter().map(|&x| x as u32).collect();

    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let out = b.forward(&mut g, &ids).unwrap();
    let loss = match head {
        HeadKind::Lm => g.cross_entropy(out, &targets).unwrap(),
        HeadKind::Scalar => {
            let w = g.constant(Tensor::from_vec(weights.clone()));
            let m = g.mul(out, w).unwrap();
            g.sum(m)
        }
    };
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = b.vars.iter().flat_map(|&v| to64(g.grad(v).unwrap().data())).collect();

    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape().to_vec()).collect();
    let flat: Vec<f64> = model.params.iter().flat_map(|p| to64(p.data())).collect();
    let picks = rand::seq::index::sample(&mut rng, flat.len(), coords.min(flat.len())).into_vec();
    let eval = |x: &[f64]| {
        let mut at = 0;
        let ps: Vec<T64> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product::<usize>();
                let t = T64::new(s, x[at..at + n].to_vec());
                at += n;
                t
            })
            .collect();
        let y = transformer(&cfg, &ps, &tokens);
        match head {
            HeadKind::Lm => cross_entropy(&y, &targets),
            HeadKind::Scalar => y.data.iter().zip(&weights).map(|(a, &w)| a * w as f64).sum(),
        }
    };
    // finite differences on the picked coordinates only
    let sub = |z: &[f64]| {
        let mut x = flat.clone();
        for (&i, &v) in picks.iter().zip(z) {
            x[i] = v;
        }
        eval(&x)
    };
    let z0: Vec<f64> = picks.iter().map(|&i| flat[i]).collect();
    let numeric = finite_difference_gradient(sub, &z0, 1e-6).unwrap();
    let chosen: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
    relative_error(&chosen, &numeric, 1e-8)
}
