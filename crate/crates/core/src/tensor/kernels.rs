//! Raw slice kernels shared by the autodiff graph and the inference path.
//!
//! Loop orders are fixed so that both paths round identically wherever they
//! perform the same arithmetic.

pub const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub fn matmul_nt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn log_softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Normalises one row; returns `(rstd)` and writes x̂ into `xhat` and the
/// affine output into `out`.
pub fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], xhat: &mut [f32], out: &mut [f32]) -> f32 {
    let d = x.len() as f32;
    let mean = x.iter().sum::<f32>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        let h = (x[i] - mean) * rstd;
        xhat[i] = h;
        out[i] = h * gamma[i] + beta[i];
    }
    rstd
}

pub fn gelu(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)`, stable for large |x|.
pub fn log_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Swap axes `a` and `b` of a row-major buffer.
pub fn swap_axes(data: &[f32], shape: &[usize], a: usize, b: usize) -> (Vec<f32>, Vec<usize>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the input buffer for each output axis
    let mut strides = in_strides.clone();
    strides.swap(a, b);
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}
