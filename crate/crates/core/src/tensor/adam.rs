use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// `(1 - beta1^step, 1 - beta2^step)`
    pub fn bias_corrections(&self, step: u64) -> (f32, f32) {
        let t = step as i32;
        (
            (1.0 - (self.beta1 as f64).powi(t)) as f32,
            (1.0 - (self.beta2 as f64).powi(t)) as f32,
        )
    }
}

/// One Adam update over matching slices. `grad_scale` multiplies the raw
/// gradient first (global-norm clipping).
///
/// Shared by the dense optimizer and by every ZeRO shard so that both produce
/// the same bytes.
#[allow(clippy::too_many_arguments)]
pub fn adam_kernel(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    cfg: &AdamConfig,
    lr: f32,
    step: u64,
    grad_scale: f32,
) {
    let (bc1, bc2) = cfg.bias_corrections(step);
    for i in 0..param.len() {
        let g = grad[i] * grad_scale;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Dense Adam state: one first/second moment buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Bias-corrected Adam step over every parameter.
    ///
    /// Gradients are checked for non-finite values before anything is
    /// modified; the offending tensor is named in the error.
    pub fn update<S: AsRef<str>>(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[S],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adam_update",
                    format!("param {:?} grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                let name = names
                    .get(i)
                    .map(|s| s.as_ref().to_string())
                    .unwrap_or_else(|| format!("param[{i}]"));
                return Err(Error::Numeric {
                    name: format!("gradient of {name}"),
                });
            }
        }
        self.step += 1;
        let lr = self.config.lr;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adam_kernel(
                p.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                &self.config,
                lr,
                self.step,
                1.0,
            );
        }
        Ok(())
    }
}
