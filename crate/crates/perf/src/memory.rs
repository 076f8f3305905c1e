//! Per-GPU memory: partitioned model states plus per-pair working memory.

use serde::{Deserialize, Serialize};

use crate::{invalid, HardwareSpec, PerfError, Result, WorkloadSpec};

/// Bytes per parameter: fp16 weights and gradients, fp32 Adam (master
/// copy and two moments).
pub const PARAM_BYTES: f64 = 2.0;
pub const GRAD_BYTES: f64 = 2.0;
pub const OPTIMIZER_BYTES: f64 = 12.0;

/// Bytes per token per layer per hidden unit for checkpointed activations
/// and the KV cache together.
pub const ACTIVATION_BYTES: f64 = 4.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryOptions {
    /// Optimizer state lives in host memory.
    pub offload: bool,
    /// Trainable fraction under LoRA; scales gradient and optimizer bytes.
    pub lora: Option<f64>,
}

impl MemoryOptions {
    pub const LORA_DEFAULT: f64 = 0.01;

    pub fn bytes_per_param(&self) -> f64 {
        let f = self.lora.unwrap_or(1.0);
        let opt = if self.offload { 0.0 } else { OPTIMIZER_BYTES };
        PARAM_BYTES + (GRAD_BYTES + opt) * f
    }
}

/// Model-state bytes per GPU with states partitioned over `gpus`.
pub fn states_bytes(params: f64, gpus: usize, opts: MemoryOptions) -> f64 {
    params * opts.bytes_per_param() / gpus as f64
}

pub fn per_sample_bytes(w: &WorkloadSpec) -> f64 {
    w.per_sample_bytes
        .unwrap_or_else(|| w.seq_len() * (w.actor.hidden * w.actor.layers) as f64 * ACTIVATION_BYTES)
}

/// Largest pairs-per-GPU batch: what fits beside the states, capped by
/// the global batch split over `gpus`.
pub fn max_batch_per_gpu(w: &WorkloadSpec, hw: &HardwareSpec, gpus: usize, opts: MemoryOptions) -> Result<usize> {
    if gpus == 0 {
        return invalid("parallelism", "gpus must be >= 1");
    }
    if let Some(f) = opts.lora {
        if !(f > 0.0 && f <= 1.0) {
            return invalid("lora fraction", format!("{f} outside (0, 1]"));
        }
    }
    let states = states_bytes(w.actor.params, gpus, opts);
    let per = per_sample_bytes(w);
    if states + per > hw.mem_bytes {
        return Err(PerfError::Infeasible {
            needed: states + per,
            available: hw.mem_bytes,
        });
    }
    let fit = ((hw.mem_bytes - states) / per).floor() as usize;
    let cap = (w.global_batch / gpus).max(1);
    Ok(fit.min(cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::GB;

    fn w13() -> WorkloadSpec {
        WorkloadSpec::new("13b", "350m").unwrap()
    }

    #[test]
    fn stated_example() {
        let mut w = w13();
        w.per_sample_bytes = Some(0.5 * GB);
        let hw = HardwareSpec::preset("a100-40g", 8).unwrap();
        assert_eq!(states_bytes(13e9, 8, MemoryOptions::default()), 26.0 * GB);
        assert_eq!(max_batch_per_gpu(&w, &hw, 8, MemoryOptions::default()).unwrap(), 28);
    }

    #[test]
    fn unbounded_memory_hits_the_cap() {
        let mut hw = HardwareSpec::preset("a100-80g", 1).unwrap();
        hw.mem_bytes = 1e18;
        for gpus in [1, 2, 8, 64, 1024] {
            assert_eq!(max_batch_per_gpu(&w13(), &hw, gpus, MemoryOptions::default()).unwrap(), 1024 / gpus);
        }
    }

    #[test]
    fn doubling_gpus_more_than_doubles_a_memory_bound_batch() {
        let mut w = w13();
        w.per_sample_bytes = Some(0.5 * GB);
        w.global_batch = 1 << 20;
        // needs states > 2/3 of memory; at 40GB 13B only reaches 54/28
        let hw = HardwareSpec::preset("v100-32g", 8).unwrap();
        let b8 = max_batch_per_gpu(&w, &hw, 8, MemoryOptions::default()).unwrap();
        let b16 = max_batch_per_gpu(&w, &hw, 16, MemoryOptions::default()).unwrap();
        assert!(b16 > 2 * b8, "{b8} -> {b16}");
    }

    #[test]
    fn options_shrink_states() {
        let o = MemoryOptions { offload: true, lora: None };
        assert_eq!(o.bytes_per_param(), 4.0);
        let l = MemoryOptions { offload: false, lora: Some(0.01) };
        assert!((l.bytes_per_param() - 2.14).abs() < 1e-12);
        let hw = HardwareSpec::preset("a100-40g", 1).unwrap();
        assert!(matches!(
            max_batch_per_gpu(&w13(), &hw, 1, MemoryOptions::default()),
            Err(PerfError::Infeasible { .. })
        ));
    }
}
