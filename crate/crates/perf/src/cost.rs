//! Dollars, hours and single-GPU feasibility.

use crate::opt_shape;

/// Working-memory overhead on top of fp16 weights for single-GPU training
/// with offload and LoRA.
pub const FEASIBILITY_OVERHEAD: f64 = 1.6;

pub fn dollars(hours: f64, gpus: usize, price_per_gpu_hour: f64) -> f64 {
    hours * gpus as f64 * price_per_gpu_hour
}

/// `(hours, dollars)` to process `epoch_tokens` at `tokens_per_sec`.
pub fn estimate_cost(epoch_tokens: f64, tokens_per_sec: f64, gpus: usize, price_per_gpu_hour: f64) -> (f64, f64) {
    let hours = epoch_tokens / tokens_per_sec / 3600.0;
    (hours, dollars(hours, gpus, price_per_gpu_hour))
}

/// `2N(1 + k) <= mem`
pub fn feasible_single_gpu(params: f64, mem_bytes: f64, k: f64) -> bool {
    2.0 * params * (1.0 + k) <= mem_bytes
}

/// Largest OPT size that fits on one GPU.
pub fn max_feasible_model(mem_bytes: f64, k: f64) -> Option<String> {
    crate::opt_names()
        .filter(|n| feasible_single_gpu(opt_shape(n).map(|s| s.params).unwrap_or(f64::INFINITY), mem_bytes, k))
        .last()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::GB;

    #[test]
    fn hours_to_dollars() {
        assert!((dollars(9.0, 8, 4.0) - 288.0).abs() < 1e-9);
        assert!((dollars(1.25, 64, 4.0) - 320.0).abs() < 1e-9);
        let (h, d) = estimate_cost(135e6, 1000.0, 8, 4.0);
        let (h2, d2) = estimate_cost(135e6, 500.0, 8, 4.0);
        assert!((h2 / h - 2.0).abs() < 1e-12 && (d2 / d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_gpu_examples() {
        let k = FEASIBILITY_OVERHEAD;
        assert!(feasible_single_gpu(13e9, 80.0 * GB, k));
        assert!(!feasible_single_gpu(30e9, 80.0 * GB, k));
        assert!(!feasible_single_gpu(6.7e9, 32.0 * GB, k));
        assert!(feasible_single_gpu(2.7e9, 32.0 * GB, k));
        assert_eq!(max_feasible_model(48.0 * GB, k).as_deref(), Some("opt-6.7b"));
    }
}
