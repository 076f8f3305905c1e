//! Per-GPU throughput as the cluster grows.

use serde::Serialize;

use crate::{evaluate, invalid, HardwareSpec, MemoryOptions, PerfReport, Result, WorkloadSpec};

#[derive(Clone, Debug, Serialize)]
pub struct ScalingPoint {
    pub gpus: usize,
    pub batch_per_gpu: usize,
    /// Batch limited by memory rather than the global batch cap.
    pub memory_bound: bool,
    pub report: PerfReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingCurve {
    pub points: Vec<ScalingPoint>,
}

impl ScalingCurve {
    /// Cluster throughput ratio over world-size ratio for consecutive
    /// points; above 1 is super-linear.
    pub fn step_efficiency(&self) -> Vec<f64> {
        self.points
            .windows(2)
            .map(|p| p[1].report.effective_tflops / p[0].report.effective_tflops)
            .collect()
    }

    /// World sizes at which scaling turns from super-linear to not.
    pub fn knees(&self) -> Vec<usize> {
        let eff = self.step_efficiency();
        eff.windows(2)
            .enumerate()
            .filter(|(_, e)| e[0] > 1.0 && e[1] <= 1.0)
            .map(|(i, _)| self.points[i + 1].gpus)
            .collect()
    }

    /// Single knee, present only when every step before it is super-linear
    /// and every step after it is not.
    pub fn knee(&self) -> Option<usize> {
        let eff = self.step_efficiency();
        let split = eff.iter().position(|&e| e <= 1.0)?;
        if split == 0 || eff[split..].iter().any(|&e| e > 1.0) {
            return None;
        }
        Some(self.points[split].gpus)
    }
}

pub fn scaling_curve(w: &WorkloadSpec, hw: &HardwareSpec, gpus: &[usize], opts: MemoryOptions) -> Result<ScalingCurve> {
    if gpus.windows(2).any(|p| p[0] >= p[1]) {
        return invalid("gpu list", "must be strictly ascending");
    }
    let points = gpus
        .iter()
        .map(|&g| {
            let report = evaluate(w, hw, g, 1, opts)?;
            Ok(ScalingPoint {
                gpus: g,
                batch_per_gpu: report.batch_per_gpu,
                memory_bound: report.batch_per_gpu < (w.global_batch / g).max(1),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalingCurve { points })
}
