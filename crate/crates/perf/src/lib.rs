//! Analytic cost model for RLHF step 3 at cluster scale: flops per phase,
//! roofline phase times, memory-limited batch sizes, scaling curves,
//! dollar costs and single-GPU feasibility.
//!
//! Nothing here runs a model; every number is closed-form arithmetic over
//! [`WorkloadSpec`] and [`HardwareSpec`].

pub mod chart;
pub mod cost;
pub mod memory;
pub mod scaling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::{dollars, estimate_cost, feasible_single_gpu, max_feasible_model, FEASIBILITY_OVERHEAD};
pub use memory::{max_batch_per_gpu, per_sample_bytes, states_bytes, MemoryOptions};
pub use scaling::{scaling_curve, ScalingCurve, ScalingPoint};

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    #[error("model states need {needed:.3e} bytes per GPU but only {available:.3e} are available")]
    Infeasible { needed: f64, available: f64 },
    #[error("unknown {kind} `{name}`; known: {known}")]
    Unknown { kind: &'static str, name: String, known: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PerfError>;

fn invalid<T>(what: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(PerfError::Invalid {
        what,
        detail: detail.into(),
    })
}

pub const GB: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    pub gpus: usize,
    pub mem_bytes: f64,
    pub peak_tflops: f64,
    pub bandwidth_gbps: f64,
    pub price_per_gpu_hour: f64,
    /// Achieved fraction of peak in compute-bound phases.
    pub mfu: f64,
    /// Achieved fraction of peak bandwidth while decoding.
    pub gen_efficiency: f64,
}

/// Default efficiency factors, calibrated so that OPT-13B on 8x A100-80GB
/// lands near 9 hours per epoch.
pub const DEFAULT_MFU: f64 = 0.22;
pub const DEFAULT_GEN_EFFICIENCY: f64 = 0.3;
pub const DEFAULT_PRICE: f64 = 4.0;

const GPUS: &[(&str, f64, f64, f64)] = &[
    // name, memory GB, dense fp16 TFLOPs, bandwidth GB/s
    ("v100-32g", 32.0, 125.0, 900.0),
    ("a6000-48g", 48.0, 155.0, 768.0),
    ("a100-40g", 40.0, 312.0, 1555.0),
    ("a100-80g", 80.0, 312.0, 2039.0),
];

impl HardwareSpec {
    pub fn preset(name: &str, gpus: usize) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let &(n, mem, tf, bw) = GPUS.iter().find(|g| g.0 == key).ok_or_else(|| PerfError::Unknown {
            kind: "gpu",
            name: name.into(),
            known: Self::preset_names().collect::<Vec<_>>().join(", "),
        })?;
        let hw = HardwareSpec {
            name: n.into(),
            gpus,
            mem_bytes: mem * GB,
            peak_tflops: tf,
            bandwidth_gbps: bw,
            price_per_gpu_hour: DEFAULT_PRICE,
            mfu: DEFAULT_MFU,
            gen_efficiency: DEFAULT_GEN_EFFICIENCY,
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        GPUS.iter().map(|g| g.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gpus", self.gpus as f64),
            ("memory", self.mem_bytes),
            ("peak", self.peak_tflops),
            ("bandwidth", self.bandwidth_gbps),
            ("price", self.price_per_gpu_hour),
        ];
        for (what, v) in positive {
            if !(v > 0.0) {
                return invalid("hardware", format!("{what} must be positive, got {v}"));
            }
        }
        for (what, v) in [("mfu", self.mfu), ("gen efficiency", self.gen_efficiency)] {
            if !(v > 0.0 && v <= 1.0) {
                return invalid("hardware", format!("{what} {v} outside (0, 1]"));
            }
        }
        Ok(())
    }

    fn flops_per_sec(&self) -> f64 {
        self.peak_tflops * 1e12
    }
}

/// Hidden size and layer count of the OPT family, keyed by nominal size.
const OPT: &[(&str, f64, usize, usize)] = &[
    ("125m", 0.125e9, 768, 12),
    ("350m", 0.35e9, 1024, 24),
    ("1.3b", 1.3e9, 2048, 24),
    ("2.7b", 2.7e9, 2560, 32),
    ("6.7b", 6.7e9, 4096, 32),
    ("13b", 13e9, 5120, 40),
    ("30b", 30e9, 7168, 48),
    ("66b", 66e9, 9216, 64),
    ("175b", 175e9, 12288, 96),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptShape {
    pub name: String,
    pub params: f64,
    pub hidden: usize,
    pub layers: usize,
}

pub fn opt_shape(name: &str) -> Result<OptShape> {
    let key = name.to_ascii_lowercase();
    let key = key.trim_start_matches("facebook/").trim_start_matches("opt-");
    OPT.iter()
        .find(|o| o.0 == key)
        .map(|&(n, p, h, l)| OptShape {
            name: format!("opt-{n}"),
            params: p,
            hidden: h,
            layers: l,
        })
        .ok_or_else(|| PerfError::Unknown {
            kind: "model",
            name: name.into(),
            known: OPT.iter().map(|o| format!("opt-{}", o.0)).collect::<Vec<_>>().join(", "),
        })
}

pub fn opt_names() -> impl Iterator<Item = String> {
    OPT.iter().map(|o| format!("opt-{}", o.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub actor: OptShape,
    /// Critic and reward model size.
    pub critic_params: f64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub queries: usize,
    /// Query-answer pairs per optimizer step across the cluster.
    pub global_batch: usize,
    pub ppo_epochs: usize,
    /// Forward passes over the actor beyond its own forward and backward.
    pub extra_passes: f64,
    pub epoch_tokens: f64,
    /// Activation and KV bytes per pair; derived from the actor's shape when
    /// absent.
    pub per_sample_bytes: Option<f64>,
}

impl WorkloadSpec {
    /// Default PPO-stage workload for an actor and critic/reward pair: 256
    /// prompt and 256 generated tokens, 1024 pairs per step, 135M tokens.
    pub fn new(actor: &str, critic: &str) -> Result<Self> {
        Ok(WorkloadSpec {
            actor: opt_shape(actor)?,
            critic_params: opt_shape(critic)?.params,
            prompt_len: 256,
            gen_len: 256,
            queries: 131_900,
            global_batch: 1024,
            ppo_epochs: 1,
            extra_passes: 1.0,
            epoch_tokens: 135e6,
            per_sample_bytes: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.gen_len == 0 {
            return invalid("workload", "prompt and generation lengths must be positive");
        }
        if self.global_batch == 0 || self.ppo_epochs == 0 {
            return invalid("workload", "global batch and ppo epochs must be >= 1");
        }
        if !(self.actor.params > 0.0) || self.critic_params < 0.0 || self.extra_passes < 0.0 {
            return invalid("workload", "parameter counts must be positive");
        }
        Ok(())
    }

    pub fn seq_len(&self) -> f64 {
        (self.prompt_len + self.gen_len) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Gen,
    Train,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Gen => "gen",
            Phase::Train => "train",
        }
    }
}

/// Flops for one query-answer pair. Forward costs `2N` per token.
pub fn flops_phase(w: &WorkloadSpec, phase: Phase) -> f64 {
    let (n, m, s) = (w.actor.params, w.critic_params, w.seq_len());
    match phase {
        Phase::Gen => 2.0 * n * s,
        Phase::Train => {
            let actor = (6.0 * n + 2.0 * n * w.extra_passes) * s;
            // critic forward + backward, reward forward
            let small = 6.0 * m * s + 2.0 * m * s;
            w.ppo_epochs as f64 * actor + small
        }
    }
}

pub fn gen_fraction(w: &WorkloadSpec) -> f64 {
    let g = flops_phase(w, Phase::Gen);
    g / (g + flops_phase(w, Phase::Train))
}

/// Seconds for one global step of `batch` pairs per GPU on `gpus` GPUs.
///
/// Generation is a prefill plus `G` decode steps, each bounded below by
/// both compute and reading this worker's `2N/tp` weight bytes.
pub fn phase_time(w: &WorkloadSpec, hw: &HardwareSpec, batch: usize, phase: Phase, gpus: usize, tp: usize) -> f64 {
    let n = w.actor.params;
    let b = batch as f64;
    let compute = hw.flops_per_sec() * hw.mfu;
    match phase {
        Phase::Train => flops_phase(w, Phase::Train) * b / compute,
        Phase::Gen => {
            let _ = gpus;
            let prefill = 2.0 * n * w.prompt_len as f64 * b / compute;
            let step_compute = 2.0 * n * b / compute;
            let step_memory = 2.0 * n / tp as f64 / (hw.bandwidth_gbps * GB * hw.gen_efficiency);
            prefill + w.gen_len as f64 * step_compute.max(step_memory)
        }
    }
}

/// Total flops over total time per GPU, in TFLOPs.
pub fn effective_throughput(flops: &[f64], seconds: &[f64], gpus: usize) -> f64 {
    flops.iter().sum::<f64>() / seconds.iter().sum::<f64>() / gpus as f64 / 1e12
}

/// `1 / Σ fᵢ/xᵢ` with flop fractions `fᵢ`.
pub fn harmonic_mean(fractions: &[f64], throughputs: &[f64]) -> f64 {
    1.0 / fractions.iter().zip(throughputs).map(|(f, x)| f / x).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerfReport {
    pub model: String,
    pub params: f64,
    pub hardware: String,
    pub gpus: usize,
    pub tp: usize,
    pub batch_per_gpu: usize,
    pub gen_seconds: f64,
    pub train_seconds: f64,
    pub gen_tflops: f64,
    pub train_tflops: f64,
    pub effective_tflops: f64,
    pub epoch_hours: f64,
    pub dollars: f64,
}

impl PerfReport {
    /// Tokens per second across the cluster.
    pub fn token_rate(&self, w: &WorkloadSpec) -> f64 {
        (self.batch_per_gpu * self.gpus) as f64 * w.seq_len() / (self.gen_seconds + self.train_seconds)
    }

    pub fn mfu(&self, hw: &HardwareSpec) -> f64 {
        self.effective_tflops / hw.peak_tflops
    }
}

/// Full report for `gpus` GPUs at the largest batch that fits.
pub fn evaluate(w: &WorkloadSpec, hw: &HardwareSpec, gpus: usize, tp: usize, opts: MemoryOptions) -> Result<PerfReport> {
    w.validate()?;
    hw.validate()?;
    if gpus == 0 || tp == 0 || gpus % tp != 0 {
        return invalid("parallelism", format!("tp {tp} must divide gpus {gpus}"));
    }
    let b = max_batch_per_gpu(w, hw, gpus, opts)?;
    let tg = phase_time(w, hw, b, Phase::Gen, gpus, tp);
    let tt = phase_time(w, hw, b, Phase::Train, gpus, tp);
    let (fg, ft) = (flops_phase(w, Phase::Gen) * b as f64, flops_phase(w, Phase::Train) * b as f64);
    let mut r = PerfReport {
        model: w.actor.name.clone(),
        params: w.actor.params,
        hardware: hw.name.clone(),
        gpus,
        tp,
        batch_per_gpu: b,
        gen_seconds: tg,
        train_seconds: tt,
        gen_tflops: fg / tg / 1e12,
        train_tflops: ft / tt / 1e12,
        effective_tflops: effective_throughput(&[fg, ft], &[tg, tt], 1),
        epoch_hours: 0.0,
        dollars: 0.0,
    };
    let (h, d) = estimate_cost(w.epoch_tokens, r.token_rate(w), gpus, hw.price_per_gpu_hour);
    r.epoch_hours = h;
    r.dollars = d;
    Ok(r)
}
