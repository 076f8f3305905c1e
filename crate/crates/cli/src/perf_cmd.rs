//! `perf`: analytic estimates written as CSV and SVG.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use deskrlhf_perf::chart::{rows, svg, write_csv, CsvRow};
use deskrlhf_perf::{evaluate, scaling_curve, HardwareSpec, MemoryOptions, PerfError, WorkloadSpec};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerfConfig {
    pub model: String,
    pub critic: String,
    pub gpu: String,
    pub gpus: Vec<usize>,
    pub tp: usize,
    pub offload: bool,
    pub lora: Option<f64>,
    pub mfu: Option<f64>,
    pub gen_efficiency: Option<f64>,
    pub price: Option<f64>,
    pub output_dir: PathBuf,
}

impl Default for PerfConfig {
    fn default() -> Self {
        PerfConfig {
            model: "opt-13b".into(),
            critic: "opt-350m".into(),
            gpu: "a100-80g".into(),
            gpus: vec![8],
            tp: 1,
            offload: false,
            lora: None,
            mfu: None,
            gen_efficiency: None,
            price: None,
            output_dir: PathBuf::from("runs/perf"),
        }
    }
}

impl PerfConfig {
    fn hardware(&self) -> Result<HardwareSpec> {
        let mut hw = HardwareSpec::preset(&self.gpu, 1)?;
        if let Some(v) = self.mfu {
            hw.mfu = v;
        }
        if let Some(v) = self.gen_efficiency {
            hw.gen_efficiency = v;
        }
        if let Some(v) = self.price {
            hw.price_per_gpu_hour = v;
        }
        hw.validate()?;
        Ok(hw)
    }
}

/// Evaluates every GPU count; counts the model does not fit on are
/// reported on stderr and left out. Writes `perf.csv`, plus `perf.svg`
/// when more than one count fits.
pub fn run_perf<W: Write>(cfg: &PerfConfig, mut out: W) -> Result<Vec<CsvRow>> {
    let w = WorkloadSpec::new(&cfg.model, &cfg.critic)?;
    let hw = cfg.hardware()?;
    let opts = MemoryOptions {
        offload: cfg.offload,
        lora: cfg.lora,
    };
    let mut gpus = cfg.gpus.clone();
    gpus.sort_unstable();
    gpus.dedup();
    let mut all = Vec::new();
    let mut fit = Vec::new();
    writeln!(
        out,
        "{:>5} {:>4} {:>6} {:>10} {:>10} {:>10} {:>9} {:>10}",
        "gpus", "tp", "batch", "gen_tf", "train_tf", "eff_tf", "hours", "dollars"
    )?;
    for &g in &gpus {
        match evaluate(&w, &hw, g, cfg.tp, opts) {
            Ok(r) => {
                writeln!(
                    out,
                    "{:>5} {:>4} {:>6} {:>10.2} {:>10.2} {:>10.2} {:>9.2} {:>10.0}",
                    r.gpus, r.tp, r.batch_per_gpu, r.gen_tflops, r.train_tflops, r.effective_tflops, r.epoch_hours, r.dollars
                )?;
                all.extend(rows(&r, hw.mem_bytes));
                fit.push(g);
            }
            Err(PerfError::Infeasible { .. }) => {
                eprintln!("[perf] {} does not fit on {g} x {}", w.actor.name, hw.name);
            }
            Err(e) => return Err(e.into()),
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    write_csv(fs::File::create(cfg.output_dir.join("perf.csv"))?, &all)?;
    if fit.len() > 1 && cfg.tp == 1 {
        let curve = scaling_curve(&w, &hw, &fit, opts)?;
        if let Some(k) = curve.knee() {
            writeln!(out, "scaling knee at {k} GPUs")?;
        }
        let title = format!("{} on {}", w.actor.name, hw.name);
        fs::write(cfg.output_dir.join("perf.svg"), svg(&curve, &title))?;
    }
    if all.is_empty() {
        return Err(Error::Config(format!("{} fits on none of the requested GPU counts", w.actor.name)));
    }
    Ok(all)
}
