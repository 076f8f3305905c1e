//! Reward model: pairwise ranking loss on chosen/rejected responses.

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Batch, BatchKind, Example};
use crate::engine::HybridEngine;
use crate::error::{Error, Result};
use crate::model::{Bound, HeadKind, Model};
use crate::pipeline::{diverged, Cycler, LrSchedule};
use crate::tensor::kernels::log_sigmoid;
use crate::tensor::{Graph, Var};
use crate::vocab::TokenId;

/// Where a sequence's reward is read from the per-position values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Value at the last real token.
    #[default]
    LastToken,
    /// Mean value from the first position where chosen and rejected differ
    /// to each sequence's end.
    DivergenceMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub lr: f32,
    pub warmup: usize,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            steps: 100,
            batch_size: 8,
            max_len: 64,
            lr: 1e-3,
            warmup: 5,
            readout: Readout::LastToken,
            seed: 0,
        }
    }
}

/// `mean(−log σ(chosen − rejected))`
pub fn pairwise_loss(chosen: &[f32], rejected: &[f32]) -> Result<f32> {
    if chosen.len() != rejected.len() || chosen.is_empty() {
        return Err(Error::dim(
            "pairwise_loss",
            format!("{} chosen vs {} rejected", chosen.len(), rejected.len()),
        ));
    }
    let s: f64 = chosen
        .iter()
        .zip(rejected)
        .map(|(c, r)| -(log_sigmoid(c - r) as f64))
        .sum();
    Ok((s / chosen.len() as f64) as f32)
}

fn first_divergence(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()))
}

/// Scalar reward of one sequence on the graph.
fn readout(g: &mut Graph<'_>, m: &Bound<'_>, seq: &[TokenId], from: usize, how: Readout) -> Result<Var> {
    let values = m.forward(g, seq)?;
    let n = seq.len();
    let start = match how {
        Readout::LastToken => n - 1,
        Readout::DivergenceMean => from.min(n - 1),
    };
    let tail = g.slice(values, 0, start, n)?;
    Ok(g.mean(tail))
}

/// `−log σ(r(chosen) − r(rejected))` for one pair.
pub fn pair_loss(g: &mut Graph<'_>, m: &Bound<'_>, chosen: &[TokenId], rejected: &[TokenId], how: Readout) -> Result<Var> {
    let d = first_divergence(chosen, rejected);
    let c = readout(g, m, chosen, d, how)?;
    let r = readout(g, m, rejected, d, how)?;
    let diff = g.sub(c, r)?;
    let ls = g.log_sigmoid(diff);
    Ok(g.neg(ls))
}

/// Reward for one sequence with the given readout, padding stripped.
pub fn score(model: &Model, seq: &[TokenId], partner: Option<&[TokenId]>, how: Readout) -> Result<f32> {
    model.require_head(HeadKind::Scalar)?;
    let seq = crate::model::strip_trailing_pad(seq);
    let values = model.forward_sequence(seq)?;
    let start = match (how, partner) {
        (Readout::DivergenceMean, Some(p)) => first_divergence(seq, p).min(seq.len() - 1),
        _ => seq.len() - 1,
    };
    let tail = &values.data()[start..];
    Ok(tail.iter().sum::<f32>() / tail.len() as f32)
}

fn pairs(batch: &Batch) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let n = batch.rows() / 2;
    (0..n)
        .map(|i| (batch.real(i).to_vec(), batch.real(n + i).to_vec()))
        .collect()
}

/// Fraction of pairs ranked correctly; ties count one half.
pub fn eval_accuracy(model: &Model, examples: &[Example], max_len: usize, how: Readout) -> Result<f32> {
    let batch = make_batch(BatchKind::Pairwise, examples, max_len)?;
    let mut acc = 0.0f64;
    let ps = pairs(&batch);
    for (c, r) in &ps {
        let sc = score(model, c, Some(r), how)?;
        let sr = score(model, r, Some(c), how)?;
        acc += if sc > sr {
            1.0
        } else if sc == sr {
            0.5
        } else {
            0.0
        };
    }
    Ok((acc / ps.len() as f64) as f32)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmReport {
    pub losses: Vec<(usize, f32)>,
}

pub fn train_rm(engine: &mut HybridEngine, train: &[Example], cfg: &RmConfig) -> Result<RmReport> {
    if engine.model_config().head_kind != HeadKind::Scalar {
        return Err(Error::HeadKind {
            expected: "scalar",
            found: engine.model_config().head_kind.name(),
        });
    }
    let sched = LrSchedule {
        lr: cfg.lr,
        warmup: cfg.warmup,
    };
    let mut cyc = Cycler::new(train.len(), cfg.seed)?;
    let mut report = RmReport::default();
    for step in 0..cfg.steps {
        let ex: Vec<Example> = cyc.next_batch(cfg.batch_size).iter().map(|&i| train[i].clone()).collect();
        let batch = make_batch(BatchKind::Pairwise, &ex, cfg.max_len)?;
        let ps = pairs(&batch);
        let inv = 1.0 / ps.len() as f32;
        let stats = engine
            .train_step(ps.len(), sched.at(step), |g, b, i| {
                let l = pair_loss(g, b, &ps[i].0, &ps[i].1, cfg.readout)?;
                Ok(g.scale(l, inv))
            })
            .map_err(diverged(step))?;
        report.losses.push((step, stats.loss));
    }
    Ok(report)
}

/// Scalar-head model whose trunk is copied from `sft`.
pub fn reward_from_sft(sft: &Model, seed: u64) -> Result<Model> {
    let mut rm = Model::init(sft.config.with_head(HeadKind::Scalar), seed)?;
    rm.load_trunk_from(sft)?;
    Ok(rm)
}
