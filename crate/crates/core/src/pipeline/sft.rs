//! Supervised fine-tuning: next-token cross entropy on demonstrations.

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Batch, BatchKind, Example};
use crate::engine::HybridEngine;
use crate::error::Result;
use crate::model::{Bound, Model};
use crate::pipeline::{diverged, Cycler, LrSchedule};
use crate::tensor::{Graph, Var};
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub lr: f32,
    pub warmup: usize,
    /// Score only response tokens instead of the whole sequence.
    pub response_only: bool,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 100,
            batch_size: 8,
            max_len: 64,
            lr: 1e-3,
            warmup: 10,
            response_only: false,
            seed: 0,
        }
    }
}

/// Inputs and next-token targets for one batch row; `None` targets are
/// ignored.
pub fn row_targets(batch: &Batch, row: usize, response_only: bool) -> (Vec<TokenId>, Vec<Option<usize>>) {
    let real = batch.real(row);
    let plen = batch.prompt_lens[row];
    let input = real[..real.len() - 1].to_vec();
    let targets = (1..real.len())
        .map(|j| (!response_only || j >= plen).then_some(real[j] as usize))
        .collect();
    (input, targets)
}

/// Summed (not averaged) cross entropy of one row.
pub fn row_loss(g: &mut Graph<'_>, m: &Bound<'_>, input: &[TokenId], targets: &[Option<usize>]) -> Result<Var> {
    let logits = m.forward(g, input)?;
    let ce = g.cross_entropy(logits, targets)?;
    let n = targets.iter().filter(|t| t.is_some()).count();
    Ok(g.scale(ce, n as f32))
}

struct Prepared {
    rows: Vec<(Vec<TokenId>, Vec<Option<usize>>)>,
    tokens: usize,
}

fn prepare(examples: &[Example], cfg: &SftConfig) -> Result<Prepared> {
    let batch = make_batch(BatchKind::Sft, examples, cfg.max_len)?;
    let rows: Vec<_> = (0..batch.rows())
        .map(|r| row_targets(&batch, r, cfg.response_only))
        .filter(|(_, t)| t.iter().any(Option::is_some))
        .collect();
    let tokens = rows.iter().map(|(_, t)| t.iter().filter(|x| x.is_some()).count()).sum();
    Ok(Prepared { rows, tokens })
}

/// Mean next-token cross entropy over every scored token of `examples`.
pub fn eval_loss(model: &Model, examples: &[Example], cfg: &SftConfig) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in examples.chunks(cfg.batch_size.max(1)) {
        let p = prepare(chunk, cfg)?;
        for (input, targets) in &p.rows {
            let mut g = Graph::new();
            let b = model.bind_frozen(&mut g);
            let l = row_loss(&mut g, &b, input, targets)?;
            total += g.value(l).item()? as f64;
        }
        count += p.tokens;
    }
    Ok((total / count.max(1) as f64) as f32)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SftReport {
    /// `(step, training loss)` for every step.
    pub losses: Vec<(usize, f32)>,
    pub heldout_before: Option<f32>,
    pub heldout_after: Option<f32>,
}

pub fn train_sft(engine: &mut HybridEngine, train: &[Example], heldout: &[Example], cfg: &SftConfig) -> Result<SftReport> {
    let sched = LrSchedule {
        lr: cfg.lr,
        warmup: cfg.warmup,
    };
    let mut report = SftReport::default();
    if !heldout.is_empty() {
        report.heldout_before = Some(eval_loss(&engine.model()?, heldout, cfg)?);
    }
    let mut cyc = Cycler::new(train.len(), cfg.seed)?;
    for step in 0..cfg.steps {
        let idx = cyc.next_batch(cfg.batch_size);
        let ex: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
        let p = prepare(&ex, cfg)?;
        let inv = 1.0 / p.tokens.max(1) as f32;
        let stats = engine
            .train_step(p.rows.len(), sched.at(step), |g, b, i| {
                let (input, targets) = &p.rows[i];
                let l = row_loss(g, b, input, targets)?;
                Ok(g.scale(l, inv))
            })
            .map_err(diverged(step))?;
        report.losses.push((step, stats.loss));
    }
    if !heldout.is_empty() {
        report.heldout_after = Some(eval_loss(&engine.model()?, heldout, cfg)?);
    }
    Ok(report)
}
