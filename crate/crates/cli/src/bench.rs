//! `bench`: measured throughput of the toy engine for one preset.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use deskrlhf_core::engine::{EngineConfig, HybridEngine, Mode};
use deskrlhf_core::model::{HeadKind, Model, ModelConfig, Strategy};
use deskrlhf_core::pipeline::sft::row_loss;
use deskrlhf_core::vocab::{TokenId, BOS, NUM_SPECIAL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub preset: String,
    pub world_size: usize,
    pub tp: usize,
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub phase: &'static str,
    pub seconds: f64,
    pub tokens: usize,
    pub gflops: f64,
}

/// One generation pass and one training step over the same sequences.
/// Flops use `2N` per token forward and `6N` for forward plus backward.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut mc = ModelConfig::preset(&cfg.preset, HeadKind::Lm)?;
    mc.max_seq_len = mc.max_seq_len.max(cfg.prompt_len + cfg.gen_len + 1);
    let model = Model::init(mc.clone(), cfg.seed)?;
    let mut ec = EngineConfig::new(cfg.world_size);
    ec.tp = cfg.tp;
    ec.infer_batch = cfg.batch;
    ec.kv_capacity = cfg.prompt_len + cfg.gen_len;
    let mut engine = HybridEngine::new(&model, ec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompts: Vec<Vec<TokenId>> = (0..cfg.batch)
        .map(|_| {
            let mut p = vec![BOS];
            p.extend((1..cfg.prompt_len).map(|_| rng.random_range(NUM_SPECIAL..mc.vocab_size as TokenId)));
            p
        })
        .collect();
    let n = model.num_params() as f64;

    let t0 = Instant::now();
    engine.switch_mode(Mode::Infer)?;
    let gens = engine.generate(&prompts, cfg.gen_len, Strategy::top_k(cfg.seed))?;
    engine.switch_mode(Mode::Train)?;
    let gen_s = t0.elapsed().as_secs_f64();
    let seqs: Vec<Vec<TokenId>> = prompts
        .iter()
        .zip(&gens)
        .map(|(p, g)| p.iter().chain(&g.tokens).copied().collect())
        .collect();
    let gen_tokens: usize = seqs.iter().map(Vec::len).sum();

    let t1 = Instant::now();
    let inv = 1.0 / seqs.len() as f32;
    engine.train_step(seqs.len(), 0.0, |g, b, i| {
        let s = &seqs[i];
        let targets: Vec<Option<usize>> = s[1..].iter().map(|&t| Some(t as usize)).collect();
        let l = row_loss(g, b, &s[..s.len() - 1], &targets)?;
        Ok(g.scale(l, inv))
    })?;
    let train_s = t1.elapsed().as_secs_f64();
    let train_tokens: usize = seqs.iter().map(|s| s.len() - 1).sum();

    let (gf, tf) = (2.0 * n * gen_tokens as f64, 6.0 * n * train_tokens as f64);
    Ok(vec![
        BenchRow { phase: "gen", seconds: gen_s, tokens: gen_tokens, gflops: gf / gen_s / 1e9 },
        BenchRow { phase: "train", seconds: train_s, tokens: train_tokens, gflops: tf / train_s / 1e9 },
        BenchRow {
            phase: "effective",
            seconds: gen_s + train_s,
            tokens: gen_tokens,
            gflops: (gf + tf) / (gen_s + train_s) / 1e9,
        },
    ])
}

pub fn write_bench<W: Write>(rows: &[BenchRow], mut out: W, csv_path: Option<&Path>) -> Result<()> {
    writeln!(out, "{:<10} {:>10} {:>8} {:>10}", "phase", "seconds", "tokens", "GFLOP/s")?;
    for r in rows {
        writeln!(out, "{:<10} {:>10.4} {:>8} {:>10.3}", r.phase, r.seconds, r.tokens, r.gflops)?;
    }
    if let Some(p) = csv_path {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::Io(e.into()))?;
        for r in rows {
            w.serialize(r).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
    }
    Ok(())
}
