//! The three stages end to end, writing checkpoints and metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deskrlhf_core::data::{blend, load_jsonl, split_stages, tokenize, Example, Record};
use deskrlhf_core::engine::{write_memory_csv, HybridEngine, Mode};
use deskrlhf_core::model::{load_checkpoint, save_checkpoint, HeadKind, Model};
use deskrlhf_core::pipeline::ppo::{pretrain_rows, prompt_rows, train_ppo, write_metrics_csv, Roles};
use deskrlhf_core::pipeline::rm::{eval_accuracy, reward_from_sft, train_rm};
use deskrlhf_core::pipeline::sft::train_sft;
use deskrlhf_core::pipeline::write_loss_csv;

use crate::config::RunConfig;
use crate::{Error, Result, Stage};

pub const SFT_CKPT: &str = "sft.dsc";
pub const RM_CKPT: &str = "rm.dsc";
pub const ACTOR_CKPT: &str = "actor.dsc";
pub const EMA_CKPT: &str = "actor_ema.dsc";
pub const CRITIC_CKPT: &str = "critic.dsc";
pub const TOKENIZER_FILE: &str = "tokenizer.txt";

/// Stage-tagged progress line on stderr.
pub fn log(stage: Stage, msg: impl AsRef<str>) {
    eprintln!("[{}] {}", stage.name(), msg.as_ref());
}

#[derive(Clone, Debug, Default)]
pub struct StageData {
    pub sft_train: Vec<Example>,
    pub sft_heldout: Vec<Example>,
    pub rm_train: Vec<Example>,
    pub rm_heldout: Vec<Example>,
    pub ppo: Vec<Example>,
}

fn hold_out(mut xs: Vec<Example>, frac: f64) -> (Vec<Example>, Vec<Example>) {
    let n = ((xs.len() as f64 * frac).ceil() as usize).min(xs.len().saturating_sub(1));
    let held = xs.split_off(xs.len() - n);
    (xs, held)
}

/// Loads, blends and splits every dataset. Runs before any training so a
/// bad path fails the run early.
pub fn load_data(cfg: &RunConfig) -> Result<StageData> {
    let mut sources: Vec<(Vec<Record>, f64)> = Vec::new();
    for d in &cfg.datasets {
        if !d.path.is_file() {
            return Err(Error::Stage {
                stage: Stage::Data,
                source: deskrlhf_core::Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("dataset {} not found", d.path.display()),
                )),
            });
        }
        sources.push((load_jsonl(&d.path).map_err(tag_fn(Stage::Data))?, d.weight));
    }
    let total = cfg.records.unwrap_or_else(|| sources.iter().map(|s| s.0.len()).sum());
    let records = blend(&sources, cfg.seed, total).map_err(tag_fn(Stage::Data))?;
    let split = split_stages(&records, cfg.split, cfg.seed).map_err(tag_fn(Stage::Data))?;
    let tok = cfg.tokenizer()?;
    let keep = |rs: &[Record], pair: bool| -> Vec<Example> {
        let rs: Vec<Record> = rs
            .iter()
            .filter(|r| r.chosen.is_some() && (!pair || r.rejected.is_some()))
            .cloned()
            .collect();
        tokenize(&rs, tok.as_ref())
    };
    let (sft_train, sft_heldout) = hold_out(keep(&split.sft, false), cfg.heldout);
    let (rm_train, rm_heldout) = hold_out(keep(&split.rm, true), cfg.heldout);
    let data = StageData {
        sft_train,
        sft_heldout,
        rm_train,
        rm_heldout,
        ppo: tokenize(&split.ppo, tok.as_ref()),
    };
    for (stage, n) in [(Stage::Sft, data.sft_train.len()), (Stage::Rm, data.rm_train.len()), (Stage::Ppo, data.ppo.len())] {
        if n == 0 {
            return Err(Error::Stage {
                stage,
                source: deskrlhf_core::Error::Schema("no usable records in this stage's split".into()),
            });
        }
    }
    Ok(data)
}

fn tag_fn(stage: Stage) -> impl Fn(deskrlhf_core::Error) -> Error {
    move |e| Error::Stage { stage, source: e }
}

pub fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(TOKENIZER_FILE), cfg.tokenizer()?.spec())?;
    fs::write(
        cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(())
}

pub fn run_sft(cfg: &RunConfig, data: &StageData) -> Result<Model> {
    let t = tag_fn(Stage::Sft);
    let (sft_cfg, _, _) = cfg.seeded();
    let init = Model::init(cfg.model_config(&cfg.actor, HeadKind::Lm)?, cfg.seed).map_err(&t)?;
    log(Stage::Sft, format!("{} params, {} demonstrations", init.num_params(), data.sft_train.len()));
    let mut engine = HybridEngine::new(&init, cfg.engine(1, 0)).map_err(&t)?;
    let r = train_sft(&mut engine, &data.sft_train, &data.sft_heldout, &sft_cfg).map_err(&t)?;
    if let (Some(a), Some(b)) = (r.heldout_before, r.heldout_after) {
        log(Stage::Sft, format!("held-out loss {a:.4} -> {b:.4}"));
    }
    let model = engine.model().map_err(&t)?;
    write_loss_csv(cfg.output_dir.join("sft_loss.csv"), &r.losses).map_err(&t)?;
    save_checkpoint(&model, cfg.output_dir.join(SFT_CKPT)).map_err(&t)?;
    Ok(model)
}

pub fn run_rm(cfg: &RunConfig, data: &StageData, sft: Option<&Model>) -> Result<Model> {
    let t = tag_fn(Stage::Rm);
    let (_, rm_cfg, _) = cfg.seeded();
    let want = cfg.model_config(&cfg.reward, HeadKind::Scalar)?;
    let init = match sft {
        Some(s) if s.config.with_head(HeadKind::Scalar) == want => reward_from_sft(s, rm_cfg.seed).map_err(&t)?,
        _ => Model::init(want, rm_cfg.seed).map_err(&t)?,
    };
    log(Stage::Rm, format!("{} params, {} pairs", init.num_params(), data.rm_train.len()));
    let mut engine = HybridEngine::new(&init, cfg.engine(1, 0)).map_err(&t)?;
    let r = train_rm(&mut engine, &data.rm_train, &rm_cfg).map_err(&t)?;
    let model = engine.model().map_err(&t)?;
    if !data.rm_heldout.is_empty() {
        let acc = eval_accuracy(&model, &data.rm_heldout, rm_cfg.max_len, rm_cfg.readout).map_err(&t)?;
        log(Stage::Rm, format!("held-out accuracy {acc:.3}"));
    }
    write_loss_csv(cfg.output_dir.join("rm_loss.csv"), &r.losses).map_err(&t)?;
    save_checkpoint(&model, cfg.output_dir.join(RM_CKPT)).map_err(&t)?;
    Ok(model)
}

pub struct PpoOutcome {
    pub actor: Model,
    pub ema: Option<Model>,
    pub gen_seconds: f64,
    pub train_seconds: f64,
}

pub fn run_ppo(cfg: &RunConfig, data: &StageData, sft: &Model, rm: &Model) -> Result<PpoOutcome> {
    let t = tag_fn(Stage::Ppo);
    let (sft_cfg, _, ppo_cfg) = cfg.seeded();
    let ec = cfg.engine(ppo_cfg.batch_size, ppo_cfg.prompt_len + ppo_cfg.gen_len);
    let mut roles = Roles::new(sft, rm, ec.clone(), ec, ppo_cfg.ema_decay.is_some()).map_err(&t)?;
    let prompts = prompt_rows(&data.ppo, ppo_cfg.prompt_len).map_err(&t)?;
    let ptx = if ppo_cfg.ptx_coeff > 0.0 {
        Some(pretrain_rows(&data.sft_train, sft_cfg.max_len).map_err(&t)?)
    } else {
        None
    };
    log(
        Stage::Ppo,
        format!("{} prompts, {} iterations, world size {}", prompts.len(), ppo_cfg.iterations, cfg.deployment.world_size()),
    );
    let report = train_ppo(&mut roles, &prompts, ptx.as_ref(), &ppo_cfg).map_err(&t)?;
    if let (Some(a), Some(b)) = (report.metrics.first(), report.metrics.last()) {
        log(
            Stage::Ppo,
            format!("mean rm score {:.4} -> {:.4}, kl {:.4}", a.mean_rm_score, b.mean_rm_score, b.mean_kl),
        );
    }
    write_metrics_csv(cfg.output_dir.join("ppo_metrics.csv"), &report.metrics).map_err(&t)?;

    let mut rows = roles.actor.memory_report();
    roles.actor.switch_mode(Mode::Infer).map_err(&t)?;
    rows.extend(roles.actor.memory_report());
    roles.actor.switch_mode(Mode::Train).map_err(&t)?;
    write_memory_csv(cfg.output_dir.join("memory.csv"), &rows).map_err(&t)?;

    let actor = roles.actor.model().map_err(&t)?;
    save_checkpoint(&actor, cfg.output_dir.join(ACTOR_CKPT)).map_err(&t)?;
    save_checkpoint(&roles.critic.model().map_err(&t)?, cfg.output_dir.join(CRITIC_CKPT)).map_err(&t)?;
    if let Some(e) = &roles.ema {
        save_checkpoint(e, cfg.output_dir.join(EMA_CKPT)).map_err(&t)?;
    }
    Ok(PpoOutcome {
        actor,
        ema: roles.ema,
        gen_seconds: report.gen_seconds,
        train_seconds: report.train_seconds,
    })
}

/// Loads a checkpoint written by an earlier stage of the same run.
pub fn load_stage(cfg: &RunConfig, stage: Stage, file: &str, explicit: Option<&Path>) -> Result<Model> {
    let path: PathBuf = explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(file));
    load_checkpoint(&path).map_err(tag_fn(stage))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub rows: Vec<(String, f64)>,
    pub total: f64,
}

impl Timing {
    pub fn write_table<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{:<8} {:>10}", "stage", "seconds")?;
        for (name, s) in &self.rows {
            writeln!(out, "{name:<8} {s:>10.3}")?;
        }
        writeln!(out, "{:<8} {:>10.3}", "total", self.total)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(["stage", "seconds"]).map_err(io)?;
        for (name, s) in &self.rows {
            w.write_record([name.as_str(), &format!("{s:.6}")]).map_err(io)?;
        }
        w.write_record(["total", &format!("{:.6}", self.total)]).map_err(io)?;
        w.flush()?;
        Ok(())
    }
}

pub struct RunReport {
    pub timing: Timing,
    pub actor: Model,
    pub ema: Option<Model>,
}

/// SFT, reward model and PPO in sequence. Each finished stage leaves its
/// checkpoint behind even when a later one fails.
pub fn train_all(cfg: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut mark = |name: &str, since: &mut Instant| {
        let now = Instant::now();
        rows.push((name.to_string(), (now - *since).as_secs_f64()));
        *since = now;
    };
    let mut t = start;
    cfg.validate()?;
    let data = load_data(cfg)?;
    prepare_output(cfg)?;
    log(
        Stage::Data,
        format!(
            "sft {}+{}, rm {}+{}, ppo {}",
            data.sft_train.len(),
            data.sft_heldout.len(),
            data.rm_train.len(),
            data.rm_heldout.len(),
            data.ppo.len()
        ),
    );
    mark("data", &mut t);
    let sft = run_sft(cfg, &data)?;
    mark("sft", &mut t);
    let rm = run_rm(cfg, &data, Some(&sft))?;
    mark("rm", &mut t);
    let ppo = run_ppo(cfg, &data, &sft, &rm)?;
    mark("ppo", &mut t);
    let timing = Timing {
        rows,
        total: start.elapsed().as_secs_f64(),
    };
    timing.write_csv(cfg.output_dir.join("timing.csv"))?;
    Ok(RunReport {
        timing,
        actor: ppo.actor,
        ema: ppo.ema,
    })
}
