//! PPO over four roles: a trained actor and critic (hybrid engines) and a
//! frozen reference and reward model.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, BatchKind, Example};
use crate::engine::{EngineConfig, HybridEngine, Mode};
use crate::error::{Error, Result};
use crate::model::generate::generate_in;
use crate::model::{Bound, HeadKind, Model, Strategy};
use crate::pipeline::{diverged, sft, Cycler, LrSchedule};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{TokenId, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub iterations: usize,
    /// Prompts (query-answer pairs) per iteration.
    pub batch_size: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub actor_lr: f32,
    pub critic_lr: f32,
    pub warmup: usize,
    pub beta: f32,
    pub reward_clip: f32,
    pub gamma: f32,
    pub lambda: f32,
    pub clip_eps: f32,
    pub value_clip: f32,
    pub ppo_epochs: usize,
    pub ptx_coeff: f32,
    /// `None` disables EMA collection.
    pub ema_decay: Option<f32>,
    pub top_k: usize,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            iterations: 50,
            batch_size: 16,
            prompt_len: 16,
            gen_len: 16,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            warmup: 0,
            beta: 0.1,
            reward_clip: 5.0,
            gamma: 1.0,
            lambda: 0.95,
            clip_eps: 0.2,
            value_clip: 0.2,
            ppo_epochs: 1,
            ptx_coeff: 0.0,
            ema_decay: Some(0.995),
            top_k: 50,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, has_pretrain: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda {} outside (0, 1]", self.lambda));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip epsilon {} outside (0, 1)", self.clip_eps));
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("ema decay {d} outside (0, 1)"));
            }
        }
        if self.batch_size == 0 || self.gen_len == 0 || self.prompt_len < 2 || self.ppo_epochs == 0 {
            return bad("batch size, gen len, ppo epochs must be positive and prompt len >= 2".into());
        }
        if self.ptx_coeff < 0.0 {
            return bad("mixture coefficient must be >= 0".into());
        }
        if self.ptx_coeff > 0.0 && !has_pretrain {
            return bad("mixture coefficient > 0 requires a pretraining corpus".into());
        }
        Ok(())
    }

    pub fn strategy(&self, iter: usize) -> Strategy {
        Strategy::TopK {
            k: self.top_k,
            temperature: self.temperature,
            seed: self.seed.wrapping_add(iter as u64),
        }
    }
}

/// One batch of rollouts. Per-token arrays are `[B][G]`, zero (or PAD)
/// after the first EOS where `masks` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub prompts: Vec<Vec<TokenId>>,
    pub generated: Vec<Vec<TokenId>>,
    pub actor_lp: Vec<Vec<f32>>,
    pub ref_lp: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub rewards: Vec<Vec<f32>>,
    pub advantages: Vec<Vec<f32>>,
    pub returns: Vec<Vec<f32>>,
    pub masks: Vec<Vec<bool>>,
    pub rm_scores: Vec<f32>,
}

impl Experience {
    pub fn real_len(&self, row: usize) -> usize {
        self.masks[row].iter().filter(|&&m| m).count()
    }

    pub fn tokens(&self) -> usize {
        (0..self.masks.len()).map(|r| self.real_len(r)).sum()
    }

    /// Mean of `actor_lp − ref_lp` over real tokens.
    pub fn mean_kl(&self) -> f32 {
        let mut s = 0.0f64;
        for r in 0..self.masks.len() {
            for t in 0..self.real_len(r) {
                s += (self.actor_lp[r][t] - self.ref_lp[r][t]) as f64;
            }
        }
        (s / self.tokens().max(1) as f64) as f32
    }
}

/// `r_t = −β(actor_lp_t − ref_lp_t)`, plus the clipped score on the last
/// real token.
pub fn compute_rewards(actor_lp: &[f32], ref_lp: &[f32], rm_score: f32, beta: f32, reward_clip: f32) -> Vec<f32> {
    let mut r: Vec<f32> = actor_lp.iter().zip(ref_lp).map(|(a, b)| -beta * (a - b)).collect();
    if let Some(last) = r.last_mut() {
        *last += rm_score.clamp(-reward_clip, reward_clip);
    }
    r
}

/// Generalised advantage estimation with a terminal value of zero.
pub fn gae(rewards: &[f32], values: &[f32], gamma: f32, lambda: f32) -> (Vec<f32>, Vec<f32>) {
    let n = rewards.len();
    let mut adv = vec![0.0f32; n];
    let mut running = 0.0f32;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to mean 0, std 1 (population). Left alone for fewer
/// than two values.
pub fn whiten(xs: &mut [f32]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-8);
    for x in xs {
        *x = ((*x as f64 - mean) * inv) as f32;
    }
}

/// `mean(−min(ρA, clip(ρ, 1±ε)A))`, `ρ = exp(new − old)`.
pub fn ppo_actor_loss(new_lp: &[f32], old_lp: &[f32], adv: &[f32], eps: f32) -> f32 {
    let s: f64 = new_lp
        .iter()
        .zip(old_lp)
        .zip(adv)
        .map(|((n, o), a)| {
            let rho = (n - o).exp();
            let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
            -((rho * a).min(clipped * a)) as f64
        })
        .sum();
    (s / new_lp.len().max(1) as f64) as f32
}

/// `mean(0.5·max((v − R)², (clip(v, v_old ± c) − R)²))`
pub fn critic_loss(v_new: &[f32], v_old: &[f32], returns: &[f32], clip: f32) -> f32 {
    let s: f64 = v_new
        .iter()
        .zip(v_old)
        .zip(returns)
        .map(|((v, o), r)| {
            let vc = o + (v - o).clamp(-clip, clip);
            0.5 * ((v - r).powi(2)).max((vc - r).powi(2)) as f64
        })
        .sum();
    (s / v_new.len().max(1) as f64) as f32
}

/// `ema ← decay·ema + (1 − decay)·actor`, written as an increment so that
/// equal inputs stay bit-identical.
pub fn ema_update(ema: &mut [f32], actor: &[f32], decay: f32) {
    for (e, a) in ema.iter_mut().zip(actor) {
        *e += (1.0 - decay) * (a - *e);
    }
}

pub fn ema_update_model(ema: &mut Model, actor: &Model, decay: f32) -> Result<()> {
    if ema.config != actor.config {
        return Err(Error::ConfigMismatch("EMA and actor configs differ".into()));
    }
    for (e, a) in ema.params.iter_mut().zip(&actor.params) {
        ema_update(e.data_mut(), a.data(), decay);
    }
    Ok(())
}

/// L2 distance between two models' parameters.
pub fn param_distance(a: &Model, b: &Model) -> f32 {
    a.params
        .iter()
        .zip(&b.params)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}

/// Log-probabilities of `gen` under the model, continuing `prompt`.
pub fn gen_logprobs(g: &mut Graph<'_>, m: &Bound<'_>, prompt: &[TokenId], gen: &[TokenId]) -> Result<Var> {
    let full: Vec<TokenId> = prompt.iter().chain(gen).copied().collect();
    let logits = m.forward(g, &full[..full.len() - 1])?;
    let rows = g.slice(logits, 0, prompt.len() - 1, full.len() - 1)?;
    let ids: Vec<usize> = gen.iter().map(|&t| t as usize).collect();
    g.gather_log_softmax(rows, &ids)
}

/// Critic values `V_t` at the positions that emit each generated token.
pub fn gen_values(g: &mut Graph<'_>, m: &Bound<'_>, prompt: &[TokenId], gen: &[TokenId]) -> Result<Var> {
    let full: Vec<TokenId> = prompt.iter().chain(gen).copied().collect();
    let values = m.forward(g, &full[..full.len() - 1])?;
    g.slice(values, 0, prompt.len() - 1, full.len() - 1)
}

fn eval_var<F>(model: &Model, f: F) -> Result<Vec<f32>>
where
    F: for<'g> FnOnce(&mut Graph<'g>, &Bound<'g>) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = model.bind_frozen(&mut g);
    let v = f(&mut g, &b)?;
    Ok(g.value(v).data().to_vec())
}

/// The four model roles plus the optional EMA copy of the actor.
pub struct Roles {
    pub actor: HybridEngine,
    pub critic: HybridEngine,
    pub reference: Model,
    pub reward: Model,
    pub ema: Option<Model>,
}

impl Roles {
    /// Actor and reference from the SFT model, critic and reward from the
    /// reward model, EMA as a copy of the actor.
    pub fn new(sft: &Model, rm: &Model, actor: EngineConfig, critic: EngineConfig, ema: bool) -> Result<Self> {
        let roles = Roles {
            actor: HybridEngine::new(sft, actor)?,
            critic: HybridEngine::new(rm, critic)?,
            reference: sft.clone(),
            reward: rm.clone(),
            ema: ema.then(|| sft.clone()),
        };
        roles.check()?;
        Ok(roles)
    }

    pub fn check(&self) -> Result<()> {
        self.reference.require_head(HeadKind::Lm)?;
        self.reward.require_head(HeadKind::Scalar)?;
        for (cfg, want) in [
            (self.actor.model_config(), HeadKind::Lm),
            (self.critic.model_config(), HeadKind::Scalar),
        ] {
            if cfg.head_kind != want {
                return Err(Error::HeadKind {
                    expected: want.name(),
                    found: cfg.head_kind.name(),
                });
            }
        }
        Ok(())
    }
}

fn pad_to<T: Clone>(mut v: Vec<T>, n: usize, fill: T) -> Vec<T> {
    v.resize(n, fill);
    v
}

/// Samples `gen_len` tokens per prompt with the actor in INFER mode and
/// scores them with every role.
pub fn generate_experience(prompts: &[Vec<TokenId>], roles: &mut Roles, cfg: &PpoConfig, iter: usize) -> Result<Experience> {
    let gens = roles.actor.generate(prompts, cfg.gen_len, cfg.strategy(iter))?;
    let actor = roles.actor.model()?;
    let critic = roles.critic.model()?;
    let g_len = cfg.gen_len;
    let mut exp = Experience {
        prompts: prompts.to_vec(),
        generated: Vec::new(),
        actor_lp: Vec::new(),
        ref_lp: Vec::new(),
        values: Vec::new(),
        rewards: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
        masks: Vec::new(),
        rm_scores: Vec::new(),
    };
    let mut raw_adv = Vec::new();
    for (p, gen) in prompts.iter().zip(gens) {
        let toks = gen.tokens;
        let n = toks.len();
        debug_assert!(n == g_len || toks.last() == Some(&EOS));
        let alp = eval_var(&actor, |g, b| gen_logprobs(g, b, p, &toks))?;
        let rlp = eval_var(&roles.reference, |g, b| gen_logprobs(g, b, p, &toks))?;
        let vals = eval_var(&critic, |g, b| gen_values(g, b, p, &toks))?;
        let full: Vec<TokenId> = p.iter().chain(&toks).copied().collect();
        let score = roles.reward.scalar_score(&full)?;
        let rewards = compute_rewards(&alp, &rlp, score, cfg.beta, cfg.reward_clip);
        let (adv, ret) = gae(&rewards, &vals, cfg.gamma, cfg.lambda);
        raw_adv.extend_from_slice(&adv);
        exp.masks.push((0..g_len).map(|t| t < n).collect());
        exp.generated.push(pad_to(toks, g_len, PAD));
        exp.actor_lp.push(pad_to(alp, g_len, 0.0));
        exp.ref_lp.push(pad_to(rlp, g_len, 0.0));
        exp.values.push(pad_to(vals, g_len, 0.0));
        exp.rewards.push(pad_to(rewards, g_len, 0.0));
        exp.advantages.push(pad_to(adv, g_len, 0.0));
        exp.returns.push(pad_to(ret, g_len, 0.0));
        exp.rm_scores.push(score);
    }
    whiten(&mut raw_adv);
    let mut at = 0;
    for r in 0..exp.masks.len() {
        let n = exp.real_len(r);
        exp.advantages[r][..n].copy_from_slice(&raw_adv[at..at + n]);
        at += n;
    }
    Ok(exp)
}

/// Actor loss terms for row `r`, summed over real tokens and scaled by `inv`.
fn actor_item(g: &mut Graph<'_>, b: &Bound<'_>, exp: &Experience, r: usize, eps: f32, inv: f32) -> Result<Var> {
    let n = exp.real_len(r);
    let gen = &exp.generated[r][..n];
    let new_lp = gen_logprobs(g, b, &exp.prompts[r], gen)?;
    let old = g.constant(Tensor::from_vec(exp.actor_lp[r][..n].to_vec()));
    let adv = g.constant(Tensor::from_vec(exp.advantages[r][..n].to_vec()));
    let diff = g.sub(new_lp, old)?;
    let rho = g.exp(diff);
    let s1 = g.mul(rho, adv)?;
    let clipped = g.clamp(rho, 1.0 - eps, 1.0 + eps);
    let s2 = g.mul(clipped, adv)?;
    let m = g.minimum(s1, s2)?;
    let s = g.sum(m);
    Ok(g.scale(s, -inv))
}

fn critic_item(g: &mut Graph<'_>, b: &Bound<'_>, exp: &Experience, r: usize, clip: f32, inv: f32) -> Result<Var> {
    let n = exp.real_len(r);
    let gen = &exp.generated[r][..n];
    let v = gen_values(g, b, &exp.prompts[r], gen)?;
    let old = g.constant(Tensor::from_vec(exp.values[r][..n].to_vec()));
    let ret = g.constant(Tensor::from_vec(exp.returns[r][..n].to_vec()));
    let d = g.sub(v, old)?;
    let dc = g.clamp(d, -clip, clip);
    let vc = g.add(old, dc)?;
    let e1 = g.sub(v, ret)?;
    let e1 = g.mul(e1, e1)?;
    let e2 = g.sub(vc, ret)?;
    let e2 = g.mul(e2, e2)?;
    let m = g.maximum(e1, e2)?;
    let s = g.sum(m);
    Ok(g.scale(s, 0.5 * inv))
}

/// Pretraining rows as `(input, targets)` for the mixture loss.
pub type PtxBatch = Vec<(Vec<TokenId>, Vec<Option<usize>>)>;

/// PPO epochs over one experience batch: actor step (with the optional
/// mixture term), critic step, then the EMA update. Returns the last
/// epoch's `(actor_loss, critic_loss)`.
pub fn train_rlhf(
    exp: &Experience,
    roles: &mut Roles,
    cfg: &PpoConfig,
    ptx: Option<&PtxBatch>,
    step: usize,
) -> Result<(f32, f32)> {
    if roles.actor.mode() != Mode::Train {
        return Err(Error::Mode {
            required: Mode::Train,
            current: roles.actor.mode(),
        });
    }
    if cfg.ptx_coeff > 0.0 && ptx.is_none() {
        return Err(Error::Config("mixture coefficient > 0 requires a pretraining batch".into()));
    }
    let sched_a = LrSchedule {
        lr: cfg.actor_lr,
        warmup: cfg.warmup,
    };
    let sched_c = LrSchedule {
        lr: cfg.critic_lr,
        warmup: cfg.warmup,
    };
    let rows: Vec<usize> = (0..exp.masks.len()).filter(|&r| exp.real_len(r) > 0).collect();
    let inv = 1.0 / exp.tokens().max(1) as f32;
    let ptx_rows: &[(Vec<TokenId>, Vec<Option<usize>>)] = match ptx {
        Some(p) if cfg.ptx_coeff > 0.0 => p,
        _ => &[],
    };
    let ptx_tokens: usize = ptx_rows
        .iter()
        .map(|(_, t)| t.iter().filter(|x| x.is_some()).count())
        .sum();
    let ptx_scale = cfg.ptx_coeff / ptx_tokens.max(1) as f32;
    let mut losses = (0.0, 0.0);
    for _ in 0..cfg.ppo_epochs {
        let a = roles
            .actor
            .train_step(rows.len() + ptx_rows.len(), sched_a.at(step), |g, b, i| {
                if i < rows.len() {
                    actor_item(g, b, exp, rows[i], cfg.clip_eps, inv)
                } else {
                    let (input, targets) = &ptx_rows[i - rows.len()];
                    let l = sft::row_loss(g, b, input, targets)?;
                    Ok(g.scale(l, ptx_scale))
                }
            })
            .map_err(diverged(step))?;
        let c = roles
            .critic
            .train_step(rows.len(), sched_c.at(step), |g, b, i| {
                critic_item(g, b, exp, rows[i], cfg.value_clip, inv)
            })
            .map_err(diverged(step))?;
        losses = (a.loss, c.loss);
    }
    if let (Some(ema), Some(d)) = (roles.ema.as_mut(), cfg.ema_decay) {
        ema_update_model(ema, &roles.actor.model()?, d)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PpoMetrics {
    pub iter: usize,
    pub mean_rm_score: f32,
    pub mean_kl: f32,
    pub actor_loss: f32,
    pub critic_loss: f32,
    pub ema_delta: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoReport {
    pub metrics: Vec<PpoMetrics>,
    /// Per-iteration rm scores of every rollout.
    pub scores: Vec<Vec<f32>>,
    pub gen_seconds: f64,
    pub train_seconds: f64,
}

/// Full PPO loop over `BOS prompt` rows (see [`prompt_rows`]). `pretrain`
/// supplies mixture rows when `ptx_coeff > 0`.
pub fn train_ppo(roles: &mut Roles, prompts: &[Vec<TokenId>], pretrain: Option<&PtxBatch>, cfg: &PpoConfig) -> Result<PpoReport> {
    cfg.validate(pretrain.is_some_and(|p| !p.is_empty()))?;
    roles.check()?;
    let mut cyc = Cycler::new(prompts.len(), cfg.seed)?;
    let mut ptx_cyc = match pretrain {
        Some(p) if cfg.ptx_coeff > 0.0 => Some(Cycler::new(p.len(), cfg.seed ^ 0x9e37)?),
        _ => None,
    };
    let mut report = PpoReport::default();
    for iter in 0..cfg.iterations {
        let batch: Vec<Vec<TokenId>> = cyc
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| prompts[i].clone())
            .collect();
        let t0 = Instant::now();
        roles.actor.switch_mode(Mode::Infer)?;
        let exp = generate_experience(&batch, roles, cfg, iter)?;
        roles.actor.switch_mode(Mode::Train)?;
        let t1 = Instant::now();
        let ptx = match (&mut ptx_cyc, pretrain) {
            (Some(c), Some(p)) => Some(c.next_batch(cfg.batch_size).into_iter().map(|i| p[i].clone()).collect()),
            _ => None,
        };
        let (al, cl) = train_rlhf(&exp, roles, cfg, ptx.as_ref(), iter)?;
        report.gen_seconds += (t1 - t0).as_secs_f64();
        report.train_seconds += t1.elapsed().as_secs_f64();
        let ema_delta = match &roles.ema {
            Some(e) => param_distance(e, &roles.actor.model()?),
            None => 0.0,
        };
        let mean = exp.rm_scores.iter().sum::<f32>() / exp.rm_scores.len() as f32;
        report.metrics.push(PpoMetrics {
            iter,
            mean_rm_score: mean,
            mean_kl: exp.mean_kl(),
            actor_loss: al,
            critic_loss: cl,
            ema_delta,
        });
        report.scores.push(exp.rm_scores);
    }
    Ok(report)
}

/// `BOS prompt` rows, left-truncated to `prompt_len`.
pub fn prompt_rows(examples: &[Example], prompt_len: usize) -> Result<Vec<Vec<TokenId>>> {
    let b = make_batch(BatchKind::Prompt, examples, prompt_len)?;
    Ok((0..b.rows()).map(|r| b.real(r).to_vec()).collect())
}

/// `BOS text EOS` rows with full next-token targets, for the mixture loss.
pub fn pretrain_rows(examples: &[Example], max_len: usize) -> Result<PtxBatch> {
    let b = make_batch(BatchKind::Pretrain, examples, max_len)?;
    Ok((0..b.rows())
        .filter(|&r| b.real_len(r) >= 2)
        .map(|r| {
            let real = b.real(r);
            let targets = real[1..].iter().map(|&t| Some(t as usize)).collect();
            (real[..real.len() - 1].to_vec(), targets)
        })
        .collect())
}

/// Reward-model scores of one sampled response per prompt.
pub fn sample_scores(actor: &Model, reward: &Model, prompts: &[Vec<TokenId>], gen_len: usize, strategy: Strategy) -> Result<Vec<f32>> {
    let cap = prompts.iter().map(Vec::len).max().unwrap_or(0) + gen_len;
    let mut session = actor.session(1, cap)?;
    let mut out = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let g = generate_in(&mut session, 0, p, gen_len, strategy, i as u64)?;
        let full: Vec<TokenId> = p.iter().chain(&g.tokens).copied().collect();
        out.push(reward.scalar_score(&full)?);
    }
    Ok(out)
}

/// `(mean(after) − mean(before)) / std(before)`
pub fn standardized_gain(before: &[f32], after: &[f32]) -> f32 {
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
    let mb = mean(before);
    let sd = (before.iter().map(|&x| (x as f64 - mb).powi(2)).sum::<f64>() / before.len().max(1) as f64).sqrt();
    ((mean(after) - mb) / sd.max(1e-12)) as f32
}

/// Improvement of the mean rm score over the run in units of the early
/// standard deviation: mean of the last `window` iterations minus mean of
/// the first `window`, divided by the pooled std of the first `window`.
pub fn score_shift(scores: &[Vec<f32>], window: usize) -> f32 {
    let w = window.clamp(1, scores.len().max(1));
    let pool = |it: &[Vec<f32>]| -> Vec<f64> { it.iter().flatten().map(|&x| x as f64).collect() };
    let early = pool(&scores[..w]);
    let late = pool(&scores[scores.len() - w..]);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let me = mean(&early);
    let sd = (early.iter().map(|x| (x - me).powi(2)).sum::<f64>() / early.len().max(1) as f64).sqrt();
    ((mean(&late) - me) / sd.max(1e-12)) as f32
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[PpoMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
