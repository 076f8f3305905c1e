//! Whole-criterion checks. Each returns a one-line summary on success and
//! the first violation on failure.

use std::collections::HashSet;

use deskrlhf_core::data::synthetic::MarkerTask;
use deskrlhf_core::data::{blend, split_stages, tokenize, ByteTokenizer, Example, Record, Tokenizer};
use deskrlhf_core::engine::shard::{gather_full, partition_zero};
use deskrlhf_core::engine::{Category, EngineConfig, HybridEngine, Mode};
use deskrlhf_core::model::generate::argmax;
use deskrlhf_core::model::{HeadKind, Model, ModelConfig, Strategy};
use deskrlhf_core::pipeline::ppo::{self, prompt_rows, sample_scores, standardized_gain, train_ppo, PpoConfig, Roles};
use deskrlhf_core::pipeline::rm::{self, eval_accuracy, reward_from_sft, train_rm, Readout, RmConfig};
use deskrlhf_core::pipeline::sft::{train_sft, SftConfig};
use deskrlhf_core::tensor::Tensor;
use deskrlhf_core::vocab::{TokenId, EOS};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ref64::{check_op, check_transformer, op_cases};

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits(ts: &[Tensor]) -> Vec<u32> {
    ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

// ---- gradients ----------------------------------------------------------

pub fn gradient_oracle(points: u64) -> Check {
    let mut worst = 0.0f64;
    let cases = op_cases();
    for c in &cases {
        for seed in 0..points {
            let e = check_op(c, seed);
            ensure(e < 1e-4, || format!("{} at point {seed}: relative error {e:.2e}", c.name))?;
            worst = worst.max(e);
        }
    }
    for head in [HeadKind::Lm, HeadKind::Scalar] {
        for seed in 0..points {
            let e = check_transformer(head, seed, 64);
            ensure(e < 1e-4, || format!("2-layer {} head at point {seed}: relative error {e:.2e}", head.name()))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("{} ops + 2-layer transformer, {points} points each, worst rel err {worst:.1e}", cases.len()))
}

// ---- KV cache -----------------------------------------------------------

fn random_model(rng: &mut ChaCha8Rng) -> Model {
    let n_heads = *[1, 2, 4].choose(rng).unwrap();
    let d_head = *[4, 8].choose(rng).unwrap();
    let cfg = ModelConfig {
        n_layers: rng.random_range(1..=3),
        n_heads,
        d_model: n_heads * d_head,
        d_ff: n_heads * d_head * rng.random_range(1..=4),
        vocab_size: rng.random_range(8..=40),
        max_seq_len: 32,
        head_kind: HeadKind::Lm,
    };
    Model::init(cfg, rng.random()).unwrap()
}

/// Greedy decoding that reruns the full forward pass for every token.
pub fn greedy_recompute(m: &Model, prompt: &[TokenId], max_new: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = m.forward_sequence(&seq).unwrap();
        let t = argmax(logits.row(seq.len() - 1)) as TokenId;
        out.push(t);
        seq.push(t);
        if t == EOS {
            break;
        }
    }
    out
}

pub fn kv_cache_equivalence(cases: u64) -> Check {
    let mut worst = 0.0f32;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let m = random_model(&mut rng);
        let v = m.config.vocab_size as TokenId;
        let prompt: Vec<TokenId> = (0..rng.random_range(1..=10)).map(|_| rng.random_range(0..v)).collect();
        let max_new = rng.random_range(1..=12);
        let cached = m.generate(&prompt, max_new, Strategy::Greedy).unwrap().tokens;
        let full = greedy_recompute(&m, &prompt, max_new);
        ensure(cached == full, || format!("case {case}: cached {cached:?} vs recompute {full:?}"))?;

        let seq: Vec<TokenId> = prompt.iter().chain(&cached).copied().collect();
        let reference = m.forward_sequence(&seq[..seq.len() - 1]).unwrap();
        let mut s = m.session(1, seq.len()).unwrap();
        let mut rows = s.prefill(0, &prompt).unwrap().into_data();
        for &t in &cached[..cached.len() - 1] {
            rows.extend(s.step(0, t).unwrap());
        }
        let diff = rows.iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        ensure(diff < 1e-5, || format!("case {case}: logits differ by {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("{cases} cases token-identical, max logit diff {worst:.1e}"))
}

// ---- hybrid engine ------------------------------------------------------

fn engine_model() -> Model {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        vocab_size: 24,
        max_seq_len: 24,
        head_kind: HeadKind::Lm,
    };
    Model::init(cfg, 21).unwrap()
}

fn ce_steps(e: &mut HybridEngine, steps: usize) {
    let rows: Vec<Vec<TokenId>> = (0..5).map(|i| (0..8).map(|j| ((i * 7 + j * 3) % 20 + 4) as TokenId).collect()).collect();
    for _ in 0..steps {
        e.train_step(rows.len(), 0.01, |g, b, i| {
            let r = &rows[i];
            let logits = b.forward(g, &r[..r.len() - 1])?;
            let t: Vec<Option<usize>> = r[1..].iter().map(|&x| Some(x as usize)).collect();
            let l = g.cross_entropy(logits, &t)?;
            Ok(g.scale(l, 0.2))
        })
        .unwrap();
    }
}

pub fn hybrid_round_trips() -> Check {
    // partition / gather on random tensors
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..200 {
        let shapes: Vec<Vec<usize>> = (0..rng.random_range(1..6))
            .map(|_| (0..rng.random_range(1..3)).map(|_| rng.random_range(1..9)).collect())
            .collect();
        let ts: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let w = rng.random_range(1..9);
        let back = gather_full(&partition_zero(&ts, w).unwrap(), &shapes).unwrap();
        ensure(bits(&back) == bits(&ts), || format!("partition/gather trial {trial} (W={w}) not byte-exact"))?;
    }

    // TRAIN -> INFER -> TRAIN
    let m = engine_model();
    let mut cfg = EngineConfig::new(4);
    cfg.tp = 2;
    cfg.infer_batch = 4;
    cfg.kv_capacity = 16;
    let mut e = HybridEngine::new(&m, cfg).unwrap();
    ce_steps(&mut e, 2);
    let before = e.state_bytes();
    ensure(e.ledger().category_total(Category::KvCache) == 0, || "kv bytes in TRAIN".into())?;
    for cycle in 0..3 {
        e.switch_mode(Mode::Infer).unwrap();
        let l = e.ledger();
        ensure(
            l.category_total(Category::Grads) == 0 && l.category_total(Category::Optimizer) == 0,
            || format!("cycle {cycle}: grads/optimizer held in INFER"),
        )?;
        ensure(l.category_total(Category::KvCache) > 0, || "no kv allocation in INFER".into())?;
        e.generate(&[vec![1, 5, 6], vec![1, 7]], 6, Strategy::top_k(3)).unwrap();
        e.switch_mode(Mode::Train).unwrap();
        ensure(e.ledger().category_total(Category::KvCache) == 0, || format!("cycle {cycle}: kv left in TRAIN"))?;
        ensure(e.state_bytes() == before, || format!("cycle {cycle}: state changed across the round trip"))?;
        ensure(e.ledger().conserved(), || "ledger not conserved".into())?;
    }

    // sharded step is W-invariant
    let states: Vec<Vec<u8>> = [1, 2, 4]
        .iter()
        .map(|&w| {
            let mut e = HybridEngine::new(&m, EngineConfig::new(w)).unwrap();
            ce_steps(&mut e, 3);
            e.state_bytes()
        })
        .collect();
    ensure(states[0] == states[1] && states[0] == states[2], || "train state differs across W".into())?;

    // TP generation matches tp=1
    let prompts: Vec<Vec<TokenId>> = (0..4).map(|i| vec![1, 4 + i, 9, 2 + i]).collect();
    let mut outs = Vec::new();
    for tp in [1, 2, 4] {
        for strat in [Strategy::Greedy, Strategy::top_k(5)] {
            let mut cfg = EngineConfig::new(4);
            cfg.tp = tp;
            cfg.infer_batch = 4;
            let mut e = HybridEngine::new(&m, cfg).unwrap();
            e.switch_mode(Mode::Infer).unwrap();
            let g: Vec<Vec<TokenId>> = e.generate(&prompts, 10, strat).unwrap().into_iter().map(|g| g.tokens).collect();
            outs.push((tp, strat, g));
        }
    }
    for (tp, strat, g) in &outs[2..] {
        let base = if matches!(strat, Strategy::Greedy) { &outs[0].2 } else { &outs[1].2 };
        ensure(g == base, || format!("tp={tp} {strat:?} tokens differ from tp=1"))?;
    }
    Ok("partition/gather x200, 3 mode cycles, W in {1,2,4}, tp in {1,2,4} all exact".into())
}

// ---- pipeline math ------------------------------------------------------

pub fn pipeline_math() -> Check {
    let l = rm::pairwise_loss(&[0.3], &[0.3]).unwrap();
    ensure((l - std::f32::consts::LN_2).abs() < 1e-6, || format!("pairwise loss at 0 = {l}"))?;

    // hand recursion for rewards [0,0,1], values 0.5, gamma = lambda = 1
    let (adv, ret) = ppo::gae(&[0.0, 0.0, 1.0], &[0.5; 3], 1.0, 1.0);
    let d2 = 1.0 - 0.5;
    let d1 = 0.0 + 0.5 - 0.5;
    let d0 = 0.0 + 0.5 - 0.5;
    let want = [d0 + d1 + d2, d1 + d2, d2];
    ensure(adv.iter().zip(want).all(|(a, w)| (a - w).abs() < 1e-6), || format!("gae {adv:?}"))?;
    ensure(ret.iter().all(|r| (r - 1.0).abs() < 1e-6), || format!("returns {ret:?}"))?;

    let ln2 = std::f32::consts::LN_2;
    for (new, old, a, want) in [(0.0, 0.0, 1.0, -1.0), (ln2, 0.0, 1.0, -1.2), (-ln2, 0.0, -1.0, 0.8)] {
        let got = ppo::ppo_actor_loss(&[new], &[old], &[a], 0.2);
        ensure((got - want).abs() < 1e-6, || format!("clip case rho=e^{new}: {got} vs {want}"))?;
    }

    let (d, e0, target) = (0.9f32, 1.0f32, 0.25f32);
    let mut ema = [e0];
    for _ in 0..10 {
        ppo::ema_update(&mut ema, &[target], d);
    }
    let closed = (d as f64).powi(10) * e0 as f64 + (1.0 - (d as f64).powi(10)) * target as f64;
    ensure((ema[0] as f64 - closed).abs() < 1e-6, || format!("ema {} vs {closed}", ema[0]))?;
    Ok("pairwise ln2, GAE, three clip cases, EMA k=10 all within 1e-6".into())
}

// ---- training smoke -----------------------------------------------------

pub fn smoke_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 16,
        max_seq_len: 32,
        head_kind: HeadKind::Lm,
    }
}

#[derive(Debug)]
pub struct SmokeResult {
    pub sft_before: f32,
    pub sft_after: f32,
    pub rm_accuracy: f32,
    pub ppo_gain: f32,
}

/// SFT, reward model and PPO on the marker task.
pub fn marker_smoke(seed: u64) -> SmokeResult {
    let task = MarkerTask::default();
    let tok = task.tokenizer();
    let all = tokenize(&task.records(600, seed), &tok);
    let (sft_data, rest) = all.split_at(200);
    let (rm_data, ppo_data) = rest.split_at(300);
    // unranked demonstrations, half of them with the marker
    let demos: Vec<Example> = sft_data
        .iter()
        .enumerate()
        .map(|(i, e)| Example {
            prompt: e.prompt.clone(),
            chosen: if i % 2 == 0 { e.chosen.clone() } else { e.rejected.clone() },
            rejected: None,
        })
        .collect();
    let mut actor = HybridEngine::new(&Model::init(smoke_config(), seed).unwrap(), EngineConfig::new(1)).unwrap();
    let sft_cfg = SftConfig {
        steps: 150,
        batch_size: 16,
        max_len: 16,
        lr: 3e-3,
        seed,
        ..SftConfig::default()
    };
    let r = train_sft(&mut actor, &demos[..180], &demos[180..], &sft_cfg).unwrap();
    let sft = actor.model().unwrap();

    let mut rm = HybridEngine::new(&reward_from_sft(&sft, seed + 1).unwrap(), EngineConfig::new(1)).unwrap();
    let rm_cfg = RmConfig {
        steps: 100,
        batch_size: 16,
        max_len: 16,
        lr: 2e-3,
        seed,
        ..RmConfig::default()
    };
    let (train, held) = rm_data.split_at(250);
    train_rm(&mut rm, train, &rm_cfg).unwrap();
    let rm = rm.model().unwrap();
    let rm_accuracy = eval_accuracy(&rm, held, 16, Readout::LastToken).unwrap();

    let cfg = PpoConfig {
        iterations: 50,
        batch_size: 16,
        prompt_len: 6,
        gen_len: 8,
        seed,
        ..PpoConfig::default()
    };
    let mut ec = EngineConfig::new(1);
    ec.infer_batch = cfg.batch_size;
    ec.kv_capacity = cfg.prompt_len + cfg.gen_len;
    let mut roles = Roles::new(&sft, &rm, ec.clone(), ec, true).unwrap();
    let prompts = prompt_rows(ppo_data, cfg.prompt_len).unwrap();
    let eval = |m: &Model| sample_scores(m, &rm, &prompts, cfg.gen_len, Strategy::top_k(seed + 99)).unwrap();
    let before = eval(&sft);
    train_ppo(&mut roles, &prompts, None, &cfg).unwrap();
    let after = eval(&roles.actor.model().unwrap());
    SmokeResult {
        sft_before: r.heldout_before.unwrap(),
        sft_after: r.heldout_after.unwrap(),
        rm_accuracy,
        ppo_gain: standardized_gain(&before, &after),
    }
}

pub fn training_smoke() -> Check {
    let r = marker_smoke(11);
    ensure(r.sft_after < r.sft_before, || format!("SFT held-out loss {} -> {}", r.sft_before, r.sft_after))?;
    ensure(r.rm_accuracy > 0.9, || format!("RM accuracy {}", r.rm_accuracy))?;
    ensure(r.ppo_gain > 0.5, || format!("PPO gain {:.2} sigma", r.ppo_gain))?;
    Ok(format!(
        "SFT held-out {:.3} -> {:.3}, RM acc {:.3}, PPO +{:.2} sigma",
        r.sft_before, r.sft_after, r.rm_accuracy, r.ppo_gain
    ))
}

// ---- data layer ---------------------------------------------------------

pub fn data_layer() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cfg in 0..200 {
        let k = rng.random_range(1..=5);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..60)).collect();
        let mut weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.0)).collect();
        if rng.random_bool(0.2) {
            weights[0] = 0.0;
        }
        if weights.iter().sum::<f64>() == 0.0 {
            weights[k - 1] = 1.0;
        }
        let target = rng.random_range(1..400);
        let sources: Vec<(Vec<Record>, f64)> = sizes
            .iter()
            .zip(&weights)
            .enumerate()
            .map(|(i, (&n, &w))| ((0..n).map(|j| Record::new(format!("{i}/{j}")).with_source(i.to_string())).collect(), w))
            .collect();
        let out = blend(&sources, rng.random(), target).map_err(|e| format!("blend config {cfg}: {e}"))?;
        let total: f64 = weights.iter().sum();
        for (i, w) in weights.iter().enumerate() {
            let got = out.iter().filter(|r| r.source.as_deref() == Some(i.to_string().as_str())).count() as f64;
            let want = w / total * target as f64;
            ensure((got - want).abs() <= 1.0, || format!("blend config {cfg}: source {i} got {got}, share {want:.2}"))?;
        }
    }
    for n in 1..=1000usize {
        let items: Vec<usize> = (0..n).collect();
        let s = split_stages(&items, [0.2, 0.4, 0.4], n as u64).map_err(|e| e.to_string())?;
        let mut seen = HashSet::new();
        for x in s.sft.iter().chain(&s.rm).chain(&s.ppo) {
            ensure(seen.insert(*x), || format!("n={n}: record {x} in two stages"))?;
        }
        ensure(seen.len() == n, || format!("n={n}: split loses records"))?;
    }
    let t = ByteTokenizer;
    for i in 0..1000 {
        let len = rng.random_range(0..64);
        let s: String = (0..len).map(|_| rng.random::<char>()).collect();
        ensure(t.decode(&t.encode(&s)) == s, || format!("string {i} does not round-trip"))?;
    }
    Ok("200 blends within 1, splits 1..1000 disjoint+exhaustive, 1000 strings round-trip".into())
}
