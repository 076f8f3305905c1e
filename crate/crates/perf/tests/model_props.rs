use deskrlhf_perf::*;
use proptest::prelude::*;

fn workload() -> impl Strategy<Value = WorkloadSpec> {
    (
        prop::sample::select(vec!["1.3b", "2.7b", "6.7b", "13b", "30b", "66b", "175b"]),
        prop::sample::select(vec!["125m", "350m"]),
        1usize..1024,
        1usize..1024,
        1usize..4096,
    )
        .prop_map(|(a, c, p, g, batch)| {
            let mut w = WorkloadSpec::new(a, c).unwrap();
            w.prompt_len = p;
            w.gen_len = g;
            w.global_batch = batch;
            w
        })
}

fn hardware() -> impl Strategy<Value = HardwareSpec> {
    (prop::sample::select(vec!["v100-32g", "a6000-48g", "a100-40g", "a100-80g"]), 0.05f64..1.0, 0.05f64..1.0)
        .prop_map(|(n, mfu, ge)| {
            let mut hw = HardwareSpec::preset(n, 1).unwrap();
            hw.mfu = mfu;
            hw.gen_efficiency = ge;
            hw
        })
}

proptest! {
    #[test]
    fn effective_is_flop_weighted_harmonic_mean(w in workload(), hw in hardware(), k in 0u32..7) {
        let gpus = 1usize << k;
        if let Ok(r) = evaluate(&w, &hw, gpus, 1, MemoryOptions::default()) {
            let f = gen_fraction(&w);
            let hm = harmonic_mean(&[f, 1.0 - f], &[r.gen_tflops, r.train_tflops]);
            prop_assert!((hm - r.effective_tflops).abs() <= 1e-9 * hm);
            let lo = r.gen_tflops.min(r.train_tflops);
            let hi = r.gen_tflops.max(r.train_tflops);
            prop_assert!(lo * (1.0 - 1e-12) <= r.effective_tflops && r.effective_tflops <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gen_fraction_near_a_fifth_for_large_actors(w in workload()) {
        prop_assume!(w.actor.params >= 10.0 * w.critic_params);
        prop_assert!((gen_fraction(&w) - 0.2).abs() < 0.03);
    }

    #[test]
    fn batch_fits_and_respects_cap(w in workload(), hw in hardware(), gpus in 1usize..128, offload: bool, lora: bool) {
        let opts = MemoryOptions { offload, lora: lora.then_some(MemoryOptions::LORA_DEFAULT) };
        match max_batch_per_gpu(&w, &hw, gpus, opts) {
            Ok(b) => {
                prop_assert!(b >= 1);
                prop_assert!(b <= (w.global_batch / gpus).max(1));
                prop_assert!(states_bytes(w.actor.params, gpus, opts) + b as f64 * per_sample_bytes(&w) <= hw.mem_bytes);
            }
            Err(PerfError::Infeasible { .. }) => {
                prop_assert!(states_bytes(w.actor.params, gpus, opts) + per_sample_bytes(&w) > hw.mem_bytes);
            }
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn more_gpus_never_shrink_memory_headroom(w in workload(), hw in hardware(), gpus in 1usize..64) {
        let mut w = w;
        w.global_batch = usize::MAX / 2;
        let a = max_batch_per_gpu(&w, &hw, gpus, MemoryOptions::default()).ok();
        let b = max_batch_per_gpu(&w, &hw, gpus * 2, MemoryOptions::default()).ok();
        if let Some(a) = a {
            prop_assert!(b.unwrap() >= a);
        }
    }

    #[test]
    fn gen_time_nonincreasing_in_tp(w in workload(), hw in hardware(), b in 1usize..256, k in 0u32..3) {
        let tp = 1usize << k;
        let t1 = phase_time(&w, &hw, b, Phase::Gen, tp, tp);
        let t2 = phase_time(&w, &hw, b, Phase::Gen, 2 * tp, 2 * tp);
        prop_assert!(t2 <= t1);
    }

    #[test]
    fn feasible_set_monotone_in_memory(n in 1e8f64..2e11, m1 in 1e9f64..2e11, m2 in 1e9f64..2e11) {
        let (lo, hi) = if m1 < m2 { (m1, m2) } else { (m2, m1) };
        if feasible_single_gpu(n, lo, FEASIBILITY_OVERHEAD) {
            prop_assert!(feasible_single_gpu(n, hi, FEASIBILITY_OVERHEAD));
        }
    }

    #[test]
    fn cost_scales_inversely_with_rate(rate in 1.0f64..1e7, gpus in 1usize..512) {
        let (h, d) = estimate_cost(135e6, rate, gpus, 4.0);
        let (h2, d2) = estimate_cost(135e6, rate / 2.0, gpus, 4.0);
        prop_assert!((h2 / h - 2.0).abs() < 1e-9 && (d2 / d - 2.0).abs() < 1e-9);
        prop_assert!((d - h * gpus as f64 * 4.0).abs() <= 1e-9 * d);
    }
}

#[test]
fn max_model_per_gpu() {
    let want = [("v100-32g", "opt-2.7b"), ("a6000-48g", "opt-6.7b"), ("a100-40g", "opt-6.7b"), ("a100-80g", "opt-13b")];
    for (gpu, model) in want {
        let hw = HardwareSpec::preset(gpu, 1).unwrap();
        assert_eq!(max_feasible_model(hw.mem_bytes, FEASIBILITY_OVERHEAD).as_deref(), Some(model), "{gpu}");
    }
}

#[test]
fn default_efficiency_is_far_above_half_a_percent() {
    let w = WorkloadSpec::new("1.3b", "350m").unwrap();
    let hw = HardwareSpec::preset("a100-80g", 8).unwrap();
    let r = evaluate(&w, &hw, 8, 1, MemoryOptions::default()).unwrap();
    assert!(r.mfu(&hw) >= 10.0 * 0.005, "{}", r.mfu(&hw));
}

#[test]
fn calibrated_13b_epoch_near_nine_hours() {
    let w = WorkloadSpec::new("13b", "350m").unwrap();
    let hw = HardwareSpec::preset("a100-80g", 8).unwrap();
    let r = evaluate(&w, &hw, 8, 1, MemoryOptions::default()).unwrap();
    assert!((r.epoch_hours - 9.0).abs() < 0.5, "{}", r.epoch_hours);
}
