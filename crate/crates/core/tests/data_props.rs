use std::collections::HashSet;

use deskrlhf_core::data::{
    apportion, blend, make_batch, split_stages, tokenize, BatchKind, ByteTokenizer, Example, Record, SymbolTokenizer,
    Tokenizer,
};
use deskrlhf_core::vocab::{BOS, PAD};
use proptest::prelude::*;

fn source(tag: usize, n: usize) -> Vec<Record> {
    (0..n).map(|i| Record::new(format!("s{tag}-{i}")).with_source(format!("s{tag}"))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn blend_tracks_weights(
        spec in prop::collection::vec((1usize..40, 0.0f64..5.0), 1..5),
        target in 1usize..300,
        seed in any::<u64>(),
    ) {
        prop_assume!(spec.iter().map(|s| s.1).sum::<f64>() > 1e-6);
        let sources: Vec<(Vec<Record>, f64)> = spec.iter().enumerate().map(|(i, &(n, w))| (source(i, n), w)).collect();
        let out = blend(&sources, seed, target).unwrap();
        prop_assert_eq!(out.len(), target);
        let total: f64 = spec.iter().map(|s| s.1).sum();
        for (i, &(_, w)) in spec.iter().enumerate() {
            let tag = format!("s{i}");
            let got = out.iter().filter(|r| r.source.as_deref() == Some(tag.as_str())).count() as f64;
            prop_assert!((got - w / total * target as f64).abs() <= 1.0 + 1e-9);
        }
        prop_assert_eq!(out, blend(&sources, seed, target).unwrap());
    }

    #[test]
    fn apportion_sums_to_total(ws in prop::collection::vec(0.0f64..10.0, 1..8), total in 0usize..5000) {
        prop_assume!(ws.iter().sum::<f64>() > 1e-6);
        let c = apportion(&ws, total).unwrap();
        prop_assert_eq!(c.iter().sum::<usize>(), total);
    }

    #[test]
    fn byte_tokenizer_round_trips(s in any::<String>()) {
        let t = ByteTokenizer;
        let ids = t.encode(&s);
        prop_assert_eq!(ids.len(), s.len());
        prop_assert!(ids.iter().all(|&i| (4..260).contains(&i)));
        prop_assert_eq!(t.decode(&ids), s);
    }

    #[test]
    fn symbol_tokenizer_round_trips(s in "[a-k!]{0,40}") {
        let t = SymbolTokenizer::new("abcdefghijk!").unwrap();
        prop_assert_eq!(t.decode(&t.encode(&s)), s);
    }

    #[test]
    fn batches_are_right_padded(lens in prop::collection::vec((1usize..20, 0usize..20), 1..6), max_len in 2usize..24) {
        let ex: Vec<Example> = lens.iter().map(|&(p, c)| Example {
            prompt: vec![10; p],
            chosen: Some(vec![11; c]),
            rejected: Some(vec![12; c + 1]),
        }).collect();
        for kind in [BatchKind::Sft, BatchKind::Pairwise, BatchKind::Prompt, BatchKind::Pretrain] {
            let b = make_batch(kind, &ex, max_len).unwrap();
            let width = b.tokens[0].len();
            prop_assert_eq!(width, max_len);
            for r in 0..b.rows() {
                let n = b.real_len(r);
                prop_assert_eq!(b.tokens[r].len(), width);
                prop_assert_eq!(b.tokens[r][0], BOS);
                prop_assert!(b.mask[r][..n].iter().all(|&m| m));
                prop_assert!(b.tokens[r][n..].iter().all(|&t| t == PAD));
            }
        }
    }
}

#[test]
fn splits_partition_every_size() {
    for n in 1..=1000usize {
        let items: Vec<usize> = (0..n).collect();
        let fr = [0.2, 0.4, 0.4];
        let s = split_stages(&items, fr, n as u64).unwrap();
        let parts = [&s.sft, &s.rm, &s.ppo];
        let mut seen = HashSet::new();
        for (p, f) in parts.iter().zip(fr) {
            assert!((p.len() as f64 - f * n as f64).abs() <= 1.0, "n={n}");
            for &x in p.iter() {
                assert!(seen.insert(x), "n={n}: {x} in two stages");
            }
        }
        assert_eq!(seen.len(), n);
    }
}

#[test]
fn prompt_batch_example() {
    let ex = |p: usize| Example { prompt: vec![9; p], chosen: None, rejected: None };
    let b = make_batch(BatchKind::Prompt, &[ex(3), ex(5)], 8).unwrap();
    assert_eq!(b.tokens.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8]);
    assert_eq!((b.real_len(0), b.real_len(1)), (4, 6));
    let long = make_batch(BatchKind::Prompt, &[ex(30)], 8).unwrap();
    assert_eq!(long.real_len(0), 8);
}

#[test]
fn byte_tokenizer_examples() {
    assert!(ByteTokenizer.encode("").is_empty());
    assert_eq!(ByteTokenizer.encode("AB"), vec![65 + 4, 66 + 4]);
    let recs = vec![Record::pair("hi", "yo", "no")];
    let ex = tokenize(&recs, &ByteTokenizer);
    assert_eq!(ex[0].prompt, vec![104 + 4, 105 + 4]);
}
