mod common;

use common::{cfg, random_model, random_tokens, rng};
use edgellm::ctg::{build_ctg_mask, latency_table, run_ctg, CtgConfig, CtgRunner, Sampling};
use edgellm::lora::{LoraAdapter, LoraOps};
use edgellm::model::{Dense, KLayout, Model, Session};
use edgellm::Error;
use proptest::prelude::*;
use rand::Rng;

fn oracle(model: &Model, prompt: &[u32], first: u32, max_len: usize, eos: Option<u32>) -> Vec<u32> {
    Session::new(model).greedy(prompt, max_len, Some(first), eos).unwrap()
}

#[test]
fn matches_independent_runs() {
    for (seed, n) in [(1u64, 1usize), (2, 2), (3, 4), (4, 8)] {
        let model = random_model(cfg(16, 2, 2, 40), seed, 0.5);
        let prompt = random_tokens(seed + 100, 6, 40);
        let out = run_ctg(&model, &Dense, &prompt, CtgConfig::greedy(n, 12, None)).unwrap();
        assert_eq!(out.streams.len(), n);
        for (i, s) in out.streams.iter().enumerate() {
            assert_eq!(s, &oracle(&model, &prompt, out.first_tokens[i], 12, None), "n={n} stream {i}");
        }
        assert_eq!(out.prefill_calls, 1);
        assert_eq!(out.decode_calls, 11);
        assert!(out.rows_per_call.iter().all(|&r| r <= n));
    }
}

#[test]
fn single_stream_is_greedy() {
    let model = random_model(cfg(16, 4, 2, 32), 9, 0.5);
    let prompt = random_tokens(5, 4, 32);
    let out = run_ctg(&model, &Dense, &prompt, CtgConfig::greedy(1, 10, None)).unwrap();
    assert_eq!(out.streams[0], Session::new(&model).greedy(&prompt, 10, None, None).unwrap());
}

#[test]
fn eos_stops_one_stream() {
    let model = random_model(cfg(16, 2, 2, 24), 11, 0.6);
    let prompt = random_tokens(12, 5, 24);
    let free = run_ctg(&model, &Dense, &prompt, CtgConfig::greedy(4, 16, None)).unwrap();
    // pick a token that some stream emits mid-way so it finishes early
    let eos = free.streams[0][3];
    let out = run_ctg(&model, &Dense, &prompt, CtgConfig::greedy(4, 16, Some(eos))).unwrap();
    let mut longest = 0;
    for (i, s) in out.streams.iter().enumerate() {
        assert_eq!(s, &oracle(&model, &prompt, out.first_tokens[i], 16, Some(eos)));
        longest = longest.max(s.len() - 1);
    }
    assert!(out.streams[0].len() <= 4);
    assert_eq!(out.decode_calls, longest);
    assert_eq!(out.decode_calls, *out.decoded_lengths().iter().max().unwrap());
    // rows per call shrink as streams finish
    assert!(out.rows_per_call.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn shared_adapter_matches_oracle() {
    let model = random_model(cfg(16, 2, 2, 30), 21, 0.5);
    let adapter = LoraAdapter::random(model.config(), "style", 4, 0.8, 0.2, &mut rng(22)).unwrap();
    let ops = LoraOps { inner: &Dense, adapter: &adapter };
    let prompt = random_tokens(23, 5, 30);
    let out = run_ctg(&model, &ops, &prompt, CtgConfig::greedy(4, 8, None)).unwrap();
    for (i, s) in out.streams.iter().enumerate() {
        let want = Session::with_ops(&model, &ops, KLayout::KPlain)
            .greedy(&prompt, 8, Some(out.first_tokens[i]), None)
            .unwrap();
        assert_eq!(s, &want);
    }
}

#[test]
fn perturbing_one_segment_leaves_others() {
    let model = random_model(cfg(16, 2, 2, 32), 31, 0.6);
    let prompt = random_tokens(32, 5, 32);
    let cfg = CtgConfig::greedy(4, 12, None);
    let clean = run_ctg(&model, &Dense, &prompt, cfg).unwrap();
    let victim = 2;
    let mut runner = CtgRunner::start(&model, &Dense, KLayout::KPlain, &prompt, cfg).unwrap();
    let mut r = rng(33);
    for _ in 0..5 {
        runner.step().unwrap();
    }
    let start = runner.stream_set().segment_starts[victim];
    let cache = runner.cache_mut();
    let width = cache.width();
    for layer in 0..cache.num_layers() {
        for slot in start..start + 12 {
            let k: Vec<f32> = (0..width).map(|_| r.gen_range(-5.0..5.0)).collect();
            let v: Vec<f32> = (0..width).map(|_| r.gen_range(-5.0..5.0)).collect();
            cache.write(layer, slot, &k, &v);
        }
    }
    let out = runner.finish().unwrap();
    for i in (0..4).filter(|&i| i != victim) {
        assert_eq!(out.streams[i], clean.streams[i], "stream {i}");
    }
}

#[test]
fn capacity_checked() {
    let model = random_model(cfg(16, 2, 1, 32), 41, 0.5);
    let prompt = random_tokens(42, 20, 32);
    let err = run_ctg(&model, &Dense, &prompt, CtgConfig::greedy(8, 20, None)).unwrap_err();
    assert!(matches!(err, Error::Capacity { .. }));
    assert!(run_ctg(&model, &Dense, &prompt, CtgConfig::greedy(33, 2, None)).is_err());
}

#[test]
fn stochastic_mode_is_seeded() {
    let model = random_model(cfg(16, 2, 1, 32), 51, 0.5);
    let prompt = random_tokens(52, 4, 32);
    let cfg = CtgConfig {
        n_streams: 4,
        max_len: 8,
        eos: None,
        sampling: Sampling::Temperature { temperature: 1.0, seed: 7 },
    };
    let a = run_ctg(&model, &Dense, &prompt, cfg).unwrap();
    let b = run_ctg(&model, &Dense, &prompt, cfg).unwrap();
    assert_eq!(a, b);
    let mut firsts = a.first_tokens.clone();
    firsts.sort();
    firsts.dedup();
    assert_eq!(firsts.len(), 4);
}

#[test]
fn latency_table_flags_printed_total() {
    let t = latency_table(40.0, 23.0, 8, 1);
    assert_eq!(t.concurrent_ms, 63.0);
    assert_eq!(t.sequential_ms, 224.0);
    assert!(t.note.unwrap().contains("174"));
    assert!(latency_table(40.0, 23.0, 4, 1).note.is_none());
}

proptest! {
    #[test]
    fn mask_matches_set_builder(
        prefill in 0usize..6,
        segs in proptest::collection::vec((0usize..4, any::<bool>()), 1..6),
    ) {
        let lens: Vec<usize> = segs.iter().map(|s| s.0).collect();
        let active: Vec<bool> = segs.iter().map(|s| s.1).collect();
        let m = build_ctg_mask(prefill, &lens, &active);
        let total: usize = prefill + lens.iter().sum::<usize>();
        let act: Vec<usize> = (0..lens.len()).filter(|&i| active[i]).collect();
        prop_assert_eq!(m.rows(), act.len());
        prop_assert_eq!(m.cols(), total + act.len());
        for (r, &i) in act.iter().enumerate() {
            let start = prefill + lens[..i].iter().sum::<usize>();
            for c in 0..m.cols() {
                let want = c < prefill || (start..start + lens[i]).contains(&c) || c == total + r;
                prop_assert_eq!(m.is_visible(r, c), want);
            }
        }
    }
}
