mod common;

use std::sync::Arc;

use common::{cfg, random_model, random_tokens, rng};
use edgellm::lora::{merge_adapter, LoraAdapter, LoraBank, MaskedLoraOps, LoraOps, Strategy};
use edgellm::model::{AttentionMask, Dense, KLayout, KvCache, Model, RowInput};
use edgellm::{Error, Tensor};

const STRATEGIES: [Strategy; 3] = [Strategy::MultiGraph, Strategy::Masked, Strategy::AdapterAsInput];

fn rows(tokens: &[u32]) -> Vec<RowInput> {
    tokens.iter().map(|&t| RowInput::Token(t)).collect()
}

fn prefill(model: &Model, tokens: &[u32]) -> Tensor {
    let mut cache = KvCache::new(model.config(), KLayout::KPlain);
    let pos: Vec<usize> = (0..tokens.len()).collect();
    model.forward(&mut cache, tokens, &pos, &AttentionMask::causal(tokens.len(), 0)).unwrap()
}

fn bank_prefill(bank: &LoraBank, tokens: &[u32]) -> Tensor {
    let mut cache = KvCache::new(bank.model().config(), KLayout::KPlain);
    let pos: Vec<usize> = (0..tokens.len()).collect();
    bank.forward(&mut cache, &rows(tokens), &pos, &AttentionMask::causal(tokens.len(), 0))
        .unwrap()
}

fn adapters(model: &Model, n: usize, seed: u64) -> Vec<LoraAdapter> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| LoraAdapter::random(model.config(), format!("task{i}"), 4, 0.5 + i as f32 * 0.25, 0.1, &mut r).unwrap())
        .collect()
}

fn bank(model: &Model, strategy: Strategy, adapters: &[LoraAdapter]) -> LoraBank {
    let mut b = LoraBank::new(model.clone(), strategy);
    for a in adapters {
        b.insert(a.clone()).unwrap();
    }
    b
}

#[test]
fn merge_with_zero_scale_is_identity() {
    let m = random_model(cfg(16, 2, 2, 32), 1, 0.05);
    let a = LoraAdapter::random(m.config(), "t", 2, 0.0, 0.1, &mut rng(2)).unwrap();
    assert_eq!(&merge_adapter(m.weights(), &a).unwrap(), m.weights());
}

#[test]
fn merge_then_negated_merge_recovers_base() {
    let m = random_model(cfg(16, 2, 2, 32), 1, 0.05);
    let a = LoraAdapter::random(m.config(), "t", 3, 0.7, 0.1, &mut rng(2)).unwrap();
    let once = merge_adapter(m.weights(), &a).unwrap();
    let back = merge_adapter(&once, &a.with_scale(-0.7)).unwrap();
    for ((_, x), (_, y)) in back.named_tensors().iter().zip(m.weights().named_tensors()) {
        assert!(x.max_abs_diff(y) <= 1e-6);
    }
}

#[test]
fn runtime_projection_matches_merged_forward() {
    let m = random_model(cfg(32, 4, 2, 64), 3, 0.05);
    let a = &adapters(&m, 1, 4)[0];
    let merged = Model::new(m.config().clone(), merge_adapter(m.weights(), a).unwrap()).unwrap();
    let toks = random_tokens(5, 10, 64);
    let want = prefill(&merged, &toks);
    let mut cache = KvCache::new(m.config(), KLayout::KPlain);
    let pos: Vec<usize> = (0..10).collect();
    let got = m
        .forward_rows(&mut cache, &rows(&toks), &pos, &AttentionMask::causal(10, 0), &LoraOps { inner: &Dense, adapter: a }, 0)
        .unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-5);
}

#[test]
fn strategies_agree_and_match_merged_oracle() {
    let m = random_model(cfg(32, 4, 2, 64), 6, 0.05);
    let ads = adapters(&m, 3, 7);
    let banks: Vec<LoraBank> = STRATEGIES.iter().map(|&s| bank(&m, s, &ads)).collect();
    for a in &ads {
        let merged = Model::new(m.config().clone(), merge_adapter(m.weights(), a).unwrap()).unwrap();
        for p in 0..5 {
            let toks = random_tokens(100 + p, 7, 64);
            let want = prefill(&merged, &toks);
            let outs: Vec<Tensor> = banks
                .iter()
                .map(|b| {
                    let mut b2 = bank(&m, b.strategy(), &ads);
                    b2.switch_task(a.task_id()).unwrap();
                    bank_prefill(&b2, &toks)
                })
                .collect();
            for o in &outs {
                assert!(o.max_abs_diff(&want) <= 1e-5);
            }
            assert!(outs[0].max_abs_diff(&outs[1]) <= 1e-5);
            assert!(outs[1].max_abs_diff(&outs[2]) <= 1e-5);
        }
    }
}

#[test]
fn switch_task_round_robin_over_eight() {
    let m = random_model(cfg(32, 4, 2, 64), 8, 0.05);
    let ads = adapters(&m, 8, 9);
    let oracles: Vec<Model> = ads
        .iter()
        .map(|a| Model::new(m.config().clone(), merge_adapter(m.weights(), a).unwrap()).unwrap())
        .collect();
    for s in STRATEGIES {
        let mut b = bank(&m, s, &ads);
        let before = m.weights().checksum();
        for round in 0..2 {
            for (i, a) in ads.iter().enumerate() {
                b.switch_task(a.task_id()).unwrap();
                let toks = random_tokens(round * 10 + i as u64, 5, 64);
                let d = bank_prefill(&b, &toks).max_abs_diff(&prefill(&oracles[i], &toks));
                assert!(d <= 1e-5, "{s:?} task {i}: {d}");
                assert!(Arc::ptr_eq(b.base_weights(), m.shared_weights()));
            }
        }
        assert_eq!(b.model().weights().checksum(), before);
    }
}

#[test]
fn switch_is_idempotent_and_rejects_unknown() {
    let m = random_model(cfg(16, 2, 1, 16), 1, 0.05);
    let mut b = bank(&m, Strategy::Masked, &adapters(&m, 3, 2));
    b.switch_task("task1").unwrap();
    let sel = b.selector().to_vec();
    b.switch_task("task1").unwrap();
    assert_eq!(b.selector(), sel.as_slice());
    assert_eq!(sel, vec![0.0, 1.0, 0.0]);
    assert!(matches!(b.switch_task("nope"), Err(Error::UnknownTask(_))));
    assert_eq!(b.active().unwrap().task_id(), "task1");
}

#[test]
fn one_hot_masked_sum_equals_single_adapter() {
    let m = random_model(cfg(32, 4, 2, 64), 11, 0.05);
    let ads: Vec<Arc<LoraAdapter>> = adapters(&m, 4, 12).into_iter().map(Arc::new).collect();
    let toks = random_tokens(13, 6, 64);
    let pos: Vec<usize> = (0..6).collect();
    let mask = AttentionMask::causal(6, 0);
    for i in 0..4 {
        let mut sel = vec![0.0; 4];
        sel[i] = 1.0;
        let masked = MaskedLoraOps { inner: &Dense, adapters: &ads, selector: &sel };
        let single = LoraOps { inner: &Dense, adapter: &ads[i] };
        let mut c1 = KvCache::new(m.config(), KLayout::KPlain);
        let mut c2 = KvCache::new(m.config(), KLayout::KPlain);
        let a = m.forward_rows(&mut c1, &rows(&toks), &pos, &mask, &masked, 0).unwrap();
        let b = m.forward_rows(&mut c2, &rows(&toks), &pos, &mask, &single, 0).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}

#[test]
fn no_active_adapter_gives_base_model() {
    let m = random_model(cfg(32, 4, 2, 64), 14, 0.05);
    let ads = adapters(&m, 2, 15);
    let toks = random_tokens(16, 6, 64);
    let base = prefill(&m, &toks);
    for s in STRATEGIES {
        let mut b = bank(&m, s, &ads);
        b.deactivate();
        assert!(bank_prefill(&b, &toks).max_abs_diff(&base) <= 1e-6, "{s:?}");
    }
    // explicit zero placeholder through the as-input routine
    let zero = LoraAdapter::zeros(m.config(), 4).unwrap();
    let mut cache = KvCache::new(m.config(), KLayout::KPlain);
    let pos: Vec<usize> = (0..6).collect();
    let out = edgellm::lora::forward_adapter_as_input(&m, &mut cache, &rows(&toks), &pos, &AttentionMask::causal(6, 0), &zero, 0).unwrap();
    assert_eq!(out, base);
}

#[test]
fn rank_mismatch_rejected_at_insert() {
    let m = random_model(cfg(16, 2, 1, 16), 1, 0.05);
    let mut b = LoraBank::new(m.clone(), Strategy::AdapterAsInput);
    b.insert(LoraAdapter::random(m.config(), "a", 2, 1.0, 0.1, &mut rng(1)).unwrap()).unwrap();
    let other = LoraAdapter::random(m.config(), "b", 3, 1.0, 0.1, &mut rng(2)).unwrap();
    assert!(matches!(b.insert(other), Err(Error::RankMismatch { expected: 2, got: 3 })));
    assert!(LoraAdapter::random(m.config(), "c", 17, 1.0, 0.1, &mut rng(3)).is_err());
}

#[test]
fn footprint_ordering_and_scaling() {
    let m = random_model(cfg(32, 4, 2, 64), 1, 0.05);
    let one = adapters(&m, 1, 2);
    let reports: Vec<_> = STRATEGIES.iter().map(|&s| bank(&m, s, &one).footprint()).collect();
    assert!(reports.iter().all(|r| r.graph_param_bytes + r.external_adapter_bytes == reports[0].graph_param_bytes));
    assert!(reports.iter().all(|r| r.graph_param_bytes == reports[0].graph_param_bytes));

    let many = adapters(&m, 6, 3);
    let [mg, mk, ai]: [_; 3] = STRATEGIES
        .iter()
        .map(|&s| bank(&m, s, &many).footprint())
        .collect::<Vec<_>>()
        .try_into()
        .unwrap();
    assert!(mk.bytes_touched_per_step >= mg.bytes_touched_per_step);
    assert!(mg.bytes_touched_per_step >= ai.bytes_touched_per_step);
    assert_eq!(mk.bytes_touched_per_step - mk.base_bytes, 6 * mk.adapter_bytes);
    assert_eq!(ai.bytes_touched_per_step - ai.base_bytes, ai.adapter_bytes);
    // "base + adapters" split at fp16
    assert_eq!(mk.fp16_base_bytes * 2, mk.base_bytes);
    assert_eq!(mk.fp16_adapters_bytes, 6 * mk.adapter_bytes / 2);
}

#[test]
fn adapter_bundle_round_trip() {
    let m = random_model(cfg(16, 2, 2, 16), 1, 0.05);
    let a = LoraAdapter::random(m.config(), "correction", 2, 0.8, 0.1, &mut rng(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.save(m.config(), dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"role\": \"lora\""));
    assert!(manifest.contains("\"task_id\": \"correction\""));
    assert_eq!(LoraAdapter::load(dir.path()).unwrap(), a);
}
