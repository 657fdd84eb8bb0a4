mod common;

use common::{cfg, random_model, random_tokens, rng};
use edgellm::lora::{LoraAdapter, LoraOps};
use edgellm::model::{AttentionMask, Dense, KLayout, KvCache, Linear, Model, ModelConfig, ModelWeights, RowInput};
use edgellm::quant::{
    calibrate, compression_report, fake_quant_forward, quantize_activation, quantize_weights, QuantMode,
    QuantizedWeights,
};
use edgellm::tensor::argmax;
use edgellm::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn rows(tokens: &[u32]) -> Vec<RowInput> {
    tokens.iter().map(|&t| RowInput::Token(t)).collect()
}

fn quant_logits(m: &Model, q: &QuantizedWeights, mode: QuantMode, adapter: Option<&LoraAdapter>, toks: &[u32]) -> Tensor {
    let mut cache = KvCache::new(m.config(), KLayout::KPlain);
    let pos: Vec<usize> = (0..toks.len()).collect();
    fake_quant_forward(m, q, mode, adapter, &mut cache, &rows(toks), &pos, &AttentionMask::causal(toks.len(), 0)).unwrap()
}

fn fp_logits(m: &Model, toks: &[u32]) -> Tensor {
    let mut cache = KvCache::new(m.config(), KLayout::KPlain);
    let pos: Vec<usize> = (0..toks.len()).collect();
    m.forward(&mut cache, toks, &pos, &AttentionMask::causal(toks.len(), 0)).unwrap()
}

fn prompts(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    (0..n as u64).map(|i| random_tokens(seed + i, len, vocab)).collect()
}

/// Projection weights on a power-of-two grid with a full-range entry per column.
fn grid_model(c: ModelConfig, seed: u64) -> Model {
    let base = random_model(c.clone(), seed, 0.05);
    let mut r = rng(seed + 1);
    let mut named: std::collections::BTreeMap<String, Tensor> =
        base.weights().named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for i in 0..c.num_layers {
        for which in Linear::ALL {
            let key = format!("layers.{i}.{}", which.name());
            let shape = named[&key].shape().to_vec();
            let mut data: Vec<f32> = (0..shape[0] * shape[1])
                .map(|_| r.gen_range(-7i32..=7) as f32 * 0.03125)
                .collect();
            for j in 0..shape[1] {
                data[j] = if j % 2 == 0 { 7.0 } else { -7.0 } * 0.03125;
            }
            named.insert(key, Tensor::new(shape, data).unwrap());
        }
    }
    Model::new(c.clone(), ModelWeights::from_named(&c, named).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn weight_round_trip_bound(vals in prop::collection::vec(-5.0f32..5.0, 1..64), cols in 1usize..5) {
        let n = vals.len() / cols * cols;
        prop_assume!(n > 0);
        let w = Tensor::new(vec![n / cols, cols], vals[..n].to_vec()).unwrap();
        let q = quantize_weights(&w, 1).unwrap();
        let d = q.dequantize();
        for (i, (&a, &b)) in w.data().iter().zip(d.data()).enumerate() {
            prop_assert!((a - b).abs() <= q.scale_at(i) / 2.0 * (1.0 + 1e-5));
        }
        prop_assert!(q.codes().iter().all(|&c| (-8..=7).contains(&c)));
        prop_assert!(q.scales().iter().all(|&s| s > 0.0));
        prop_assert_eq!(quantize_weights(&w, 1).unwrap(), q);
    }

    #[test]
    fn activation_round_trip_bound(vals in prop::collection::vec(-5.0f32..5.0, 1..64), calib in 0.5f32..4.0) {
        let x = Tensor::new(vec![vals.len()], vals).unwrap();
        let q = quantize_activation(&x, calib).unwrap();
        let s = q.scales()[0];
        for (&a, &b) in x.data().iter().zip(q.dequantize().data()) {
            if a.abs() <= calib {
                prop_assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-5));
            }
        }
    }
}

#[test]
fn grid_weights_weight_only_is_lossless() {
    let m = grid_model(cfg(32, 4, 2, 64), 3);
    let q = QuantizedWeights::quantize(m.weights(), None).unwrap();
    for p in prompts(5, 9, 64, 40) {
        let d = quant_logits(&m, &q, QuantMode::WEIGHTS_ONLY, None, &p).max_abs_diff(&fp_logits(&m, &p));
        assert!(d <= 1e-6, "{d}");
    }
}

#[test]
fn missing_calibration_is_an_error() {
    let m = random_model(cfg(16, 2, 1, 32), 1, 0.05);
    let q = QuantizedWeights::quantize(m.weights(), None).unwrap();
    let mut cache = KvCache::new(m.config(), KLayout::KPlain);
    let e = fake_quant_forward(&m, &q, QuantMode::FULL, None, &mut cache, &rows(&[1, 2]), &[0, 1], &AttentionMask::causal(2, 0));
    assert!(matches!(e, Err(Error::MissingCalibration(_))));
    assert!(matches!(calibrate(&m, &[], None), Err(Error::MissingCalibration(_))));
}

#[test]
fn weight_error_adds_to_activation_error() {
    let m = random_model(cfg(32, 4, 2, 64), 5, 0.1);
    let ps = prompts(20, 12, 64, 500);
    let q = QuantizedWeights::quantize(m.weights(), Some(calibrate(&m, &ps, None).unwrap())).unwrap();
    let (mut act_only, mut both) = (0.0f64, 0.0f64);
    for p in &ps {
        let fp = fp_logits(&m, p);
        let mse = |t: &Tensor| t.data().iter().zip(fp.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        act_only += mse(&quant_logits(&m, &q, QuantMode::ACTIVATIONS_ONLY, None, p));
        both += mse(&quant_logits(&m, &q, QuantMode::FULL, None, p));
    }
    assert!(act_only <= both, "{act_only} > {both}");
}

#[test]
fn adapter_composes_at_full_precision() {
    let m = random_model(cfg(32, 4, 2, 64), 7, 0.05);
    let a = LoraAdapter::random(m.config(), "t", 4, 1.0, 0.1, &mut rng(8)).unwrap();
    let q = QuantizedWeights::quantize(m.weights(), None).unwrap();
    let toks = random_tokens(9, 6, 64);
    let got = quant_logits(&m, &q, QuantMode::WEIGHTS_ONLY, Some(&a), &toks);
    // oracle: merged onto the dequantized base
    let deq = m.weights().with_attention(|i, _| {
        [Linear::Q, Linear::K, Linear::V, Linear::O].map(|w| q.matrix(i, w).unwrap().dequantize())
    });
    let mut named: std::collections::BTreeMap<String, Tensor> =
        deq.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for i in 0..2 {
        for w in [Linear::Gate, Linear::Up, Linear::Down] {
            named.insert(format!("layers.{i}.{}", w.name()), q.matrix(i, w).unwrap().dequantize());
        }
    }
    let deq_model = Model::new(m.config().clone(), ModelWeights::from_named(m.config(), named).unwrap()).unwrap();
    let mut cache = KvCache::new(m.config(), KLayout::KPlain);
    let pos: Vec<usize> = (0..6).collect();
    let want = deq_model
        .forward_rows(&mut cache, &rows(&toks), &pos, &AttentionMask::causal(6, 0), &LoraOps { inner: &Dense, adapter: &a }, 0)
        .unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-6);
}

#[test]
fn quantized_bundle_round_trip() {
    let m = random_model(cfg(16, 2, 2, 32), 2, 0.05);
    let ps = prompts(4, 5, 32, 60);
    let q = QuantizedWeights::quantize(m.weights(), Some(calibrate(&m, &ps, None).unwrap())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    q.save(&m, dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"i4packed\"") && manifest.contains("layers.0.wq.scales"));
    let b = edgellm::bundle::Bundle::load(dir.path()).unwrap();
    let (m2, q2) = QuantizedWeights::from_bundle(&b).unwrap();
    assert_eq!(q2.matrix(1, Linear::Down), q.matrix(1, Linear::Down));
    assert_eq!(q2.calibration().unwrap().entries(), q.calibration().unwrap().entries());
    for p in &ps {
        assert_eq!(quant_logits(&m2, &q2, QuantMode::FULL, None, p), quant_logits(&m, &q, QuantMode::FULL, None, p));
    }
}

#[test]
fn compression_accounting() {
    let w = ModelWeights::random(&ModelConfig::toy_default(), 0.02, &mut rng(1)).unwrap();
    let r = compression_report(&w, &[]);
    assert_eq!(r.ratio_excluding_scales, 4.0);
    assert!((3.0..=4.0).contains(&r.ratio), "{}", r.ratio);
    let a = LoraAdapter::random(&ModelConfig::toy_default(), "t", 8, 1.0, 0.02, &mut rng(2)).unwrap();
    let with = compression_report(&w, &[&a]);
    assert_eq!(with.ratio, r.ratio);
    assert_eq!(with.adapter_bytes, a.param_count() * 2);
}

#[test]
fn top1_agreement_default_toy() {
    let c = ModelConfig::toy_default();
    let m = random_model(c.clone(), 42, 0.02);
    let ps = prompts(200, 16, c.vocab_size, 7000);
    let q = QuantizedWeights::quantize(m.weights(), Some(calibrate(&m, &ps, None).unwrap())).unwrap();
    let agree = ps
        .iter()
        .filter(|p| {
            let a = fp_logits(&m, p);
            let b = quant_logits(&m, &q, QuantMode::FULL, None, p);
            let last = p.len() - 1;
            argmax(a.row(last)) == argmax(b.row(last))
        })
        .count();
    println!("top-1 agreement {agree}/200");
    assert!(agree >= 180);
}
