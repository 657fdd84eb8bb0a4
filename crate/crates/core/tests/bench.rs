use edgellm::bench::{
    bundle_digests, load_toy, make_toy_model, run_suite, save_toy, toy_corpus, SuiteOptions, ToySpec, SUITES,
};
use edgellm::model::{AttentionMask, KvCache, KLayout, ModelConfig};
use edgellm::Error;

fn small_spec(seed: u64) -> ToySpec {
    ToySpec {
        seed,
        config: ModelConfig {
            embed_dim: 32,
            num_heads: 4,
            latent_dim: 32,
            num_layers: 2,
            mlp_hidden: 64,
            vocab_size: 258,
            max_seq_len: 256,
            ..ModelConfig::toy_default()
        },
        n_adapters: 3,
        rank: 4,
        ..ToySpec::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_toy(&make_toy_model(&small_spec(5)).unwrap(), a.path()).unwrap();
    save_toy(&make_toy_model(&small_spec(5)).unwrap(), b.path()).unwrap();
    save_toy(&make_toy_model(&small_spec(6)).unwrap(), c.path()).unwrap();
    let da = bundle_digests(a.path()).unwrap();
    assert!(!da.is_empty());
    assert_eq!(da, bundle_digests(b.path()).unwrap());
    assert_ne!(da, bundle_digests(c.path()).unwrap());
    let loaded = load_toy(a.path()).unwrap();
    assert_eq!(loaded.adapters.len(), 3);
    assert_eq!(loaded.model.weights().checksum(), make_toy_model(&small_spec(5)).unwrap().model.weights().checksum());
}

#[test]
fn smoke_shape_loads_and_forwards() {
    let spec = ToySpec {
        config: ModelConfig {
            embed_dim: 32,
            num_heads: 4,
            latent_dim: 32,
            num_layers: 2,
            vocab_size: 256,
            ..ModelConfig::toy_default()
        },
        ..ToySpec::default()
    };
    let art = make_toy_model(&spec).unwrap();
    let mut cache = KvCache::new(art.model.config(), KLayout::KPlain);
    let out = art.model.forward(&mut cache, &[1, 2, 3], &[0, 1, 2], &AttentionMask::causal(3, 0)).unwrap();
    assert_eq!(out.shape(), &[3, 256]);
    assert!(out.is_finite());
}

#[test]
fn rank_above_bound_is_rejected() {
    let mut spec = small_spec(0);
    spec.rank = 33;
    assert!(matches!(make_toy_model(&spec), Err(Error::Config(_))));
    spec.rank = 32;
    assert!(make_toy_model(&spec).is_ok());
}

#[test]
fn missing_bundle_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_toy(&dir.path().join("nope")).is_err());
}

#[test]
fn every_suite_passes_and_is_deterministic() {
    let art = make_toy_model(&small_spec(1)).unwrap();
    let opts = SuiteOptions {
        prompts: 4,
        tokens: 48,
        seed: 3,
    };
    for name in SUITES {
        let a = run_suite(name, &art, &opts).unwrap();
        for f in &a.flags {
            println!("{name}: {} {} ({})", if f.pass { "PASS" } else { "FAIL" }, f.name, f.detail);
        }
        assert!(a.passed(), "{name}");
        assert_eq!(a.schema, 1);
        let b = run_suite(name, &art, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a.deterministic()).unwrap(),
            serde_json::to_string(&b.deterministic()).unwrap(),
            "{name}"
        );
        assert!(a.render().contains(name));
    }
    assert!(run_suite("nope", &art, &opts).is_err());
}

#[test]
fn corpus_is_bytes() {
    let c = toy_corpus(200, 16, 0);
    assert_eq!(c.len(), 200);
    assert!(c.iter().flatten().all(|&t| t < 256));
}
