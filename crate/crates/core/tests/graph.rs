mod common;

use std::collections::BTreeMap;

use common::{cfg, random_model, rng};
use edgellm::graph::{
    apply_pass, decoder_layer_graph, graph_stats, load_graph, pass_constant_fold, pass_fuse, pass_k_layout,
    pass_linear_to_conv, pass_mha_to_sha, pass_mha_to_sha_with, pass_report, run, Graph, LayerLora, LoraBMode,
    NodeOp, OpKind, PassName,
};
use edgellm::lora::{LoraAdapter, LoraOps};
use edgellm::model::{AttentionMask, Dense, KLayout, KvCache, LinearOps, Model};
use edgellm::Tensor;
use rand::Rng;

const N: usize = 6;

fn feed(seed: u64, n: usize, e: usize) -> BTreeMap<String, Tensor> {
    let mut r = rng(seed);
    let x = Tensor::new(vec![n, e], (0..n * e).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
    BTreeMap::from([("x".to_string(), x)])
}

fn setup(h: usize) -> (Model, LoraAdapter) {
    let m = random_model(cfg(16, h, 1, 32), 3, 0.2);
    let a = LoraAdapter::random(m.config(), "t", 2, 0.75, 0.2, &mut rng(4)).unwrap();
    (m, a)
}

fn layer_graph(m: &Model, a: Option<&LoraAdapter>) -> Graph {
    let lora = a.map(|a| LayerLora { layer: &a.layers()[0], scale: a.scale() });
    decoder_layer_graph(m.config(), m.weights().layer(0), N, lora).unwrap()
}

fn max_diff(a: &Graph, b: &Graph, feeds: usize) -> f32 {
    (0..feeds as u64)
        .map(|s| {
            let f = feed(1000 + s, N, 16);
            let (x, y) = (run(a, &f).unwrap(), run(b, &f).unwrap());
            x.iter().zip(&y).map(|(p, q)| p.max_abs_diff(q)).fold(0.0, f32::max)
        })
        .fold(0.0, f32::max)
}

#[test]
fn ir_matches_core_layer() {
    let (m, a) = setup(4);
    for adapter in [None, Some(&a)] {
        let g = layer_graph(&m, adapter);
        let lora_ops;
        let ops: &dyn LinearOps = match adapter {
            Some(a) => {
                lora_ops = LoraOps { inner: &Dense, adapter: a };
                &lora_ops
            }
            None => &Dense,
        };
        for s in 0..10 {
            let f = feed(s, N, 16);
            let mut cache = KvCache::new(m.config(), KLayout::KPlain);
            let pos: Vec<usize> = (0..N).collect();
            let want = m.layer_forward(0, &f["x"], &pos, &AttentionMask::causal(N, 0), &mut cache, ops).unwrap();
            let got = &run(&g, &f).unwrap()[0];
            assert!(got.max_abs_diff(&want) <= 1e-6, "{}", got.max_abs_diff(&want));
        }
    }
}

#[test]
fn each_pass_preserves_outputs() {
    let (m, a) = setup(4);
    let g = layer_graph(&m, Some(&a));
    for p in PassName::ALL {
        let out = apply_pass(&g, p).unwrap();
        out.validate().unwrap();
        let d = max_diff(&g, &out, 50);
        assert!(d <= 1e-6, "{p:?}: {d}");
    }
}

#[test]
fn all_orderings_preserve_outputs() {
    let (m, a) = setup(4);
    let g = layer_graph(&m, Some(&a));
    let passes = [PassName::MhaToSha, PassName::LinearToConv, PassName::ConstantFold, PassName::Fuse];
    let mut perms = Vec::new();
    permute(&mut passes.to_vec(), 0, &mut perms);
    assert_eq!(perms.len(), 24);
    for order in perms {
        let mut cur = g.clone();
        for &p in &order {
            cur = apply_pass(&cur, p).unwrap();
        }
        let d = max_diff(&g, &cur, 10);
        assert!(d <= 1e-6, "{order:?}: {d}");
    }
}

fn permute(v: &mut Vec<PassName>, k: usize, out: &mut Vec<Vec<PassName>>) {
    if k == v.len() {
        out.push(v.clone());
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, out);
        v.swap(k, i);
    }
}

#[test]
fn sha_single_head_is_noop() {
    let (m, _) = setup(1);
    let g = layer_graph(&m, None);
    let out = pass_mha_to_sha(&g).unwrap();
    assert_eq!(out.nodes(), g.nodes());
    assert!(out.history().last().unwrap().contains("no multi-head"));
}

#[test]
fn sha_slices_projection_columns() {
    let (m, _) = setup(4);
    let g = layer_graph(&m, None);
    let out = pass_mha_to_sha(&g).unwrap();
    let wq = &m.weights().layer(0).wq;
    let hd = 4;
    for h in 0..4 {
        let name = format!("q.w[{}:{}]", h * hd, (h + 1) * hd);
        let id = out.nodes().iter().position(|n| n.name == name).expect("sliced constant");
        assert_eq!(out.constant(id).unwrap(), &wq.slice_cols(h * hd, (h + 1) * hd).unwrap());
    }
    let r = pass_report(&g, &out);
    assert_eq!(r.before.attention_matmuls, 2);
    assert_eq!(r.after.attention_matmuls, 8);
    assert_eq!(r.before.macs, r.after.macs);
    assert!(r.after.nodes > r.before.nodes);
    assert!(!r.after.by_kind.contains_key("split_heads"));
}

#[test]
fn sha_lora_b_modes_agree() {
    let (m, a) = setup(4);
    let g = layer_graph(&m, Some(&a));
    let split = pass_mha_to_sha_with(&g, LoraBMode::Split).unwrap();
    let comp = pass_mha_to_sha_with(&g, LoraBMode::Composite).unwrap();
    assert!(max_diff(&g, &split, 10) <= 1e-6);
    assert!(max_diff(&g, &comp, 10) <= 1e-6);
    let slices = |g: &Graph| graph_stats(g).by_kind.get("slice_cols").copied().unwrap_or(0);
    assert_eq!(slices(&split), 0);
    assert_eq!(slices(&comp), 12);
    assert_eq!(graph_stats(&split).macs, graph_stats(&g).macs);
}

#[test]
fn conv_identity_and_idempotence() {
    let mut g = Graph::new();
    let x = g.add_input("x", vec![16, 8]);
    let w = g.add_constant("w", Tensor::identity(8));
    let y = g.add_op("y", OpKind::MatMul { transpose_b: false }, vec![x, w]).unwrap();
    g.set_outputs(vec![y]);
    let c = pass_linear_to_conv(&g).unwrap();
    assert_eq!(graph_stats(&c).by_kind["conv1x1"], 1);
    let mut r = rng(1);
    let t = Tensor::new(vec![16, 8], (0..128).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let f = BTreeMap::from([("x".to_string(), t.clone())]);
    assert_eq!(run(&c, &f).unwrap()[0], t);
    let twice = pass_linear_to_conv(&c).unwrap();
    assert_eq!(twice.nodes(), c.nodes());
    let kid = c.nodes().iter().position(|n| n.name == "w.kernel").unwrap();
    assert_eq!(c.shape(kid), &[8, 8, 1, 1]);
}

#[test]
fn conv_matches_random_matmul() {
    let mut r = rng(2);
    let mut g = Graph::new();
    let x = g.add_input("x", vec![16, 8]);
    let w = g.add_constant("w", Tensor::new(vec![8, 5], (0..40).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap());
    let y = g.add_op("y", OpKind::MatMul { transpose_b: false }, vec![x, w]).unwrap();
    g.set_outputs(vec![y]);
    let c = pass_linear_to_conv(&g).unwrap();
    for s in 0..50 {
        let f = feed(s, 16, 8);
        assert!(run(&g, &f).unwrap()[0].max_abs_diff(&run(&c, &f).unwrap()[0]) <= 1e-6);
    }
}

#[test]
fn fold_constant_chains() {
    let mut g = Graph::new();
    let x = g.add_input("x", vec![2, 3]);
    let a = g.add_constant("a", Tensor::filled(&[2, 3], 1.5));
    let b = g.add_constant("b", Tensor::filled(&[2, 3], -0.25));
    let c = g.add_constant("c", Tensor::filled(&[3], 2.0));
    let ab = g.add_op("ab", OpKind::Add, vec![a, b]).unwrap();
    let abc = g.add_op("abc", OpKind::Add, vec![ab, c]).unwrap();
    let y = g.add_op("y", OpKind::Add, vec![x, abc]).unwrap();
    g.set_outputs(vec![y]);
    let f = pass_constant_fold(&g).unwrap();
    let s = graph_stats(&f);
    assert_eq!(s.by_kind["constant"], 1);
    assert_eq!(s.by_kind["add"], 1);
    let fx = feed(1, 2, 3);
    assert_eq!(run(&f, &fx).unwrap(), run(&g, &fx).unwrap());

    // merge-style s·(A·B)
    let mut r = rng(3);
    let mut rand_t = |s: &[usize]| Tensor::new(s.to_vec(), (0..s.iter().product()).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let mut g = Graph::new();
    let a = g.add_constant("a", rand_t(&[4, 2]));
    let b = g.add_constant("b", rand_t(&[2, 4]));
    let ab = g.add_op("ab", OpKind::MatMul { transpose_b: false }, vec![a, b]).unwrap();
    let s = g.add_op("s", OpKind::MulScalar { s: 0.3 }, vec![ab]).unwrap();
    g.set_outputs(vec![s]);
    let f = pass_constant_fold(&g).unwrap();
    assert_eq!(f.nodes().len(), 1);
    assert!(run(&f, &BTreeMap::new()).unwrap()[0].max_abs_diff(&run(&g, &BTreeMap::new()).unwrap()[0]) <= 1e-6);

    // nothing constant to fold
    let mut g = Graph::new();
    let x = g.add_input("x", vec![2, 2]);
    let y = g.add_op("y", OpKind::Silu, vec![x]).unwrap();
    g.set_outputs(vec![y]);
    assert_eq!(pass_constant_fold(&g).unwrap().nodes(), g.nodes());
}

#[test]
fn fold_absorbs_scales_in_layer() {
    let (m, a) = setup(4);
    let g = layer_graph(&m, Some(&a));
    let f = pass_constant_fold(&g).unwrap();
    let before = graph_stats(&g);
    let after = graph_stats(&f);
    assert_eq!(before.by_kind["mul_scalar"], 5);
    assert_eq!(after.by_kind.get("mul_scalar"), None);
    assert!(after.nodes <= before.nodes);
    assert!(max_diff(&g, &f, 20) <= 1e-6);
}

#[test]
fn fuse_records_kinds() {
    let (m, _) = setup(4);
    let g = layer_graph(&m, None);
    let f = pass_fuse(&g).unwrap();
    let fused: Vec<&OpKind> = f
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            NodeOp::Compute { op: op @ OpKind::Fused { .. } } => Some(op),
            _ => None,
        })
        .collect();
    assert_eq!(fused, vec![&OpKind::Fused { kinds: vec![OpKind::MatMul { transpose_b: false }, OpKind::Silu] }]);
    // bias add then activation fuses into one node
    let mut g = Graph::new();
    let x = g.add_input("x", vec![3, 4]);
    let w = g.add_constant("w", Tensor::identity(4));
    let b = g.add_constant("b", Tensor::filled(&[4], 0.5));
    let y = g.add_op("y", OpKind::MatMul { transpose_b: false }, vec![x, w]).unwrap();
    let yb = g.add_op("yb", OpKind::Add, vec![y, b]).unwrap();
    let z = g.add_op("z", OpKind::Silu, vec![yb]).unwrap();
    g.set_outputs(vec![z]);
    let f = pass_fuse(&g).unwrap();
    assert_eq!(f.op(f.outputs()[0]), Some(&OpKind::Fused { kinds: vec![OpKind::MatMul { transpose_b: false }, OpKind::Add, OpKind::Silu] }));
    let fx = feed(5, 3, 4);
    assert_eq!(run(&f, &fx).unwrap(), run(&g, &fx).unwrap());
    // no adjacent pair
    let mut g = Graph::new();
    let x = g.add_input("x", vec![2, 2]);
    let y = g.add_op("y", OpKind::Silu, vec![x]).unwrap();
    g.set_outputs(vec![y]);
    assert_eq!(pass_fuse(&g).unwrap().nodes(), g.nodes());
}

#[test]
fn k_layout_switch() {
    let (m, _) = setup(4);
    let g = layer_graph(&m, None);
    let t = pass_k_layout(&g, KLayout::KTransposed).unwrap();
    assert_eq!(t.k_layout(), KLayout::KTransposed);
    assert!(max_diff(&g, &t, 10) <= 1e-6);
    let stored = t.nodes().iter().position(|n| n.name.ends_with(".k_stored")).unwrap();
    let kh = g.nodes().iter().position(|n| n.name == "k.heads").unwrap();
    assert_eq!(t.shape(stored), &[4, 4, N]);
    assert_eq!(g.shape(kh), &[4, N, 4]);
    assert_eq!(pass_k_layout(&t, KLayout::KTransposed).unwrap(), t);
    let back = pass_k_layout(&t, KLayout::KPlain).unwrap();
    assert_eq!(graph_stats(&back).by_kind, graph_stats(&g).by_kind);
    assert!(max_diff(&g, &back, 10) == 0.0);
}

#[test]
fn empty_pass_report_is_identical() {
    let (m, _) = setup(2);
    let g = layer_graph(&m, None);
    let r = pass_report(&g, &g);
    assert_eq!(r.before, r.after);
}

#[test]
fn json_round_trip() {
    let (m, a) = setup(4);
    let g = apply_pass(&layer_graph(&m, Some(&a)), PassName::LinearToConv).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer.json");
    edgellm::graph::save_graph(&g, &path).unwrap();
    assert!(dir.path().join("layer.bin").exists());
    let back = load_graph(&path).unwrap();
    assert_eq!(back, g);
}

#[test]
fn evaluation_is_bit_stable() {
    let (m, a) = setup(4);
    let g = layer_graph(&m, Some(&a));
    let f = feed(9, N, 16);
    assert_eq!(run(&g, &f).unwrap(), run(&g, &f).unwrap());
}
