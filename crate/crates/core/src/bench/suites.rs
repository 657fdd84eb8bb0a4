use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{toy_corpus, BenchReport, ToyArtifacts, EOS};
use crate::ctg::{latency_table, run_ctg, CtgConfig};
use crate::ds2d::{
    measure_cost_model, optimize_branch_config, reference_configs, run_ds2d, AcceptanceModel, BranchConfig,
    CostModel, DrafterMode, Ds2dOptions, ForecastState,
};
use crate::error::{Error, Result};
use crate::graph::{apply_pass, decoder_layer_graph, pass_report, run, Graph, LayerLora, PassName};
use crate::lora::{merge_adapter, LoraBank, Strategy};
use crate::model::{AttentionMask, Dense, KLayout, KvCache, Linear, LinearOps, Model, RowInput, Session};
use crate::quant::{calibrate, compression_report, fake_quant_forward, QuantMode, QuantizedWeights};
use crate::tensor::{argmax, Tensor};

pub const SUITES: [&str; 6] = ["lora-equivalence", "graph-passes", "ctg", "ds2d", "table7-analog", "compression"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    /// Prompts (or graph feeds) per suite.
    pub prompts: usize,
    /// Generation length for decoding suites.
    pub tokens: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            prompts: 20,
            tokens: 64,
            seed: 0,
        }
    }
}

/// A drafter regime standing in for one use case of the branch sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UseCase {
    pub name: &'static str,
    pub q1: f64,
    pub q2: f64,
}

/// High depth-1 / low depth-2 per-rank accuracy, and uniformly high.
pub fn table7_regimes() -> [UseCase; 2] {
    [
        UseCase {
            name: "shallow",
            q1: 0.1,
            q2: 0.02,
        },
        UseCase {
            name: "uniform",
            q1: 0.6,
            q2: 0.6,
        },
    ]
}

pub fn run_suite(name: &str, art: &ToyArtifacts, opts: &SuiteOptions) -> Result<BenchReport> {
    let start = Instant::now();
    let mut r = match name {
        "lora-equivalence" => lora_equivalence(art, opts),
        "graph-passes" => graph_passes(art, opts),
        "ctg" => ctg(art, opts),
        "ds2d" => ds2d(art, opts),
        "table7-analog" => table7(art, opts),
        "compression" => compression(art, opts),
        other => Err(Error::Config(format!("unknown suite '{other}' (expected one of {})", SUITES.join(", ")))),
    }?;
    r.wall_clock_ms = start.elapsed().as_secs_f64() * 1000.0;
    Ok(r)
}

fn config_echo(art: &ToyArtifacts, opts: &SuiteOptions) -> serde_json::Value {
    json!({
        "model": art.model.config(),
        "checksum": art.model.weights().checksum(),
        "adapters": art.adapters.iter().map(|a| a.task_id()).collect::<Vec<_>>(),
        "options": opts,
    })
}

fn prefill(model: &Model, ops: &dyn LinearOps, tokens: &[u32]) -> Result<Tensor> {
    let mut cache = KvCache::new(model.config(), KLayout::KPlain);
    let rows: Vec<RowInput> = tokens.iter().map(|&t| RowInput::Token(t)).collect();
    let pos: Vec<usize> = (0..tokens.len()).collect();
    model.forward_rows(&mut cache, &rows, &pos, &AttentionMask::causal(tokens.len(), 0), ops, 0)
}

fn lora_equivalence(art: &ToyArtifacts, opts: &SuiteOptions) -> Result<BenchReport> {
    let mut r = BenchReport::new("suite lora-equivalence", config_echo(art, opts));
    if art.adapters.is_empty() {
        return Err(Error::Config("lora-equivalence needs at least one adapter".into()));
    }
    let model = &art.model;
    let prompts = toy_corpus(opts.prompts, 24, opts.seed);
    let mut oracle = Vec::with_capacity(art.adapters.len());
    for a in &art.adapters {
        let merged = Model::new(model.config().clone(), merge_adapter(model.weights(), a)?)?;
        oracle.push(prompts.iter().map(|p| prefill(&merged, &Dense, p)).collect::<Result<Vec<_>>>()?);
    }
    let mut footprints = Vec::new();
    for strategy in [Strategy::MultiGraph, Strategy::Masked, Strategy::AdapterAsInput] {
        let mut bank = LoraBank::new(model.clone(), strategy);
        for a in &art.adapters {
            bank.insert(a.clone())?;
        }
        let mut worst = 0.0f32;
        for (ai, a) in art.adapters.iter().enumerate() {
            bank.switch_task(a.task_id())?;
            for (pi, p) in prompts.iter().enumerate() {
                let mut cache = KvCache::new(model.config(), KLayout::KPlain);
                let rows: Vec<RowInput> = p.iter().map(|&t| RowInput::Token(t)).collect();
                let pos: Vec<usize> = (0..p.len()).collect();
                let got = bank.forward(&mut cache, &rows, &pos, &AttentionMask::causal(p.len(), 0))?;
                worst = worst.max(got.max_abs_diff(&oracle[ai][pi]));
            }
        }
        let name = format!("{strategy:?}");
        r.metric(format!("{name}.max_abs_diff"), worst as f64, "merged-weights oracle");
        r.flag(format!("{name} matches merged weights"), worst <= 1e-5, format!("max abs diff {worst:.3e} <= 1e-5"));
        footprints.push(bank.footprint());
    }
    r.table("footprint", footprints);
    Ok(r)
}

fn permutations<T: Copy>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

pub(crate) const MAIN_PASSES: [PassName; 4] =
    [PassName::MhaToSha, PassName::LinearToConv, PassName::ConstantFold, PassName::Fuse];

fn graph_passes(art: &ToyArtifacts, opts: &SuiteOptions) -> Result<BenchReport> {
    let mut r = BenchReport::new("suite graph-passes", config_echo(art, opts));
    let model = &art.model;
    let cfg = model.config();
    let n = 8;
    let lora = art.adapters.first().map(|a| LayerLora {
        layer: &a.layers()[0],
        scale: a.scale(),
    });
    let g = decoder_layer_graph(cfg, model.weights().layer(0), n, lora)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let feeds: Vec<BTreeMap<String, Tensor>> = (0..opts.prompts.max(1))
        .map(|_| {
            let x = Tensor::new(vec![n, cfg.embed_dim], (0..n * cfg.embed_dim).map(|_| normal.sample(&mut rng)).collect());
            x.map(|x| BTreeMap::from([("x".to_string(), x)]))
        })
        .collect::<Result<_>>()?;
    let base: Vec<Tensor> = feeds.iter().map(|f| run(&g, f).map(|mut o| o.remove(0))).collect::<Result<_>>()?;
    let diff = |h: &Graph| -> Result<f32> {
        let mut worst = 0.0f32;
        for (f, b) in feeds.iter().zip(&base) {
            worst = worst.max(run(h, f)?[0].max_abs_diff(b));
        }
        Ok(worst)
    };
    let mut single = BTreeMap::new();
    for p in MAIN_PASSES.into_iter().chain([PassName::KTransposed, PassName::MhaToShaComposite]) {
        single.insert(p.as_str().to_string(), diff(&apply_pass(&g, p)?)?);
    }
    let single_worst = single.values().copied().fold(0.0f32, f32::max);
    r.metric("single_pass.max_abs_diff", single_worst as f64, "unrewritten graph");
    r.flag("each pass preserves outputs", single_worst <= 1e-6, format!("max abs diff {single_worst:.3e} <= 1e-6"));
    let mut orderings = Vec::new();
    let mut full = None;
    for order in permutations(&MAIN_PASSES) {
        let mut h = g.clone();
        for &p in &order {
            h = apply_pass(&h, p)?;
        }
        let d = diff(&h)?;
        orderings.push(json!({"order": order.iter().map(|p| p.as_str()).collect::<Vec<_>>(), "max_abs_diff": d}));
        full.get_or_insert(h);
    }
    let order_worst = orderings.iter().map(|o| o["max_abs_diff"].as_f64().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    r.metric("orderings.count", orderings.len() as f64, "4! permutations");
    r.metric("orderings.max_abs_diff", order_worst, "unrewritten graph");
    r.flag("all 24 orderings preserve outputs", order_worst <= 1e-6, format!("max abs diff {order_worst:.3e} <= 1e-6"));
    r.table("single_pass", single);
    r.table("orderings", orderings);
    r.table("pipeline_report", pass_report(&g, full.as_ref().expect("24 orderings")));
    Ok(r)
}

fn ctg(art: &ToyArtifacts, opts: &SuiteOptions) -> Result<BenchReport> {
    let mut r = BenchReport::new("suite ctg", config_echo(art, opts));
    let model = &art.model;
    let prompts = toy_corpus(opts.prompts.clamp(1, 4), 16, opts.seed);
    // leave room for eight streams after a 16-token prompt
    let room = (model.config().max_seq_len.saturating_sub(16) / 8).saturating_sub(1);
    let max_len = opts.tokens.min(32).min(room).max(1);
    let mut rows = Vec::new();
    let mut all_equal = true;
    let mut calls_ok = true;
    for n in [1, 2, 4, 8] {
        for (pi, p) in prompts.iter().enumerate() {
            let out = run_ctg(model, &Dense, p, CtgConfig::greedy(n, max_len, Some(EOS)))?;
            let equal = out.first_tokens.iter().zip(&out.streams).all(|(&first, s)| {
                Session::new(model).greedy(p, max_len, Some(first), Some(EOS)).map(|o| &o == s).unwrap_or(false)
            });
            let longest = out.decoded_lengths().into_iter().max().unwrap_or(0);
            all_equal &= equal;
            calls_ok &= out.prefill_calls == 1 && out.decode_calls == longest;
            rows.push(json!({
                "streams": n,
                "prompt": pi,
                "oracle_equal": equal,
                "decode_calls": out.decode_calls,
                "longest_stream": longest,
                "sequential_decode_calls": out.decoded_lengths().iter().sum::<usize>(),
            }));
        }
    }
    r.flag("streams equal forced-first greedy runs", all_equal, "n in {1,2,4,8}");
    r.flag("decode calls = longest stream", calls_ok, "1 prefill + max(stream lengths)");
    let t = latency_table(40.0, 23.0, 8, 1);
    r.metric("latency.concurrent_ms", t.concurrent_ms, "prefill + ar * tokens");
    r.metric("latency.sequential_ms", t.sequential_ms, "prefill + ar * n * tokens");
    r.flag("concurrent total 63 = 23 + 40", t.concurrent_ms == 63.0, t.concurrent_formula.clone());
    r.table("runs", rows);
    r.table("latency_model", t);
    Ok(r)
}

fn forecast_for(art: &ToyArtifacts, depth: usize, seed: u64) -> Result<ForecastState> {
    if art.forecast.slots() == depth {
        return Ok(art.forecast.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (depth as u64) << 32);
    ForecastState::random(art.model.config(), art.forecast.prefix_len(), depth, 0.02, &mut rng)
}

fn ds2d(art: &ToyArtifacts, opts: &SuiteOptions) -> Result<BenchReport> {
    let mut r = BenchReport::new("suite ds2d", config_echo(art, opts));
    let model = &art.model;
    let prompt = toy_corpus(1, 16, opts.seed).remove(0);
    let want = Session::new(model).greedy(&prompt, opts.tokens, None, None)?;
    let modes = [
        DrafterMode::Loaded,
        DrafterMode::Random,
        DrafterMode::Oracle,
        DrafterMode::NoisyOracle(0.3),
        DrafterMode::NoisyOracle(0.6),
        DrafterMode::NoisyOracle(0.9),
    ];
    let (mut lossless, mut oracle_exact, mut floor) = (true, true, true);
    let mut rows = Vec::new();
    for c in reference_configs() {
        let fs = forecast_for(art, c.depth(), opts.seed)?;
        for mode in modes {
            let mut o = Ds2dOptions::new(c.clone(), mode, opts.tokens);
            o.seed = opts.seed;
            let out = run_ds2d(model, &Dense, &prompt, &fs, &o)?;
            let tpi = out.stats.tokens_per_inference;
            lossless &= out.tokens == want;
            floor &= tpi >= 1.0;
            if mode == DrafterMode::Oracle {
                oracle_exact &= tpi == 1.0 + c.depth() as f64;
            }
            rows.push(json!({
                "config": c.to_string(),
                "drafter": mode.to_string(),
                "tokens_per_inference": tpi,
                "steps": out.stats.steps,
                "equals_greedy": out.tokens == want,
            }));
        }
    }
    r.flag("output equals greedy decoding", lossless, "all configs x drafters");
    r.flag("oracle drafter reaches 1 + m", oracle_exact, "exact");
    r.flag("tokens/inference >= 1", floor, "every run");
    r.table("runs", rows);
    Ok(r)
}

/// Mean accepted tokens per verification step over `prompts`.
fn measured_tpi(art: &ToyArtifacts, c: &BranchConfig, mode: DrafterMode, prompts: &[Vec<u32>], opts: &SuiteOptions) -> Result<f64> {
    let fs = forecast_for(art, c.depth(), opts.seed)?;
    let (mut accepted, mut steps) = (0usize, 0usize);
    for (i, p) in prompts.iter().enumerate() {
        let mut o = Ds2dOptions::new(c.clone(), mode, opts.tokens);
        o.seed = opts.seed.wrapping_add(i as u64);
        let out = run_ds2d(&art.model, &Dense, p, &fs, &o)?;
        accepted += out.stats.accepted_counts.iter().sum::<usize>();
        steps += out.stats.steps;
    }
    Ok(if steps == 0 { 1.0 } else { accepted as f64 / steps as f64 })
}

fn table7(art: &ToyArtifacts, opts: &SuiteOptions) -> Result<BenchReport> {
    let mut r = BenchReport::new("suite table7-analog", config_echo(art, opts));
    let configs = reference_configs();
    let prompts = toy_corpus(opts.prompts.clamp(1, 8), 16, opts.seed);
    let cost = measure_cost_model(&art.model, &[4, 8, 16, 32], 32, 3)?;
    r.timing.insert("cost.c0_ms".into(), cost.c0_ms);
    r.timing.insert("cost.c1_ms".into(), cost.c1_ms);
    let flat = CostModel { c0_ms: 1.0, c1_ms: 0.0 };
    let mut best = BTreeMap::new();
    for uc in table7_regimes() {
        let model = AcceptanceModel::new(vec![uc.q1, uc.q2])?;
        let analytic = optimize_branch_config(&configs, |c| Ok(model.tokens_per_inference(c)), flat)?;
        let mode = DrafterMode::RankedOracle { q1: uc.q1, q2: uc.q2 };
        let measured = optimize_branch_config(&configs, |c| measured_tpi(art, c, mode, &prompts, opts), cost)?;
        for row in &measured {
            r.timing.insert(format!("{}.{}.tokens_per_sec", uc.name, row.config), row.tokens_per_sec);
        }
        let rows: Vec<serde_json::Value> = configs
            .iter()
            .map(|c| {
                let a = analytic.iter().find(|x| &x.config == c).expect("evaluated");
                let m = measured.iter().find(|x| &x.config == c).expect("evaluated");
                json!({
                    "config": c.to_string(),
                    "total_rows": c.total_rows(),
                    "analytic_tokens_per_inference": a.tokens_per_inference,
                    "measured_tokens_per_inference": m.tokens_per_inference,
                    "best_analytic": a.best,
                    "best_measured": m.best,
                })
            })
            .collect();
        r.metric(format!("{}.best_analytic_tpi", uc.name), analytic[0].tokens_per_inference, "acceptance model");
        r.metric(format!("{}.best_measured_tpi", uc.name), measured[0].tokens_per_inference, "ranked-oracle drafter runs");
        r.flag(
            format!("{} measured argmax matches model", uc.name),
            analytic[0].config == measured[0].config,
            format!("model {} / measured {}", analytic[0].config, measured[0].config),
        );
        best.insert(uc.name, analytic[0].config.clone());
        r.table(uc.name, rows);
    }
    let (a, b) = (&best["shallow"], &best["uniform"]);
    r.flag(
        "argmax flips between regimes",
        a.depth() == 1 && b.depth() >= 2,
        format!("shallow regime -> {a}, uniform regime -> {b}"),
    );
    Ok(r)
}

fn compression(art: &ToyArtifacts, opts: &SuiteOptions) -> Result<BenchReport> {
    let mut r = BenchReport::new("suite compression", config_echo(art, opts));
    let model = &art.model;
    let corpus = toy_corpus(200, 16, opts.seed);
    let q = QuantizedWeights::quantize(model.weights(), Some(calibrate(model, &corpus, None)?))?;
    let adapters: Vec<&_> = art.adapters.iter().collect();
    let rep = compression_report(model.weights(), &adapters);
    r.metric("fp16_bytes", rep.fp16_bytes as f64, "2 bytes/param");
    r.metric("int4_bytes", rep.int4_bytes as f64, "ceil(params/2) + 4 bytes/channel scale");
    r.metric("ratio", rep.ratio, "fp16_bytes / int4_bytes");
    r.metric("adapter_bytes", rep.adapter_bytes as f64, "2 bytes/param, outside the ratio");
    r.flag("compression ratio >= 3.0", rep.ratio >= 3.0, format!("{:.3}", rep.ratio));

    let mut worst = 0.0f64;
    for (i, layer) in model.weights().layers().iter().enumerate() {
        for which in Linear::ALL {
            let qt = q.matrix(i, which).expect("every projection is quantized");
            let w = which.weight(layer);
            for (j, (&a, &b)) in w.data().iter().zip(qt.dequantize().data()).enumerate() {
                worst = worst.max(((a - b).abs() / (qt.scale_at(j) / 2.0)) as f64);
            }
        }
    }
    r.metric("weight_error_over_half_scale", worst, "dequantized vs f32 weights");
    r.flag("weight round-trip within scale/2", worst <= 1.0 + 1e-5, format!("{worst:.6}"));

    let mut agree = 0;
    for p in &corpus {
        let a = prefill(model, &Dense, p)?;
        let mut cache = KvCache::new(model.config(), KLayout::KPlain);
        let rows: Vec<RowInput> = p.iter().map(|&t| RowInput::Token(t)).collect();
        let pos: Vec<usize> = (0..p.len()).collect();
        let b = fake_quant_forward(model, &q, QuantMode::FULL, None, &mut cache, &rows, &pos, &AttentionMask::causal(p.len(), 0))?;
        let last = p.len() - 1;
        agree += usize::from(argmax(a.row(last)) == argmax(b.row(last)));
    }
    let rate = agree as f64 / corpus.len() as f64;
    r.metric("top1_agreement", rate, "f32 vs int4/int8 last-token argmax, 200 prompts");
    r.flag("top-1 agreement >= 90%", rate >= 0.9, format!("{agree}/{}", corpus.len()));
    r.table("compression", rep);
    Ok(r)
}
