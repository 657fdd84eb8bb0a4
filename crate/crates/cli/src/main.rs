mod artifacts;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use edgellm::bench::{
    bundle_digests, byte_tokenize, corpus_from_text, detokenize_lossy, run_suite, save_toy, toy_corpus, BenchReport,
    SuiteOptions, ToySpec, EOS, SUITES,
};
use edgellm::ctg::{latency_table, run_ctg, CtgConfig, Sampling};
use edgellm::ds2d::{
    enumerate_branch_configs, measure_cost_model, optimize_branch_config, reference_configs, run_ds2d,
    AcceptanceModel, BranchConfig, BranchRow, DrafterMode, Ds2dOptions,
};
use edgellm::graph::{apply_pass, decoder_layer_graph, pass_report, run, save_graph, LayerLora, PassName};
use edgellm::lora::{LoraBank, LoraOps, Strategy};
use edgellm::model::{Dense, KLayout, LinearOps, ModelConfig, Session};
use edgellm::quant::{calibrate, compression_report, QuantizedWeights};
use edgellm::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use artifacts::{find_adapter, forecast_with_slots, report_path, resolve};

#[derive(Parser)]
#[command(name = "edgellm", version, about = "Desk-scale on-device LLM runtime")]
struct Cli {
    /// Toy root (model/, lora/, forecast/) or a single model bundle.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Directory of LoRA adapter bundles.
    #[arg(long, global = true)]
    lora_dir: Option<PathBuf>,
    /// LoRA execution strategy: multi-graph, masked or adapter-as-input.
    #[arg(long, global = true, default_value = "multi-graph")]
    strategy: Strategy,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here.
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate deterministic toy model, adapter and forecast bundles.
    MakeModel(MakeModel),
    /// Greedy generation, optionally under a LoRA task.
    Gen(Gen),
    /// Concurrent generation of several streams from one prompt.
    Ctg(Ctg),
    /// Speculative decoding with tree drafts.
    Ds2d(Ds2d),
    /// Rank branch configurations under a row budget.
    BranchOpt(BranchOpt),
    /// INT4 weights / INT8 activations bundle and compression report.
    Quantize(Quantize),
    /// Apply graph passes to one decoder layer and check outputs.
    Graphopt(Graphopt),
    /// Run a named report suite (or `all`).
    Suite(Suite),
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    /// First nonempty line is used as the prompt.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
}

impl PromptArgs {
    fn tokens(&self) -> Result<Vec<u32>> {
        let text = match (&self.prompt, &self.prompt_file) {
            (Some(p), _) => p.clone(),
            (None, Some(f)) => fs::read_to_string(f)
                .with_context(|| format!("reading {}", f.display()))?
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or_default()
                .to_string(),
            (None, None) => "please reply to the meeting note".to_string(),
        };
        let ids = byte_tokenize(text.as_bytes());
        if ids.is_empty() {
            bail!("empty prompt");
        }
        Ok(ids)
    }
}

#[derive(Args)]
struct MakeModel {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    mlp_hidden: usize,
    #[arg(long, default_value_t = 258)]
    vocab: usize,
    #[arg(long, default_value_t = 512)]
    max_seq: usize,
    #[arg(long, default_value_t = 8)]
    adapters: usize,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f32,
}

#[derive(Args)]
struct Gen {
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    /// LoRA task id to activate.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct Ctg {
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value_t = 4)]
    streams: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long)]
    task: Option<String>,
    /// Sample continuations at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Ds2d {
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, default_value = "3,2")]
    config: BranchConfig,
    /// loaded, random, oracle, noisy-oracle:P or ranked-oracle:Q1,Q2
    #[arg(long, default_value = "loaded")]
    drafter: DrafterMode,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long, default_value_t = 32)]
    budget: usize,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BranchOpt {
    #[arg(long, default_value_t = 32)]
    budget: usize,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    /// Prompt file, one prompt per line (defaults to the toy corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Evaluate every config within the budget instead of the nine reference configs.
    #[arg(long)]
    all_configs: bool,
    /// Measure with this drafter.
    #[arg(long, default_value = "ranked-oracle:0.6,0.6", conflicts_with = "acceptance")]
    drafter: DrafterMode,
    /// Rank analytically from per-rank hit probabilities, e.g. `0.1,0.02`.
    #[arg(long)]
    acceptance: Option<String>,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Quantize {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calibration prompts drawn from the toy corpus.
    #[arg(long, default_value_t = 200)]
    calib: usize,
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct Graphopt {
    /// Comma-separated passes, applied in order.
    #[arg(long, value_delimiter = ',', default_value = "sha,conv,fold,fuse")]
    passes: Vec<PassName>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 10)]
    feeds: usize,
    /// Attach this task's adapter to the attention projections.
    #[arg(long)]
    task: Option<String>,
    /// Save the rewritten graph (JSON + .bin sidecar).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Suite {
    /// One of the suite names, or `all`.
    name: String,
    #[arg(long, default_value_t = 20)]
    prompts: usize,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
}

fn write_json(path: Option<PathBuf>, value: &impl serde::Serialize) -> Result<()> {
    if let Some(p) = path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Runs the command; `Ok(false)` means a report flag failed.
fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::MakeModel(a) => make_model(cli, a),
        Command::Gen(a) => gen(cli, a),
        Command::Ctg(a) => ctg(cli, a),
        Command::Ds2d(a) => ds2d(cli, a),
        Command::BranchOpt(a) => branch_opt(cli, a),
        Command::Quantize(a) => quantize(cli, a),
        Command::Graphopt(a) => graphopt(cli, a),
        Command::Suite(a) => suite(cli, a),
    }
}

fn make_model(cli: &Cli, a: &MakeModel) -> Result<bool> {
    let spec = ToySpec {
        seed: cli.seed,
        config: ModelConfig {
            embed_dim: a.embed_dim,
            num_heads: a.heads,
            latent_dim: a.latent_dim.unwrap_or(a.embed_dim),
            num_layers: a.layers,
            mlp_hidden: a.mlp_hidden,
            vocab_size: a.vocab,
            max_seq_len: a.max_seq,
            ..ModelConfig::toy_default()
        },
        n_adapters: a.adapters,
        rank: a.rank,
        scale: a.scale,
        ..ToySpec::default()
    };
    let art = edgellm::bench::make_toy_model(&spec)?;
    save_toy(&art, &a.out)?;
    let digests = bundle_digests(&a.out)?;
    for (file, hash) in &digests {
        println!("{hash}  {file}");
    }
    write_json(
        cli.json.clone(),
        &json!({"schema": 1, "command": "make-model", "spec": spec, "sha256": digests.into_iter().collect::<std::collections::BTreeMap<_, _>>()}),
    )?;
    Ok(true)
}

/// Projection ops for an optional task.
fn with_task<'a>(art: &'a edgellm::bench::ToyArtifacts, task: &Option<String>) -> Result<Box<dyn LinearOps + 'a>> {
    Ok(match task {
        Some(t) => Box::new(LoraOps {
            inner: &Dense,
            adapter: find_adapter(art, t)?,
        }),
        None => Box::new(Dense),
    })
}

fn gen(cli: &Cli, a: &Gen) -> Result<bool> {
    let art = resolve(cli.model.as_deref(), cli.lora_dir.as_deref(), cli.seed)?;
    let prompt = a.prompt.tokens()?;
    let mut bank = LoraBank::new(art.model.clone(), cli.strategy);
    for ad in &art.adapters {
        bank.insert(ad.clone())?;
    }
    match &a.task {
        Some(t) => bank.switch_task(t)?,
        None => bank.deactivate(),
    }
    let ops = bank.ops();
    let tokens = Session::with_ops(bank.model(), &*ops, KLayout::KPlain).greedy(&prompt, a.max_tokens, None, Some(EOS))?;
    println!("{}", detokenize_lossy(&tokens));
    write_json(
        cli.json.clone(),
        &json!({"schema": 1, "command": "gen", "task": a.task, "strategy": cli.strategy, "prompt": prompt, "tokens": tokens}),
    )?;
    Ok(true)
}

fn ctg(cli: &Cli, a: &Ctg) -> Result<bool> {
    let art = resolve(cli.model.as_deref(), cli.lora_dir.as_deref(), cli.seed)?;
    let prompt = a.prompt.tokens()?;
    let ops = with_task(&art, &a.task)?;
    let sampling = match a.temperature {
        Some(temperature) => Sampling::Temperature {
            temperature,
            seed: cli.seed,
        },
        None => Sampling::Greedy,
    };
    let cfg = CtgConfig {
        n_streams: a.streams,
        max_len: a.max_len,
        eos: Some(EOS),
        sampling,
    };
    let out = run_ctg(&art.model, &*ops, &prompt, cfg)?;
    for (i, s) in out.streams.iter().enumerate() {
        println!("[{i}] {}", detokenize_lossy(s));
    }
    let longest = out.decoded_lengths().into_iter().max().unwrap_or(0);
    println!(
        "model calls: 1 prefill + {} decode (sequential would need {})",
        out.decode_calls,
        out.decoded_lengths().iter().sum::<usize>()
    );
    let table = latency_table(40.0, 23.0, a.streams, longest.max(1));
    println!(
        "latency model: sequential {} = {} ms, concurrent {} = {} ms",
        table.sequential_formula, table.sequential_ms, table.concurrent_formula, table.concurrent_ms
    );
    let reference = latency_table(40.0, 23.0, 8, 1);
    if let Some(n) = &reference.note {
        println!("note: {n}");
    }
    write_json(
        report_path(&cli.json, &a.report),
        &json!({
            "schema": 1,
            "command": "ctg",
            "config": cfg,
            "task": a.task,
            "prompt": prompt,
            "first_tokens": out.first_tokens,
            "streams": out.streams,
            "calls": {"prefill": out.prefill_calls, "decode": out.decode_calls, "rows_per_call": out.rows_per_call},
            "latency_model": [table, reference],
        }),
    )?;
    Ok(true)
}

fn ds2d(cli: &Cli, a: &Ds2d) -> Result<bool> {
    let art = resolve(cli.model.as_deref(), cli.lora_dir.as_deref(), cli.seed)?;
    let prompt = a.prompt.tokens()?;
    let ops = with_task(&art, &a.task)?;
    let fs = forecast_with_slots(&art, a.config.depth(), cli.seed)?;
    let mut opts = Ds2dOptions::new(a.config.clone(), a.drafter, a.max_tokens);
    opts.seed = cli.seed;
    opts.row_budget = a.budget;
    opts.eos = Some(EOS);
    let out = run_ds2d(&art.model, &*ops, &prompt, &fs, &opts)?;
    let greedy = Session::with_ops(&art.model, &*ops, KLayout::KPlain).greedy(&prompt, a.max_tokens, None, Some(EOS))?;
    let equal = greedy == out.tokens;
    println!("{}", detokenize_lossy(&out.tokens));
    println!(
        "config {} ({} rows), drafter {}: {:.3} tokens/inference over {} steps; equals greedy: {equal}",
        a.config,
        a.config.total_rows(),
        a.drafter,
        out.stats.tokens_per_inference,
        out.stats.steps
    );
    write_json(
        report_path(&cli.json, &a.report),
        &json!({"schema": 1, "command": "ds2d", "options": opts, "prompt": prompt, "tokens": out.tokens, "stats": out.stats, "equals_greedy": equal}),
    )?;
    Ok(equal)
}

fn print_table(rows: &[BranchRow]) {
    println!("{:<12} {:>5} {:>12} {:>12}", "config", "rows", "tokens/inf", "tokens/s");
    for r in rows {
        let mark = if r.best { " *" } else { "" };
        println!(
            "{:<12} {:>5} {:>12.3} {:>12.1}{mark}",
            r.config.to_string(),
            r.total_rows,
            r.tokens_per_inference,
            r.tokens_per_sec
        );
    }
}

fn branch_opt(cli: &Cli, a: &BranchOpt) -> Result<bool> {
    let art = resolve(cli.model.as_deref(), cli.lora_dir.as_deref(), cli.seed)?;
    let configs: Vec<BranchConfig> = if a.all_configs {
        enumerate_branch_configs(a.budget, a.max_depth)
    } else {
        reference_configs().into_iter().filter(|c| c.total_rows() <= a.budget).collect()
    };
    if configs.is_empty() {
        bail!("no branch configuration fits a budget of {} rows", a.budget);
    }
    let cost = measure_cost_model(&art.model, &[4, 8, 16, 32], 32, 3)?;
    let (rows, source) = match &a.acceptance {
        Some(spec) => {
            let per_rank = spec
                .split(',')
                .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad acceptance '{spec}'")))
                .collect::<Result<Vec<_>>>()?;
            let model = AcceptanceModel::new(per_rank)?;
            (optimize_branch_config(&configs, |c| Ok(model.tokens_per_inference(c)), cost)?, format!("acceptance model {spec}"))
        }
        None => {
            let corpus = match &a.corpus {
                Some(f) => corpus_from_text(&fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?, 32),
                None => toy_corpus(8, 16, cli.seed),
            };
            if corpus.is_empty() {
                bail!("corpus is empty");
            }
            let rows = optimize_branch_config(
                &configs,
                |c| {
                    let fs = forecast_with_slots(&art, c.depth(), cli.seed).map_err(|e| edgellm::Error::Config(e.to_string()))?;
                    let (mut acc, mut steps) = (0usize, 0usize);
                    for (i, p) in corpus.iter().enumerate() {
                        let mut o = Ds2dOptions::new(c.clone(), a.drafter, a.max_tokens);
                        o.seed = cli.seed.wrapping_add(i as u64);
                        o.row_budget = a.budget;
                        let out = run_ds2d(&art.model, &Dense, p, &fs, &o)?;
                        acc += out.stats.accepted_counts.iter().sum::<usize>();
                        steps += out.stats.steps;
                    }
                    Ok(if steps == 0 { 1.0 } else { acc as f64 / steps as f64 })
                },
                cost,
            )?;
            (rows, format!("drafter {} over {} prompts", a.drafter, corpus.len()))
        }
    };
    println!("{source}; step cost {:.3} + {:.4} ms/row", cost.c0_ms, cost.c1_ms);
    print_table(&rows);
    if let Some(path) = &a.csv {
        let mut s = String::from("config,total_rows,tokens_per_inference,tokens_per_sec,best\n");
        for r in &rows {
            s += &format!(
                "\"{}\",{},{:.6},{:.3},{}\n",
                r.config, r.total_rows, r.tokens_per_inference, r.tokens_per_sec, r.best
            );
        }
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    }
    write_json(
        report_path(&cli.json, &a.report),
        &json!({"schema": 1, "command": "branch-opt", "budget": a.budget, "source": source, "cost_model": cost, "rows": rows}),
    )?;
    Ok(true)
}

fn quantize(cli: &Cli, a: &Quantize) -> Result<bool> {
    let art = resolve(cli.model.as_deref(), cli.lora_dir.as_deref(), cli.seed)?;
    let adapter = a.task.as_ref().map(|t| find_adapter(&art, t)).transpose()?;
    let corpus = toy_corpus(a.calib.max(1), 16, cli.seed);
    let calib = calibrate(&art.model, &corpus, adapter)?;
    let q = QuantizedWeights::quantize(art.model.weights(), Some(calib))?;
    let adapters: Vec<&_> = art.adapters.iter().collect();
    let rep = compression_report(art.model.weights(), &adapters);
    println!(
        "params {}: fp16 {} B, int4 {} B (payload {} + scales {}), ratio {:.3} ({:.3} without scales)",
        rep.params, rep.fp16_bytes, rep.int4_bytes, rep.int4_payload_bytes, rep.scale_bytes, rep.ratio, rep.ratio_excluding_scales
    );
    println!("adapters: {} params, {} B at 2 bytes/param", rep.adapter_params, rep.adapter_bytes);
    if let Some(out) = &a.out {
        q.save(&art.model, out)?;
        println!("wrote {}", out.display());
    }
    write_json(cli.json.clone(), &json!({"schema": 1, "command": "quantize", "compression": rep}))?;
    Ok(true)
}

fn graphopt(cli: &Cli, a: &Graphopt) -> Result<bool> {
    let art = resolve(cli.model.as_deref(), cli.lora_dir.as_deref(), cli.seed)?;
    let cfg = art.model.config();
    if a.layer >= cfg.num_layers {
        bail!("layer {} out of range (model has {})", a.layer, cfg.num_layers);
    }
    let adapter = a.task.as_ref().map(|t| find_adapter(&art, t)).transpose()?;
    let lora = adapter.map(|ad| LayerLora {
        layer: &ad.layers()[a.layer],
        scale: ad.scale(),
    });
    let g = decoder_layer_graph(cfg, art.model.weights().layer(a.layer), a.rows, lora)?;
    let mut h = g.clone();
    for &p in &a.passes {
        h = apply_pass(&h, p)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut worst = 0.0f32;
    for _ in 0..a.feeds.max(1) {
        let x = Tensor::new(vec![a.rows, cfg.embed_dim], (0..a.rows * cfg.embed_dim).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())?;
        let feeds = [("x".to_string(), x)].into_iter().collect();
        worst = worst.max(run(&g, &feeds)?[0].max_abs_diff(&run(&h, &feeds)?[0]));
    }
    let rep = pass_report(&g, &h);
    println!("passes: {}", a.passes.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(" -> "));
    println!(
        "nodes {} -> {}, constant bytes {} -> {}, MACs {} -> {}, attention matmuls {} -> {}",
        rep.before.nodes,
        rep.after.nodes,
        rep.before.constant_bytes,
        rep.after.constant_bytes,
        rep.before.macs,
        rep.after.macs,
        rep.before.attention_matmuls,
        rep.after.attention_matmuls
    );
    for line in h.history() {
        println!("  {line}");
    }
    println!("max abs output diff over {} feeds: {worst:.3e}", a.feeds.max(1));
    if let Some(out) = &a.out {
        save_graph(&h, out)?;
    }
    write_json(
        cli.json.clone(),
        &json!({"schema": 1, "command": "graphopt", "passes": a.passes.iter().map(|p| p.as_str()).collect::<Vec<_>>(), "report": rep, "history": h.history(), "max_abs_diff": worst}),
    )?;
    Ok(worst <= 1e-6)
}

fn suite(cli: &Cli, a: &Suite) -> Result<bool> {
    let names: Vec<&str> = if a.name == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&a.name.as_str()) {
        vec![a.name.as_str()]
    } else {
        bail!("unknown suite '{}' (expected one of {} or all)", a.name, SUITES.join(", "));
    };
    let art = resolve(cli.model.as_deref(), cli.lora_dir.as_deref(), cli.seed)?;
    let opts = SuiteOptions {
        prompts: a.prompts,
        tokens: a.tokens,
        seed: cli.seed,
    };
    let mut reports: Vec<BenchReport> = Vec::new();
    for n in names {
        let r = run_suite(n, &art, &opts)?;
        print!("{}", r.render());
        reports.push(r);
    }
    let ok = reports.iter().all(BenchReport::passed);
    match reports.len() {
        1 => write_json(cli.json.clone(), &reports[0])?,
        _ => write_json(cli.json.clone(), &json!({"schema": 1, "command": "suite all", "reports": reports}))?,
    }
    Ok(ok)
}
