use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assemble_prefill_input, assemble_step_input, verify_and_extend, BranchConfig, CostModel, DraftTree,
    ForecastState, StepInput, DEFAULT_ROW_BUDGET,
};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, KLayout, LinearOps, Model, RowInput, Session, CONTEXT_SEGMENT};
use crate::tensor::{argmax, top_k, Tensor};

/// Cache segment holding the forecast prefix.
pub const PREFIX_SEGMENT: u32 = 1;
const SCRATCH_SEGMENT: u32 = u32::MAX;

/// Source of draft candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "params")]
pub enum DrafterMode {
    /// Top-k of the forecast rows' logits.
    Loaded,
    /// Uniformly random distinct ids.
    Random,
    /// True future tokens (from a lookahead greedy run) ranked first.
    Oracle,
    /// The true token is kept at each depth with the given probability.
    NoisyOracle(f64),
    /// Each candidate rank hits the true token with probability `q1` at
    /// depth 1 and `q2` deeper, so wider levels accept more often.
    RankedOracle { q1: f64, q2: f64 },
}

impl fmt::Display for DrafterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DrafterMode::Loaded => write!(f, "loaded"),
            DrafterMode::Random => write!(f, "random"),
            DrafterMode::Oracle => write!(f, "oracle"),
            DrafterMode::NoisyOracle(p) => write!(f, "noisy-oracle:{p}"),
            DrafterMode::RankedOracle { q1, q2 } => write!(f, "ranked-oracle:{q1},{q2}"),
        }
    }
}

impl FromStr for DrafterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loaded" => Ok(DrafterMode::Loaded),
            "random" => Ok(DrafterMode::Random),
            "oracle" => Ok(DrafterMode::Oracle),
            _ if s.starts_with("ranked-oracle:") => {
                let bad = || Error::Config(format!("unknown drafter '{s}'"));
                let (a, b) = s["ranked-oracle:".len()..].split_once(',').ok_or_else(bad)?;
                let q1 = a.parse::<f64>().map_err(|_| bad())?;
                let q2 = b.parse::<f64>().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&q1) || !(0.0..=1.0).contains(&q2) {
                    return Err(bad());
                }
                Ok(DrafterMode::RankedOracle { q1, q2 })
            }
            _ => {
                let p = s
                    .strip_prefix("noisy-oracle:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| Error::Config(format!("unknown drafter '{s}'")))?;
                Ok(DrafterMode::NoisyOracle(p))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ds2dOptions {
    pub config: BranchConfig,
    pub drafter: DrafterMode,
    pub max_tokens: usize,
    pub eos: Option<u32>,
    pub seed: u64,
    pub row_budget: usize,
}

impl Ds2dOptions {
    pub fn new(config: BranchConfig, drafter: DrafterMode, max_tokens: usize) -> Self {
        Ds2dOptions {
            config,
            drafter,
            max_tokens,
            eos: None,
            seed: 0,
            row_budget: DEFAULT_ROW_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ds2dStats {
    /// Verification steps (model calls after the prefill).
    pub steps: usize,
    pub model_calls: usize,
    /// Mean verified tokens per verification step.
    pub tokens_per_inference: f64,
    pub accepted_counts: Vec<usize>,
    /// Fraction of steps accepting a draft at each depth.
    pub acceptance_per_depth: Vec<f64>,
    pub rows_per_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ds2dOutput {
    pub tokens: Vec<u32>,
    pub stats: Ds2dStats,
}

struct Drafter {
    mode: DrafterMode,
    rng: ChaCha8Rng,
    truth: Vec<u32>,
    vocab: usize,
}

impl Drafter {
    /// Candidates per depth for a tree whose root is generated token `root_index`.
    fn candidates(&mut self, cfg: &BranchConfig, slot_logits: &[&[f32]], root_index: usize) -> Vec<Vec<u32>> {
        cfg.branches()
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                let logits = slot_logits[j];
                let b = b.min(self.vocab);
                match self.mode {
                    DrafterMode::Loaded => top_k(logits, b).into_iter().map(|t| t as u32).collect(),
                    DrafterMode::Random => sample(&mut self.rng, self.vocab, b).into_iter().map(|t| t as u32).collect(),
                    _ => {
                        let truth = self.truth.get(root_index + j + 1).copied();
                        let slot = match self.mode {
                            DrafterMode::NoisyOracle(p) => self.rng.gen_bool(p).then_some(0),
                            DrafterMode::RankedOracle { q1, q2 } => {
                                let q = if j == 0 { q1 } else { q2 };
                                (0..b).find(|_| self.rng.gen_bool(q))
                            }
                            _ => Some(0),
                        };
                        let mut out: Vec<u32> = top_k(logits, self.vocab)
                            .into_iter()
                            .map(|t| t as u32)
                            .filter(|&t| Some(t) != truth)
                            .take(b)
                            .collect();
                        if let (Some(t), Some(r)) = (truth, slot) {
                            out.insert(r, t);
                            out.truncate(b);
                        }
                        out
                    }
                }
            })
            .collect()
    }
}

fn slot_rows<'a>(logits: &'a Tensor, input: &StepInput, gi: usize) -> Vec<&'a [f32]> {
    (1..=input.layout.m).map(|s| logits.row(input.layout.forecast_row(gi, s))).collect()
}

/// Greedy speculative generation of up to `max_tokens` tokens after
/// `prompt`. The output matches plain greedy decoding for every drafter.
pub fn run_ds2d(
    model: &Model,
    ops: &dyn LinearOps,
    prompt: &[u32],
    fs: &ForecastState,
    opts: &Ds2dOptions,
) -> Result<Ds2dOutput> {
    let cfg = &opts.config;
    let m = cfg.depth();
    if fs.slots() != m {
        return Err(Error::Draft(format!("config {cfg} needs {m} forecast slots, state has {}", fs.slots())));
    }
    if cfg.total_rows() > opts.row_budget {
        return Err(Error::RowBudget {
            rows: cfg.total_rows(),
            budget: opts.row_budget,
        });
    }
    let p = fs.prefix_len();
    let capacity = model.config().max_seq_len;
    let needed = (p + prompt.len() + m + 1).max(p + prompt.len() + opts.max_tokens + cfg.total_rows());
    if needed > capacity {
        return Err(Error::Capacity { needed, capacity });
    }
    let vocab = model.config().vocab_size;
    let truth = match opts.drafter {
        DrafterMode::Oracle | DrafterMode::NoisyOracle(_) | DrafterMode::RankedOracle { .. } => {
            let horizon = (opts.max_tokens + m + 1).min(capacity - prompt.len());
            Session::with_ops(model, ops, KLayout::KPlain).greedy(prompt, horizon, None, None)?
        }
        _ => Vec::new(),
    };
    let mut drafter = Drafter {
        mode: opts.drafter,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        truth,
        vocab,
    };

    let mut session = Session::with_ops(model, ops, KLayout::KPlain);
    let pre = assemble_prefill_input(prompt, fs)?;
    let logits = session.run(&pre.rows, &pre.positions, &pre.mask, SCRATCH_SEGMENT)?;
    let cache = session.cache_mut();
    cache.truncate(0);
    cache.advance(p, PREFIX_SEGMENT)?;
    cache.advance(prompt.len(), CONTEXT_SEGMENT)?;

    let mut out = Vec::with_capacity(opts.max_tokens);
    let mut counts = Vec::new();
    if opts.max_tokens == 0 {
        return Ok(finish(out, counts, m, cfg, session.calls()));
    }
    let mut root = argmax(logits.row(p + prompt.len() - 1)) as u32;
    out.push(root);
    let mut seeds: Vec<Vec<f32>> = slot_rows(&logits, &pre, 0).into_iter().map(<[f32]>::to_vec).collect();

    while out.len() < opts.max_tokens && Some(root) != opts.eos {
        let seed_refs: Vec<&[f32]> = seeds.iter().map(Vec::as_slice).collect();
        let cands = drafter.candidates(cfg, &seed_refs, out.len() - 1);
        let tree = DraftTree::from_candidates(root, &cands)?;
        let base = session.cache().fill();
        let input = assemble_step_input(&tree, fs, base - p, prompt.len() + out.len() - 1, opts.row_budget)?;
        let logits = session.run(&input.rows, &input.positions, &input.mask, SCRATCH_SEGMENT)?;
        let v = verify_and_extend(&logits, &tree)?;
        let keep: Vec<usize> = v.accepted_path.iter().map(|&n| base + n).collect();
        session.cache_mut().commit_rows(base, &keep, CONTEXT_SEGMENT)?;
        counts.push(v.accepted_count);

        let emitted = v.accepted_path[1..].iter().map(|&n| tree.nodes()[n].token).chain([v.next_token]);
        for t in emitted {
            out.push(t);
            if out.len() == opts.max_tokens || Some(t) == opts.eos {
                break;
            }
        }
        root = v.next_token;
        seeds = slot_rows(&logits, &input, v.next_draft_source).into_iter().map(<[f32]>::to_vec).collect();
    }
    Ok(finish(out, counts, m, cfg, session.calls()))
}

fn finish(tokens: Vec<u32>, counts: Vec<usize>, m: usize, cfg: &BranchConfig, calls: usize) -> Ds2dOutput {
    let steps = counts.len();
    let tpi = if steps == 0 { 1.0 } else { counts.iter().sum::<usize>() as f64 / steps as f64 };
    let acceptance_per_depth = (1..=m)
        .map(|j| {
            if steps == 0 {
                0.0
            } else {
                counts.iter().filter(|&&c| c > j).count() as f64 / steps as f64
            }
        })
        .collect();
    Ds2dOutput {
        tokens,
        stats: Ds2dStats {
            steps,
            model_calls: calls,
            tokens_per_inference: tpi,
            accepted_counts: counts,
            acceptance_per_depth,
            rows_per_step: cfg.total_rows(),
        },
    }
}

/// Fit the per-step cost line by timing forwards of `row_counts` rows over a
/// `context`-row cache, keeping the fastest of `reps` runs per size.
pub fn measure_cost_model(model: &Model, row_counts: &[usize], context: usize, reps: usize) -> Result<CostModel> {
    let mut samples = Vec::with_capacity(row_counts.len());
    for &n in row_counts {
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let mut session = Session::new(model);
            if context > 0 {
                session.extend(&vec![0; context])?;
            }
            let rows = vec![RowInput::Token(0); n];
            let positions: Vec<usize> = (context..context + n).collect();
            let mask = AttentionMask::causal(n, context);
            let t = Instant::now();
            session.run(&rows, &positions, &mask, SCRATCH_SEGMENT)?;
            best = best.min(t.elapsed().as_secs_f64() * 1000.0);
        }
        samples.push((n, best));
    }
    CostModel::fit(&samples)
}
