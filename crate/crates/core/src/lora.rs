//! Runtime-switchable LoRA adapters over the frozen decoder.
//!
//! Every attention projection becomes `xW + s·(xA)B`. The low-rank product
//! is always taken input-first so the full `A·B` matrix never exists on the
//! hot path. Three execution strategies share the same base weights:
//!
//! * [`Strategy::MultiGraph`]: one prepared forward per task, each closing
//!   over the shared base weights and its own adapter.
//! * [`Strategy::Masked`]: a single forward that evaluates every adapter and
//!   sums them under a one-hot selector.
//! * [`Strategy::AdapterAsInput`]: a single forward whose adapter factors are
//!   call arguments (placeholders filled per task).

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, Payload, Role};
use crate::error::{Error, Result};
use crate::model::{
    AttentionMask, Dense, KvCache, Linear, LinearOps, Model, ModelConfig, ModelWeights, RowInput,
};
use crate::tensor::Tensor;

/// `xW + s·(xA)B`, low-rank factor first.
pub fn apply_lora_projection(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor, s: f32) -> Result<Tensor> {
    let base = x.matmul(w)?;
    add_lora_delta(&base, x, a, b, s)
}

fn lora_delta(x: &Tensor, a: &Tensor, b: &Tensor, s: f32) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::dim(format!("lora factors {:?} x {:?}", a.shape(), b.shape())));
    }
    Ok(x.matmul(a)?.matmul(b)?.scale(s))
}

fn add_lora_delta(base: &Tensor, x: &Tensor, a: &Tensor, b: &Tensor, s: f32) -> Result<Tensor> {
    base.add(&lora_delta(x, a, b, s)?)
}

/// Low-rank factors for the four attention projections of one layer,
/// indexed Q, K, V, O.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: [Tensor; 4],
    pub b: [Tensor; 4],
}

fn slot(which: Linear) -> Option<usize> {
    match which {
        Linear::Q => Some(0),
        Linear::K => Some(1),
        Linear::V => Some(2),
        Linear::O => Some(3),
        _ => None,
    }
}

const SLOT_NAMES: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    task_id: String,
    rank: usize,
    scale: f32,
    layers: Vec<LoraLayer>,
}

fn factor_shapes(cfg: &ModelConfig, rank: usize, slot: usize) -> ([usize; 2], [usize; 2]) {
    let (e, l) = (cfg.embed_dim, cfg.latent_dim);
    if slot == 3 {
        ([l, rank], [rank, e])
    } else {
        ([e, rank], [rank, l])
    }
}

impl LoraAdapter {
    pub fn new(
        cfg: &ModelConfig,
        task_id: impl Into<String>,
        rank: usize,
        scale: f32,
        layers: Vec<LoraLayer>,
    ) -> Result<Self> {
        if rank == 0 || rank > cfg.embed_dim.min(cfg.latent_dim) {
            return Err(Error::Config(format!(
                "adapter rank {rank} outside [1, min(E, L) = {}]",
                cfg.embed_dim.min(cfg.latent_dim)
            )));
        }
        if layers.len() != cfg.num_layers {
            return Err(Error::dim(format!("adapter has {} layers, model {}", layers.len(), cfg.num_layers)));
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("adapter scale".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            for s in 0..4 {
                let (sa, sb) = factor_shapes(cfg, rank, s);
                if layer.a[s].shape() != sa || layer.b[s].shape() != sb {
                    return Err(Error::dim(format!(
                        "layer {i} {}: factors {:?}/{:?}, expected {sa:?}/{sb:?}",
                        SLOT_NAMES[s],
                        layer.a[s].shape(),
                        layer.b[s].shape()
                    )));
                }
                if !layer.a[s].is_finite() || !layer.b[s].is_finite() {
                    return Err(Error::NonFinite(format!("adapter layer {i} {}", SLOT_NAMES[s])));
                }
            }
        }
        Ok(LoraAdapter {
            task_id: task_id.into(),
            rank,
            scale,
            layers,
        })
    }

    /// Normal-initialised factors with standard deviation `init`.
    pub fn random(
        cfg: &ModelConfig,
        task_id: impl Into<String>,
        rank: usize,
        scale: f32,
        init: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0f32, init).map_err(|e| Error::Config(e.to_string()))?;
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let mut mk = |shape: [usize; 2]| {
                    let d = (0..shape[0] * shape[1]).map(|_| normal.sample(rng)).collect();
                    Tensor::new(shape.to_vec(), d).expect("shape")
                };
                let mut a = Vec::with_capacity(4);
                let mut b = Vec::with_capacity(4);
                for s in 0..4 {
                    let (sa, sb) = factor_shapes(cfg, rank, s);
                    a.push(mk(sa));
                    b.push(mk(sb));
                }
                LoraLayer {
                    a: a.try_into().expect("4"),
                    b: b.try_into().expect("4"),
                }
            })
            .collect();
        Self::new(cfg, task_id, rank, scale, layers)
    }

    /// Zero-filled placeholder factors.
    pub fn zeros(cfg: &ModelConfig, rank: usize) -> Result<Self> {
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let a = [0, 1, 2, 3].map(|s| Tensor::zeros(&factor_shapes(cfg, rank, s).0));
                let b = [0, 1, 2, 3].map(|s| Tensor::zeros(&factor_shapes(cfg, rank, s).1));
                LoraLayer { a, b }
            })
            .collect();
        Self::new(cfg, "placeholder", rank, 0.0, layers)
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn with_scale(&self, scale: f32) -> Self {
        LoraAdapter {
            scale,
            ..self.clone()
        }
    }

    /// Factors for an attention projection; `None` for MLP projections.
    pub fn factors(&self, layer: usize, which: Linear) -> Option<(&Tensor, &Tensor)> {
        slot(which).map(|s| (&self.layers[layer].a[s], &self.layers[layer].b[s]))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.a.iter().chain(l.b.iter()))
            .map(Tensor::numel)
            .sum()
    }

    pub fn to_bundle(&self, cfg: &ModelConfig) -> Bundle {
        let mut b = Bundle::new(Role::Lora, cfg.clone());
        b.task_id = Some(self.task_id.clone());
        b.rank = Some(self.rank);
        b.scale = Some(self.scale);
        for (i, layer) in self.layers.iter().enumerate() {
            for s in 0..4 {
                b.push(format!("layers.{i}.{}.a", SLOT_NAMES[s]), Payload::F32(layer.a[s].clone()));
                b.push(format!("layers.{i}.{}.b", SLOT_NAMES[s]), Payload::F32(layer.b[s].clone()));
            }
        }
        b
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        if bundle.role != Role::Lora {
            return Err(Error::Config("bundle role is not 'lora'".into()));
        }
        let missing = |what: &str| Error::Config(format!("lora bundle missing {what}"));
        let task = bundle.task_id.clone().ok_or_else(|| missing("task_id"))?;
        let rank = bundle.rank.ok_or_else(|| missing("rank"))?;
        let scale = bundle.scale.ok_or_else(|| missing("scale"))?;
        let mut named = bundle.f32_tensors();
        let mut take = |n: String| named.remove(&n).ok_or_else(|| missing(&n));
        let mut layers = Vec::with_capacity(bundle.config.num_layers);
        for i in 0..bundle.config.num_layers {
            let mut a = Vec::with_capacity(4);
            let mut b = Vec::with_capacity(4);
            for s in SLOT_NAMES {
                a.push(take(format!("layers.{i}.{s}.a"))?);
                b.push(take(format!("layers.{i}.{s}.b"))?);
            }
            layers.push(LoraLayer {
                a: a.try_into().expect("4"),
                b: b.try_into().expect("4"),
            });
        }
        Self::new(&bundle.config, task, rank, scale, layers)
    }

    pub fn save(&self, cfg: &ModelConfig, dir: &Path) -> Result<()> {
        self.to_bundle(cfg).save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::load(dir)?)
    }
}

/// `W′ = W + s·A·B` for every attention projection. Returns new weights;
/// the input is not modified.
pub fn merge_adapter(weights: &ModelWeights, adapter: &LoraAdapter) -> Result<ModelWeights> {
    if adapter.layers.len() != weights.layers().len() {
        return Err(Error::dim("adapter/model layer count mismatch"));
    }
    let mut merged: Vec<[Tensor; 4]> = Vec::with_capacity(adapter.layers.len());
    for (i, layer) in weights.layers().iter().enumerate() {
        let mut out = Vec::with_capacity(4);
        for which in Linear::ATTENTION {
            let (a, b) = adapter.factors(i, which).expect("attention slot");
            let w = which.weight(layer);
            let ab = a.matmul(b)?.scale(adapter.scale);
            out.push(w.add(&ab)?);
        }
        merged.push(out.try_into().expect("4"));
    }
    Ok(weights.with_attention(|i, _| merged[i].clone()))
}

/// Applies one adapter on top of an inner projection backend.
pub struct LoraOps<'a> {
    pub inner: &'a dyn LinearOps,
    pub adapter: &'a LoraAdapter,
}

impl LinearOps for LoraOps<'_> {
    fn linear(&self, layer: usize, which: Linear, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let base = self.inner.linear(layer, which, x, weight)?;
        match self.adapter.factors(layer, which) {
            Some((a, b)) => add_lora_delta(&base, x, a, b, self.adapter.scale),
            None => Ok(base),
        }
    }
}

/// Evaluates every adapter and sums them under `selector`.
pub struct MaskedLoraOps<'a> {
    pub inner: &'a dyn LinearOps,
    pub adapters: &'a [Arc<LoraAdapter>],
    pub selector: &'a [f32],
}

impl LinearOps for MaskedLoraOps<'_> {
    fn linear(&self, layer: usize, which: Linear, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let mut acc = self.inner.linear(layer, which, x, weight)?;
        for (adapter, &sel) in self.adapters.iter().zip(self.selector) {
            if let Some((a, b)) = adapter.factors(layer, which) {
                let delta = lora_delta(x, a, b, adapter.scale)?;
                acc = acc.add(&delta.scale(sel))?;
            }
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MultiGraph,
    Masked,
    AdapterAsInput,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "multi_graph" => Ok(Strategy::MultiGraph),
            "masked" => Ok(Strategy::Masked),
            "adapter_as_input" | "as_input" => Ok(Strategy::AdapterAsInput),
            _ => Err(Error::Config(format!("unknown strategy '{s}'"))),
        }
    }
}

type TaskGraph =
    Box<dyn Fn(&mut KvCache, &[RowInput], &[usize], &AttentionMask, u32) -> Result<Tensor> + Send + Sync>;

/// The forward routine used by [`Strategy::AdapterAsInput`]: the adapter is
/// an argument of every call, not part of the routine.
pub fn forward_adapter_as_input(
    model: &Model,
    cache: &mut KvCache,
    rows: &[RowInput],
    positions: &[usize],
    mask: &AttentionMask,
    adapter: &LoraAdapter,
    segment: u32,
) -> Result<Tensor> {
    let ops = LoraOps { inner: &Dense, adapter };
    model.forward_rows(cache, rows, positions, mask, &ops, segment)
}

/// A set of same-rank adapters over one frozen model, with exactly one
/// active task.
pub struct LoraBank {
    model: Model,
    strategy: Strategy,
    adapters: Vec<Arc<LoraAdapter>>,
    graphs: Vec<TaskGraph>,
    selector: Vec<f32>,
    active: Option<usize>,
    placeholder: Option<LoraAdapter>,
}

impl LoraBank {
    pub fn new(model: Model, strategy: Strategy) -> Self {
        LoraBank {
            model,
            strategy,
            adapters: Vec::new(),
            graphs: Vec::new(),
            selector: Vec::new(),
            active: None,
            placeholder: None,
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn base_weights(&self) -> &Arc<ModelWeights> {
        self.model.shared_weights()
    }

    pub fn adapters(&self) -> &[Arc<LoraAdapter>] {
        &self.adapters
    }

    pub fn rank(&self) -> Option<usize> {
        self.adapters.first().map(|a| a.rank)
    }

    /// Add an adapter; the first insert becomes active. All adapters must
    /// share one rank.
    pub fn insert(&mut self, adapter: LoraAdapter) -> Result<()> {
        if let Some(rank) = self.rank() {
            if adapter.rank != rank {
                return Err(Error::RankMismatch {
                    expected: rank,
                    got: adapter.rank,
                });
            }
        }
        if adapter.layers.len() != self.model.config().num_layers {
            return Err(Error::dim("adapter layer count does not match model"));
        }
        if self.adapters.iter().any(|a| a.task_id == adapter.task_id) {
            return Err(Error::Config(format!("duplicate task id '{}'", adapter.task_id)));
        }
        let adapter = Arc::new(adapter);
        if self.strategy == Strategy::MultiGraph {
            let model = self.model.clone();
            let captured = Arc::clone(&adapter);
            self.graphs.push(Box::new(move |cache, rows, pos, mask, seg| {
                let ops = LoraOps {
                    inner: &Dense,
                    adapter: &captured,
                };
                model.forward_rows(cache, rows, pos, mask, &ops, seg)
            }));
        }
        if self.placeholder.is_none() {
            self.placeholder = Some(LoraAdapter::zeros(self.model.config(), adapter.rank)?);
        }
        self.adapters.push(adapter);
        self.selector.push(0.0);
        if self.active.is_none() {
            self.select(self.adapters.len() - 1);
        }
        Ok(())
    }

    fn select(&mut self, idx: usize) {
        self.selector.iter_mut().for_each(|v| *v = 0.0);
        self.selector[idx] = 1.0;
        self.active = Some(idx);
    }

    pub fn switch_task(&mut self, task_id: &str) -> Result<()> {
        let idx = self
            .adapters
            .iter()
            .position(|a| a.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        self.select(idx);
        Ok(())
    }

    /// Run with no adapter active (all-zero selector / zero placeholders).
    pub fn deactivate(&mut self) {
        self.selector.iter_mut().for_each(|v| *v = 0.0);
        self.active = None;
    }

    pub fn active(&self) -> Option<&LoraAdapter> {
        self.active.map(|i| &*self.adapters[i])
    }

    pub fn selector(&self) -> &[f32] {
        &self.selector
    }

    /// Projection ops implementing the bank's strategy for the active task.
    pub fn ops(&self) -> Box<dyn LinearOps + '_> {
        match (self.strategy, self.active) {
            (Strategy::Masked, _) => Box::new(MaskedLoraOps {
                inner: &Dense,
                adapters: &self.adapters,
                selector: &self.selector,
            }),
            (_, Some(i)) => Box::new(LoraOps {
                inner: &Dense,
                adapter: &self.adapters[i],
            }),
            (_, None) => match &self.placeholder {
                Some(p) => Box::new(LoraOps { inner: &Dense, adapter: p }),
                None => Box::new(Dense),
            },
        }
    }

    /// Strategy-specific forward for the active task.
    pub fn forward(
        &self,
        cache: &mut KvCache,
        rows: &[RowInput],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<Tensor> {
        match self.strategy {
            Strategy::MultiGraph => match self.active {
                Some(i) => (self.graphs[i])(cache, rows, positions, mask, 0),
                None => self.model.forward_rows(cache, rows, positions, mask, &Dense, 0),
            },
            Strategy::Masked => {
                let ops = MaskedLoraOps {
                    inner: &Dense,
                    adapters: &self.adapters,
                    selector: &self.selector,
                };
                self.model.forward_rows(cache, rows, positions, mask, &ops, 0)
            }
            Strategy::AdapterAsInput => {
                let input: &LoraAdapter = match (self.active, &self.placeholder) {
                    (Some(i), _) => &self.adapters[i],
                    (None, Some(p)) => p,
                    (None, None) => return self.model.forward_rows(cache, rows, positions, mask, &Dense, 0),
                };
                forward_adapter_as_input(&self.model, cache, rows, positions, mask, input, 0)
            }
        }
    }

    pub fn footprint(&self) -> FootprintReport {
        strategy_footprint(self)
    }
}

/// Byte accounting of a bank, derived from shapes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub strategy: Strategy,
    pub n_adapters: usize,
    /// f32 base parameters.
    pub base_bytes: usize,
    /// f32 parameters of one adapter.
    pub adapter_bytes: usize,
    /// Parameters resident in the executable graph(s).
    pub graph_param_bytes: usize,
    /// Adapter tensors kept outside the graph and fed per call.
    pub external_adapter_bytes: usize,
    /// Parameter bytes read by one decode step.
    pub bytes_touched_per_step: usize,
    /// The same split at 2 bytes/param, laid out as "base + adapters".
    pub fp16_base_bytes: usize,
    pub fp16_adapters_bytes: usize,
}

pub fn strategy_footprint(bank: &LoraBank) -> FootprintReport {
    let n = bank.adapters.len();
    let base_params = bank.model.weights().param_count();
    let adapter_params = bank.adapters.first().map_or(0, |a| a.param_count());
    let (base, one) = (base_params * 4, adapter_params * 4);
    let (graph, external, touched) = match bank.strategy {
        Strategy::MultiGraph => (base + n * one, 0, base + one.min(n * one)),
        Strategy::Masked => (base + n * one, 0, base + n * one),
        Strategy::AdapterAsInput => (base + one.min(n * one), n * one - one.min(n * one), base + one.min(n * one)),
    };
    FootprintReport {
        strategy: bank.strategy,
        n_adapters: n,
        base_bytes: base,
        adapter_bytes: one,
        graph_param_bytes: graph,
        external_adapter_bytes: external,
        bytes_touched_per_step: touched,
        fp16_base_bytes: base_params * 2,
        fp16_adapters_bytes: n * adapter_params * 2,
    }
}
