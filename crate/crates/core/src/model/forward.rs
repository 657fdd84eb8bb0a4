use std::sync::Arc;

use super::ops::{apply_rope, rms_norm, silu, softmax_in_place};
use super::{AttentionMask, KvCache, LayerWeights, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which projection a [`LinearOps`] call is computing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Linear {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Linear {
    pub const ALL: [Linear; 7] = [
        Linear::Q,
        Linear::K,
        Linear::V,
        Linear::O,
        Linear::Gate,
        Linear::Up,
        Linear::Down,
    ];
    pub const ATTENTION: [Linear; 4] = [Linear::Q, Linear::K, Linear::V, Linear::O];

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "wq",
            Linear::K => "wk",
            Linear::V => "wv",
            Linear::O => "wo",
            Linear::Gate => "w_gate",
            Linear::Up => "w_up",
            Linear::Down => "w_down",
        }
    }

    pub fn weight(self, layer: &LayerWeights) -> &Tensor {
        match self {
            Linear::Q => &layer.wq,
            Linear::K => &layer.wk,
            Linear::V => &layer.wv,
            Linear::O => &layer.wo,
            Linear::Gate => &layer.w_gate,
            Linear::Up => &layer.w_up,
            Linear::Down => &layer.w_down,
        }
    }
}

/// Computes every weight-bearing projection in the decoder.
///
/// The frozen forward routine is fixed; LoRA strategies and fake
/// quantization plug in here without touching the base weights.
pub trait LinearOps {
    fn linear(&self, layer: usize, which: Linear, x: &Tensor, weight: &Tensor) -> Result<Tensor>;
}

/// Plain `x · W`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dense;

impl LinearOps for Dense {
    fn linear(&self, _layer: usize, _which: Linear, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        x.matmul(weight)
    }
}

/// One input row: a token id looked up in the embedding table, or an
/// embedding supplied directly (forecast prefix / forecast slots).
#[derive(Debug, Clone, PartialEq)]
pub enum RowInput {
    Token(u32),
    Embedding(Vec<f32>),
}

/// A frozen model: configuration plus shared, immutable weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Arc<ModelWeights>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        Self::from_shared(config, Arc::new(weights))
    }

    pub fn from_shared(config: ModelConfig, weights: Arc<ModelWeights>) -> Result<Self> {
        config.validate()?;
        let e = weights.token_embedding().shape();
        if e != [config.vocab_size, config.embed_dim] || weights.layers().len() != config.num_layers {
            return Err(Error::dim("weights do not match config"));
        }
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn shared_weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }

    pub fn embed(&self, rows: &[RowInput]) -> Result<Tensor> {
        let e = self.config.embed_dim;
        let table = self.weights.token_embedding();
        let mut data = Vec::with_capacity(rows.len() * e);
        for row in rows {
            match row {
                RowInput::Token(id) => {
                    let idx = *id as usize;
                    if idx >= self.config.vocab_size {
                        return Err(Error::InvalidToken {
                            id: *id,
                            vocab: self.config.vocab_size,
                        });
                    }
                    data.extend_from_slice(table.row(idx));
                }
                RowInput::Embedding(v) => {
                    if v.len() != e {
                        return Err(Error::dim(format!("injected row has {} values, expected {e}", v.len())));
                    }
                    data.extend_from_slice(v);
                }
            }
        }
        Tensor::new(vec![rows.len(), e], data)
    }

    /// Token-only forward with dense projections.
    pub fn forward(
        &self,
        cache: &mut KvCache,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<Tensor> {
        let rows: Vec<RowInput> = tokens.iter().map(|&t| RowInput::Token(t)).collect();
        self.forward_rows(cache, &rows, positions, mask, &Dense, 0)
    }

    /// Full decoder pass over `rows`. Row `i` sits at logical position
    /// `positions[i]` and attends according to `mask` (cached columns first,
    /// then the new rows). The new rows' K/V are appended to the cache under
    /// `segment`. Returns `rows × vocab` logits.
    pub fn forward_rows(
        &self,
        cache: &mut KvCache,
        rows: &[RowInput],
        positions: &[usize],
        mask: &AttentionMask,
        ops: &dyn LinearOps,
        segment: u32,
    ) -> Result<Tensor> {
        let n = rows.len();
        if positions.len() != n {
            return Err(Error::dim(format!("{} positions for {n} rows", positions.len())));
        }
        if mask.rows() != n || mask.cols() != cache.fill() + n {
            return Err(Error::dim(format!(
                "mask {}x{} for {n} rows over {} cached",
                mask.rows(),
                mask.cols(),
                cache.fill()
            )));
        }
        cache.check_room(n)?;
        let mut x = self.embed(rows)?;
        for layer in 0..self.config.num_layers {
            x = self.layer_forward(layer, &x, positions, mask, cache, ops)?;
        }
        cache.advance(n, segment)?;
        self.logits(&x)
    }

    /// One decoder block. Writes this call's K/V rows at `cache.fill()..`
    /// without advancing the fill count.
    pub fn layer_forward(
        &self,
        layer: usize,
        x: &Tensor,
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KvCache,
        ops: &dyn LinearOps,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let w = self.weights.layer(layer);
        let h = rms_norm(x, &w.attn_norm, cfg.rms_eps)?;
        let q = ops.linear(layer, Linear::Q, &h, &w.wq)?;
        let k = ops.linear(layer, Linear::K, &h, &w.wk)?;
        let v = ops.linear(layer, Linear::V, &h, &w.wv)?;
        let q = apply_rope(&q, positions, cfg.head_dim(), cfg.rope_theta)?;
        let k = apply_rope(&k, positions, cfg.head_dim(), cfg.rope_theta)?;
        let attn = attention_step(&q, &k, &v, cache, layer, mask, cfg.num_heads)?;
        let o = ops.linear(layer, Linear::O, &attn, &w.wo)?;
        let x = x.add(&o)?;

        let h = rms_norm(&x, &w.mlp_norm, cfg.rms_eps)?;
        let gate = ops.linear(layer, Linear::Gate, &h, &w.w_gate)?;
        let up = ops.linear(layer, Linear::Up, &h, &w.w_up)?;
        let act = gate.map(silu).mul(&up)?;
        let down = ops.linear(layer, Linear::Down, &act, &w.w_down)?;
        x.add(&down)
    }

    /// Final norm and output head.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = rms_norm(x, self.weights.final_norm(), self.config.rms_eps)?;
        match self.weights.lm_head() {
            Some(head) => h.matmul(head),
            None => h.matmul_t(self.weights.token_embedding()),
        }
    }
}

/// Masked multi-head attention of `n` new rows against the cache.
///
/// The new K/V rows are written at `cache.fill()..fill+n` for `layer`
/// (fill itself is not advanced). Per head: `softmax(q·Kᵀ/√d + mask)·V`.
pub fn attention_step(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &mut KvCache,
    layer: usize,
    mask: &AttentionMask,
    num_heads: usize,
) -> Result<Tensor> {
    let n = q.rows();
    let width = q.cols();
    if k.shape() != q.shape() || v.shape() != q.shape() || width != cache.width() || !width.is_multiple_of(num_heads) {
        return Err(Error::dim(format!(
            "attention q {:?} k {:?} v {:?} cache width {}",
            q.shape(),
            k.shape(),
            v.shape(),
            cache.width()
        )));
    }
    let base = cache.fill();
    if mask.rows() != n || mask.cols() != base + n {
        return Err(Error::dim(format!(
            "mask {}x{} for {n} rows over {base} cached",
            mask.rows(),
            mask.cols()
        )));
    }
    cache.check_room(n)?;
    for i in 0..n {
        cache.write(layer, base + i, k.row(i), v.row(i));
    }
    let hd = width / num_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let cols = base + n;
    let mut out = Tensor::zeros(&[n, width]);
    let mut scores = vec![0.0f32; cols];
    for i in 0..n {
        let mrow = mask.row(i);
        for head in 0..num_heads {
            let off = head * hd;
            let qh = &q.row(i)[off..off + hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = cache.k_dot(layer, j, off, qh) * scale + mrow[j];
            }
            softmax_in_place(&mut scores);
            let orow = &mut out.row_mut(i)[off..off + hd];
            for (j, &p) in scores.iter().enumerate() {
                let vr = &cache.v_row(layer, j)[off..off + hd];
                for (o, &vv) in orow.iter_mut().zip(vr) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok(out)
}
