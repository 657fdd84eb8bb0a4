use super::{AttentionMask, Dense, KLayout, KvCache, LinearOps, Model, RowInput};
use crate::error::Result;
use crate::tensor::{argmax, Tensor};

/// Segment id used for ordinary sequential context rows.
pub const CONTEXT_SEGMENT: u32 = 0;

/// A model, its KV cache and the projection ops in use. Single-threaded;
/// many sessions may share one [`Model`].
pub struct Session<'m> {
    model: &'m Model,
    ops: &'m dyn LinearOps,
    cache: KvCache,
    calls: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self::with_ops(model, &Dense, KLayout::KPlain)
    }

    pub fn with_ops(model: &'m Model, ops: &'m dyn LinearOps, layout: KLayout) -> Self {
        Session {
            model,
            ops,
            cache: KvCache::new(model.config(), layout),
            calls: 0,
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut KvCache {
        &mut self.cache
    }

    /// Number of model calls made so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    /// One model call with an explicit layout.
    pub fn run(
        &mut self,
        rows: &[RowInput],
        positions: &[usize],
        mask: &AttentionMask,
        segment: u32,
    ) -> Result<Tensor> {
        self.calls += 1;
        self.model
            .forward_rows(&mut self.cache, rows, positions, mask, self.ops, segment)
    }

    /// Causal continuation of a purely sequential cache: positions equal
    /// physical rows.
    pub fn extend(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let base = self.cache.fill();
        let rows: Vec<RowInput> = tokens.iter().map(|&t| RowInput::Token(t)).collect();
        let positions: Vec<usize> = (base..base + tokens.len()).collect();
        let mask = AttentionMask::causal(tokens.len(), base);
        self.run(&rows, &positions, &mask, CONTEXT_SEGMENT)
    }

    /// Greedy continuation after `prompt`. When `forced_first` is set it
    /// replaces the first sampled token. Stops after `max_new` tokens or
    /// once `eos` is produced (eos is kept).
    pub fn greedy(
        &mut self,
        prompt: &[u32],
        max_new: usize,
        forced_first: Option<u32>,
        eos: Option<u32>,
    ) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(max_new);
        if max_new == 0 {
            return Ok(out);
        }
        let logits = self.extend(prompt)?;
        let mut next = forced_first.unwrap_or_else(|| argmax(logits.row(logits.rows() - 1)) as u32);
        loop {
            out.push(next);
            if out.len() == max_new || Some(next) == eos {
                return Ok(out);
            }
            let logits = self.extend(&[next])?;
            next = argmax(logits.row(0)) as u32;
        }
    }
}

/// Vanilla greedy decoding on a fresh session.
pub fn greedy_generate(model: &Model, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    Session::new(model).greedy(prompt, max_new, None, None)
}
