use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Storage order of the K store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KLayout {
    /// One row of `L` values per cached position.
    KPlain,
    /// One row of `capacity` values per latent channel.
    KTransposed,
}

/// A contiguous run of cache rows owned by one logical stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct LayerStore {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Per-layer key/value store with a fixed capacity and a segment table.
///
/// Rows `[0, fill)` are covered by the segment table in order. Rows written
/// by a forward call are appended at `fill`; callers that need a different
/// physical layout relocate them with [`KvCache::copy_row`] and
/// [`KvCache::truncate`] or [`KvCache::commit_rows`].
#[derive(Debug, Clone)]
pub struct KvCache {
    layout: KLayout,
    capacity: usize,
    width: usize,
    fill: usize,
    layers: Vec<LayerStore>,
    segments: Vec<Segment>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig, layout: KLayout) -> Self {
        Self::with_capacity(cfg.num_layers, cfg.latent_dim, cfg.max_seq_len, layout)
    }

    pub fn with_capacity(num_layers: usize, width: usize, capacity: usize, layout: KLayout) -> Self {
        let layers = (0..num_layers)
            .map(|_| LayerStore {
                k: vec![0.0; capacity * width],
                v: vec![0.0; capacity * width],
            })
            .collect();
        KvCache {
            layout,
            capacity,
            width,
            fill: 0,
            layers,
            segments: Vec::new(),
        }
    }

    pub fn layout(&self) -> KLayout {
        self.layout
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: u32) -> Option<Segment> {
        self.segments.iter().copied().find(|s| s.id == id)
    }

    pub fn check_room(&self, rows: usize) -> Result<()> {
        if self.fill + rows > self.capacity {
            return Err(Error::Capacity {
                needed: self.fill + rows,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    /// Write the key and value row for `slot` in `layer`.
    pub fn write(&mut self, layer: usize, slot: usize, k: &[f32], v: &[f32]) {
        let (w, cap) = (self.width, self.capacity);
        let store = &mut self.layers[layer];
        match self.layout {
            KLayout::KPlain => store.k[slot * w..(slot + 1) * w].copy_from_slice(k),
            KLayout::KTransposed => {
                for (c, &val) in k.iter().enumerate() {
                    store.k[c * cap + slot] = val;
                }
            }
        }
        store.v[slot * w..(slot + 1) * w].copy_from_slice(v);
    }

    /// Key row of `slot` in logical (row) order.
    pub fn k_row(&self, layer: usize, slot: usize) -> Vec<f32> {
        let (w, cap) = (self.width, self.capacity);
        let store = &self.layers[layer];
        match self.layout {
            KLayout::KPlain => store.k[slot * w..(slot + 1) * w].to_vec(),
            KLayout::KTransposed => (0..w).map(|c| store.k[c * cap + slot]).collect(),
        }
    }

    pub fn v_row(&self, layer: usize, slot: usize) -> &[f32] {
        let w = self.width;
        &self.layers[layer].v[slot * w..(slot + 1) * w]
    }

    /// `Σ_t q[t] · K[slot][offset + t]`, accumulated in ascending `t`.
    #[inline]
    pub(crate) fn k_dot(&self, layer: usize, slot: usize, offset: usize, q: &[f32]) -> f32 {
        let store = &self.layers[layer];
        let mut acc = 0.0f32;
        match self.layout {
            KLayout::KPlain => {
                let row = &store.k[slot * self.width + offset..slot * self.width + offset + q.len()];
                for (a, b) in q.iter().zip(row) {
                    acc += a * b;
                }
            }
            KLayout::KTransposed => {
                let cap = self.capacity;
                for (t, a) in q.iter().enumerate() {
                    acc += a * store.k[(offset + t) * cap + slot];
                }
            }
        }
        acc
    }

    /// Mark `rows` freshly written rows at the tail as belonging to `segment`.
    pub fn advance(&mut self, rows: usize, segment: u32) -> Result<()> {
        self.check_room(rows)?;
        if rows == 0 {
            return Ok(());
        }
        match self.segments.last_mut() {
            Some(last) if last.id == segment && last.start + last.len == self.fill => last.len += rows,
            _ => self.segments.push(Segment {
                id: segment,
                start: self.fill,
                len: rows,
            }),
        }
        self.fill += rows;
        Ok(())
    }

    /// Reserve `len` zeroed rows for a segment and return its start row.
    pub fn reserve(&mut self, segment: u32, len: usize) -> Result<usize> {
        self.check_room(len)?;
        let start = self.fill;
        for layer in 0..self.layers.len() {
            for slot in start..start + len {
                let zero = vec![0.0; self.width];
                self.write(layer, slot, &zero, &zero);
            }
        }
        self.advance(len, segment)?;
        Ok(start)
    }

    /// Copy row `src` onto row `dst` in every layer.
    pub fn copy_row(&mut self, src: usize, dst: usize) {
        if src == dst {
            return;
        }
        for layer in 0..self.layers.len() {
            let k = self.k_row(layer, src);
            let v = self.v_row(layer, src).to_vec();
            self.write(layer, dst, &k, &v);
        }
    }

    /// Drop every row at or beyond `fill`.
    pub fn truncate(&mut self, fill: usize) {
        if fill >= self.fill {
            return;
        }
        self.fill = fill;
        self.segments.retain(|s| s.start < fill);
        if let Some(last) = self.segments.last_mut() {
            last.len = last.len.min(fill - last.start);
        }
    }

    /// Keep the listed rows (ascending, each `>= base`) by packing them at
    /// `base..`, truncating everything after, and tagging them `segment`.
    pub fn commit_rows(&mut self, base: usize, rows: &[usize], segment: u32) -> Result<()> {
        for (i, &src) in rows.iter().enumerate() {
            if src < base + i || src >= self.fill {
                return Err(Error::dim(format!("commit row {src} outside [{}, {})", base + i, self.fill)));
            }
            self.copy_row(src, base + i);
        }
        self.truncate(base);
        self.advance(rows.len(), segment)
    }
}
