use crate::error::{Error, Result};

/// Additive value for hidden positions. Large enough that `exp` underflows
/// to exactly zero after max-subtraction.
pub const MASK_HIDDEN: f32 = -1e9;

/// Additive attention mask: `0` where query row `i` may see column `j`,
/// [`MASK_HIDDEN`] elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl AttentionMask {
    /// Build from a visibility predicate.
    pub fn from_fn(rows: usize, cols: usize, visible: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(if visible(i, j) { 0.0 } else { MASK_HIDDEN });
            }
        }
        AttentionMask { rows, cols, data }
    }

    /// Causal continuation: `rows` new positions after `cached` visible rows.
    pub fn causal(rows: usize, cached: usize) -> Self {
        Self::from_fn(rows, cached + rows, |i, j| j <= cached + i)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.value(i, j) == 0.0
    }

    pub fn visible_cols(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.is_visible(i, j)).collect()
    }

    pub fn set_visible(&mut self, i: usize, j: usize, visible: bool) {
        self.data[i * self.cols + j] = if visible { 0.0 } else { MASK_HIDDEN };
    }

    /// Every row must see at least one column.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).contains(&0.0) {
                return Err(Error::dim(format!("mask row {i} has no visible column")));
            }
        }
        Ok(())
    }

    /// Render as a grid of `1` (visible) and `.` (hidden).
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                s.push(if self.is_visible(i, j) { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}
