use serde::{Deserialize, Serialize};

use super::{DraftTree, ForecastState};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, RowInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RowKind {
    Prefix { index: usize },
    Token { node: usize },
    /// Slot `slot` (1-based) attached to token row `group`.
    Forecast { group: usize, slot: usize },
}

/// Row structure of one call: new prefix rows, then token rows (a forest
/// given by `parents`), then `m` forecast rows per entry of `groups`.
/// Cached columns hold `prefix_cached` prefix rows followed by
/// `context_cached` token rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepLayout {
    pub prefix_cached: usize,
    pub context_cached: usize,
    pub new_prefix: usize,
    pub parents: Vec<Option<usize>>,
    pub groups: Vec<usize>,
    pub m: usize,
}

impl StepLayout {
    pub fn token_rows(&self) -> usize {
        self.parents.len()
    }

    pub fn rows(&self) -> usize {
        self.new_prefix + self.token_rows() + self.groups.len() * self.m
    }

    pub fn cached(&self) -> usize {
        self.prefix_cached + self.context_cached
    }

    pub fn kinds(&self) -> Vec<RowKind> {
        let mut k: Vec<RowKind> = (0..self.new_prefix).map(|index| RowKind::Prefix { index }).collect();
        k.extend((0..self.token_rows()).map(|node| RowKind::Token { node }));
        for &group in &self.groups {
            k.extend((1..=self.m).map(|slot| RowKind::Forecast { group, slot }));
        }
        k
    }

    /// Row index of forecast slot `slot` for the `gi`-th group.
    pub fn forecast_row(&self, gi: usize, slot: usize) -> usize {
        self.new_prefix + self.token_rows() + gi * self.m + slot - 1
    }

    fn chain(&self, mut node: usize) -> Vec<usize> {
        let mut c = vec![node];
        while let Some(p) = self.parents[node] {
            c.push(p);
            node = p;
        }
        c
    }

    pub fn mask(&self) -> AttentionMask {
        let kinds = self.kinds();
        let cached = self.cached();
        let chains: Vec<Vec<usize>> = (0..self.token_rows()).map(|n| self.chain(n)).collect();
        let mut mask = AttentionMask::from_fn(kinds.len(), cached + kinds.len(), |_, _| false);
        let tok = |n: usize| cached + self.new_prefix + n;
        for (r, kind) in kinds.iter().enumerate() {
            let mut see = |c: usize| mask.set_visible(r, c, true);
            match *kind {
                RowKind::Prefix { index } => {
                    (0..self.prefix_cached).for_each(&mut see);
                    (0..=index).for_each(|i| see(cached + i));
                }
                RowKind::Token { node } => {
                    (self.prefix_cached..cached).for_each(&mut see);
                    chains[node].iter().for_each(|&n| see(tok(n)));
                }
                RowKind::Forecast { group, slot } => {
                    (0..cached + self.new_prefix).for_each(&mut see);
                    chains[group].iter().for_each(|&n| see(tok(n)));
                    let gi = self.groups.iter().position(|&g| g == group).expect("group");
                    (1..=slot).for_each(|s| see(cached + self.forecast_row(gi, s)));
                }
            }
        }
        mask
    }
}

/// Rows, kinds, logical positions and mask for one model call.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub rows: Vec<RowInput>,
    pub kinds: Vec<RowKind>,
    pub positions: Vec<usize>,
    pub mask: AttentionMask,
    pub layout: StepLayout,
}

fn build(layout: StepLayout, tokens: &[u32], token_positions: &[usize], fs: &ForecastState) -> StepInput {
    let kinds = layout.kinds();
    let mut rows = Vec::with_capacity(kinds.len());
    let mut positions = Vec::with_capacity(kinds.len());
    for kind in &kinds {
        match *kind {
            RowKind::Prefix { index } => {
                rows.push(RowInput::Embedding(fs.prefix().row(index).to_vec()));
                positions.push(index);
            }
            RowKind::Token { node } => {
                rows.push(RowInput::Token(tokens[node]));
                positions.push(token_positions[node]);
            }
            RowKind::Forecast { group, slot } => {
                rows.push(RowInput::Embedding(fs.embeddings().row(slot - 1).to_vec()));
                positions.push(token_positions[group] + slot);
            }
        }
    }
    let mask = layout.mask();
    StepInput {
        rows,
        kinds,
        positions,
        mask,
        layout,
    }
}

/// First call: forecast prefix, the prompt, and one forecast group on the
/// last prompt token.
pub fn assemble_prefill_input(prompt: &[u32], fs: &ForecastState) -> Result<StepInput> {
    if prompt.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    let n = prompt.len();
    let layout = StepLayout {
        prefix_cached: 0,
        context_cached: 0,
        new_prefix: fs.prefix_len(),
        parents: (0..n).map(|i| i.checked_sub(1)).collect(),
        groups: vec![n - 1],
        m: fs.slots(),
    };
    let positions: Vec<usize> = (0..n).collect();
    Ok(build(layout, prompt, &positions, fs))
}

/// Verification step: the tree's token rows, then a forecast group for
/// every token row. `context_len` verified tokens are cached after the
/// prefix; the root sits at `root_position`.
pub fn assemble_step_input(
    tree: &DraftTree,
    fs: &ForecastState,
    context_len: usize,
    root_position: usize,
    row_budget: usize,
) -> Result<StepInput> {
    if tree.depth() != fs.slots() {
        return Err(Error::Draft(format!("tree depth {} with {} forecast slots", tree.depth(), fs.slots())));
    }
    let m = fs.slots();
    let rows = tree.len() * (1 + m);
    if rows > row_budget {
        return Err(Error::RowBudget { rows, budget: row_budget });
    }
    let layout = StepLayout {
        prefix_cached: fs.prefix_len(),
        context_cached: context_len,
        new_prefix: 0,
        parents: tree.parents(),
        groups: (0..tree.len()).collect(),
        m,
    };
    let tokens: Vec<u32> = tree.nodes().iter().map(|n| n.token).collect();
    let positions: Vec<usize> = tree.nodes().iter().map(|n| root_position + n.depth).collect();
    Ok(build(layout, &tokens, &positions, fs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn fs(p: usize, m: usize) -> ForecastState {
        ForecastState::new(Tensor::zeros(&[p, 4]), Tensor::zeros(&[m, 4])).unwrap()
    }

    #[test]
    fn prefill_layout() {
        let s = assemble_prefill_input(&[5, 6, 7], &fs(2, 2)).unwrap();
        assert_eq!(s.rows.len(), 2 + 3 + 2);
        assert_eq!(s.positions, vec![0, 1, 0, 1, 2, 3, 4]);
        let m = &s.mask;
        assert_eq!(m.visible_cols(1), vec![0, 1]);
        assert_eq!(m.visible_cols(3), vec![2, 3]);
        assert_eq!(m.visible_cols(6), vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn step_rows_and_budget() {
        let t = DraftTree::from_candidates(1, &[vec![2, 3, 4], vec![5, 6]]).unwrap();
        let s = assemble_step_input(&t, &fs(4, 2), 6, 9, 32).unwrap();
        assert_eq!(s.rows.len(), 30);
        assert_eq!(s.rows.iter().filter(|r| matches!(r, RowInput::Token(_))).count(), 10);
        assert!(matches!(
            assemble_step_input(&t, &fs(4, 2), 6, 9, 29),
            Err(Error::RowBudget { rows: 30, budget: 29 })
        ));
        let t1 = DraftTree::from_candidates(1, &[vec![2]]).unwrap();
        assert_eq!(assemble_step_input(&t1, &fs(4, 1), 0, 0, 32).unwrap().rows.len(), 4);
    }
}
