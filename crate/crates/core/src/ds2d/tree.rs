use serde::{Deserialize, Serialize};

use super::BranchConfig;
use crate::error::{Error, Result};
use crate::tensor::{argmax, top_k, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftNode {
    pub token: u32,
    pub depth: usize,
    pub parent: Option<usize>,
    /// Position of the token in its depth's candidate list.
    pub rank: usize,
}

/// Token tree rooted at the last verified token. Nodes are stored
/// breadth-first, children grouped by parent in candidate order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
    depth: usize,
}

impl DraftTree {
    /// Every node at depth `j - 1` receives all of `per_depth[j - 1]` as
    /// children.
    pub fn from_candidates(root: u32, per_depth: &[Vec<u32>]) -> Result<Self> {
        let mut nodes = vec![DraftNode {
            token: root,
            depth: 0,
            parent: None,
            rank: 0,
        }];
        let mut frontier = vec![0usize];
        for (j, cands) in per_depth.iter().enumerate() {
            if cands.is_empty() {
                return Err(Error::Draft(format!("no candidates at depth {}", j + 1)));
            }
            let mut sorted = cands.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != cands.len() {
                return Err(Error::Draft(format!("duplicate candidates at depth {}", j + 1)));
            }
            let mut next = Vec::with_capacity(frontier.len() * cands.len());
            for &p in &frontier {
                for (rank, &token) in cands.iter().enumerate() {
                    next.push(nodes.len());
                    nodes.push(DraftNode {
                        token,
                        depth: j + 1,
                        parent: Some(p),
                        rank,
                    });
                }
            }
            frontier = next;
        }
        Ok(DraftTree {
            nodes,
            depth: per_depth.len(),
        })
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn root(&self) -> u32 {
        self.nodes[0].token
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(move |(_, n)| n.parent == Some(i)).map(|(j, _)| j)
    }

    /// Root-first chain ending at `i`.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut at = i;
        while let Some(p) = self.nodes[at].parent {
            path.push(p);
            at = p;
        }
        path.reverse();
        path
    }
}

/// Tree from the seeding group's per-slot logits: depth `j` candidates are
/// the top `b_j` of slot `j`, ties to the lower id.
pub fn build_draft_tree(root: u32, slot_logits: &[&[f32]], config: &BranchConfig) -> Result<DraftTree> {
    if slot_logits.len() < config.depth() {
        return Err(Error::Draft(format!(
            "{} forecast logit rows for a depth-{} config",
            slot_logits.len(),
            config.depth()
        )));
    }
    let per_depth: Vec<Vec<u32>> = config
        .branches()
        .iter()
        .zip(slot_logits)
        .map(|(&b, l)| top_k(l, b).into_iter().map(|t| t as u32).collect())
        .collect();
    DraftTree::from_candidates(root, &per_depth)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationResult {
    /// Root-first accepted nodes.
    pub accepted_path: Vec<usize>,
    /// Accepted drafts plus the token produced at the frontier.
    pub accepted_count: usize,
    /// Greedy token at the frontier row; root of the next tree.
    pub next_token: u32,
    /// Node whose forecast group seeds the next tree.
    pub next_draft_source: usize,
}

impl VerificationResult {
    pub fn accepted_drafts(&self) -> usize {
        self.accepted_count - 1
    }
}

/// Greedy walk: a child is accepted when it equals the argmax of its
/// parent's row. `logits` rows `0..tree.len()` are the token rows.
pub fn verify_and_extend(logits: &Tensor, tree: &DraftTree) -> Result<VerificationResult> {
    if logits.rank() != 2 || logits.rows() < tree.len() {
        return Err(Error::Draft(format!("logits {:?} for {} token rows", logits.shape(), tree.len())));
    }
    let mut path = vec![0usize];
    let mut at = 0;
    loop {
        let want = argmax(logits.row(at)) as u32;
        match tree.children(at).find(|&c| tree.nodes[c].token == want) {
            Some(c) => {
                path.push(c);
                at = c;
            }
            None => {
                return Ok(VerificationResult {
                    accepted_count: path.len(),
                    accepted_path: path,
                    next_token: want,
                    next_draft_source: at,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_layout() {
        let t = DraftTree::from_candidates(9, &[vec![1, 2, 3], vec![4, 5]]).unwrap();
        assert_eq!(t.len(), 10);
        let d2: Vec<(u32, Option<usize>)> = t.nodes()[4..].iter().map(|n| (n.token, n.parent)).collect();
        assert_eq!(d2, vec![(4, Some(1)), (5, Some(1)), (4, Some(2)), (5, Some(2)), (4, Some(3)), (5, Some(3))]);
        assert_eq!(t.path_to(7), vec![0, 2, 7]);
        assert_eq!(t.children(3).collect::<Vec<_>>(), vec![8, 9]);
        assert!(DraftTree::from_candidates(0, &[vec![1, 1]]).is_err());
        assert!(DraftTree::from_candidates(0, &[vec![]]).is_err());
    }

    #[test]
    fn missing_slot_rows() {
        let cfg = BranchConfig::new(vec![2, 2]).unwrap();
        let l = [0.0f32; 4];
        assert!(build_draft_tree(0, &[&l], &cfg).is_err());
    }

    #[test]
    fn no_match_is_one_token() {
        let t = DraftTree::from_candidates(0, &[vec![1, 2]]).unwrap();
        let mut l = Tensor::zeros(&[3, 4]);
        l.row_mut(0)[3] = 1.0;
        let r = verify_and_extend(&l, &t).unwrap();
        assert_eq!((r.accepted_count, r.next_token, r.next_draft_source), (1, 3, 0));
    }
}
