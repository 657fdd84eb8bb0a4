use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input rows available to one speculative step.
pub const DEFAULT_ROW_BUDGET: usize = 32;

/// Fan-out per draft depth. Every node at depth `j - 1` gets `b_j` children.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BranchConfig {
    branches: Vec<usize>,
}

impl BranchConfig {
    pub fn new(branches: Vec<usize>) -> Result<Self> {
        if branches.is_empty() || branches.contains(&0) {
            return Err(Error::Config(format!("branch config {branches:?} needs at least one depth, all widths >= 1")));
        }
        Ok(BranchConfig { branches })
    }

    pub fn branches(&self) -> &[usize] {
        &self.branches
    }

    /// Number of forecast slots `m`.
    pub fn depth(&self) -> usize {
        self.branches.len()
    }

    /// Nodes at each depth `1..=m`.
    pub fn nodes_per_depth(&self) -> Vec<usize> {
        self.branches
            .iter()
            .scan(1usize, |acc, &b| {
                *acc *= b;
                Some(*acc)
            })
            .collect()
    }

    pub fn draft_count(&self) -> usize {
        self.nodes_per_depth().iter().sum()
    }

    pub fn token_rows(&self) -> usize {
        1 + self.draft_count()
    }

    pub fn forecast_rows(&self) -> usize {
        self.token_rows() * self.depth()
    }

    pub fn total_rows(&self) -> usize {
        self.token_rows() * (1 + self.depth())
    }
}

impl TryFrom<Vec<usize>> for BranchConfig {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        BranchConfig::new(v)
    }
}

impl From<BranchConfig> for Vec<usize> {
    fn from(c: BranchConfig) -> Self {
        c.branches
    }
}

impl fmt::Display for BranchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.branches.iter().map(|b| b.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl FromStr for BranchConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let branches = inner
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad branch config '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        BranchConfig::new(branches)
    }
}

/// The nine reference branch configurations.
pub fn reference_configs() -> Vec<BranchConfig> {
    [
        vec![15],
        vec![1, 8],
        vec![2, 3],
        vec![3, 2],
        vec![4, 1],
        vec![1, 1, 5],
        vec![1, 2, 2],
        vec![2, 1, 1],
        vec![1, 1, 1, 2],
    ]
    .into_iter()
    .map(|b| BranchConfig::new(b).expect("static"))
    .collect()
}

/// Every config with `total_rows <= row_budget` and depth `<= max_depth`,
/// largest first, then lexicographic.
pub fn enumerate_branch_configs(row_budget: usize, max_depth: usize) -> Vec<BranchConfig> {
    fn walk(prefix: &mut Vec<usize>, budget: usize, max_depth: usize, out: &mut Vec<BranchConfig>) {
        for b in 1.. {
            prefix.push(b);
            let c = BranchConfig { branches: prefix.clone() };
            if c.total_rows() > budget {
                prefix.pop();
                break;
            }
            if prefix.len() < max_depth {
                walk(prefix, budget, max_depth, out);
            }
            out.push(c);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if row_budget >= 2 && max_depth >= 1 {
        walk(&mut Vec::new(), row_budget, max_depth, &mut out);
    }
    out.sort_by(|a, b| b.total_rows().cmp(&a.total_rows()).then_with(|| a.branches.cmp(&b.branches)));
    out
}

/// Analytic acceptance: at depth `j` each candidate rank independently hits
/// the true token with probability `per_rank[j]` (the last entry repeats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceModel {
    pub per_rank: Vec<f64>,
}

impl AcceptanceModel {
    pub fn new(per_rank: Vec<f64>) -> Result<Self> {
        if per_rank.is_empty() || per_rank.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("acceptance probabilities must lie in [0, 1]".into()));
        }
        Ok(AcceptanceModel { per_rank })
    }

    pub fn uniform(p: f64) -> Result<Self> {
        Self::new(vec![p])
    }

    /// Probability the true token is among `width` candidates at `depth` (0-based).
    pub fn hit(&self, depth: usize, width: usize) -> f64 {
        let q = self.per_rank[depth.min(self.per_rank.len() - 1)];
        1.0 - (1.0 - q).powi(width as i32)
    }

    /// Expected verified tokens per step.
    pub fn tokens_per_inference(&self, cfg: &BranchConfig) -> f64 {
        let mut reach = 1.0;
        let mut total = 1.0;
        for (j, &b) in cfg.branches().iter().enumerate() {
            reach *= self.hit(j, b);
            total += reach;
        }
        total
    }
}

/// Host step cost `c0 + c1 * rows` in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c0_ms: f64,
    pub c1_ms: f64,
}

impl CostModel {
    pub fn step_ms(&self, rows: usize) -> f64 {
        self.c0_ms + self.c1_ms * rows as f64
    }

    /// Least-squares line through `(rows, ms)` samples, clamped to non-negative coefficients.
    pub fn fit(samples: &[(usize, f64)]) -> Result<Self> {
        let n = samples.len() as f64;
        if samples.len() < 2 {
            return Err(Error::Config("cost fit needs at least two samples".into()));
        }
        let mx = samples.iter().map(|s| s.0 as f64).sum::<f64>() / n;
        let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
        let sxx: f64 = samples.iter().map(|s| (s.0 as f64 - mx).powi(2)).sum();
        if sxx == 0.0 {
            return Err(Error::Config("cost fit needs distinct row counts".into()));
        }
        let sxy: f64 = samples.iter().map(|s| (s.0 as f64 - mx) * (s.1 - my)).sum();
        let c1 = (sxy / sxx).max(0.0);
        Ok(CostModel {
            c0_ms: (my - c1 * mx).max(0.0),
            c1_ms: c1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub config: BranchConfig,
    pub total_rows: usize,
    pub tokens_per_inference: f64,
    pub step_ms: f64,
    pub tokens_per_sec: f64,
    pub best: bool,
}

/// Configs ranked by tokens/inference (ties: fewer rows, then lexicographic).
/// The first row is marked best.
pub fn optimize_branch_config(
    configs: &[BranchConfig],
    mut evaluate: impl FnMut(&BranchConfig) -> Result<f64>,
    cost: CostModel,
) -> Result<Vec<BranchRow>> {
    let mut rows = configs
        .iter()
        .map(|c| {
            let tpi = evaluate(c)?;
            let step_ms = cost.step_ms(c.total_rows());
            Ok(BranchRow {
                config: c.clone(),
                total_rows: c.total_rows(),
                tokens_per_inference: tpi,
                step_ms,
                tokens_per_sec: if step_ms > 0.0 { tpi * 1000.0 / step_ms } else { f64::INFINITY },
                best: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.tokens_per_inference
            .total_cmp(&a.tokens_per_inference)
            .then(a.total_rows.cmp(&b.total_rows))
            .then_with(|| a.config.cmp(&b.config))
    });
    if let Some(r) = rows.first_mut() {
        r.best = true;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bc(b: &[usize]) -> BranchConfig {
        BranchConfig::new(b.to_vec()).unwrap()
    }

    #[test]
    fn arithmetic() {
        let c = bc(&[3, 2]);
        assert_eq!((c.draft_count(), c.token_rows(), c.forecast_rows(), c.total_rows()), (9, 10, 20, 30));
        assert_eq!(bc(&[15]).total_rows(), 32);
        assert_eq!(bc(&[2, 3]).draft_count(), 8);
        assert_eq!(bc(&[1]).total_rows(), 4);
    }

    #[test]
    fn parse_and_display() {
        let c: BranchConfig = "3,2".parse().unwrap();
        assert_eq!(c, bc(&[3, 2]));
        assert_eq!(c.to_string(), "(3,2)");
        assert_eq!("(1,1,5)".parse::<BranchConfig>().unwrap(), bc(&[1, 1, 5]));
        assert!("3,0".parse::<BranchConfig>().is_err());
        assert!("".parse::<BranchConfig>().is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, "[3,2]");
        assert!(serde_json::from_str::<BranchConfig>("[]").is_err());
    }

    #[test]
    fn enumeration_is_ordered_and_bounded() {
        let all = enumerate_branch_configs(32, 4);
        assert!(all.iter().all(|c| c.total_rows() <= 32 && c.depth() <= 4));
        assert!(all.windows(2).all(|w| w[0].total_rows() >= w[1].total_rows()));
        assert_eq!(all[0].total_rows(), 32);
        assert!(enumerate_branch_configs(1, 4).is_empty());
        assert_eq!(enumerate_branch_configs(4, 4), vec![bc(&[1])]);
    }

    #[test]
    fn cost_fit_recovers_line() {
        let s: Vec<(usize, f64)> = [4, 8, 16, 32].iter().map(|&r| (r, 2.0 + 0.5 * r as f64)).collect();
        let c = CostModel::fit(&s).unwrap();
        assert!((c.c0_ms - 2.0).abs() < 1e-9 && (c.c1_ms - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ties_prefer_fewer_rows() {
        let cfgs = vec![bc(&[15]), bc(&[2, 3]), bc(&[1])];
        let rows = optimize_branch_config(&cfgs, |_| Ok(1.5), CostModel { c0_ms: 1.0, c1_ms: 0.1 }).unwrap();
        assert_eq!(rows[0].config, bc(&[1]));
        assert!(rows[0].best && !rows[1].best);
    }
}
