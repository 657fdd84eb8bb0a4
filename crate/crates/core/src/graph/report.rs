use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Graph, NodeOp, OpKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub constant_bytes: usize,
    pub macs: u64,
    /// Matmuls whose operands are both activations.
    pub attention_matmuls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub before: GraphStats,
    pub after: GraphStats,
}

fn matmul_macs(a: &[usize], b: &[usize], transpose_b: bool) -> u64 {
    let batch: usize = a[..a.len() - 2].iter().product();
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let n = if transpose_b { b[b.len() - 2] } else { b[b.len() - 1] };
    (batch * m * k * n) as u64
}

fn op_macs(op: &OpKind, shapes: &[&[usize]]) -> u64 {
    match op {
        OpKind::MatMul { transpose_b } => matmul_macs(shapes[0], shapes[1], *transpose_b),
        OpKind::Conv1x1 => (shapes[0][0] * shapes[0][3] * shapes[1][0]) as u64,
        OpKind::Fused { kinds } => op_macs(&kinds[0], shapes),
        _ => 0,
    }
}

pub fn graph_stats(g: &Graph) -> GraphStats {
    let mut by_kind = BTreeMap::new();
    let mut macs = 0;
    let mut attention_matmuls = 0;
    for node in g.nodes() {
        let label = match &node.op {
            NodeOp::Input => "input",
            NodeOp::Constant => "constant",
            NodeOp::Compute { op } => {
                let shapes: Vec<&[usize]> = node.inputs.iter().map(|&i| g.shape(i)).collect();
                macs += op_macs(op, &shapes);
                if matches!(op, OpKind::MatMul { .. }) && node.inputs.iter().all(|&i| !g.is_constant(i)) {
                    attention_matmuls += 1;
                }
                op.label()
            }
        };
        *by_kind.entry(label.to_string()).or_insert(0) += 1;
    }
    GraphStats {
        nodes: g.nodes().len(),
        by_kind,
        constant_bytes: g.constants().values().map(|t| t.numel() * 4).sum(),
        macs,
        attention_matmuls,
    }
}

pub fn pass_report(before: &Graph, after: &Graph) -> PassReport {
    PassReport {
        before: graph_stats(before),
        after: graph_stats(after),
    }
}
