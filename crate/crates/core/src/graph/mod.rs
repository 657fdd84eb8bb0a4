//! Tensor-operation graph for one decoder layer, a reference interpreter,
//! and output-preserving rewrite passes.

mod eval;
mod io;
mod passes;
mod report;
mod template;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KLayout;
use crate::tensor::Tensor;

pub use eval::{evaluate, run};
pub use io::{load_graph, save_graph};
pub use passes::{
    apply_pass, pass_constant_fold, pass_fuse, pass_k_layout, pass_linear_to_conv, pass_mha_to_sha,
    pass_mha_to_sha_with, LoraBMode, PassName,
};
pub use report::{graph_stats, pass_report, GraphStats, PassReport};
pub use template::{decoder_layer_graph, LayerLora};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpKind {
    MatMul { transpose_b: bool },
    /// `[n,1,1,in]` input, `[out,in,1,1]` kernel.
    Conv1x1,
    Add,
    Mul,
    MulScalar { s: f32 },
    /// Inputs: x, gain.
    RmsNorm { eps: f32 },
    Rope { positions: Vec<usize>, head_dim: usize, theta: f32 },
    Softmax,
    /// `[n, H*d]` to `[H, n, d]`.
    SplitHeads { heads: usize },
    /// One `[H, n, d]` input, or several `[n, d_i]` inputs joined by column.
    ConcatHeads,
    Transpose,
    Reshape { shape: Vec<usize> },
    Silu,
    SliceCols { start: usize, end: usize },
    /// Inner kinds in application order. The first consumes its full arity;
    /// each later kind consumes the running value plus arity-1 inputs.
    Fused { kinds: Vec<OpKind> },
}

impl OpKind {
    pub fn label(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MulScalar { .. } => "mul_scalar",
            OpKind::RmsNorm { .. } => "rmsnorm",
            OpKind::Rope { .. } => "rope",
            OpKind::Softmax => "softmax",
            OpKind::SplitHeads { .. } => "split_heads",
            OpKind::ConcatHeads => "concat_heads",
            OpKind::Transpose => "transpose",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Silu => "silu",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Fused { .. } => "fused",
        }
    }

    /// Number of tensor inputs, or `None` for variadic kinds.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul { .. } | OpKind::Conv1x1 | OpKind::Add | OpKind::Mul | OpKind::RmsNorm { .. } => Some(2),
            OpKind::ConcatHeads => None,
            OpKind::Fused { kinds } => {
                let mut it = kinds.iter();
                let first = it.next()?.arity()?;
                it.try_fold(first, |acc, k| Some(acc + k.arity()? - 1))
            }
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeOp {
    Input,
    Constant,
    Compute { op: OpKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// A dataflow graph. Node ids are indices into `nodes`; constant payloads
/// live in `constants` keyed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    constants: std::collections::BTreeMap<NodeId, Tensor>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    k_layout: KLayout,
    history: Vec<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            constants: Default::default(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            k_layout: KLayout::KPlain,
            history: Vec::new(),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn constant(&self, id: NodeId) -> Option<&Tensor> {
        self.constants.get(&id)
    }

    pub fn constants(&self) -> &std::collections::BTreeMap<NodeId, Tensor> {
        &self.constants
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn k_layout(&self) -> KLayout {
        self.k_layout
    }

    /// Passes applied so far, with any diagnostics.
    pub fn history(&self) -> &[String] {
        &self.history
    }

    pub fn op(&self, id: NodeId) -> Option<&OpKind> {
        match &self.nodes[id].op {
            NodeOp::Compute { op } => Some(op),
            _ => None,
        }
    }

    pub fn is_constant(&self, id: NodeId) -> bool {
        self.nodes[id].op == NodeOp::Constant
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn add_input(&mut self, name: impl Into<String>, shape: Vec<usize>) -> NodeId {
        let id = self.push_node(Node {
            name: name.into(),
            op: NodeOp::Input,
            inputs: vec![],
            shape,
        });
        self.inputs.push(id);
        id
    }

    pub fn add_constant(&mut self, name: impl Into<String>, t: Tensor) -> NodeId {
        let id = self.push_node(Node {
            name: name.into(),
            op: NodeOp::Constant,
            inputs: vec![],
            shape: t.shape().to_vec(),
        });
        self.constants.insert(id, t);
        id
    }

    /// Append a compute node, inferring and checking its output shape.
    pub fn add_op(&mut self, name: impl Into<String>, op: OpKind, inputs: Vec<NodeId>) -> Result<NodeId> {
        let name = name.into();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Graph(format!("{name}: unknown input {bad}")));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
        let shape = infer_shape(&op, &shapes).map_err(|e| Error::Graph(format!("{name}: {e}")))?;
        Ok(self.push_node(Node {
            name,
            op: NodeOp::Compute { op },
            inputs,
            shape,
        }))
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) {
        self.outputs = outputs;
    }

    pub(crate) fn set_k_layout(&mut self, layout: KLayout) {
        self.k_layout = layout;
    }

    pub(crate) fn push_history(&mut self, entry: impl Into<String>) {
        self.history.push(entry.into());
    }

    fn push_node(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Number of consumers of each node; graph outputs count as consumers.
    pub fn consumer_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                c[i] += 1;
            }
        }
        for &o in &self.outputs {
            c[o] += 1;
        }
        c
    }

    /// Topological order of every node; errors on a cycle or dangling input.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut users = vec![Vec::new(); n];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                if i >= n {
                    return Err(Error::Graph(format!("node {id} reads unknown node {i}")));
                }
                indeg[id] += 1;
                users[i].push(id);
            }
        }
        let mut ready: Vec<NodeId> = (0..n).rev().filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(id) = ready.pop() {
            order.push(id);
            for &u in users[id].iter().rev() {
                indeg[u] -= 1;
                if indeg[u] == 0 {
                    ready.push(u);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Cycle);
        }
        Ok(order)
    }

    /// Structural validation: acyclic, shapes consistent, constants present.
    pub fn validate(&self) -> Result<()> {
        self.topo_order()?;
        for (id, node) in self.nodes.iter().enumerate() {
            match &node.op {
                NodeOp::Input => {}
                NodeOp::Constant => {
                    let t = self
                        .constants
                        .get(&id)
                        .ok_or_else(|| Error::Graph(format!("constant {} has no payload", node.name)))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Graph(format!("constant {} shape mismatch", node.name)));
                    }
                }
                NodeOp::Compute { op } => {
                    let shapes: Vec<&[usize]> = node.inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
                    let s = infer_shape(op, &shapes).map_err(|e| Error::Graph(format!("{}: {e}", node.name)))?;
                    if s != node.shape {
                        return Err(Error::Graph(format!("{}: recorded shape {:?}, inferred {s:?}", node.name, node.shape)));
                    }
                }
            }
        }
        if let Some(&o) = self.outputs.iter().find(|&&o| o >= self.nodes.len()) {
            return Err(Error::Graph(format!("unknown output {o}")));
        }
        Ok(())
    }

    /// Copy of the graph keeping only nodes reachable from the outputs
    /// (inputs are always kept, in order).
    pub fn pruned(&self) -> Graph {
        let mut live = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = self.outputs.clone();
        while let Some(id) = stack.pop() {
            if !live[id] {
                live[id] = true;
                stack.extend(&self.nodes[id].inputs);
            }
        }
        for &i in &self.inputs {
            live[i] = true;
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut g = Graph {
            k_layout: self.k_layout,
            history: self.history.clone(),
            ..Graph::default()
        };
        for (id, node) in self.nodes.iter().enumerate() {
            if !live[id] {
                continue;
            }
            remap[id] = g.nodes.len();
            let mut n = node.clone();
            n.inputs = n.inputs.iter().map(|&i| remap[i]).collect();
            if let Some(t) = self.constants.get(&id) {
                g.constants.insert(g.nodes.len(), t.clone());
            }
            g.nodes.push(n);
        }
        g.inputs = self.inputs.iter().map(|&i| remap[i]).collect();
        g.outputs = self.outputs.iter().map(|&o| remap[o]).collect();
        g
    }
}

fn expect(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::dim(msg()))
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn matmul_shape(a: &[usize], b: &[usize], transpose_b: bool) -> Result<Vec<usize>> {
    expect(a.len() >= 2 && b.len() >= 2, || format!("matmul needs 2-D operands, got {a:?} x {b:?}"))?;
    let (k, m) = (a[a.len() - 1], a[a.len() - 2]);
    let (bk, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    let batch_ok = b.len() == 2 || a[..a.len() - 2] == b[..b.len() - 2];
    expect(k == bk && batch_ok, || format!("matmul {a:?} x {b:?} (transpose_b={transpose_b})"))?;
    let mut s = a[..a.len() - 2].to_vec();
    s.extend([m, n]);
    Ok(s)
}

/// Output shape of `op` applied to inputs of the given shapes.
pub fn infer_shape(op: &OpKind, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    if let Some(a) = op.arity() {
        expect(inputs.len() == a, || format!("{} expects {a} inputs, got {}", op.label(), inputs.len()))?;
    }
    let x = inputs.first().copied().unwrap_or(&[]);
    match op {
        OpKind::MatMul { transpose_b } => matmul_shape(x, inputs[1], *transpose_b),
        OpKind::Conv1x1 => {
            let k = inputs[1];
            expect(x.len() == 4 && x[1] == 1 && x[2] == 1, || format!("conv1x1 input {x:?}"))?;
            expect(k.len() == 4 && k[2] == 1 && k[3] == 1 && k[1] == x[3], || format!("conv1x1 kernel {k:?} for {x:?}"))?;
            Ok(vec![x[0], 1, 1, k[0]])
        }
        OpKind::Add | OpKind::Mul => {
            expect(broadcast_ok(x, inputs[1]), || format!("{} {x:?} with {:?}", op.label(), inputs[1]))?;
            Ok(x.to_vec())
        }
        OpKind::RmsNorm { .. } => {
            expect(x.len() == 2 && inputs[1] == [x[1]], || format!("rmsnorm {x:?} gain {:?}", inputs[1]))?;
            Ok(x.to_vec())
        }
        OpKind::Rope { positions, head_dim, .. } => {
            expect(x.len() == 2 && x[0] == positions.len(), || format!("rope input {x:?} for {} positions", positions.len()))?;
            expect(*head_dim > 0 && head_dim % 2 == 0 && x[1] % head_dim == 0, || format!("rope head_dim {head_dim} for width {}", x[1]))?;
            Ok(x.to_vec())
        }
        OpKind::MulScalar { .. } | OpKind::Silu => Ok(x.to_vec()),
        OpKind::Softmax => {
            expect(!x.is_empty(), || "softmax of a scalar".into())?;
            Ok(x.to_vec())
        }
        OpKind::SplitHeads { heads } => {
            expect(x.len() == 2 && *heads > 0 && x[1] % heads == 0, || format!("split_heads {heads} of {x:?}"))?;
            Ok(vec![*heads, x[0], x[1] / heads])
        }
        OpKind::ConcatHeads => match inputs {
            [one] if one.len() == 3 => Ok(vec![one[1], one[0] * one[2]]),
            parts => {
                expect(!parts.is_empty(), || "concat_heads without inputs".into())?;
                let rows = parts[0].first().copied().unwrap_or(0);
                expect(parts.iter().all(|p| p.len() == 2 && p[0] == rows), || format!("concat_heads parts {parts:?}"))?;
                Ok(vec![rows, parts.iter().map(|p| p[1]).sum()])
            }
        },
        OpKind::Transpose => {
            expect(x.len() >= 2, || format!("transpose of {x:?}"))?;
            let mut s = x.to_vec();
            let n = s.len();
            s.swap(n - 2, n - 1);
            Ok(s)
        }
        OpKind::Reshape { shape } => {
            expect(shape.iter().product::<usize>() == x.iter().product::<usize>(), || format!("reshape {x:?} to {shape:?}"))?;
            Ok(shape.clone())
        }
        OpKind::SliceCols { start, end } => {
            expect(x.len() == 2 && start < end && *end <= x[1], || format!("slice {start}..{end} of {x:?}"))?;
            Ok(vec![x[0], end - start])
        }
        OpKind::Fused { kinds } => {
            expect(!kinds.is_empty(), || "empty fused node".into())?;
            let mut cursor = 0;
            let mut cur: Vec<usize> = Vec::new();
            for (i, k) in kinds.iter().enumerate() {
                let a = k.arity().ok_or_else(|| Error::dim("variadic kind inside fused node"))?;
                let mut args: Vec<&[usize]> = Vec::new();
                if i > 0 {
                    args.push(&cur);
                }
                let take = if i == 0 { a } else { a - 1 };
                args.extend(inputs[cursor..cursor + take].iter().copied());
                cursor += take;
                cur = infer_shape(k, &args)?;
            }
            Ok(cur)
        }
    }
}
