use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::eval_op;
use super::{Graph, NodeId, NodeOp, OpKind};
use crate::error::{Error, Result};
use crate::model::KLayout;
use crate::tensor::Tensor;

/// Rebuilds a graph from its outputs. Rules may replace any node; nodes
/// that are not replaced are copied with rewritten inputs.
struct Rw<'g> {
    old: &'g Graph,
    new: Graph,
    memo: HashMap<NodeId, NodeId>,
    consumers: Vec<usize>,
}

trait Rule {
    fn apply(&mut self, rw: &mut Rw<'_>, id: NodeId) -> Result<Option<NodeId>>;
}

impl<'g> Rw<'g> {
    fn get(&mut self, rule: &mut dyn Rule, id: NodeId) -> Result<NodeId> {
        if let Some(&n) = self.memo.get(&id) {
            return Ok(n);
        }
        let n = match rule.apply(self, id)? {
            Some(n) => n,
            None => self.copy(rule, id)?,
        };
        self.memo.insert(id, n);
        Ok(n)
    }

    fn copy(&mut self, rule: &mut dyn Rule, id: NodeId) -> Result<NodeId> {
        let node = self.old.node(id).clone();
        match node.op {
            NodeOp::Input => Err(Error::Graph(format!("input {} is not registered", node.name))),
            NodeOp::Constant => {
                let t = self.old.constant(id).cloned().ok_or_else(|| Error::Graph(format!("constant {} has no payload", node.name)))?;
                Ok(self.new.add_constant(node.name, t))
            }
            NodeOp::Compute { op } => {
                let ins = self.get_all(rule, &node.inputs)?;
                self.new.add_op(node.name, op, ins)
            }
        }
    }

    fn get_all(&mut self, rule: &mut dyn Rule, ids: &[NodeId]) -> Result<Vec<NodeId>> {
        ids.iter().map(|&i| self.get(rule, i)).collect()
    }

    fn new_const(&self, id: NodeId) -> Option<&Tensor> {
        self.new.constant(id)
    }

    fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.old.node(id).inputs.clone()
    }

    fn name(&self, id: NodeId) -> String {
        self.old.node(id).name.clone()
    }
}

fn rewrite(old: &Graph, rule: &mut dyn Rule) -> Result<Graph> {
    old.validate()?;
    let mut rw = Rw {
        old,
        new: Graph {
            k_layout: old.k_layout,
            history: old.history.clone(),
            ..Graph::default()
        },
        memo: HashMap::new(),
        consumers: old.consumer_counts(),
    };
    for &i in old.inputs() {
        let n = old.node(i);
        let ni = rw.new.add_input(n.name.clone(), n.shape.clone());
        rw.memo.insert(i, ni);
    }
    let outs = old.outputs().to_vec();
    let outs = rw.get_all(rule, &outs)?;
    rw.new.set_outputs(outs);
    Ok(rw.new.pruned())
}

/// How the LoRA up-projection is handled when attention is split per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraBMode {
    /// Each head gets its own column block of B.
    #[default]
    Split,
    /// B is applied once at full width and the result is sliced per head.
    Composite,
}

// ---------------------------------------------------------------- MHA to SHA

struct Sha {
    mode: LoraBMode,
    cols_memo: HashMap<(NodeId, usize, usize), NodeId>,
    slab_memo: HashMap<(NodeId, usize), NodeId>,
    found: usize,
}

fn is_projection(g: &Graph, id: NodeId) -> bool {
    match g.op(id) {
        Some(OpKind::MatMul { transpose_b: false } | OpKind::Conv1x1) => true,
        Some(OpKind::Fused { kinds }) => matches!(kinds.first(), Some(OpKind::MatMul { transpose_b: false } | OpKind::Conv1x1)),
        Some(OpKind::Reshape { .. }) => is_projection(g, g.node(id).inputs[0]),
        _ => false,
    }
}

fn slice_const_cols(t: &Tensor, s: usize, e: usize) -> Result<Tensor> {
    match t.rank() {
        1 => Tensor::new(vec![e - s], t.data()[s..e].to_vec()),
        _ => t.slice_cols(s, e),
    }
}

impl Sha {
    fn fallback(&mut self, rw: &mut Rw<'_>, id: NodeId, s: usize, e: usize) -> Result<NodeId> {
        let src = rw.get(self, id)?;
        rw.new.add_op(format!("{}[{s}:{e}]", rw.name(id)), OpKind::SliceCols { start: s, end: e }, vec![src])
    }

    /// Columns `[s, e)` of a 2-D node, pushed as far upstream as possible.
    fn cols(&mut self, rw: &mut Rw<'_>, id: NodeId, s: usize, e: usize) -> Result<NodeId> {
        let width = rw.old.shape(id)[1];
        if s == 0 && e == width {
            return rw.get(self, id);
        }
        if let Some(&n) = self.cols_memo.get(&(id, s, e)) {
            return Ok(n);
        }
        let name = format!("{}[{s}:{e}]", rw.name(id));
        let ins = rw.inputs(id);
        let out = match rw.old.node(id).op.clone() {
            NodeOp::Constant => {
                let t = slice_const_cols(rw.old.constant(id).expect("validated"), s, e)?;
                rw.new.add_constant(name, t)
            }
            NodeOp::Input => self.fallback(rw, id, s, e)?,
            NodeOp::Compute { op } => match op {
                OpKind::MatMul { transpose_b: false }
                    if !(self.mode == LoraBMode::Composite && is_projection(rw.old, ins[0])) =>
                {
                    let w = rw.get(self, ins[1])?;
                    match rw.new_const(w).filter(|t| t.rank() == 2).map(|t| t.slice_cols(s, e)) {
                        Some(ws) => {
                            let x = rw.get(self, ins[0])?;
                            let wc = rw.new.add_constant(format!("{}[{s}:{e}]", rw.old.node(ins[1]).name), ws?);
                            rw.new.add_op(name, op, vec![x, wc])?
                        }
                        None => self.fallback(rw, id, s, e)?,
                    }
                }
                OpKind::Add | OpKind::Mul => {
                    let rhs_shape = rw.old.shape(ins[1]).to_vec();
                    if rhs_shape == rw.old.shape(id) {
                        let a = self.cols(rw, ins[0], s, e)?;
                        let b = self.cols(rw, ins[1], s, e)?;
                        rw.new.add_op(name, op, vec![a, b])?
                    } else if rhs_shape == [width] {
                        let a = self.cols(rw, ins[0], s, e)?;
                        let b = self.cols_1d(rw, ins[1], s, e)?;
                        rw.new.add_op(name, op, vec![a, b])?
                    } else {
                        self.fallback(rw, id, s, e)?
                    }
                }
                OpKind::MulScalar { .. } | OpKind::Silu => {
                    let a = self.cols(rw, ins[0], s, e)?;
                    rw.new.add_op(name, op, vec![a])?
                }
                OpKind::Rope { head_dim, .. } if s.is_multiple_of(head_dim) && e.is_multiple_of(head_dim) => {
                    let a = self.cols(rw, ins[0], s, e)?;
                    rw.new.add_op(name, op, vec![a])?
                }
                OpKind::SliceCols { start, .. } => self.cols(rw, ins[0], start + s, start + e)?,
                OpKind::ConcatHeads if rw.old.shape(ins[0]).len() == 2 => {
                    let mut off = 0;
                    let mut hit = None;
                    for &p in &ins {
                        let w = rw.old.shape(p)[1];
                        if s >= off && e <= off + w {
                            hit = Some((p, off));
                        }
                        off += w;
                    }
                    match hit {
                        Some((p, off)) => self.cols(rw, p, s - off, e - off)?,
                        None => self.fallback(rw, id, s, e)?,
                    }
                }
                OpKind::Reshape { .. } => self.cols_of_conv(rw, id, s, e)?,
                OpKind::Fused { kinds } => self.cols_of_fused(rw, id, &kinds, s, e)?,
                _ => self.fallback(rw, id, s, e)?,
            },
        };
        self.cols_memo.insert((id, s, e), out);
        Ok(out)
    }

    fn cols_1d(&mut self, rw: &mut Rw<'_>, id: NodeId, s: usize, e: usize) -> Result<NodeId> {
        let c = rw.get(self, id)?;
        match rw.new_const(c) {
            Some(t) => {
                let t = slice_const_cols(t, s, e)?;
                Ok(rw.new.add_constant(format!("{}[{s}:{e}]", rw.name(id)), t))
            }
            None => Err(Error::Graph(format!("cannot slice non-constant vector {}", rw.name(id)))),
        }
    }

    /// `reshape([n,C])(conv1x1(y, K))` sliced by output channel.
    fn cols_of_conv(&mut self, rw: &mut Rw<'_>, id: NodeId, s: usize, e: usize) -> Result<NodeId> {
        let conv = rw.inputs(id)[0];
        let n = rw.old.shape(id)[0];
        if rw.old.op(conv) != Some(&OpKind::Conv1x1)
            || rw.old.shape(conv) != [n, 1, 1, rw.old.shape(id)[1]]
            || (self.mode == LoraBMode::Composite && is_projection(rw.old, rw.old.node(conv).inputs[0]))
        {
            return self.fallback(rw, id, s, e);
        }
        let [y, k] = rw.inputs(conv)[..] else { unreachable!() };
        let kn = rw.get(self, k)?;
        let Some(kt) = rw.new_const(kn) else {
            return self.fallback(rw, id, s, e);
        };
        let cin = kt.shape()[1];
        let ks = Tensor::new(vec![e - s, cin, 1, 1], kt.data()[s * cin..e * cin].to_vec())?;
        let yn = rw.get(self, y)?;
        let kc = rw.new.add_constant(format!("{}[{s}:{e}]", rw.name(k)), ks);
        let c = rw.new.add_op(format!("{}[{s}:{e}]", rw.name(conv)), OpKind::Conv1x1, vec![yn, kc])?;
        rw.new.add_op(format!("{}[{s}:{e}]", rw.name(id)), OpKind::Reshape { shape: vec![n, e - s] }, vec![c])
    }

    /// Fused linear chains: slice the weight and any per-column vectors.
    fn cols_of_fused(&mut self, rw: &mut Rw<'_>, id: NodeId, kinds: &[OpKind], s: usize, e: usize) -> Result<NodeId> {
        let ins = rw.inputs(id);
        let width = rw.old.shape(id)[1];
        let simple = kinds[0] == (OpKind::MatMul { transpose_b: false })
            && kinds[1..].iter().all(|k| matches!(k, OpKind::Add | OpKind::Mul | OpKind::Silu | OpKind::MulScalar { .. }))
            && ins[2..].iter().all(|&i| rw.old.shape(i) == [width])
            && !(self.mode == LoraBMode::Composite && is_projection(rw.old, ins[0]));
        if !simple {
            return self.fallback(rw, id, s, e);
        }
        let w = rw.get(self, ins[1])?;
        let Some(wt) = rw.new_const(w).filter(|t| t.rank() == 2) else {
            return self.fallback(rw, id, s, e);
        };
        let ws = wt.slice_cols(s, e)?;
        let mut new_ins = vec![rw.get(self, ins[0])?];
        new_ins.push(rw.new.add_constant(format!("{}[{s}:{e}]", rw.name(ins[1])), ws));
        for &v in &ins[2..] {
            new_ins.push(self.cols_1d(rw, v, s, e)?);
        }
        rw.new.add_op(format!("{}[{s}:{e}]", rw.name(id)), OpKind::Fused { kinds: kinds.to_vec() }, new_ins)
    }

    /// Head `h` of a `[H, n, d]` node as a `[n, d]` node.
    fn slab(&mut self, rw: &mut Rw<'_>, id: NodeId, h: usize) -> Result<NodeId> {
        if let Some(&n) = self.slab_memo.get(&(id, h)) {
            return Ok(n);
        }
        let unsupported = |what: &str| Error::Graph(format!("cannot split {what} per head"));
        let Some(op) = rw.old.op(id).cloned() else {
            return Err(unsupported(&rw.name(id)));
        };
        let ins = rw.inputs(id);
        let name = format!("{}.h{h}", rw.name(id));
        let out = match &op {
            OpKind::SplitHeads { .. } => {
                let d = rw.old.shape(id)[2];
                self.cols(rw, ins[0], h * d, (h + 1) * d)?
            }
            OpKind::MatMul { .. }
            | OpKind::Add
            | OpKind::Mul
            | OpKind::MulScalar { .. }
            | OpKind::Softmax
            | OpKind::Silu
            | OpKind::Transpose => {
                let args = self.slab_args(rw, &ins, h)?;
                rw.new.add_op(name, op, args)?
            }
            OpKind::Fused { kinds }
                if kinds.iter().all(|k| {
                    matches!(
                        k,
                        OpKind::MatMul { .. } | OpKind::Add | OpKind::Mul | OpKind::MulScalar { .. } | OpKind::Softmax | OpKind::Silu | OpKind::Transpose
                    )
                }) =>
            {
                let args = self.slab_args(rw, &ins, h)?;
                rw.new.add_op(name, op, args)?
            }
            other => return Err(unsupported(other.label())),
        };
        self.slab_memo.insert((id, h), out);
        Ok(out)
    }

    fn slab_args(&mut self, rw: &mut Rw<'_>, ins: &[NodeId], h: usize) -> Result<Vec<NodeId>> {
        ins.iter()
            .map(|&i| if rw.old.shape(i).len() == 3 { self.slab(rw, i, h) } else { rw.get(self, i) })
            .collect()
    }
}

impl Rule for Sha {
    fn apply(&mut self, rw: &mut Rw<'_>, id: NodeId) -> Result<Option<NodeId>> {
        if rw.old.op(id) != Some(&OpKind::ConcatHeads) {
            return Ok(None);
        }
        let ins = rw.inputs(id);
        let heads = match ins[..] {
            [x] if rw.old.shape(x).len() == 3 => rw.old.shape(x)[0],
            _ => return Ok(None),
        };
        if heads < 2 {
            return Ok(None);
        }
        let parts = (0..heads).map(|h| self.slab(rw, ins[0], h)).collect::<Result<Vec<_>>>()?;
        self.found += 1;
        Ok(Some(rw.new.add_op(rw.name(id), OpKind::ConcatHeads, parts)?))
    }
}

/// Split every multi-head attention block into per-head chains with sliced
/// projection constants. A graph without a multi-head pattern is returned
/// unchanged with a diagnostic in its history.
pub fn pass_mha_to_sha(g: &Graph) -> Result<Graph> {
    pass_mha_to_sha_with(g, LoraBMode::Split)
}

pub fn pass_mha_to_sha_with(g: &Graph, mode: LoraBMode) -> Result<Graph> {
    let mut rule = Sha {
        mode,
        cols_memo: HashMap::new(),
        slab_memo: HashMap::new(),
        found: 0,
    };
    let mut out = match rewrite(g, &mut rule) {
        Ok(out) if rule.found > 0 => out,
        Ok(_) => return Ok(noted(g, "mha_to_sha: no multi-head attention pattern found")),
        Err(Error::Graph(msg)) => return Ok(noted(g, format!("mha_to_sha: skipped ({msg})"))),
        Err(e) => return Err(e),
    };
    out.push_history(format!("mha_to_sha({})", if mode == LoraBMode::Split { "lora_b_split" } else { "lora_b_composite" }));
    Ok(out)
}

fn noted(g: &Graph, msg: impl Into<String>) -> Graph {
    let mut g = g.clone();
    g.push_history(msg);
    g
}

// ------------------------------------------------------------ linear to conv

struct Conv;

impl Rule for Conv {
    fn apply(&mut self, rw: &mut Rw<'_>, id: NodeId) -> Result<Option<NodeId>> {
        let (kinds, fused) = match rw.old.op(id) {
            Some(OpKind::MatMul { transpose_b: false }) => (vec![], false),
            Some(OpKind::Fused { kinds }) if kinds[0] == (OpKind::MatMul { transpose_b: false }) => (kinds[1..].to_vec(), true),
            _ => return Ok(None),
        };
        let ins = rw.inputs(id);
        if rw.old.shape(ins[0]).len() != 2 {
            return Ok(None);
        }
        let w = rw.get(self, ins[1])?;
        let Some(wt) = rw.new_const(w).filter(|t| t.rank() == 2) else {
            return Ok(None);
        };
        let (cin, cout) = (wt.rows(), wt.cols());
        let kernel = wt.transpose()?.reshape(&[cout, cin, 1, 1])?;
        let n = rw.old.shape(ins[0])[0];
        let name = rw.name(id);
        let x = rw.get(self, ins[0])?;
        let x4 = rw.new.add_op(format!("{name}.nhwc"), OpKind::Reshape { shape: vec![n, 1, 1, cin] }, vec![x])?;
        let k = rw.new.add_constant(format!("{}.kernel", rw.name(ins[1])), kernel);
        let back = OpKind::Reshape { shape: vec![n, cout] };
        if !fused {
            let c = rw.new.add_op(format!("{name}.conv"), OpKind::Conv1x1, vec![x4, k])?;
            return Ok(Some(rw.new.add_op(name, back, vec![c])?));
        }
        let mut all = vec![OpKind::Conv1x1, back];
        all.extend(kinds);
        let mut args = vec![x4, k];
        args.extend(rw.get_all(self, &ins[2..])?);
        Ok(Some(rw.new.add_op(name, OpKind::Fused { kinds: all }, args)?))
    }
}

/// Replace every matmul with a constant 2-D weight by a 1x1 convolution.
pub fn pass_linear_to_conv(g: &Graph) -> Result<Graph> {
    let mut out = rewrite(g, &mut Conv)?;
    out.push_history("linear_to_conv");
    Ok(out)
}

// ------------------------------------------------------------ constant fold

struct Fold;

impl Fold {
    /// A node computing `s * id`, absorbing the scalar into a constant.
    fn scale_into(&mut self, rw: &mut Rw<'_>, id: NodeId, s: f32) -> Result<Option<NodeId>> {
        let name = format!("{}.scaled", rw.name(id));
        if let Some(t) = rw.old.constant(id) {
            let t = t.scale(s);
            return Ok(Some(rw.new.add_constant(name, t)));
        }
        if rw.consumers[id] != 1 || rw.old.op(id).is_none() {
            return Ok(None);
        }
        let op = rw.old.op(id).cloned().expect("checked");
        let ins = rw.inputs(id);
        let out = match &op {
            OpKind::MatMul { transpose_b } => {
                let w = rw.get(self, ins[1])?;
                let scaled_w = if *transpose_b { None } else { rw.new_const(w).map(|t| t.scale(s)) };
                if let Some(t) = scaled_w {
                    let x = rw.get(self, ins[0])?;
                    let c = rw.new.add_constant(format!("{}.scaled", rw.name(ins[1])), t);
                    Some(rw.new.add_op(name, op, vec![x, c])?)
                } else if let Some(a) = self.scale_into(rw, ins[0], s)? {
                    Some(rw.new.add_op(name, op, vec![a, w])?)
                } else {
                    None
                }
            }
            OpKind::Conv1x1 => {
                let k = rw.get(self, ins[1])?;
                match rw.new_const(k).map(|t| t.scale(s)) {
                    Some(t) => {
                        let x = rw.get(self, ins[0])?;
                        let c = rw.new.add_constant(format!("{}.scaled", rw.name(ins[1])), t);
                        Some(rw.new.add_op(name, op, vec![x, c])?)
                    }
                    None => None,
                }
            }
            OpKind::Add => match (self.scale_into(rw, ins[0], s)?, self.scale_into(rw, ins[1], s)?) {
                (Some(a), Some(b)) => Some(rw.new.add_op(name, op, vec![a, b])?),
                _ => None,
            },
            OpKind::Mul => match self.scale_into(rw, ins[0], s)? {
                Some(a) => {
                    let b = rw.get(self, ins[1])?;
                    Some(rw.new.add_op(name, op, vec![a, b])?)
                }
                None => None,
            },
            OpKind::MulScalar { s: t } => self.scale_into(rw, ins[0], s * t)?,
            OpKind::Rope { .. }
            | OpKind::SplitHeads { .. }
            | OpKind::Reshape { .. }
            | OpKind::Transpose
            | OpKind::SliceCols { .. } => match self.scale_into(rw, ins[0], s)? {
                Some(a) => Some(rw.new.add_op(name, op, vec![a])?),
                None => None,
            },
            _ => None,
        };
        Ok(out)
    }
}

impl Rule for Fold {
    fn apply(&mut self, rw: &mut Rw<'_>, id: NodeId) -> Result<Option<NodeId>> {
        let Some(op) = rw.old.op(id).cloned() else {
            return Ok(None);
        };
        let ins = rw.inputs(id);
        let new_ins = rw.get_all(self, &ins)?;
        if new_ins.iter().all(|&i| rw.new.is_constant(i)) {
            let args: Vec<&Tensor> = new_ins.iter().map(|&i| rw.new.constant(i).expect("constant")).collect();
            let t = eval_op(&op, &args)?;
            return Ok(Some(rw.new.add_constant(rw.name(id), t)));
        }
        if let OpKind::MulScalar { s } = op {
            if let Some(n) = self.scale_into(rw, ins[0], s)? {
                return Ok(Some(n));
            }
        }
        Ok(Some(rw.new.add_op(rw.name(id), op, new_ins)?))
    }
}

/// Evaluate all-constant subgraphs once and absorb scalar multiplies into
/// adjacent constant matrices.
pub fn pass_constant_fold(g: &Graph) -> Result<Graph> {
    let mut out = rewrite(g, &mut Fold)?;
    out.push_history("constant_fold");
    Ok(out)
}

// ---------------------------------------------------------------------- fuse

struct Fuse;

impl Fuse {
    /// Kinds and inputs of a fusable producer in the new graph.
    fn head(&self, rw: &Rw<'_>, old: NodeId, new: NodeId) -> Option<(Vec<OpKind>, Vec<NodeId>)> {
        if rw.consumers[old] != 1 || rw.old.outputs().contains(&old) {
            return None;
        }
        let node = rw.new.node(new);
        match rw.new.op(new)? {
            OpKind::MatMul { transpose_b: false } | OpKind::Conv1x1 if rw.new.is_constant(node.inputs[1]) => {
                Some((vec![rw.new.op(new)?.clone()], node.inputs.clone()))
            }
            OpKind::Fused { kinds } => Some((kinds.clone(), node.inputs.clone())),
            OpKind::Reshape { .. } => {
                let inner_old = rw.old.node(old).inputs[0];
                let (mut kinds, ins) = self.head(rw, inner_old, node.inputs[0])?;
                kinds.push(rw.new.op(new)?.clone());
                Some((kinds, ins))
            }
            _ => None,
        }
    }
}

impl Rule for Fuse {
    fn apply(&mut self, rw: &mut Rw<'_>, id: NodeId) -> Result<Option<NodeId>> {
        let op = match rw.old.op(id) {
            Some(op @ (OpKind::Silu | OpKind::Add)) => op.clone(),
            _ => return Ok(None),
        };
        let ins = rw.inputs(id);
        let src = rw.get(self, ins[0])?;
        let bias = match op {
            OpKind::Add => {
                let b = rw.get(self, ins[1])?;
                if !rw.new.is_constant(b) {
                    return Ok(Some(rw.new.add_op(rw.name(id), op, vec![src, b])?));
                }
                Some(b)
            }
            _ => None,
        };
        let Some((mut kinds, mut args)) = self.head(rw, ins[0], src) else {
            let args: Vec<NodeId> = std::iter::once(src).chain(bias).collect();
            return Ok(Some(rw.new.add_op(rw.name(id), op, args)?));
        };
        kinds.push(op);
        args.extend(bias);
        Ok(Some(rw.new.add_op(rw.name(id), OpKind::Fused { kinds }, args)?))
    }
}

/// Merge a linear op and a directly following activation or bias add.
pub fn pass_fuse(g: &Graph) -> Result<Graph> {
    let mut out = rewrite(g, &mut Fuse)?;
    out.push_history("fuse");
    Ok(out)
}

// ------------------------------------------------------------------ K layout

struct KLayoutRule(KLayout);

impl Rule for KLayoutRule {
    fn apply(&mut self, rw: &mut Rw<'_>, id: NodeId) -> Result<Option<NodeId>> {
        let ins = rw.inputs(id);
        match (self.0, rw.old.op(id)) {
            (KLayout::KTransposed, Some(OpKind::MatMul { transpose_b: true })) => {
                let args = rw.get_all(self, &ins)?;
                if args.iter().any(|&a| rw.new.is_constant(a)) {
                    return Ok(None);
                }
                let kt = rw.new.add_op(format!("{}.k_stored", rw.name(id)), OpKind::Transpose, vec![args[1]])?;
                Ok(Some(rw.new.add_op(rw.name(id), OpKind::MatMul { transpose_b: false }, vec![args[0], kt])?))
            }
            (KLayout::KPlain, Some(OpKind::MatMul { transpose_b: false })) => {
                let t = ins[1];
                if rw.old.op(t) != Some(&OpKind::Transpose) || rw.consumers[t] != 1 {
                    return Ok(None);
                }
                let k = rw.old.node(t).inputs[0];
                let (a, kn) = (rw.get(self, ins[0])?, rw.get(self, k)?);
                if rw.new.is_constant(kn) || rw.new.is_constant(a) {
                    return Ok(None);
                }
                Ok(Some(rw.new.add_op(rw.name(id), OpKind::MatMul { transpose_b: true }, vec![a, kn])?))
            }
            _ => Ok(None),
        }
    }
}

/// Switch the stored K operand of attention between row-major and
/// transposed layouts.
pub fn pass_k_layout(g: &Graph, layout: KLayout) -> Result<Graph> {
    if g.k_layout() == layout {
        return Ok(g.clone());
    }
    let mut out = rewrite(g, &mut KLayoutRule(layout))?;
    out.set_k_layout(layout);
    out.push_history(match layout {
        KLayout::KPlain => "k_layout(k_plain)",
        KLayout::KTransposed => "k_layout(k_transposed)",
    });
    Ok(out)
}

// ------------------------------------------------------------------- by name

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassName {
    MhaToSha,
    MhaToShaComposite,
    LinearToConv,
    ConstantFold,
    Fuse,
    KTransposed,
    KPlain,
}

impl PassName {
    pub const ALL: [PassName; 7] = [
        PassName::MhaToSha,
        PassName::MhaToShaComposite,
        PassName::LinearToConv,
        PassName::ConstantFold,
        PassName::Fuse,
        PassName::KTransposed,
        PassName::KPlain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PassName::MhaToSha => "sha",
            PassName::MhaToShaComposite => "sha_composite",
            PassName::LinearToConv => "conv",
            PassName::ConstantFold => "fold",
            PassName::Fuse => "fuse",
            PassName::KTransposed => "k_transposed",
            PassName::KPlain => "k_plain",
        }
    }
}

impl FromStr for PassName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sha" | "mha_to_sha" => Ok(PassName::MhaToSha),
            "sha_composite" => Ok(PassName::MhaToShaComposite),
            "conv" | "linear_to_conv" => Ok(PassName::LinearToConv),
            "fold" | "constant_fold" => Ok(PassName::ConstantFold),
            "fuse" => Ok(PassName::Fuse),
            "k_transposed" => Ok(PassName::KTransposed),
            "k_plain" => Ok(PassName::KPlain),
            other => Err(Error::Config(format!(
                "unknown pass '{other}' (expected one of {})",
                PassName::ALL.map(PassName::as_str).join(", ")
            ))),
        }
    }
}

pub fn apply_pass(g: &Graph, pass: PassName) -> Result<Graph> {
    match pass {
        PassName::MhaToSha => pass_mha_to_sha(g),
        PassName::MhaToShaComposite => pass_mha_to_sha_with(g, LoraBMode::Composite),
        PassName::LinearToConv => pass_linear_to_conv(g),
        PassName::ConstantFold => pass_constant_fold(g),
        PassName::Fuse => pass_fuse(g),
        PassName::KTransposed => pass_k_layout(g, KLayout::KTransposed),
        PassName::KPlain => pass_k_layout(g, KLayout::KPlain),
    }
}
