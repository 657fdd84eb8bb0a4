use std::collections::BTreeMap;

use super::{Graph, NodeId, NodeOp, OpKind};
use crate::error::{Error, Result};
use crate::model::ops::{apply_rope, rms_norm, silu, softmax_in_place};
use crate::tensor::Tensor;

/// Evaluate every node in topological order. Feeds are keyed by input name.
pub fn evaluate(g: &Graph, feeds: &BTreeMap<String, Tensor>) -> Result<BTreeMap<NodeId, Tensor>> {
    let order = g.topo_order()?;
    let mut values: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    for id in order {
        let node = g.node(id);
        let v = match &node.op {
            NodeOp::Input => {
                let t = feeds.get(&node.name).ok_or_else(|| Error::MissingFeed(node.name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::dim(format!("feed {} has shape {:?}, expected {:?}", node.name, t.shape(), node.shape)));
                }
                t.clone()
            }
            NodeOp::Constant => g
                .constant(id)
                .cloned()
                .ok_or_else(|| Error::Graph(format!("constant {} has no payload", node.name)))?,
            NodeOp::Compute { op } => {
                let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i]).collect();
                let out = eval_op(op, &args)?;
                if out.shape() != node.shape.as_slice() {
                    return Err(Error::dim(format!("{} produced {:?}, expected {:?}", node.name, out.shape(), node.shape)));
                }
                out
            }
        };
        values.insert(id, v);
    }
    Ok(values)
}

/// Evaluate and return the graph outputs in order.
pub fn run(g: &Graph, feeds: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>> {
    let values = evaluate(g, feeds)?;
    Ok(g.outputs().iter().map(|o| values[o].clone()).collect())
}

fn conv1x1(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, cin, cout) = (x.shape()[0], x.shape()[3], k.shape()[0]);
    let x2 = x.clone().reshape(&[n, cin])?;
    let k2 = k.clone().reshape(&[cout, cin])?;
    x2.matmul_t(&k2)?.reshape(&[n, 1, 1, cout])
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, w) = (x.rows(), x.cols());
    let d = w / heads;
    let mut data = Vec::with_capacity(x.numel());
    for h in 0..heads {
        for i in 0..n {
            data.extend_from_slice(&x.row(i)[h * d..(h + 1) * d]);
        }
    }
    Tensor::new(vec![heads, n, d], data)
}

fn concat_heads(parts: &[&Tensor]) -> Result<Tensor> {
    match parts {
        [one] if one.rank() == 3 => {
            let (h, n, d) = (one.shape()[0], one.shape()[1], one.shape()[2]);
            let mut data = Vec::with_capacity(one.numel());
            for i in 0..n {
                for head in 0..h {
                    let base = (head * n + i) * d;
                    data.extend_from_slice(&one.data()[base..base + d]);
                }
            }
            Tensor::new(vec![n, h * d], data)
        }
        _ => Tensor::concat_cols(parts),
    }
}

fn softmax_last(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("rank checked");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn eval_op(op: &OpKind, args: &[&Tensor]) -> Result<Tensor> {
    match op {
        OpKind::MatMul { transpose_b: false } => args[0].matmul(args[1]),
        OpKind::MatMul { transpose_b: true } => args[0].matmul_t(args[1]),
        OpKind::Conv1x1 => conv1x1(args[0], args[1]),
        OpKind::Add => args[0].add(args[1]),
        OpKind::Mul => args[0].mul(args[1]),
        OpKind::MulScalar { s } => Ok(args[0].scale(*s)),
        OpKind::RmsNorm { eps } => rms_norm(args[0], args[1], *eps),
        OpKind::Rope { positions, head_dim, theta } => apply_rope(args[0], positions, *head_dim, *theta),
        OpKind::Softmax => Ok(softmax_last(args[0])),
        OpKind::SplitHeads { heads } => split_heads(args[0], *heads),
        OpKind::ConcatHeads => concat_heads(args),
        OpKind::Transpose => args[0].transpose(),
        OpKind::Reshape { shape } => args[0].clone().reshape(shape),
        OpKind::Silu => Ok(args[0].map(silu)),
        OpKind::SliceCols { start, end } => args[0].slice_cols(*start, *end),
        OpKind::Fused { kinds } => {
            let mut cursor = 0;
            let mut cur: Option<Tensor> = None;
            for k in kinds {
                let a = k.arity().ok_or_else(|| Error::Graph("variadic kind inside fused node".into()))?;
                let mut call: Vec<&Tensor> = Vec::with_capacity(a);
                if let Some(c) = &cur {
                    call.push(c);
                }
                let take = a - call.len();
                call.extend(&args[cursor..cursor + take]);
                cursor += take;
                cur = Some(eval_op(k, &call)?);
            }
            cur.ok_or_else(|| Error::Graph("empty fused node".into()))
        }
    }
}
