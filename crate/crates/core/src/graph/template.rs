use super::{Graph, NodeId, OpKind};
use crate::error::Result;
use crate::lora::LoraLayer;
use crate::model::{AttentionMask, LayerWeights, ModelConfig};
use crate::tensor::Tensor;

/// LoRA factors attached to the attention projections of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerLora<'a> {
    pub layer: &'a LoraLayer,
    pub scale: f32,
}

const MM: OpKind = OpKind::MatMul { transpose_b: false };

fn projection(
    g: &mut Graph,
    name: &str,
    x: NodeId,
    w: &Tensor,
    lora: Option<(&Tensor, &Tensor, f32)>,
) -> Result<NodeId> {
    let wc = g.add_constant(format!("{name}.w"), w.clone());
    let base = g.add_op(name, MM, vec![x, wc])?;
    let Some((a, b, s)) = lora else {
        return Ok(base);
    };
    let ac = g.add_constant(format!("{name}.lora_a"), a.clone());
    let bc = g.add_constant(format!("{name}.lora_b"), b.clone());
    let down = g.add_op(format!("{name}.lora_down"), MM, vec![x, ac])?;
    let up = g.add_op(format!("{name}.lora_up"), MM, vec![down, bc])?;
    let scaled = g.add_op(format!("{name}.lora_scale"), OpKind::MulScalar { s }, vec![up])?;
    g.add_op(format!("{name}.lora_add"), OpKind::Add, vec![base, scaled])
}

/// Canonical graph of one pre-norm decoder layer over `n` rows at positions
/// `0..n` with a causal mask. Input `x` is `[n, E]`; the single output is the
/// layer's residual stream.
pub fn decoder_layer_graph(cfg: &ModelConfig, w: &LayerWeights, n: usize, lora: Option<LayerLora<'_>>) -> Result<Graph> {
    cfg.validate()?;
    let mut g = Graph::new();
    let hd = cfg.head_dim();
    let lora_of = |slot: usize| lora.map(|l| (&l.layer.a[slot], &l.layer.b[slot], l.scale));

    let x = g.add_input("x", vec![n, cfg.embed_dim]);
    let attn_gain = g.add_constant("attn_norm.gain", w.attn_norm.clone());
    let xn = g.add_op("attn_norm", OpKind::RmsNorm { eps: cfg.rms_eps }, vec![x, attn_gain])?;
    let q = projection(&mut g, "q", xn, &w.wq, lora_of(0))?;
    let k = projection(&mut g, "k", xn, &w.wk, lora_of(1))?;
    let v = projection(&mut g, "v", xn, &w.wv, lora_of(2))?;
    let rope = OpKind::Rope {
        positions: (0..n).collect(),
        head_dim: hd,
        theta: cfg.rope_theta,
    };
    let qr = g.add_op("q.rope", rope.clone(), vec![q])?;
    let kr = g.add_op("k.rope", rope, vec![k])?;

    let split = OpKind::SplitHeads { heads: cfg.num_heads };
    let qh = g.add_op("q.heads", split.clone(), vec![qr])?;
    let kh = g.add_op("k.heads", split.clone(), vec![kr])?;
    let vh = g.add_op("v.heads", split, vec![v])?;
    let scores = g.add_op("scores", OpKind::MatMul { transpose_b: true }, vec![qh, kh])?;
    let scaled = g.add_op("scores.scale", OpKind::MulScalar { s: 1.0 / (hd as f32).sqrt() }, vec![scores])?;
    let mask = AttentionMask::causal(n, 0);
    let mask_c = g.add_constant("mask", Tensor::new(vec![n, n], (0..n).flat_map(|i| mask.row(i).to_vec()).collect())?);
    let masked = g.add_op("scores.mask", OpKind::Add, vec![scaled, mask_c])?;
    let probs = g.add_op("probs", OpKind::Softmax, vec![masked])?;
    let ctx = g.add_op("context", MM, vec![probs, vh])?;
    let merged = g.add_op("context.concat", OpKind::ConcatHeads, vec![ctx])?;
    let o = projection(&mut g, "o", merged, &w.wo, lora_of(3))?;
    let h = g.add_op("attn.residual", OpKind::Add, vec![x, o])?;

    let mlp_gain = g.add_constant("mlp_norm.gain", w.mlp_norm.clone());
    let hn = g.add_op("mlp_norm", OpKind::RmsNorm { eps: cfg.rms_eps }, vec![h, mlp_gain])?;
    let gate = projection(&mut g, "gate", hn, &w.w_gate, None)?;
    let up = projection(&mut g, "up", hn, &w.w_up, None)?;
    let act = g.add_op("gate.silu", OpKind::Silu, vec![gate])?;
    let prod = g.add_op("mlp.mul", OpKind::Mul, vec![act, up])?;
    let down = projection(&mut g, "down", prod, &w.w_down, None)?;
    let out = g.add_op("mlp.residual", OpKind::Add, vec![h, down])?;
    g.set_outputs(vec![out]);
    Ok(g)
}
