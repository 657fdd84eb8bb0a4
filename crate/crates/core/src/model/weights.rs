use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// The frozen parameter set. Construction validates every shape; there is no
/// mutable access afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    token_embedding: Tensor,
    layers: Vec<LayerWeights>,
    final_norm: Tensor,
    lm_head: Option<Tensor>,
}

const LAYER_TENSORS: [&str; 9] = [
    "wq", "wk", "wv", "wo", "attn_norm", "mlp_norm", "w_gate", "w_up", "w_down",
];

impl LayerWeights {
    fn get(&self, name: &str) -> &Tensor {
        match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "attn_norm" => &self.attn_norm,
            "mlp_norm" => &self.mlp_norm,
            "w_gate" => &self.w_gate,
            "w_up" => &self.w_up,
            "w_down" => &self.w_down,
            _ => unreachable!("unknown layer tensor {name}"),
        }
    }

    fn expected_shape(cfg: &ModelConfig, name: &str) -> Vec<usize> {
        let (e, l, h) = (cfg.embed_dim, cfg.latent_dim, cfg.mlp_hidden);
        match name {
            "wq" | "wk" | "wv" => vec![e, l],
            "wo" => vec![l, e],
            "attn_norm" | "mlp_norm" => vec![e],
            "w_gate" | "w_up" => vec![e, h],
            "w_down" => vec![h, e],
            _ => unreachable!(),
        }
    }
}

fn check_shape(name: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::dim(format!(
            "{name}: expected shape {expected:?}, got {:?}",
            t.shape()
        )));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

impl ModelWeights {
    pub fn new(
        cfg: &ModelConfig,
        token_embedding: Tensor,
        layers: Vec<LayerWeights>,
        final_norm: Tensor,
        lm_head: Option<Tensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_shape("token_embedding", &token_embedding, &[cfg.vocab_size, cfg.embed_dim])?;
        check_shape("final_norm", &final_norm, &[cfg.embed_dim])?;
        if layers.len() != cfg.num_layers {
            return Err(Error::dim(format!(
                "expected {} layers, got {}",
                cfg.num_layers,
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            for name in LAYER_TENSORS {
                check_shape(
                    &format!("layers.{i}.{name}"),
                    layer.get(name),
                    &LayerWeights::expected_shape(cfg, name),
                )?;
            }
        }
        match (&lm_head, cfg.tie_embeddings) {
            (Some(h), false) => check_shape("lm_head", h, &[cfg.embed_dim, cfg.vocab_size])?,
            (None, true) => {}
            (Some(_), true) => return Err(Error::Config("tied model must not carry lm_head".into())),
            (None, false) => return Err(Error::Config("untied model requires lm_head".into())),
        }
        Ok(ModelWeights {
            token_embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Scaled-normal initialisation (std `init_scale`, norm gains at one).
    pub fn random(cfg: &ModelConfig, init_scale: f32, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0f32, init_scale)
            .map_err(|e| Error::Config(format!("init scale: {e}")))?;
        let mut mat = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![r, c], data).expect("shape")
        };
        let (e, l, h) = (cfg.embed_dim, cfg.latent_dim, cfg.mlp_hidden);
        let token_embedding = mat(cfg.vocab_size, e);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                wq: mat(e, l),
                wk: mat(e, l),
                wv: mat(e, l),
                wo: mat(l, e),
                attn_norm: Tensor::filled(&[e], 1.0),
                mlp_norm: Tensor::filled(&[e], 1.0),
                w_gate: mat(e, h),
                w_up: mat(e, h),
                w_down: mat(h, e),
            })
            .collect();
        let lm_head = (!cfg.tie_embeddings).then(|| mat(e, cfg.vocab_size));
        ModelWeights::new(cfg, token_embedding, layers, Tensor::filled(&[e], 1.0), lm_head)
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    pub fn final_norm(&self) -> &Tensor {
        &self.final_norm
    }

    /// Explicit output head, `None` when tied to the embedding.
    pub fn lm_head(&self) -> Option<&Tensor> {
        self.lm_head.as_ref()
    }

    /// All tensors in canonical manifest order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for name in LAYER_TENSORS {
                out.push((format!("layers.{i}.{name}"), layer.get(name)));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    pub fn from_named(cfg: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: &str| {
            named
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor '{name}'")))
        };
        let token_embedding = take("token_embedding")?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let mut t = |n: &str| take(&format!("layers.{i}.{n}"));
            layers.push(LayerWeights {
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                attn_norm: t("attn_norm")?,
                mlp_norm: t("mlp_norm")?,
                w_gate: t("w_gate")?,
                w_up: t("w_up")?,
                w_down: t("w_down")?,
            });
        }
        let final_norm = take("final_norm")?;
        let lm_head = if cfg.tie_embeddings { None } else { Some(take("lm_head")?) };
        ModelWeights::new(cfg, token_embedding, layers, final_norm, lm_head)
    }

    /// Rebuild with the attention projections of each layer replaced.
    /// Used by adapter merging; the receiver is left untouched.
    pub fn with_attention(&self, f: impl Fn(usize, &LayerWeights) -> [Tensor; 4]) -> Self {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let [wq, wk, wv, wo] = f(i, l);
                LayerWeights {
                    wq,
                    wk,
                    wv,
                    wo,
                    ..l.clone()
                }
            })
            .collect();
        ModelWeights {
            layers,
            ..self.clone()
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every value, for before/after immutability checks.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
