use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_theta() -> f32 {
    10000.0
}

fn default_rms_eps() -> f32 {
    1e-5
}

fn default_tied() -> bool {
    true
}

/// Hyperparameters of the decoder-only toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Attention latent width; `num_heads * head_dim`.
    pub latent_dim: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
    /// Output head is the transposed token embedding.
    #[serde(default = "default_tied")]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("latent_dim", self.latent_dim),
            ("num_layers", self.num_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.latent_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "latent_dim {} not divisible by num_heads {}",
                self.latent_dim, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {} must be even for RoPE", self.head_dim())));
        }
        if !(self.rope_theta > 0.0 && self.rms_eps > 0.0) {
            return Err(Error::Config("rope_theta and rms_eps must be positive".into()));
        }
        Ok(())
    }

    /// The default desk-scale toy shape.
    pub fn toy_default() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_heads: 4,
            latent_dim: 64,
            num_layers: 4,
            mlp_hidden: 256,
            vocab_size: 258,
            max_seq_len: 512,
            rope_theta: default_rope_theta(),
            rms_eps: default_rms_eps(),
            tie_embeddings: true,
        }
    }

    /// A smaller shape used where tests sweep many models or prompts.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 32,
            num_heads: 4,
            latent_dim: 32,
            num_layers: 2,
            mlp_hidden: 64,
            vocab_size,
            max_seq_len: 512,
            ..Self::toy_default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        let mut c = ModelConfig::tiny(16);
        c.validate().unwrap();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.vocab_size = 0;
        assert!(c.validate().is_err());
        let mut odd = ModelConfig::tiny(16);
        odd.latent_dim = 12;
        odd.num_heads = 4;
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
    }
}
