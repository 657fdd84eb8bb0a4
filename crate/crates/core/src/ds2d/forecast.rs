use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bundle::{Bundle, Payload, Role};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Default forecast-prefix length.
pub const DEFAULT_PREFIX_LEN: usize = 4;

/// Static learned rows: a `p × E` prefix and one `E`-row per draft depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastState {
    prefix: Tensor,
    embeddings: Tensor,
}

impl ForecastState {
    pub fn new(prefix: Tensor, embeddings: Tensor) -> Result<Self> {
        if prefix.rank() != 2 || embeddings.rank() != 2 || prefix.shape()[1] != embeddings.shape()[1] {
            return Err(Error::dim(format!(
                "forecast prefix {:?} and embeddings {:?}",
                prefix.shape(),
                embeddings.shape()
            )));
        }
        if embeddings.shape()[0] == 0 {
            return Err(Error::Config("forecast state needs at least one slot".into()));
        }
        if !prefix.is_finite() || !embeddings.is_finite() {
            return Err(Error::NonFinite("forecast state".into()));
        }
        Ok(ForecastState { prefix, embeddings })
    }

    pub fn random(cfg: &ModelConfig, p: usize, m: usize, init: f32, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0f32, init).map_err(|e| Error::Config(e.to_string()))?;
        let e = cfg.embed_dim;
        let mut draw = |rows: usize| Tensor::new(vec![rows, e], (0..rows * e).map(|_| normal.sample(rng)).collect());
        Self::new(draw(p)?, draw(m)?)
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn prefix(&self) -> &Tensor {
        &self.prefix
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn to_bundle(&self, cfg: &ModelConfig) -> Bundle {
        let mut b = Bundle::new(Role::Forecast, cfg.clone());
        b.push("forecast.prefix", Payload::F32(self.prefix.clone()));
        b.push("forecast.embeddings", Payload::F32(self.embeddings.clone()));
        b
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        if bundle.role != Role::Forecast {
            return Err(Error::Config("bundle role is not 'forecast'".into()));
        }
        let mut t = bundle.f32_tensors();
        let mut take = |n: &str| t.remove(n).ok_or_else(|| Error::Config(format!("forecast bundle missing {n}")));
        let fs = Self::new(take("forecast.prefix")?, take("forecast.embeddings")?)?;
        if fs.width() != bundle.config.embed_dim {
            return Err(Error::dim("forecast width does not match model"));
        }
        Ok(fs)
    }

    pub fn save(&self, cfg: &ModelConfig, dir: &Path) -> Result<()> {
        self.to_bundle(cfg).save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::load(dir)?)
    }
}
