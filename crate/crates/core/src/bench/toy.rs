use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{load_model, save_model};
use crate::ds2d::{ForecastState, DEFAULT_PREFIX_LEN};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{Model, ModelConfig, ModelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    pub config: ModelConfig,
    pub n_adapters: usize,
    pub rank: usize,
    pub scale: f32,
    pub init: f32,
    pub adapter_init: f32,
    pub forecast_prefix: usize,
    pub forecast_slots: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            seed: 0,
            config: ModelConfig::toy_default(),
            n_adapters: 8,
            rank: 8,
            scale: 1.0,
            init: 0.02,
            adapter_init: 0.05,
            forecast_prefix: DEFAULT_PREFIX_LEN,
            forecast_slots: 2,
        }
    }
}

impl ToySpec {
    pub fn with_seed(seed: u64) -> Self {
        ToySpec { seed, ..Self::default() }
    }
}

/// Generated model, adapters (task ids `task0..`) and forecast rows.
#[derive(Debug, Clone)]
pub struct ToyArtifacts {
    pub model: Model,
    pub adapters: Vec<LoraAdapter>,
    pub forecast: ForecastState,
}

pub fn make_toy_model(spec: &ToySpec) -> Result<ToyArtifacts> {
    let cfg = &spec.config;
    cfg.validate()?;
    let bound = cfg.embed_dim.min(cfg.latent_dim);
    if spec.rank == 0 || spec.rank > bound {
        return Err(Error::Config(format!("adapter rank {} outside 1..={bound}", spec.rank)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = ModelWeights::random(cfg, spec.init, &mut rng)?;
    let model = Model::new(cfg.clone(), weights)?;
    let adapters = (0..spec.n_adapters)
        .map(|i| LoraAdapter::random(cfg, format!("task{i}"), spec.rank, spec.scale, spec.adapter_init, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let forecast = ForecastState::random(cfg, spec.forecast_prefix, spec.forecast_slots, spec.init, &mut rng)?;
    Ok(ToyArtifacts {
        model,
        adapters,
        forecast,
    })
}

/// Bundle layout under `dir`: `model/`, `lora/<task>/`, `forecast/`.
pub fn save_toy(art: &ToyArtifacts, dir: &Path) -> Result<()> {
    let cfg = art.model.config();
    save_model(&art.model, &dir.join("model"))?;
    for a in &art.adapters {
        a.save(cfg, &dir.join("lora").join(a.task_id()))?;
    }
    art.forecast.save(cfg, &dir.join("forecast"))
}

pub fn load_toy(dir: &Path) -> Result<ToyArtifacts> {
    let model = load_model(&dir.join("model"))?;
    let adapters = load_adapters(&dir.join("lora"))?;
    let forecast = ForecastState::load(&dir.join("forecast"))?;
    Ok(ToyArtifacts {
        model,
        adapters,
        forecast,
    })
}

/// Every adapter bundle directly under `dir`, sorted by directory name.
pub fn load_adapters(dir: &Path) -> Result<Vec<LoraAdapter>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| LoraAdapter::load(d)).collect()
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn bundle_digests(dir: &Path) -> Result<Vec<(String, String)>> {
    fn walk(root: &Path, at: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(at)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.push((rel, hex::encode(Sha256::digest(fs::read(&p)?))));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
