use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use edgellm::bench::{load_adapters, load_toy, make_toy_model, ToyArtifacts, ToySpec};
use edgellm::bundle::{load_model, MANIFEST};
use edgellm::ds2d::ForecastState;
use edgellm::lora::LoraAdapter;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Model, adapters and forecast rows for a command.
///
/// `--model` may name a toy root (with `model/`, `lora/`, `forecast/`) or a
/// single model bundle. Without it the default toy is generated from `seed`.
pub fn resolve(model: Option<&Path>, lora_dir: Option<&Path>, seed: u64) -> Result<ToyArtifacts> {
    let mut art = match model {
        None => make_toy_model(&ToySpec::with_seed(seed))?,
        Some(dir) if dir.join("model").join(MANIFEST).is_file() => {
            load_toy(dir).with_context(|| format!("loading toy bundles from {}", dir.display()))?
        }
        Some(dir) if dir.join(MANIFEST).is_file() => {
            let model = load_model(dir).with_context(|| format!("loading model bundle {}", dir.display()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let forecast = ForecastState::random(model.config(), 4, 2, 0.02, &mut rng)?;
            ToyArtifacts {
                model,
                adapters: Vec::new(),
                forecast,
            }
        }
        Some(dir) => bail!("no model bundle at {}", dir.display()),
    };
    if let Some(dir) = lora_dir {
        if !dir.is_dir() {
            bail!("lora directory {} does not exist", dir.display());
        }
        art.adapters = load_adapters(dir)?;
    }
    Ok(art)
}

/// Forecast rows with exactly `slots` slots: the loaded state when it fits,
/// otherwise seeded random rows with the same prefix length.
pub fn forecast_with_slots(art: &ToyArtifacts, slots: usize, seed: u64) -> Result<ForecastState> {
    if art.forecast.slots() == slots {
        return Ok(art.forecast.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((slots as u64) << 32));
    Ok(ForecastState::random(art.model.config(), art.forecast.prefix_len(), slots, 0.02, &mut rng)?)
}

pub fn find_adapter<'a>(art: &'a ToyArtifacts, task: &str) -> Result<&'a LoraAdapter> {
    art.adapters
        .iter()
        .find(|a| a.task_id() == task)
        .with_context(|| format!("no adapter with task id '{task}'"))
}

pub fn report_path(global: &Option<PathBuf>, local: &Option<PathBuf>) -> Option<PathBuf> {
    local.clone().or_else(|| global.clone())
}
