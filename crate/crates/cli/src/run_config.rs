//! Resolved run configuration: profile defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lifwavnet_core::train::TrainConfig;
use lifwavnet_core::{Error, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "LIFWAVNET_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 8 channels, batch 8, 500 epochs at lr 1e-3.
    #[default]
    Desk,
    /// 32 channels, batch 256, 1000 epochs at lr 1e-4.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction of chunks held out when the manifest has no explicit splits.
    pub holdout: f64,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Profile::Paper => (ModelConfig::paper(), TrainConfig::paper()),
        };
        RunConfig {
            profile,
            model,
            train,
            holdout: 0.1,
        }
    }

    /// Profile defaults overlaid with the keys present in `path`.
    pub fn load(path: Option<&Path>, profile: Option<Profile>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::for_profile(profile.unwrap_or_default()));
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| Error::data(path, format!("not valid JSON: {e}")))?;
        let file_profile = overlay
            .get("profile")
            .map(|p| serde_json::from_value::<Profile>(p.clone()))
            .transpose()
            .map_err(|e| Error::config("profile", e.to_string()))?;
        let base = Self::for_profile(profile.or(file_profile).unwrap_or_default());
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, overlay);
        if let Some(p) = profile {
            merged["profile"] = serde_json::to_value(p)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.length)?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::config("holdout", format!("{} outside [0, 1)", self.holdout)).into());
        }
        Ok(())
    }

    /// Writes the configuration as pretty JSON and logs it.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
        log::info!("resolved configuration:\n{json}");
        Ok(path)
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// `--out` if given, else `$LIFWAVNET_OUT`, else `runs/<command>`.
pub fn output_dir(flag: Option<PathBuf>, command: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}
