//! Effective run configuration: defaults, then a JSON file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use t1q_core::saliency::OISConfig;
use t1q_core::segnet::{TrainConfig, UNetConfig};
use t1q_core::stats::VwaWeights;

use crate::CliError;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random choice: phantom layout and noise, folds,
    /// initialisation, augmentation, dropout and MC runs.
    pub seed: u64,
    pub threads: Option<usize>,
    /// Input channel configuration (preset name).
    pub input_preset: String,
    pub folds: usize,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub ois: OISConfig,
    pub vwa_weights: VwaWeights,
    pub alpha: f64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            input_preset: "stage1".into(),
            folds: 8,
            unet: UNetConfig::default(),
            train: TrainConfig::default(),
            ois: OISConfig::default(),
            vwa_weights: VwaWeights::default(),
            alpha: 0.05,
            output_dir: String::new(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the keys present in `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("reading config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let mut value = serde_json::to_value(Self::default()).expect("config serialises");
        merge(&mut value, file);
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Pushes the run seed into the module configs.
    pub fn finish(mut self) -> Self {
        self.train.seed = self.seed;
        self.ois.seed = self.seed;
        self
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        crate::write_file(&dir.join(RUN_CONFIG_FILE), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_only_given_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 4, "train": {"lr": 0.01}, "unet": {"depth": 3}}"#).unwrap();
        let c = RunConfig::load(Some(&p)).unwrap().finish();
        assert_eq!((c.seed, c.train.lr, c.unet.depth), (4, 0.01, 3));
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.unet.base_channels, UNetConfig::default().base_channels);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sed": 4}"#).unwrap();
        assert!(RunConfig::load(Some(&p)).is_err());
    }
}
