//! Run configuration: a TOML file with `[train]`, `[model]`, `[noise]`,
//! `[diagnose]` and `[profile]` sections, each holding scalars and lists
//! only. Every field has a default, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{LayerLoss, NoiseModel};
use crate::error::{Error, Result};
use crate::noise::stream::hash_key;
use crate::noise::NoiseConfig;
use crate::ste::GradMode;
use crate::train::{AdamParams, DatasetKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub grad_mode: GradMode,
    /// Levels visited by `sweep`.
    pub levels: Vec<f64>,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: u64,
    /// Noise redraws averaged per noisy evaluation.
    pub eval_redraws: usize,
    /// Examples per split used for evaluation.
    pub eval_samples: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Context window of the `chars` dataset.
    pub context: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Record measured training time in the metrics; off by default so
    /// repeated runs produce identical files.
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        TrainConfig {
            dataset: DatasetKind::Spirals,
            grad_mode: GradMode::Detached,
            levels: vec![1.0, 2.0, 3.0],
            steps: 2000,
            batch_size: 64,
            seed: 0,
            eval_interval: 100,
            eval_redraws: 4,
            eval_samples: 1024,
            alpha: adam.alpha,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            context: 16,
            corpus: None,
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths follow the dataset.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub in_features: usize,
    pub out_features: usize,
    pub batch: usize,
    pub samples: usize,
    /// Finite-difference step.
    pub h: f64,
    pub noise_model: NoiseModel,
    pub loss: LayerLoss,
    /// Largest layer (in weights) the oracle accepts.
    pub max_weights: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            in_features: 8,
            out_features: 4,
            batch: 16,
            samples: 32,
            h: 1e-4,
            noise_model: NoiseModel::Continuous,
            loss: LayerLoss::SquaredError,
            max_weights: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Layer widths of the profiled MLP, input first.
    pub sizes: Vec<usize>,
    pub batch: usize,
    /// Measured steps per mode, after the warmup.
    pub steps: usize,
    pub warmup: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            sizes: vec![64, 256, 256, 10],
            batch: 64,
            steps: 20,
            warmup: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub diagnose: DiagnoseConfig,
    pub profile: ProfileConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value`. The value is read as a TOML literal and,
    /// failing that, as a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            Error::Config(format!("override key {path:?} must look like section.key"))
        })?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let table = doc.as_table_mut().expect("config serializes to a table");
        let Some(sec) = table.get_mut(section).and_then(toml::Value::as_table_mut) else {
            let names: Vec<&String> = table.keys().collect();
            return Err(Error::Config(format!(
                "unknown section {section:?}; valid sections: {names:?}"
            )));
        };
        if !sec.contains_key(key) && !OPTIONAL_KEYS.contains(&(section, key)) {
            let mut names: Vec<&str> = sec.keys().map(String::as_str).collect();
            names.extend(OPTIONAL_KEYS.iter().filter(|(s, _)| *s == section).map(|(_, k)| *k));
            names.sort_unstable();
            return Err(Error::Config(format!(
                "unknown key {section}.{key}; valid keys: {names:?}"
            )));
        }
        sec.insert(key.to_string(), value);
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{section}.{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.train.adam().validate()?;
        // TOML integers are signed 64-bit
        for (name, seed) in [
            ("train.seed", self.train.seed),
            ("noise.seed", self.noise.seed),
        ] {
            if i64::try_from(seed).is_err() {
                return Err(Error::Config(format!(
                    "{name} must be below 2^63, got {seed}"
                )));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 || t.eval_interval == 0 || t.eval_samples == 0 {
            return Err(Error::Config(
                "batch_size, eval_interval and eval_samples must be positive".into(),
            ));
        }
        if t.eval_redraws == 0 || t.eval_redraws > 255 {
            return Err(Error::Config(format!(
                "eval_redraws must be in 1..=255, got {}",
                t.eval_redraws
            )));
        }
        if let Some(l) = t.levels.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Config(format!("noise levels must be >= 0, got {l}")));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let d = &self.diagnose;
        if !(d.h > 0.0)
            || d.samples == 0
            || d.batch == 0
            || d.in_features == 0
            || d.out_features == 0
        {
            return Err(Error::Config(
                "diagnose needs h > 0 and positive sizes and sample count".into(),
            ));
        }
        let p = &self.profile;
        if p.sizes.len() < 2 || p.sizes.contains(&0) || p.batch == 0 || p.steps == 0 {
            return Err(Error::Config(
                "profile needs >= 2 positive sizes, batch and steps".into(),
            ));
        }
        Ok(())
    }

    /// Noise settings of a run: the configured noise with its seed mixed
    /// with the run seed, so every run seed sees its own draws.
    pub fn run_noise(&self) -> NoiseConfig {
        NoiseConfig {
            seed: hash_key(self.noise.seed, &[self.train.seed]),
            ..self.noise.clone()
        }
    }

    /// Level 0 means evaluation and training without any noise.
    pub fn noise_active(&self) -> bool {
        self.noise.level > 0.0 && !self.noise.enabled_sources.is_empty()
    }
}

/// Keys that are absent from the serialized config while unset.
const OPTIONAL_KEYS: [(&str, &str); 1] = [("train", "corpus")];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn toml_round_trips() {
        let mut c = Config::default();
        c.noise.delta_t = 12.5;
        c.train.corpus = Some("x.txt".into());
        let back = Config::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_toml().unwrap().contains("delta_T = 12.5"));
    }

    #[test]
    fn overrides_apply_and_validate_keys() {
        let mut c = Config::default();
        c.apply_override("train.steps=7").unwrap();
        c.apply_override("train.grad_mode=full").unwrap();
        c.apply_override("noise.enabled_sources=[\"read\", \"adc\"]")
            .unwrap();
        c.apply_override("model.hidden = [3, 4]").unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.grad_mode, GradMode::Full);
        assert_eq!(c.noise.enabled_sources.len(), 2);
        assert_eq!(c.model.hidden, vec![3, 4]);

        let err = c.apply_override("train.stepz=1").unwrap_err().to_string();
        assert!(err.contains("valid keys") && err.contains("steps"), "{err}");
        assert!(c.apply_override("train.steps=many").is_err());
        assert!(c.apply_override("nonsense").is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(Config::from_toml("[train]\nstepz = 3\n").is_err());
        assert!(Config::from_toml("[noise]\nlevel = -1.0\n")
            .unwrap()
            .validate()
            .is_err());
    }
}
