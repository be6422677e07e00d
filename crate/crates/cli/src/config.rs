//! Run configuration: a line-oriented document of dotted keys.
//!
//! Every key has a default; a config file, `BIA__` environment variables and
//! repeated `--set KEY=VALUE` flags override in that order. Unknown keys are
//! rejected, and the resolved configuration normalizes back to a canonical
//! document (sorted keys, `key = value` lines).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

/// Schema: (key, default, description).
const SCHEMA: &[(&str, &str, &str)] = &[
    ("parallelism", "1", "worker threads; 0 = one per core"),
    ("data.train", "shapes", "source train set: shapes | digits | <dir>"),
    ("data.test", "shapes", "source test set: shapes | digits | <dir>"),
    ("data.train_size", "8000", "synthetic train item count"),
    ("data.test_size", "2000", "synthetic test item count"),
    ("data.resolution", "32", "synthetic image side in pixels"),
    ("data.seed", "1234", "synthetic content seed"),
    ("data.augment", "false", "augment generator training batches"),
    ("data.crop_low", "0.7", "crop area fraction lower bound"),
    ("data.crop_high", "1.0", "crop area fraction upper bound"),
    ("data.flip_prob", "0.5", "horizontal flip probability"),
    ("data.jitter", "0.4", "color jitter strength"),
    ("model.arch", "smallconv", "substitute architecture"),
    ("model.preprocess", "imagenet", "substitute normalization: imagenet | coarse"),
    ("model.epochs", "3", "substitute training epochs"),
    ("model.lr", "0.003", "substitute learning rate"),
    ("model.checkpoint", "", "load substitute instead of training"),
    ("model.save", "", "write the trained substitute here"),
    ("model.ensemble", "", "comma list of extra substitute architectures"),
    ("generator.down_blocks", "2", "downsampling blocks"),
    ("generator.residual_blocks", "6", "residual blocks"),
    ("generator.up_blocks", "2", "upsampling blocks"),
    ("generator.base_channels", "16", "stem channel count"),
    ("objective.variant", "bia", "bia | bia_rn | bia_da | bia_rn_da"),
    ("objective.tap", "stage2", "substitute tap layer"),
    ("objective.mu_mean", "0.5", "mean of the mu' Gaussian"),
    ("objective.mu_std", "0.08", "std of the mu' Gaussian"),
    ("objective.sigma_mean", "0.75", "mean of the sigma' Gaussian"),
    ("objective.sigma_std", "0.08", "std of the sigma' Gaussian"),
    ("objective.rn_per_image", "false", "draw one pair per image instead of per step"),
    ("objective.attention_from_rn", "true", "attention from normalized clean features"),
    ("train.seed", "1", "master seed for generator training"),
    ("train.lr", "0.0002", "generator learning rate"),
    ("train.beta1", "0.5", "first moment decay"),
    ("train.beta2", "0.999", "second moment decay"),
    ("train.batch_size", "16", "generator training batch size"),
    ("train.epochs", "1", "generator training epochs"),
    ("train.epsilon", "10", "perturbation budget on the 8-bit scale"),
    ("train.grad_clip", "0", "global-norm gradient clip; 0 disables"),
    ("eval.attack", "gen", "identity | gen | gs | pgd | dim | dr | ssp | noise"),
    ("eval.checkpoint", "", "generator checkpoint for gen/gs; default <out>/generator.biaf"),
    ("eval.targets", "smallres@digits", "semicolon list: arch@dataset[@checkpoint]"),
    ("eval.target_epochs", "3", "target training epochs when no checkpoint given"),
    ("eval.target_lr", "0.003", "target training learning rate"),
    ("eval.target_preprocess", "coarse", "target normalization: imagenet | coarse"),
    ("eval.seeds", "1", "comma list of evaluation seeds"),
    ("eval.batch_size", "64", "evaluation batch size"),
    ("eval.step_8bit", "4", "iterative attack step size (8-bit scale)"),
    ("eval.iterations", "100", "iterative attack iteration count"),
    ("eval.momentum", "1.0", "momentum decay for the diverse-input attack"),
    ("eval.transform_prob", "0.7", "transform probability for the diverse-input attack"),
    ("eval.noise_std_frac", "0.5", "noise control std as a fraction of epsilon"),
    ("sweep.kind", "rn", "rn | tap"),
    ("sweep.taps", "stage1,stage2,stage3", "taps for the layer sweep"),
    ("sweep.mu_means", "0.25,0.5,0.75", "mu' means for the grid sweep"),
    ("sweep.sigma_means", "0.25,0.5,0.75", "sigma' means for the grid sweep"),
    ("viz.checkpoint", "", "generator checkpoint; default <out>/generator.biaf"),
    ("viz.source", "shapes", "block-visualization input: shapes | digits | <image>"),
    ("viz.index", "0", "synthetic test item index for visualization"),
];

/// Environment override prefix; `BIA__TRAIN__SEED=5` sets `train.seed`.
pub const ENV_PREFIX: &str = "BIA__";

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            map: SCHEMA.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }

    fn known(key: &str) -> bool {
        SCHEMA.iter().any(|(k, _, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !Self::known(key) {
            return Err(ConfigError(format!("unknown config key `{key}`")));
        }
        self.map.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parse a config document: `key = value` lines, `#` comments, blanks.
    pub fn apply_document(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: missing `=`: {line}", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_document(&text)
    }

    /// Apply `BIA__SECTION__KEY` environment overrides.
    pub fn apply_env(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }

    /// Canonical normalized document.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn get(&self, key: &str) -> &str {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from schema"))
            .as_str()
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.get(key)
            .parse()
            .map_err(|_| ConfigError(format!("key `{key}`: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.get(key)
            .parse()
            .map_err(|_| ConfigError(format!("key `{key}`: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_u32(&self, key: &str) -> Result<u32, ConfigError> {
        self.get(key)
            .parse()
            .map_err(|_| ConfigError(format!("key `{key}`: expected an integer, got `{}`", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key)
            .parse()
            .map_err(|_| ConfigError(format!("key `{key}`: expected a number, got `{}`", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(ConfigError(format!("key `{key}`: expected a boolean, got `{other}`"))),
        }
    }

    /// Comma-separated list; empty string yields an empty list.
    pub fn get_list(&self, key: &str) -> Vec<String> {
        let raw = self.get(key);
        if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',').map(|s| s.trim().to_string()).collect()
        }
    }
}
