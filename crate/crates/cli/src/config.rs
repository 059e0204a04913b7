//! Experiment configuration stored as flat `dotted.key = value` TOML.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use attnguard::eval::EvalConfig;
use attnguard::finetune::FinetuneConfig;
use attnguard::pgd::AttackConfig;
use attnguard::prompt::{DEFAULT_INIT_TOKEN, DEFAULT_TEMPLATE};
use attnguard::train::PretrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "ATTNGUARD_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_samples: usize,
    pub sampling_steps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_samples: 16,
            sampling_steps: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub image_size: usize,
    pub prompt_template: String,
    pub class_word: String,
    pub init_token: String,
    /// Master seed; copied into the attack and fine-tune sections.
    pub seed: u64,
    pub attack: AttackConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSettings,
    pub train: PretrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            image_size: 64,
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            class_word: "man".to_string(),
            init_token: DEFAULT_INIT_TOKEN.to_string(),
            seed: 0,
            attack: AttackConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSettings::default(),
            train: PretrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Propagates the master seed and validates every section.
    pub fn normalized(mut self) -> CliResult<Self> {
        self.attack.seed = self.seed;
        self.finetune.seed = self.seed;
        self.train.seed = self.seed;
        self.attack.validate()?;
        self.finetune.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config(format!(
                "seed must be at most {} to fit a TOML integer",
                i64::MAX
            )));
        }
        if self.image_size == 0 {
            return Err(CliError::Config("image_size must be positive".into()));
        }
        if self.eval.n_samples < 2 || self.eval.sampling_steps < 1 {
            return Err(CliError::Config(
                "eval needs n_samples ≥ 2 and sampling_steps ≥ 1".into(),
            ));
        }
        Ok(self)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_samples: self.eval.n_samples,
            sampling_steps: self.eval.sampling_steps,
            seed: self.seed,
        }
    }

    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.normalized()
    }

    /// Flat `dotted.key = value` lines, sorted by key.
    pub fn to_toml_string(&self) -> CliResult<String> {
        let value = toml::Value::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = String::new();
        for (key, v) in lines {
            let _ = writeln!(out, "{key} = {v}");
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
