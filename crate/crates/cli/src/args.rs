//! Command-line arguments.

use std::path::PathBuf;

use attnguard::finetune::TrainableSet;
use attnguard::SignMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ExperimentConfig, CONFIG_ENV};
use crate::error::{CliError, CliResult};

/// Parses `0.03` or `8/255`.
pub fn parse_number(s: &str) -> Result<f64, String> {
    let value = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num
                .trim()
                .parse()
                .map_err(|e| format!("bad numerator: {e}"))?;
            let den: f64 = den
                .trim()
                .parse()
                .map_err(|e| format!("bad denominator: {e}"))?;
            if den == 0.0 {
                return Err("zero denominator".into());
            }
            num / den
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "attnguard",
    version,
    about = "Protect face photos against subject-driven fine-tuning"
)]
pub struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags overriding individual config keys.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    /// Perturbation budget, e.g. `8/255`.
    #[arg(long, global = true, value_parser = parse_number)]
    pub eta: Option<f64>,
    #[arg(long, global = true, value_parser = parse_number)]
    pub step_size: Option<f64>,
    /// Attack iterations.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_parser = parse_number)]
    pub lambda: Option<f64>,
    /// `divergence` or `additive`.
    #[arg(long, global = true)]
    pub sign_mode: Option<SignMode>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Prompt template containing `<v>` and optionally `<class>`.
    #[arg(long, global = true)]
    pub prompt: Option<String>,
    #[arg(long, global = true)]
    pub class_word: Option<String>,
    #[arg(long, global = true)]
    pub init_token: Option<String>,
    #[arg(long, global = true, value_parser = parse_number)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub finetune_steps: Option<usize>,
    /// `kv-only`, `kv-plus-token` or `full`.
    #[arg(long, global = true)]
    pub trainable: Option<TrainableSet>,
    /// Images generated per subject.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub sampling_steps: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        set(&mut cfg.output_dir, &self.output_dir);
        set(&mut cfg.dataset_dir, &self.dataset_dir);
        set(&mut cfg.image_size, &self.image_size);
        set(&mut cfg.attack.eta, &self.eta);
        set(&mut cfg.attack.step_size, &self.step_size);
        set(&mut cfg.attack.steps, &self.steps);
        set(&mut cfg.attack.lambda, &self.lambda);
        set(&mut cfg.attack.sign_mode, &self.sign_mode);
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.prompt_template, &self.prompt);
        set(&mut cfg.class_word, &self.class_word);
        set(&mut cfg.init_token, &self.init_token);
        set(&mut cfg.finetune.lr, &self.lr);
        set(&mut cfg.finetune.batch, &self.batch);
        set(&mut cfg.finetune.steps, &self.finetune_steps);
        set(&mut cfg.finetune.trainable, &self.trainable);
        set(&mut cfg.eval.n_samples, &self.samples);
        set(&mut cfg.eval.sampling_steps, &self.sampling_steps);
        cfg
    }
}

/// Which fine-tune arm a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Clean,
    Protected,
    /// Every arm whose inputs exist.
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic face dataset into the dataset directory.
    MakeDataset {
        #[arg(long, default_value_t = 2)]
        subjects: usize,
        #[arg(long, default_value_t = 5)]
        images: usize,
    },
    /// Pretrain the toy latent diffusion model on synthetic captioned faces.
    TrainToy {
        /// Small corpus and few steps, for smoke tests.
        #[arg(long)]
        quick: bool,
    },
    /// Craft protected copies of every dataset image.
    Protect,
    /// Personalize the model on each subject's clean or protected images.
    Finetune {
        #[arg(long, value_enum, default_value_t = SourceArg::All)]
        source: SourceArg,
    },
    /// Sample images from each fine-tuned subject model.
    Generate {
        #[arg(long, value_enum, default_value_t = SourceArg::All)]
        source: SourceArg,
    },
    /// Score generated images and print the metrics table.
    Evaluate {
        #[arg(long, value_enum, default_value_t = SourceArg::All)]
        source: SourceArg,
    },
    /// Render cross-attention heatmaps for chosen prompt tokens.
    AttnMap {
        #[arg(long, value_enum, default_value_t = SourceArg::All)]
        source: SourceArg,
        /// Prompt token to map; `<o>` names the class word.
        #[arg(long = "token", default_values_t = vec!["<v>".to_string(), "<o>".to_string()])]
        tokens: Vec<String>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

impl Cli {
    /// Config file (if any), then flag overrides, then validation.
    pub fn experiment_config(&self) -> CliResult<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        self.overrides
            .apply(base)
            .normalized()
            .map_err(|e| match e {
                CliError::Core(inner) => CliError::Config(inner.to_string()),
                other => other,
            })
    }
}
