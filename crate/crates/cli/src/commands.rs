//! The workbench commands. Each one stages its outputs in a temporary
//! directory under `output_dir` and moves them into place only on success.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use attnguard::attention::{capture, normalize_map, render_heatmap, token_map, AttentionStack};
use attnguard::checkpoint;
use attnguard::eval::{self, MetricsReport};
use attnguard::finetune::{self, attention_alignment, probe_timesteps};
use attnguard::pgd;
use attnguard::prompt::USER_TOKEN;
use attnguard::toy_ldm::gaussian;
use attnguard::train::{self, PretrainConfig};
use attnguard::{ModelConfig, PixelImage, PromptBinding, ReductionPolicy, ToyLdm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tempfile::TempDir;

use crate::args::{Command, SourceArg};
use crate::config::ExperimentConfig;
use crate::dataset::{self, SubjectSet};
use crate::error::{CliError, CliResult};
use crate::imageio;

pub const MODEL_DIR: &str = "model";
pub const MODEL_FILE: &str = "model.agm";
pub const PROTECTED_DIR: &str = "protected";
pub const FINETUNE_DIR: &str = "finetune";
pub const GENERATED_DIR: &str = "generated";
pub const REPORTS_DIR: &str = "reports";
pub const ATTN_DIR: &str = "attn";
pub const TABLE_FILE: &str = "table.md";

/// Token alias for the class word in `attn-map`.
pub const CLASS_ALIAS: &str = "<o>";

/// One fine-tune arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Clean,
    Protected,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Clean => "clean",
            Source::Protected => "protected",
        }
    }

    /// Row label in the metrics table.
    pub fn label(self) -> &'static str {
        match self {
            Source::Clean => "No defense",
            Source::Protected => "Protected",
        }
    }
}

/// Output directory staged for an atomic replace of `target`.
struct Stage {
    dir: TempDir,
    target: PathBuf,
}

impl Stage {
    fn new(output_dir: &Path, target: &str) -> CliResult<Self> {
        fs::create_dir_all(output_dir)?;
        let dir = tempfile::Builder::new()
            .prefix(".staging-")
            .tempdir_in(output_dir)?;
        Ok(Self {
            dir,
            target: output_dir.join(target),
        })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn commit(self) -> CliResult<()> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)?;
        }
        if let Some(parent) = self.target.parent() {
            fs::create_dir_all(parent)?;
        }
        let staged = self.dir.keep();
        if let Err(e) = fs::rename(&staged, &self.target) {
            let _ = fs::remove_dir_all(&staged);
            return Err(e.into());
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(MODEL_DIR).join(MODEL_FILE)
}

fn delta_path(cfg: &ExperimentConfig, source: Source, subject: &str) -> PathBuf {
    cfg.output_dir
        .join(FINETUNE_DIR)
        .join(source.name())
        .join(format!("{subject}.agm"))
}

pub fn load_model(cfg: &ExperimentConfig) -> CliResult<ToyLdm> {
    let path = model_path(cfg);
    if !path.is_file() {
        return Err(CliError::Prerequisite(format!(
            "no trained model at {} (run `attnguard train-toy` first)",
            path.display()
        )));
    }
    let model = checkpoint::load_model(&path)?;
    if model.config.image_size != cfg.image_size {
        return Err(CliError::Config(format!(
            "model was trained at {}px but image_size is {}",
            model.config.image_size, cfg.image_size
        )));
    }
    Ok(model)
}

fn binding_for(
    model: &ToyLdm,
    cfg: &ExperimentConfig,
    subject: &SubjectSet,
) -> CliResult<PromptBinding> {
    Ok(model.bind_token(
        &cfg.prompt_template,
        subject.class_or(&cfg.class_word),
        &cfg.init_token,
    )?)
}

fn protected_images(cfg: &ExperimentConfig, subject: &SubjectSet) -> CliResult<Vec<PixelImage>> {
    let dir = cfg.output_dir.join(PROTECTED_DIR).join(&subject.name);
    subject
        .files
        .iter()
        .map(|stem| {
            let path = dir.join(format!("{stem}.png"));
            if !path.is_file() {
                return Err(CliError::Prerequisite(format!(
                    "protected image {} is missing (run `attnguard protect` first)",
                    path.display()
                )));
            }
            imageio::read_png(&path)
        })
        .collect()
}

/// Arms selected by `arg`. `All` keeps the arms whose prerequisite exists
/// and fails when none does.
fn resolve_sources(
    arg: SourceArg,
    available: impl Fn(Source) -> Option<String>,
) -> CliResult<Vec<Source>> {
    let wanted = match arg {
        SourceArg::Clean => vec![Source::Clean],
        SourceArg::Protected => vec![Source::Protected],
        SourceArg::All => vec![Source::Clean, Source::Protected],
    };
    let mut out = Vec::new();
    let mut first_missing = None;
    for s in wanted {
        match available(s) {
            None => out.push(s),
            Some(missing) => {
                if arg != SourceArg::All {
                    return Err(CliError::Prerequisite(missing));
                }
                log::warn!("skipping the {} arm: {missing}", s.name());
                first_missing.get_or_insert(missing);
            }
        }
    }
    match (out.is_empty(), first_missing) {
        (true, Some(missing)) => Err(CliError::Prerequisite(missing)),
        _ => Ok(out),
    }
}

fn require_dir(path: PathBuf, hint: &str) -> Option<String> {
    if path.is_dir() {
        None
    } else {
        Some(format!(
            "{} does not exist (run `attnguard {hint}` first)",
            path.display()
        ))
    }
}

pub fn run(command: &Command, cfg: &ExperimentConfig) -> CliResult<()> {
    match command {
        Command::MakeDataset { subjects, images } => make_dataset(cfg, *subjects, *images),
        Command::TrainToy { quick } => train_toy(cfg, *quick),
        Command::Protect => protect(cfg),
        Command::Finetune { source } => run_finetune(cfg, *source),
        Command::Generate { source } => generate(cfg, *source),
        Command::Evaluate { source } => evaluate(cfg, *source).map(|table| print!("{table}")),
        Command::AttnMap { source, tokens } => attn_map(cfg, *source, tokens),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

/// Writes the synthetic dataset. The dataset directory is the one place a
/// command writes outside `output_dir`, and it refuses to overwrite.
pub fn make_dataset(cfg: &ExperimentConfig, subjects: usize, images: usize) -> CliResult<()> {
    if subjects == 0 || images < dataset::MIN_SUBJECT_IMAGES {
        return Err(CliError::Config(format!(
            "need at least one subject and {} images each",
            dataset::MIN_SUBJECT_IMAGES
        )));
    }
    let dir = &cfg.dataset_dir;
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(CliError::Dataset(format!("{} is not empty", dir.display())));
    }
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staged = tempfile::Builder::new()
        .prefix(".dataset-")
        .tempdir_in(parent)?;
    dataset::write_synthetic(staged.path(), subjects, images, cfg.image_size, cfg.seed)?;
    if dir.exists() {
        fs::remove_dir(dir)?;
    }
    fs::rename(staged.keep(), dir)?;
    log::info!(
        "wrote {subjects} subjects × {images} images to {}",
        dir.display()
    );
    Ok(())
}

pub fn train_toy(cfg: &ExperimentConfig, quick: bool) -> CliResult<()> {
    let train_cfg = if quick {
        PretrainConfig {
            seed: cfg.seed,
            ..PretrainConfig::quick()
        }
    } else {
        cfg.train.clone()
    };
    let model_cfg = ModelConfig {
        image_size: cfg.image_size,
        ..ModelConfig::default()
    };
    let stage = Stage::new(&cfg.output_dir, MODEL_DIR)?;
    let start = Instant::now();
    let (model, report) = train::pretrain_synthetic(model_cfg, &train_cfg)?;
    log::info!(
        "pretrained {} parameters in {:.1}s, reconstruction MAE {:.4}",
        model.parameter_count(),
        start.elapsed().as_secs_f64(),
        report.reconstruction_mae
    );
    checkpoint::save_model(&model, &stage.path().join(MODEL_FILE))?;
    write_json(&report, &stage.path().join("train_report.json"))?;
    stage.commit()
}

pub fn protect(cfg: &ExperimentConfig) -> CliResult<()> {
    let model = load_model(cfg)?;
    let subjects = dataset::load_dataset(&cfg.dataset_dir, cfg.image_size)?;
    let stage = Stage::new(&cfg.output_dir, PROTECTED_DIR)?;
    for subject in &subjects {
        let binding = binding_for(&model, cfg, subject)?;
        let start = Instant::now();
        let results = pgd::attack_batch(&subject.images, &model, &binding, &cfg.attack)?;
        let dir = stage.path().join(&subject.name);
        fs::create_dir_all(&dir)?;
        for (stem, result) in subject.files.iter().zip(&results) {
            imageio::save_protected(result, &dir.join(format!("{stem}.png")))?;
            let mut trace = result.trace_jsonl();
            trace.push('\n');
            fs::write(dir.join(format!("{stem}.trace.jsonl")), trace)?;
        }
        log::info!(
            "protected {} ({} images) in {:.1}s",
            subject.name,
            results.len(),
            start.elapsed().as_secs_f64()
        );
    }
    stage.commit()
}

pub fn run_finetune(cfg: &ExperimentConfig, source: SourceArg) -> CliResult<()> {
    let model = load_model(cfg)?;
    let subjects = dataset::load_dataset(&cfg.dataset_dir, cfg.image_size)?;
    let sources = resolve_sources(source, |s| match s {
        Source::Clean => None,
        Source::Protected => require_dir(cfg.output_dir.join(PROTECTED_DIR), "protect"),
    })?;
    for source in sources {
        let stage = Stage::new(
            &cfg.output_dir,
            &format!("{FINETUNE_DIR}/{}", source.name()),
        )?;
        for subject in &subjects {
            let images = match source {
                Source::Clean => subject.images.clone(),
                Source::Protected => protected_images(cfg, subject)?,
            };
            let binding = binding_for(&model, cfg, subject)?;
            let outcome = finetune::finetune(&model, &images, &binding, &cfg.finetune)?;
            let alignment = attention_alignment(
                &outcome.model,
                &outcome.binding,
                &images,
                &probe_timesteps(model.config.timesteps),
                cfg.seed,
            )?;
            checkpoint::save_delta(
                &model,
                &outcome.model,
                &outcome.binding,
                &stage.path().join(format!("{}.agm", subject.name)),
            )?;
            write_json(
                &serde_json::json!({ "losses": outcome.losses, "attention_alignment": alignment }),
                &stage.path().join(format!("{}.losses.json", subject.name)),
            )?;
            log::info!(
                "fine-tuned {} on {} images, final loss {:.4}",
                subject.name,
                source.name(),
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        stage.commit()?;
    }
    Ok(())
}

fn load_tuned(
    cfg: &ExperimentConfig,
    model: &ToyLdm,
    source: Source,
    subject: &SubjectSet,
) -> CliResult<(ToyLdm, PromptBinding)> {
    let path = delta_path(cfg, source, &subject.name);
    if !path.is_file() {
        return Err(CliError::Prerequisite(format!(
            "no fine-tune at {} (run `attnguard finetune --source {}` first)",
            path.display(),
            source.name()
        )));
    }
    Ok(checkpoint::load_delta(model, &path)?)
}

fn finetune_available(cfg: &ExperimentConfig, s: Source) -> Option<String> {
    let dir = cfg.output_dir.join(FINETUNE_DIR).join(s.name());
    if dir.is_dir() {
        None
    } else {
        Some(format!(
            "{} does not exist (run `attnguard finetune --source {}` first)",
            dir.display(),
            s.name()
        ))
    }
}

pub fn generate(cfg: &ExperimentConfig, source: SourceArg) -> CliResult<()> {
    let model = load_model(cfg)?;
    let subjects = dataset::load_dataset(&cfg.dataset_dir, cfg.image_size)?;
    let sources = resolve_sources(source, |s| finetune_available(cfg, s))?;
    for source in sources {
        let stage = Stage::new(
            &cfg.output_dir,
            &format!("{GENERATED_DIR}/{}", source.name()),
        )?;
        for subject in &subjects {
            let (tuned, binding) = load_tuned(cfg, &model, source, subject)?;
            let images = eval::generate(&tuned, &binding, &cfg.eval_config())?;
            let dir = stage.path().join(&subject.name);
            fs::create_dir_all(&dir)?;
            for (i, img) in images.iter().enumerate() {
                imageio::save_png16(img, &dir.join(format!("sample_{i:03}.png")))?;
            }
            log::info!(
                "generated {} images for {} ({})",
                images.len(),
                subject.name,
                source.name()
            );
        }
        stage.commit()?;
    }
    Ok(())
}

fn read_generated(dir: &Path) -> CliResult<Vec<PixelImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    paths.iter().map(|p| imageio::read_png(p)).collect()
}

/// Mean of each metric over the subjects that produced it.
pub fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
        let present: Vec<f64> = values.flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
    MetricsReport {
        ism: mean(reports.iter().map(|r| r.ism)),
        fdfr: mean(reports.iter().map(|r| r.fdfr)),
        fid: mean(reports.iter().map(|r| r.fid)),
        serfiq: mean(reports.iter().map(|r| r.serfiq)),
        n_images: reports.iter().map(|r| r.n_images).sum(),
        skipped: reports.iter().map(|r| r.skipped).sum(),
    }
}

#[derive(Debug, Serialize)]
struct SourceReport {
    source: &'static str,
    mean: MetricsReport,
    subjects: std::collections::BTreeMap<String, MetricsReport>,
}

/// Scores generated images against each subject's clean photos. Returns
/// the rendered table.
pub fn evaluate(cfg: &ExperimentConfig, source: SourceArg) -> CliResult<String> {
    let subjects = dataset::load_dataset(&cfg.dataset_dir, cfg.image_size)?;
    let sources = resolve_sources(source, |s| {
        if let Some(missing) = finetune_available(cfg, s) {
            return Some(missing);
        }
        let dir = cfg.output_dir.join(GENERATED_DIR).join(s.name());
        (!dir.is_dir()).then(|| {
            format!(
                "{} does not exist (run `attnguard generate --source {}` first)",
                dir.display(),
                s.name()
            )
        })
    })?;
    let stage = Stage::new(&cfg.output_dir, REPORTS_DIR)?;
    let mut rows = Vec::new();
    for source in sources {
        let mut per_subject = std::collections::BTreeMap::new();
        for subject in &subjects {
            let dir = cfg
                .output_dir
                .join(GENERATED_DIR)
                .join(source.name())
                .join(&subject.name);
            if !dir.is_dir() {
                return Err(CliError::Prerequisite(format!(
                    "{} does not exist (run `attnguard generate --source {}` first)",
                    dir.display(),
                    source.name()
                )));
            }
            let generated = read_generated(&dir)?;
            let providers = eval::toy_providers(&subject.images, cfg.seed)?;
            per_subject.insert(
                subject.name.clone(),
                eval::score(&generated, &subject.images, &providers)?,
            );
        }
        let reports: Vec<MetricsReport> = per_subject.values().cloned().collect();
        let report = SourceReport {
            source: source.name(),
            mean: mean_report(&reports),
            subjects: per_subject,
        };
        write_json(
            &report,
            &stage.path().join(format!("{}.json", source.name())),
        )?;
        rows.push((source.label(), report.mean));
    }
    let borrowed: Vec<(&str, &MetricsReport)> = rows.iter().map(|(l, r)| (*l, r)).collect();
    let table = MetricsReport::table(&borrowed);
    fs::write(stage.path().join(TABLE_FILE), &table)?;
    stage.commit()?;
    Ok(table)
}

/// Index of `token` in the binding's prompt; `<v>` and `<o>` name the
/// subject and class positions.
pub fn token_index(binding: &PromptBinding, token: &str) -> CliResult<usize> {
    match token {
        USER_TOKEN => Ok(binding.v_index),
        CLASS_ALIAS => Ok(binding.o_index),
        word => binding
            .tokens
            .iter()
            .position(|t| t == word)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "token `{word}` is not in prompt `{}`",
                    binding.prompt()
                ))
            }),
    }
}

fn token_file_stem(token: &str) -> String {
    let stem: String = token
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '_')
        .collect();
    if stem.is_empty() {
        "token".into()
    } else {
        stem
    }
}

/// Attention of the fine-tuned model on its subject's first clean photo,
/// over the probe timesteps with noise fixed by `seed`.
pub fn subject_attention(
    model: &ToyLdm,
    binding: &PromptBinding,
    image: &PixelImage,
    seed: u64,
) -> CliResult<AttentionStack> {
    let cond = model.embed_binding(binding)?;
    let z0 = model.encode(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack: Option<AttentionStack> = None;
    for t in probe_timesteps(model.config.timesteps) {
        let eps = gaussian(model.config.latent_shape(), &mut rng);
        let zt = model.add_noise(&z0, t, &eps)?;
        let out = model.denoise(&zt, t, &cond)?;
        match stack.as_mut() {
            Some(s) => s.extend(out.attention)?,
            None => stack = Some(out.attention),
        }
    }
    Ok(capture(
        &stack.expect("probe timesteps are non-empty"),
        binding,
    )?)
}

pub fn attn_map(cfg: &ExperimentConfig, source: SourceArg, tokens: &[String]) -> CliResult<()> {
    if tokens.is_empty() {
        return Err(CliError::Config(
            "attn-map needs at least one --token".into(),
        ));
    }
    let model = load_model(cfg)?;
    let subjects = dataset::load_dataset(&cfg.dataset_dir, cfg.image_size)?;
    let sources = resolve_sources(source, |s| finetune_available(cfg, s))?;
    let policy = ReductionPolicy::mean_all();
    for source in sources {
        let stage = Stage::new(&cfg.output_dir, &format!("{ATTN_DIR}/{}", source.name()))?;
        for subject in &subjects {
            let (tuned, binding) = load_tuned(cfg, &model, source, subject)?;
            let base = &subject.images[0];
            let stack = subject_attention(&tuned, &binding, base, cfg.seed)?;
            let dir = stage.path().join(&subject.name);
            fs::create_dir_all(&dir)?;
            let mut maps = serde_json::Map::new();
            for token in tokens {
                let map = token_map(&stack, token_index(&binding, token)?, &policy)?;
                imageio::save_png8(
                    &render_heatmap(&map, base)?,
                    &dir.join(format!("{}.png", token_file_stem(token))),
                )?;
                maps.insert(
                    token.clone(),
                    serde_json::json!({ "grid": map.grid, "normalized": normalize_map(&map.grid) }),
                );
            }
            write_json(&maps, &dir.join("maps.json"))?;
            stack
                .to_archive(Some(&policy))
                .write(&dir.join("attention.agarch"))?;
        }
        stage.commit()?;
    }
    Ok(())
}
