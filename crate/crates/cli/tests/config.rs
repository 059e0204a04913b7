use std::process::Command;

use attnguard::finetune::TrainableSet;
use attnguard::SignMode;
use attnguard_cli::args::Command as Sub;
use attnguard_cli::{Cli, CliError, ExperimentConfig};
use clap::Parser;
use proptest::prelude::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attnguard"));
    c.env_remove("ATTNGUARD_CONFIG").env("RUST_LOG", "error");
    c
}

#[test]
fn defaults_match_the_reference_settings() {
    let cfg = ExperimentConfig::default().normalized().unwrap();
    assert_eq!(cfg.attack.eta, 8.0 / 255.0);
    assert_eq!(cfg.attack.step_size, 2e-3);
    assert_eq!(cfg.attack.lambda, 0.1);
    assert_eq!(cfg.attack.steps, 250);
    assert_eq!(cfg.finetune.lr, 1e-5);
    assert_eq!(cfg.finetune.batch, 2);
    assert_eq!(cfg.prompt_template, "a photo of a <v> <class>");
    assert_eq!(cfg.class_word, "man");
    assert_eq!(cfg.image_size, 64);
}

#[test]
fn flat_toml_round_trips() {
    let cfg = ExperimentConfig::default().normalized().unwrap();
    let text = cfg.to_toml_string().unwrap();
    assert!(
        text.lines().all(|l| !l.starts_with('[')),
        "expected dotted keys only:\n{text}"
    );
    assert!(text.contains("attack.eta = "));
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "attack.bogus = 1",
        "bogus = 1",
        "eval.n_samples = 4\nfinetune.momentum = 0.9",
    ] {
        assert!(
            matches!(
                ExperimentConfig::from_toml_str(text),
                Err(CliError::Config(_))
            ),
            "{text} was accepted"
        );
    }
}

#[test]
fn invalid_values_are_config_errors() {
    let huge =
        Cli::try_parse_from(["attnguard", "show-config", "--seed", &u64::MAX.to_string()]).unwrap();
    assert!(matches!(huge.experiment_config(), Err(CliError::Config(_))));
    for text in [
        "attack.eta = -0.1",
        "attack.lambda = 1.5",
        "eval.n_samples = 1",
        "finetune.lr = 0.0",
    ] {
        assert!(
            matches!(
                ExperimentConfig::from_toml_str(text),
                Err(CliError::Config(_)) | Err(CliError::Core(_))
            ),
            "{text} was accepted"
        );
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "attack.eta = 0.02\nattack.lambda = 0.3\nseed = 7\n").unwrap();
    let cli = Cli::try_parse_from([
        "attnguard",
        "--config",
        path.to_str().unwrap(),
        "protect",
        "--eta",
        "16/255",
        "--sign-mode",
        "additive",
        "--trainable",
        "kv-only",
        "--prompt",
        "a photo of a <v> person",
        "--lr",
        "3e-3",
    ])
    .unwrap();
    assert!(matches!(cli.command, Sub::Protect));
    let cfg = cli.experiment_config().unwrap();
    assert_eq!(cfg.attack.eta, 16.0 / 255.0);
    assert_eq!(cfg.attack.lambda, 0.3);
    assert_eq!(cfg.attack.sign_mode, SignMode::Additive);
    assert_eq!(cfg.finetune.trainable, TrainableSet::KvOnly);
    assert_eq!(cfg.finetune.lr, 3e-3);
    assert_eq!(cfg.prompt_template, "a photo of a <v> person");
    assert_eq!((cfg.seed, cfg.attack.seed, cfg.finetune.seed), (7, 7, 7));
}

#[test]
fn environment_variable_names_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "attack.steps = 17\nclass_word = \"woman\"\n").unwrap();
    let out = bin()
        .env("ATTNGUARD_CONFIG", &path)
        .arg("show-config")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("attack.steps = 17"), "{text}");
    assert!(text.contains("class_word = \"woman\""), "{text}");

    let out = bin()
        .env("ATTNGUARD_CONFIG", &path)
        .args(["show-config", "--steps", "3"])
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("attack.steps = 3"));
}

#[test]
fn bad_config_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "attack.nonsense = true\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&path)
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (
            0u32..=32,
            1e-4f64..1e-2,
            1usize..500,
            0.0f64..=1.0,
            any::<bool>(),
            0..=i64::MAX as u64,
        ),
        (
            1e-6f64..1e-1,
            1usize..8,
            1usize..1000,
            2usize..64,
            1usize..50,
        ),
        ("[a-z]{1,8}", "[a-z_/]{1,12}", 8usize..128),
    )
        .prop_map(|(attack, finetune, misc)| {
            let (eta_num, step_size, steps, lambda, additive, seed) = attack;
            let (lr, batch, ft_steps, n_samples, sampling_steps) = finetune;
            let (word, dir, image_size) = misc;
            let mut cfg = ExperimentConfig {
                seed,
                image_size,
                class_word: word.clone(),
                output_dir: dir.into(),
                prompt_template: format!("a photo of a <v> {word}"),
                ..ExperimentConfig::default()
            };
            cfg.attack.eta = f64::from(eta_num) / 255.0;
            cfg.attack.step_size = step_size;
            cfg.attack.steps = steps;
            cfg.attack.lambda = lambda;
            cfg.attack.sign_mode = if additive {
                SignMode::Additive
            } else {
                SignMode::Divergence
            };
            cfg.finetune.lr = lr;
            cfg.finetune.batch = batch;
            cfg.finetune.steps = ft_steps;
            cfg.eval.n_samples = n_samples;
            cfg.eval.sampling_steps = sampling_steps;
            cfg.normalized().unwrap()
        })
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(cfg in arb_config()) {
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
