//! Contracts that need a pretrained toy model. The model is trained once per
//! test binary with the default schedule.

use attnguard::checkpoint;
use attnguard::eval::{self, EvalConfig};
use attnguard::finetune::{finetune, frozen_hash, probe_loss, FinetuneConfig, TrainableSet};
use attnguard::losses::evaluate_objective;
use attnguard::pgd::{attack, AttackConfig};
use attnguard::synth::{self, FaceClass};
use attnguard::toy_ldm::gaussian;
use attnguard::train::{pretrain_synthetic, PretrainConfig, PretrainReport};
use attnguard::{ModelConfig, PixelImage, SignMode, ToyLdm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

const TOY_LR: f64 = 3e-3;

fn trained() -> &'static (ToyLdm, PretrainReport) {
    static M: OnceLock<(ToyLdm, PretrainReport)> = OnceLock::new();
    M.get_or_init(|| {
        pretrain_synthetic(ModelConfig::default(), &PretrainConfig::default()).unwrap()
    })
}

fn training_images() -> Vec<PixelImage> {
    let cfg = PretrainConfig::default();
    synth::corpus(cfg.corpus_size, 64, cfg.seed + 1)
        .into_iter()
        .map(|c| c.image)
        .collect()
}

#[test]
fn autoencoder_round_trip_error_is_small() {
    let (model, report) = trained();
    let images = training_images();
    let mae: f64 = images
        .iter()
        .map(|img| {
            model
                .decode(&model.encode(img).unwrap())
                .unwrap()
                .mean_abs_diff(img)
        })
        .sum::<f64>()
        / images.len() as f64;
    assert!(mae < 0.05, "round-trip MAE {mae}");
    assert!((mae - report.reconstruction_mae).abs() < 1e-12);
}

#[test]
fn distinct_images_have_distinct_latents() {
    let (model, _) = trained();
    let images = training_images();
    let latents: Vec<_> = images[..120]
        .iter()
        .map(|i| model.encode(i).unwrap().tensor)
        .collect();
    for i in 0..latents.len() {
        for j in i + 1..latents.len() {
            if images[i] == images[j] {
                continue;
            }
            let d = (&latents[i] - &latents[j]).mapv(|v| v * v).sum().sqrt();
            assert!(d > 1e-6, "images {i} and {j} collapse to one latent");
        }
    }
}

#[test]
fn pretraining_reduced_denoiser_loss() {
    let (_, report) = trained();
    let head: f64 = report.denoiser_losses[..100].iter().sum::<f64>() / 100.0;
    let n = report.denoiser_losses.len();
    let tail: f64 = report.denoiser_losses[n - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn kv_only_finetune_leaves_everything_else_untouched() {
    let (model, _) = trained();
    let subject = synth::subject(FaceClass::Woman, 5, 64, 3);
    let binding = model
        .bind_token("a photo of a <v> <class>", "woman", "ktn")
        .unwrap();
    let before = frozen_hash(model, TrainableSet::KvOnly);
    let original = model.clone();
    let cfg = FinetuneConfig {
        steps: 40,
        lr: TOY_LR,
        trainable: TrainableSet::KvOnly,
        ..FinetuneConfig::default()
    };
    let out = finetune(model, &subject.images, &binding, &cfg).unwrap();
    assert_eq!(frozen_hash(&out.model, TrainableSet::KvOnly), before);
    assert_eq!(out.binding.user_embedding, binding.user_embedding);
    assert_ne!(
        out.model.params.get("unet.ca0.k.w").unwrap(),
        model.params.get("unet.ca0.k.w").unwrap()
    );
    assert_ne!(
        out.model.params.get("unet.ca1.v.w").unwrap(),
        model.params.get("unet.ca1.v.w").unwrap()
    );
    assert_eq!(model, &original);

    let out = finetune(
        model,
        &subject.images,
        &binding,
        &FinetuneConfig {
            trainable: TrainableSet::KvPlusToken,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(frozen_hash(&out.model, TrainableSet::KvPlusToken), before);
    assert_ne!(out.binding.user_embedding, binding.user_embedding);
}

#[test]
fn finetuning_lowers_subject_loss() {
    let (model, _) = trained();
    let subject = synth::subject(FaceClass::Man, 5, 64, 21);
    let binding = model
        .bind_token("a photo of a <v> <class>", "man", "ktn")
        .unwrap();
    let before = probe_loss(model, &binding, &subject.images, 0).unwrap();
    for lr in [FinetuneConfig::default().lr, TOY_LR] {
        let out = finetune(
            model,
            &subject.images,
            &binding,
            &FinetuneConfig {
                lr,
                ..FinetuneConfig::default()
            },
        )
        .unwrap();
        let after = probe_loss(&out.model, &out.binding, &subject.images, 0).unwrap();
        assert!(after < before, "lr {lr}: {before} -> {after}");
        assert_eq!(out.losses.len(), 250);
    }
}

#[test]
fn personalized_samples_move_toward_the_subject() {
    let (model, _) = trained();
    let all = synth::subject(FaceClass::Woman, 21, 64, 40).images;
    let (train, refs) = all.split_at(5);
    let binding = model
        .bind_token("a photo of a <v> <class>", "woman", "ktn")
        .unwrap();
    let providers = eval::toy_providers(refs, 0).unwrap();
    let ec = EvalConfig {
        n_samples: 16,
        sampling_steps: 25,
        seed: 1,
    };
    let base = eval::evaluate(model, &binding, refs, &providers, &ec).unwrap();
    let out = finetune(
        model,
        train,
        &binding,
        &FinetuneConfig {
            lr: TOY_LR,
            ..FinetuneConfig::default()
        },
    )
    .unwrap();
    let tuned = eval::evaluate(&out.model, &out.binding, refs, &providers, &ec).unwrap();
    assert!(
        tuned.ism.unwrap() > base.ism.unwrap(),
        "{base:?} vs {tuned:?}"
    );
    assert!(tuned.fid.unwrap() < base.fid.unwrap());
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let (model, _) = trained();
    let dir = std::env::temp_dir().join(format!("attnguard-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.agm");
    checkpoint::save_model(model, &path).unwrap();
    let back = checkpoint::load_model(&path).unwrap();
    assert_eq!(&back, model);

    let subject = synth::subject(FaceClass::Man, 3, 64, 9);
    let binding = model
        .bind_token("a photo of a <v> <class>", "man", "ktn")
        .unwrap();
    let out = finetune(
        model,
        &subject.images,
        &binding,
        &FinetuneConfig {
            steps: 5,
            lr: TOY_LR,
            ..FinetuneConfig::default()
        },
    )
    .unwrap();
    let delta = dir.join("delta.agm");
    checkpoint::save_delta(model, &out.model, &out.binding, &delta).unwrap();
    let (m, b) = checkpoint::load_delta(&back, &delta).unwrap();
    assert_eq!(m, out.model);
    assert_eq!(b, out.binding);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn default_attack_ascends_its_objective() {
    let (model, _) = trained();
    let config = AttackConfig::default();
    let (lo, hi) = config.timestep_window(model.config.timesteps);
    let mut literal = 0;
    let mut fixed = 0;
    for seed in 0..5u64 {
        let class = if seed % 2 == 0 {
            FaceClass::Man
        } else {
            FaceClass::Woman
        };
        let img = synth::subject(class, 1, 64, 300 + seed).images.remove(0);
        let binding = model
            .bind_token("a photo of a <v> <class>", class.word(), "ktn")
            .unwrap();
        let r = attack(
            &img,
            model,
            &binding,
            &AttackConfig {
                seed,
                ..config.clone()
            },
        )
        .unwrap();
        assert_eq!(r.trace.len(), 250);
        literal += usize::from(r.trace[249].total > r.trace[0].total);

        // Same draws at both ends, so only the image differs.
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (mut before, mut after) = (0.0, 0.0);
        for _ in 0..16 {
            let t = rng.random_range(lo..=hi);
            let eps = gaussian(model.config.latent_shape(), &mut rng);
            let at = |x: &PixelImage| {
                evaluate_objective(
                    model,
                    &x.to_matrix(),
                    &binding,
                    t,
                    &eps,
                    config.lambda,
                    SignMode::Divergence,
                )
                .unwrap()
                .breakdown
                .total
            };
            before += at(&img);
            after += at(&r.image);
        }
        fixed += usize::from(after > before);
    }
    assert!(literal >= 4, "trace rose in {literal}/5 seeds");
    assert!(fixed >= 4, "fixed-draw objective rose in {fixed}/5 seeds");
}
