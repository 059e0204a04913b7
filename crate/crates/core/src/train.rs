//! Pretraining of the toy model on a captioned corpus: the autoencoder first,
//! then the denoiser and text embeddings on frozen latents.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::prompt::tokenize;
use crate::synth::{self, CorpusItem};
use crate::toy_ldm::{
    gaussian, names, Binder, LatentCode, ModelConfig, ParamStore, ToyLdm, Trainable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub ae_steps: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub denoiser_steps: usize,
    pub denoiser_batch: usize,
    pub denoiser_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 600,
            ae_steps: 1500,
            ae_batch: 8,
            ae_lr: 2e-3,
            denoiser_steps: 4000,
            denoiser_batch: 16,
            denoiser_lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// A much shorter schedule for smoke tests.
    pub fn quick() -> Self {
        Self {
            corpus_size: 64,
            ae_steps: 150,
            denoiser_steps: 150,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub ae_losses: Vec<f64>,
    pub denoiser_losses: Vec<f64>,
    /// Mean absolute reconstruction error over the corpus.
    pub reconstruction_mae: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr_scale: f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = self.lr * lr_scale;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

fn sum_grads(
    items: Vec<(f64, BTreeMap<String, Array2<f64>>)>,
) -> (f64, BTreeMap<String, Array2<f64>>) {
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (l, grads) in items {
        loss += l;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => *a += &g,
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        *g /= n;
    }
    (loss / n, acc)
}

fn cosine_lr(step: usize, total: usize) -> f64 {
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

fn is_autoencoder(name: &str) -> bool {
    name.starts_with(names::AUTOENCODER)
}

fn is_denoiser_or_text(name: &str) -> bool {
    name.starts_with(names::DENOISER) || name == names::TEXT_TABLE
}

/// Trains the autoencoder on `images`, then standardizes its latent space.
pub fn train_autoencoder(
    model: &mut ToyLdm,
    images: &[PixelImage],
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xae);
    let mut adam = Adam::new(config.ae_lr);
    let mut losses = Vec::with_capacity(config.ae_steps);
    let filter = is_autoencoder;
    for step in 0..config.ae_steps {
        let batch: Vec<&PixelImage> = (0..config.ae_batch)
            .map(|_| &images[rng.random_range(0..images.len())])
            .collect();
        let frozen: &ToyLdm = model;
        let items: Vec<(f64, BTreeMap<String, Array2<f64>>)> = batch
            .par_iter()
            .map(|img| {
                let mut g = Graph::new();
                let mut b = Binder::new(&frozen.params, Trainable::Only(&filter));
                let x = g.constant(img.to_matrix());
                let z = frozen.encode_graph(&mut g, &mut b, x)?;
                let y = frozen.decode_graph(&mut g, &mut b, z)?;
                let diff = g.sub(y, x);
                let sq = g.sum_squares(diff);
                let loss = g.scale(sq, 1.0 / img.len() as f64);
                let grads = g.backward(loss);
                Ok((g.scalar(loss), b.gradients(&g, &grads)))
            })
            .collect::<Result<_>>()?;
        let (loss, grads) = sum_grads(items);
        adam.update(&mut model.params, &grads, cosine_lr(step, config.ae_steps))?;
        losses.push(loss);
    }
    standardize_latents(model, images)?;
    Ok(losses)
}

/// Folds per-channel mean/std of the corpus latents into the autoencoder.
pub fn standardize_latents(model: &mut ToyLdm, images: &[PixelImage]) -> Result<()> {
    let lc = model.config.latent_channels;
    let mut sum = vec![0.0; lc];
    let mut sq = vec![0.0; lc];
    let mut n = 0.0;
    for img in images {
        let z = model.encode(img)?;
        for row in z.tensor.rows() {
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(1e-12).sqrt())
        .collect();
    model.fold_latent_normalization(&mean, &std)
}

/// Trains denoiser and text table on `(latent, caption)` pairs.
pub fn train_denoiser(
    model: &mut ToyLdm,
    items: &[(Array2<f64>, Vec<String>)],
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd1);
    let mut adam = Adam::new(config.denoiser_lr);
    let mut losses = Vec::with_capacity(config.denoiser_steps);
    let shape = model.config.latent_shape();
    let big_t = model.config.timesteps;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let filter = is_denoiser_or_text;
    for step in 0..config.denoiser_steps {
        let mut draws = Vec::with_capacity(config.denoiser_batch);
        for _ in 0..config.denoiser_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let t = rng.random_range(1..=big_t);
            draws.push((idx, t, gaussian(shape, &mut rng)));
        }
        let frozen: &ToyLdm = model;
        let results: Vec<(f64, BTreeMap<String, Array2<f64>>)> = draws
            .par_iter()
            .map(|(idx, t, eps)| {
                let (z0, tokens) = &items[*idx];
                let zt = frozen.add_noise(
                    &LatentCode {
                        tensor: z0.clone(),
                        timestep: 0,
                    },
                    *t,
                    eps,
                )?;
                let mut g = Graph::new();
                let mut b = Binder::new(&frozen.params, Trainable::Only(&filter));
                let z = g.constant(zt.tensor);
                let cond = frozen.cond_graph(&mut g, &mut b, tokens, None)?;
                let trace = frozen.denoise_graph(&mut g, &mut b, z, *t, cond)?;
                let target = g.constant(eps.clone());
                let diff = g.sub(target, trace.eps);
                let sq = g.sum_squares(diff);
                let loss = g.scale(sq, 1.0 / eps.len() as f64);
                let grads = g.backward(loss);
                Ok((g.scalar(loss), b.gradients(&g, &grads)))
            })
            .collect::<Result<_>>()?;
        let (loss, grads) = sum_grads(results);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "denoiser loss diverged at step {step}"
            )));
        }
        adam.update(
            &mut model.params,
            &grads,
            cosine_lr(step, config.denoiser_steps),
        )?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Builds and trains a toy model on `corpus`.
pub fn pretrain(
    model_config: ModelConfig,
    config: &PretrainConfig,
    corpus: &[CorpusItem],
) -> Result<(ToyLdm, PretrainReport)> {
    let mut model = ToyLdm::new(model_config, config.seed)?;
    let images: Vec<PixelImage> = corpus.iter().map(|c| c.image.clone()).collect();
    let ae_losses = train_autoencoder(&mut model, &images, config)?;
    let items: Vec<(Array2<f64>, Vec<String>)> = corpus
        .iter()
        .map(|c| Ok((model.encode(&c.image)?.tensor, tokenize(&c.caption))))
        .collect::<Result<_>>()?;
    let denoiser_losses = train_denoiser(&mut model, &items, config)?;
    let mut mae = 0.0;
    for img in &images {
        let rec = model.decode(&model.encode(img)?)?;
        mae += rec.mean_abs_diff(img);
    }
    let report = PretrainReport {
        ae_losses,
        denoiser_losses,
        reconstruction_mae: mae / images.len() as f64,
    };
    Ok((model, report))
}

/// Pretrains on a freshly rendered synthetic corpus of
/// `config.corpus_size` captioned faces.
pub fn pretrain_synthetic(
    model_config: ModelConfig,
    config: &PretrainConfig,
) -> Result<(ToyLdm, PretrainReport)> {
    model_config.validate()?;
    let corpus = synth::corpus(
        config.corpus_size,
        model_config.image_size,
        config.seed.wrapping_add(1),
    );
    pretrain(model_config, config, &corpus)
}
