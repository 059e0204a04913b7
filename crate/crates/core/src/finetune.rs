//! Adversary-side personalization: plain SGD on the noise reconstruction
//! loss, restricted to the cross-attention key/value projections and
//! (optionally) the subject token embedding.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{token_map, ReductionPolicy};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::losses::{cos_loss, rec_loss_graph};
use crate::prompt::PromptBinding;
use crate::toy_ldm::{gaussian, names, Binder, LatentCode, ToyLdm, Trainable};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableSet {
    /// Cross-attention `W_K`, `W_V` only.
    KvOnly,
    /// `W_K`, `W_V` and the subject token embedding.
    #[default]
    KvPlusToken,
    /// Every denoiser and text parameter (the autoencoder stays frozen).
    Full,
}

impl TrainableSet {
    pub fn trains_param(self, name: &str) -> bool {
        match self {
            TrainableSet::KvOnly | TrainableSet::KvPlusToken => names::is_cross_attention_kv(name),
            TrainableSet::Full => !name.starts_with(names::AUTOENCODER),
        }
    }

    pub fn trains_token(self) -> bool {
        !matches!(self, TrainableSet::KvOnly)
    }
}

impl std::str::FromStr for TrainableSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv-only" | "kv_only" => Ok(TrainableSet::KvOnly),
            "kv-plus-token" | "kv_plus_token" => Ok(TrainableSet::KvPlusToken),
            "full" => Ok(TrainableSet::Full),
            other => Err(Error::Argument(format!("unknown trainable set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub trainable: TrainableSet,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            lr: 1e-5,
            batch: 2,
            trainable: TrainableSet::KvPlusToken,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Argument(
                "fine-tuning needs at least one step".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        if self.batch < 1 {
            return Err(Error::Argument("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ToyLdm,
    pub binding: PromptBinding,
    /// Mean per-image reconstruction loss of each step's batch.
    pub losses: Vec<f64>,
}

pub fn encode_all(model: &ToyLdm, images: &[PixelImage]) -> Result<Vec<Array2<f64>>> {
    images
        .iter()
        .map(|img| model.encode(img).map(|z| z.tensor))
        .collect()
}

struct ItemGrad {
    loss: f64,
    params: BTreeMap<String, Array2<f64>>,
    user: Option<Array2<f64>>,
}

fn item_gradient(
    model: &ToyLdm,
    binding: &PromptBinding,
    z0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    trainable: TrainableSet,
) -> Result<ItemGrad> {
    let filter = |name: &str| trainable.trains_param(name);
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, Trainable::Only(&filter));
    let zt = model.add_noise(
        &LatentCode {
            tensor: z0.clone(),
            timestep: 0,
        },
        t,
        eps,
    )?;
    let z = g.constant(zt.tensor);
    let user = if trainable.trains_token() {
        g.variable(binding.user_embedding.clone())
    } else {
        g.constant(binding.user_embedding.clone())
    };
    let cond = model.cond_graph(&mut g, &mut b, &binding.tokens, Some(user))?;
    let trace = model.denoise_graph(&mut g, &mut b, z, t, cond)?;
    let loss = rec_loss_graph(&mut g, trace.eps, eps)?;
    let grads = g.backward(loss);
    let user_grad = trainable
        .trains_token()
        .then(|| grads.get_or_zeros(user, binding.user_embedding.dim()));
    Ok(ItemGrad {
        loss: g.scalar(loss),
        params: b.gradients(&g, &grads),
        user: user_grad,
    })
}

/// One SGD step on `batch` latents with freshly drawn `(t, ε)`; returns the
/// mean per-image loss before the update.
pub fn sgd_step_on(
    model: &mut ToyLdm,
    binding: &mut PromptBinding,
    batch: &[&Array2<f64>],
    config: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let shape = model.config.latent_shape();
    let big_t = model.config.timesteps;
    let draws: Vec<(usize, Array2<f64>)> = batch
        .iter()
        .map(|_| {
            let t = rng.random_range(1..=big_t);
            (t, gaussian(shape, rng))
        })
        .collect();
    let frozen: &ToyLdm = model;
    let frozen_binding: &PromptBinding = binding;
    let items: Vec<ItemGrad> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(z0, (t, eps))| item_gradient(frozen, frozen_binding, z0, *t, eps, config.trainable))
        .collect::<Result<_>>()?;

    let n = items.len() as f64;
    let mean_loss = items.iter().map(|i| i.loss).sum::<f64>() / n;
    if !mean_loss.is_finite() {
        return Err(Error::Numerical("non-finite fine-tuning loss".into()));
    }
    let mut param_grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut user_grad: Option<Array2<f64>> = None;
    for item in items {
        for (name, grad) in item.params {
            match param_grads.get_mut(&name) {
                Some(acc) => *acc += &grad,
                None => {
                    param_grads.insert(name, grad);
                }
            }
        }
        if let Some(u) = item.user {
            match &mut user_grad {
                Some(acc) => *acc += &u,
                None => user_grad = Some(u),
            }
        }
    }
    let step = config.lr / n;
    for (name, grad) in param_grads {
        let p = model.params.get_mut(&name)?;
        p.scaled_add(-step, &grad);
    }
    if let Some(u) = user_grad {
        binding.user_embedding.scaled_add(-step, &u);
    }
    Ok(mean_loss)
}

/// One SGD step on a random minibatch drawn from `latents`.
pub fn sgd_step(
    model: &mut ToyLdm,
    binding: &mut PromptBinding,
    latents: &[Array2<f64>],
    config: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::Argument("no images to fine-tune on".into()));
    }
    let batch: Vec<&Array2<f64>> = (0..config.batch.min(latents.len()))
        .map(|_| &latents[rng.random_range(0..latents.len())])
        .collect();
    sgd_step_on(model, binding, &batch, config, rng)
}

/// Personalizes a copy of `model` on `images` under `binding`'s prompt.
pub fn finetune(
    model: &ToyLdm,
    images: &[PixelImage],
    binding: &PromptBinding,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    binding.validate()?;
    if images.is_empty() {
        return Err(Error::Argument("no images to fine-tune on".into()));
    }
    let latents = encode_all(model, images)?;
    let mut tuned = model.clone();
    let mut tuned_binding = binding.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(latents.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&latents[order[cursor]]);
            cursor += 1;
        }
        losses.push(sgd_step_on(
            &mut tuned,
            &mut tuned_binding,
            &batch,
            config,
            &mut rng,
        )?);
    }
    Ok(FinetuneOutcome {
        model: tuned,
        binding: tuned_binding,
        losses,
    })
}

/// Timesteps at which attention alignment is measured.
pub fn probe_timesteps(timesteps: usize) -> Vec<usize> {
    [0.2, 0.5, 0.8]
        .iter()
        .map(|f| ((f * timesteps as f64).round() as usize).max(1))
        .collect()
}

/// Mean cosine similarity between the subject-token and class-token maps
/// over `images` × `timesteps`, with noise drawn from `seed`.
pub fn attention_alignment(
    model: &ToyLdm,
    binding: &PromptBinding,
    images: &[PixelImage],
    timesteps: &[usize],
    seed: u64,
) -> Result<f64> {
    if images.is_empty() || timesteps.is_empty() {
        return Err(Error::Argument(
            "alignment needs images and timesteps".into(),
        ));
    }
    let cond = model.embed_binding(binding)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.config.latent_shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images {
        let z0 = model.encode(img)?;
        for &t in timesteps {
            let eps = gaussian(shape, &mut rng);
            let zt = model.add_noise(&z0, t, &eps)?;
            let out = model.denoise(&zt, t, &cond)?;
            let policy = ReductionPolicy::mean_all();
            let map_v = token_map(&out.attention, binding.v_index, &policy)?;
            let map_o = token_map(&out.attention, binding.o_index, &policy)?;
            total += cos_loss(&map_v, &map_o)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Hash of every parameter `trainable` may not touch.
pub fn frozen_hash(model: &ToyLdm, trainable: TrainableSet) -> String {
    model
        .params
        .hash_filtered(|name| !trainable.trains_param(name))
}

/// Mean reconstruction loss over `images` × [`probe_timesteps`] with noise
/// fixed by `seed`; a deterministic yardstick for comparing model states.
pub fn probe_loss(
    model: &ToyLdm,
    binding: &PromptBinding,
    images: &[PixelImage],
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Argument("probe loss needs images".into()));
    }
    let cond = model.embed_binding(binding)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.config.latent_shape();
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images {
        let z0 = model.encode(img)?;
        for t in probe_timesteps(model.config.timesteps) {
            let eps = gaussian(shape, &mut rng);
            let zt = model.add_noise(&z0, t, &eps)?;
            let out = model.denoise(&zt, t, &cond)?;
            total += (&out.eps_pred - &eps).mapv(|v| v * v).sum();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
