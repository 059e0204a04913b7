//! ℓ∞-bounded signed-gradient ascent on the blended attack objective.
//!
//! The perturbation is tracked relative to the clean image, so every iterate
//! satisfies `‖x_p − x‖_∞ ≤ η` and `x_p ∈ [0, 1]`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{self, FinetuneConfig, TrainableSet};
use crate::image::PixelImage;
use crate::losses::{check_lambda, evaluate_objective, LossBreakdown, ObjectiveEval, SignMode};
use crate::prompt::PromptBinding;
use crate::toy_ldm::{gaussian, ToyLdm};

/// Whether the surrogate model changes while the perturbation is crafted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SurrogatePolicy {
    #[default]
    Frozen,
    /// One K/V + token fine-tuning step on the current protected images
    /// every `every` PGD iterations.
    Alternating { every: usize, lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub eta: f64,
    pub step_size: f64,
    pub steps: usize,
    pub lambda: f64,
    pub sign_mode: SignMode,
    /// Timesteps are drawn uniformly from `[t_min_frac·T, t_max_frac·T]`.
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub seed: u64,
    pub surrogate: SurrogatePolicy,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eta: 8.0 / 255.0,
            step_size: 2e-3,
            steps: 250,
            lambda: 0.1,
            sign_mode: SignMode::Divergence,
            t_min_frac: 0.1,
            t_max_frac: 0.9,
            seed: 0,
            surrogate: SurrogatePolicy::Frozen,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Argument(format!(
                "budget η={} must be a finite value ≥ 0",
                self.eta
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Argument(format!(
                "step size {} must be > 0",
                self.step_size
            )));
        }
        if self.steps < 1 {
            return Err(Error::Argument(
                "attack needs at least one iteration".into(),
            ));
        }
        check_lambda(self.lambda)?;
        if !(0.0 <= self.t_min_frac && self.t_min_frac <= self.t_max_frac && self.t_max_frac <= 1.0)
        {
            return Err(Error::Argument(
                "timestep window must satisfy 0 ≤ min ≤ max ≤ 1".into(),
            ));
        }
        if let SurrogatePolicy::Alternating { every, lr } = self.surrogate {
            if every == 0 || lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Argument(
                    "alternating surrogate needs every ≥ 1 and lr > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Inclusive timestep window for a schedule with `timesteps` steps.
    pub fn timestep_window(&self, timesteps: usize) -> (usize, usize) {
        let lo = ((self.t_min_frac * timesteps as f64).ceil() as usize).max(1);
        let hi = ((self.t_max_frac * timesteps as f64).floor() as usize).clamp(lo, timesteps);
        (lo, hi)
    }
}

/// One PGD iteration as written to the attack log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub t: usize,
    pub rec: f64,
    pub cos: f64,
    pub total: f64,
    pub cos_skipped: bool,
    pub grad_norm: f64,
    /// `‖x_p − x‖_∞` after this iteration's update.
    pub linf: f64,
}

impl IterationRecord {
    pub fn breakdown(&self, config: &AttackConfig) -> LossBreakdown {
        LossBreakdown {
            rec: self.rec,
            cos: self.cos,
            total: self.total,
            lambda: config.lambda,
            sign_mode: config.sign_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtectedResult {
    pub clean: PixelImage,
    pub image: PixelImage,
    /// `x_p − x`, as `(H·W) × 3`.
    pub delta: Array2<f64>,
    pub trace: Vec<IterationRecord>,
    pub config: AttackConfig,
}

impl ProtectedResult {
    pub fn linf(&self) -> f64 {
        self.image.linf_distance(&self.clean)
    }

    /// Attack log as JSON lines, one record per iteration.
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Elementwise clamp of `delta` into `[−η, η]`.
pub fn project(delta: &Array2<f64>, eta: f64) -> Array2<f64> {
    delta.mapv(|d| d.clamp(-eta, eta))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step: `clamp₀₁(x + project((x_p − x) + k·sign(∇), η))`.
pub fn step(
    clean: &Array2<f64>,
    current: &Array2<f64>,
    grad: &Array2<f64>,
    k: f64,
    eta: f64,
) -> Result<Array2<f64>> {
    if grad.dim() != clean.dim() || current.dim() != clean.dim() {
        return Err(Error::Argument("gradient and image shapes differ".into()));
    }
    if let Some(pos) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at element {pos}"
        )));
    }
    let mut out = Array2::zeros(clean.dim());
    ndarray::Zip::from(&mut out)
        .and(clean)
        .and(current)
        .and(grad)
        .for_each(|o, &x, &xp, &g| {
            let delta = ((xp - x) + k * sign(g)).clamp(-eta, eta);
            *o = (x + delta).clamp(0.0, 1.0);
        });
    Ok(out)
}

/// [`step`] on images.
pub fn step_image(
    clean: &PixelImage,
    current: &PixelImage,
    grad: &Array2<f64>,
    k: f64,
    eta: f64,
) -> Result<PixelImage> {
    let next = step(&clean.to_matrix(), &current.to_matrix(), grad, k, eta)?;
    PixelImage::from_matrix(clean.height(), clean.width(), &next)
}

/// Attacks a single image.
pub fn attack(
    x: &PixelImage,
    model: &ToyLdm,
    binding: &PromptBinding,
    config: &AttackConfig,
) -> Result<ProtectedResult> {
    Ok(attack_batch(std::slice::from_ref(x), model, binding, config)?.remove(0))
}

struct Draw {
    t: usize,
    eps: Array2<f64>,
}

/// Attacks a subject's images jointly; the objective is summed over the set,
/// so each image follows the sign of its own term.
pub fn attack_batch(
    images: &[PixelImage],
    model: &ToyLdm,
    binding: &PromptBinding,
    config: &AttackConfig,
) -> Result<Vec<ProtectedResult>> {
    attack_batch_observed(images, model, binding, config, |_, _| {})
}

/// [`attack_batch`], calling `observe(iteration, iterates)` with the
/// `(H·W)×3` pixel matrices after every update.
pub fn attack_batch_observed(
    images: &[PixelImage],
    model: &ToyLdm,
    binding: &PromptBinding,
    config: &AttackConfig,
    mut observe: impl FnMut(usize, &[Array2<f64>]),
) -> Result<Vec<ProtectedResult>> {
    config.validate()?;
    binding.validate()?;
    if images.is_empty() {
        return Err(Error::Argument("no images to protect".into()));
    }
    let clean: Vec<Array2<f64>> = images.iter().map(PixelImage::to_matrix).collect();
    let mut current = clean.clone();
    let mut traces: Vec<Vec<IterationRecord>> =
        vec![Vec::with_capacity(config.steps); images.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (t_lo, t_hi) = config.timestep_window(model.config.timesteps);
    let shape = model.config.latent_shape();

    let mut surrogate = model.clone();
    let mut surrogate_binding = binding.clone();
    let mut ft_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d);

    for iteration in 1..=config.steps {
        let draws: Vec<Draw> = (0..images.len())
            .map(|_| {
                let t = rng.random_range(t_lo..=t_hi);
                Draw {
                    t,
                    eps: gaussian(shape, &mut rng),
                }
            })
            .collect();

        let evaluated: Vec<Result<ObjectiveEval>> = current
            .par_iter()
            .zip(draws.par_iter())
            .map(|(xp, d)| evaluate(&surrogate, xp, &surrogate_binding, d, config))
            .collect();

        for (i, res) in evaluated.into_iter().enumerate() {
            let ObjectiveEval {
                breakdown,
                cos_skipped: skipped,
                grad,
            } = res.map_err(|e| {
                Error::Numerical(format!(
                    "attack aborted at iteration {iteration}, image {i} after {} recorded iterations: {e}",
                    traces[i].len()
                ))
            })?;
            if skipped {
                log::warn!("iteration {iteration}, image {i}: degenerate attention map, cosine term skipped");
            }
            let next =
                step(&clean[i], &current[i], &grad, config.step_size, config.eta).map_err(|e| {
                    Error::Numerical(format!(
                        "attack aborted at iteration {iteration}, image {i}: {e}"
                    ))
                })?;
            let linf = next
                .iter()
                .zip(clean[i].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            debug_assert!(linf <= config.eta + 1e-9);
            current[i] = next;
            traces[i].push(IterationRecord {
                iteration,
                t: draws[i].t,
                rec: breakdown.rec,
                cos: breakdown.cos,
                total: breakdown.total,
                cos_skipped: skipped,
                grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
                linf,
            });
        }

        observe(iteration, &current);

        if let SurrogatePolicy::Alternating { every, lr } = config.surrogate {
            if iteration % every == 0 {
                let protected: Vec<PixelImage> = current
                    .iter()
                    .map(|m| PixelImage::from_matrix(images[0].height(), images[0].width(), m))
                    .collect::<Result<_>>()?;
                let latents = finetune::encode_all(&surrogate, &protected)?;
                let ft = FinetuneConfig {
                    lr,
                    trainable: TrainableSet::KvPlusToken,
                    ..FinetuneConfig::default()
                };
                finetune::sgd_step(
                    &mut surrogate,
                    &mut surrogate_binding,
                    &latents,
                    &ft,
                    &mut ft_rng,
                )?;
            }
        }
    }

    images
        .iter()
        .zip(current)
        .zip(traces)
        .map(|((x, xp), trace)| {
            let image = PixelImage::from_matrix(x.height(), x.width(), &xp)?;
            let delta = &xp - &x.to_matrix();
            Ok(ProtectedResult {
                clean: x.clone(),
                image,
                delta,
                trace,
                config: config.clone(),
            })
        })
        .collect()
}

fn evaluate(
    model: &ToyLdm,
    pixels: &Array2<f64>,
    binding: &PromptBinding,
    draw: &Draw,
    config: &AttackConfig,
) -> Result<ObjectiveEval> {
    evaluate_objective(
        model,
        pixels,
        binding,
        draw.t,
        &draw.eps,
        config.lambda,
        config.sign_mode,
    )
}
