//! Protective perturbations against subject-driven fine-tuning of a small
//! latent diffusion model.
//!
//! The crate holds a self-contained toy text-to-image model ([`toy_ldm`]), a
//! cross-attention probe ([`attention`]), the attack objective ([`losses`]),
//! the projected sign-gradient attack ([`pgd`]), the adversary's fine-tuning
//! loop ([`finetune`]) and the metrics used to score its outputs ([`eval`]).

pub mod archive;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod image;
pub mod losses;
pub mod pgd;
pub mod prompt;
pub mod schedule;
pub mod synth;
pub mod toy_ldm;
pub mod train;

pub use attention::{AttentionStack, ReductionPolicy, TokenAttentionMap};
pub use error::{Error, Result};
pub use eval::{MetricsReport, ProviderSet};
pub use finetune::{FinetuneConfig, TrainableSet};
pub use image::PixelImage;
pub use losses::{LossBreakdown, SignMode};
pub use pgd::{AttackConfig, ProtectedResult, SurrogatePolicy};
pub use prompt::{PromptBinding, Vocabulary};
pub use schedule::NoiseSchedule;
pub use toy_ldm::{LatentCode, ModelConfig, PromptEmbedding, ToyLdm};
