//! A miniature latent diffusion model: a patch autoencoder, a learnable token
//! embedding table, a two-level conditional denoiser with cross-attention and
//! an ancestral DDPM sampler.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionEntry, AttentionStack, GraphAttention};
use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::prompt::{PromptBinding, Vocabulary, USER_TOKEN};
use crate::schedule::NoiseSchedule;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub ae_hidden: usize,
    pub channels: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            latent_channels: 4,
            ae_hidden: 96,
            channels: 32,
            heads: 2,
            text_dim: 32,
            timesteps: 100,
        }
    }
}

impl ModelConfig {
    pub fn latent_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (
            self.latent_side() * self.latent_side(),
            self.latent_channels,
        )
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * PixelImage::CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.image_size.is_multiple_of(self.patch)
            && self.latent_side() >= 2
            && self.latent_side().is_multiple_of(2)
            && self.heads > 0
            && self.channels.is_multiple_of(self.heads)
            && self.latent_channels > 0
            && self.text_dim > 0
            && self.timesteps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "inconsistent model configuration {self:?}"
            )))
        }
    }
}

/// Named weight arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// SHA-256 over the names, shapes and exact bit patterns of the
    /// parameters accepted by `filter`.
    pub fn hash_filtered(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.params {
            if !filter(name) {
                continue;
            }
            h.update(name.as_bytes());
            h.update((value.nrows() as u64).to_le_bytes());
            h.update((value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> String {
        self.hash_filtered(|_| true)
    }
}

/// Fixed index tables and resampling matrices derived from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    pub patchify: Arc<Vec<Option<usize>>>,
    pub unpatchify: Arc<Vec<Option<usize>>>,
    pub im2col: Arc<Vec<Option<usize>>>,
    pub im2col_half: Arc<Vec<Option<usize>>>,
    pub pool: Arc<Array2<f64>>,
    pub upsample: Arc<Array2<f64>>,
}

impl Geometry {
    fn new(cfg: &ModelConfig) -> Self {
        let size = cfg.image_size;
        let p = cfg.patch;
        let side = cfg.latent_side();
        let c = PixelImage::CHANNELS;
        let pd = cfg.patch_dim();

        let mut patchify = Vec::with_capacity(side * side * pd);
        for by in 0..side {
            for bx in 0..side {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let y = by * p + py;
                            let x = bx * p + px;
                            patchify.push(Some((y * size + x) * c + ch));
                        }
                    }
                }
            }
        }
        let mut unpatchify = Vec::with_capacity(size * size * c);
        for y in 0..size {
            for x in 0..size {
                for ch in 0..c {
                    let patch = (y / p) * side + x / p;
                    let within = ((y % p) * p + x % p) * c + ch;
                    unpatchify.push(Some(patch * pd + within));
                }
            }
        }
        Self {
            patchify: Arc::new(patchify),
            unpatchify: Arc::new(unpatchify),
            im2col: Arc::new(im2col_index(side, cfg.channels)),
            im2col_half: Arc::new(im2col_index(side / 2, cfg.channels)),
            pool: Arc::new(avg_pool_matrix(side)),
            upsample: Arc::new(bilinear_matrix(side / 2, side)),
        }
    }
}

/// 3×3 neighbourhood gather for a `side×side` grid with `channels` columns,
/// zero padded. Output columns are ordered (offset, channel).
pub(crate) fn im2col_index(side: usize, channels: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(side * side * 9 * channels);
    for y in 0..side as isize {
        for x in 0..side as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x + dx);
                    let inside = ny >= 0 && nx >= 0 && ny < side as isize && nx < side as isize;
                    for ch in 0..channels {
                        idx.push(
                            inside.then(|| (ny as usize * side + nx as usize) * channels + ch),
                        );
                    }
                }
            }
        }
    }
    idx
}

/// 2×2 average pooling of a row-major `side×side` grid.
pub(crate) fn avg_pool_matrix(side: usize) -> Array2<f64> {
    let half = side / 2;
    let mut m = Array2::zeros((half * half, side * side));
    for y in 0..side {
        for x in 0..side {
            m[[(y / 2) * half + x / 2, y * side + x]] = 0.25;
        }
    }
    m
}

fn bilinear_1d(from: usize, to: usize) -> Array2<f64> {
    let mut m = Array2::zeros((to, from));
    let scale = from as f64 / to as f64;
    for o in 0..to {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        let w = src - lo as f64;
        m[[o, lo]] += 1.0 - w;
        m[[o, hi]] += w;
    }
    m
}

/// Bilinear (half-pixel centred) resampling of a row-major `from×from` grid
/// to `to×to`, as a `(to²) × (from²)` matrix.
pub fn bilinear_matrix(from: usize, to: usize) -> Array2<f64> {
    let r = bilinear_1d(from, to);
    let mut m = Array2::zeros((to * to, from * from));
    for oy in 0..to {
        for ox in 0..to {
            for iy in 0..from {
                for ix in 0..from {
                    m[[oy * to + ox, iy * from + ix]] = r[[oy, iy]] * r[[ox, ix]];
                }
            }
        }
    }
    m
}

/// Sinusoidal timestep features.
pub fn timestep_features(t: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((1, dim), |(_, i)| {
        let k = i % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Which parameters become graph variables during a forward pass.
pub enum Trainable<'a> {
    None,
    All,
    Only(&'a dyn Fn(&str) -> bool),
}

/// Lazily lifts parameters from a [`ParamStore`] onto a graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Trainable<'a>,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable<'a>) -> Self {
        Self {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, Trainable::None)
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let train = match &self.trainable {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Only(f) => f(name),
        };
        let v = if train {
            g.variable(value)
        } else {
            g.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound variable parameter.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(name, v)| {
                let shape = g.shape(*v);
                (name.clone(), grads.get_or_zeros(*v, shape))
            })
            .collect()
    }
}

/// Clean or noised latent `z_t`, stored as `(side²) × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub tensor: Array2<f64>,
    pub timestep: usize,
}

/// Conditioning matrix `n_tokens × d_text`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub matrix: Array2<f64>,
}

impl PromptEmbedding {
    pub fn n_tokens(&self) -> usize {
        self.matrix.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_pred: Array2<f64>,
    pub attention: AttentionStack,
}

/// Graph handles produced by a differentiable denoiser pass.
pub struct DenoiseTrace {
    pub eps: Var,
    pub attention: Vec<GraphAttention>,
}

/// Parameter name prefixes per component.
pub mod names {
    pub const AUTOENCODER: &str = "ae.";
    pub const TEXT_TABLE: &str = "text.embed";
    pub const DENOISER: &str = "unet.";

    pub fn is_cross_attention_kv(name: &str) -> bool {
        name.starts_with("unet.ca") && (name.ends_with(".k.w") || name.ends_with(".v.w"))
    }
}

#[derive(Debug, Clone)]
pub struct ToyLdm {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    geometry: Geometry,
}

impl PartialEq for ToyLdm {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.vocab == other.vocab
            && self.schedule == other.schedule
            && self.params == other.params
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl ToyLdm {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::toy();
        let schedule = NoiseSchedule::toy(config.timesteps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut linear =
            |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
                p.insert(
                    format!("{name}.w"),
                    normal_matrix(fan_in, fan_out, gain / (fan_in as f64).sqrt(), &mut rng),
                );
                p.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
            };
        let c = config.channels;
        let d = config.text_dim;
        let h = config.ae_hidden;
        let pd = config.patch_dim();
        let lc = config.latent_channels;

        linear(&mut p, "ae.enc1", pd, h, 1.0);
        linear(&mut p, "ae.enc2", h, lc, 1.0);
        linear(&mut p, "ae.dec1", lc, h, 1.0);
        linear(&mut p, "ae.dec2", h, pd, 1.0);

        linear(&mut p, "unet.time1", d, c, 1.0);
        linear(&mut p, "unet.time2", c, c, 1.0);
        linear(&mut p, "unet.in", lc, c, 1.0);
        linear(&mut p, "unet.conv_in", 9 * c, c, 1.0);
        for layer in 0..2 {
            linear(&mut p, &format!("unet.ca{layer}.q"), c, c, 1.0);
            linear(&mut p, &format!("unet.ca{layer}.k"), d, c, 1.0);
            linear(&mut p, &format!("unet.ca{layer}.v"), d, c, 1.0);
            linear(&mut p, &format!("unet.ca{layer}.o"), c, c, 0.5);
            linear(&mut p, &format!("unet.mlp{layer}.fc1"), c, 2 * c, 1.0);
            linear(&mut p, &format!("unet.mlp{layer}.fc2"), 2 * c, c, 0.5);
        }
        linear(&mut p, "unet.conv_mid", 9 * c, c, 1.0);
        linear(&mut p, "unet.conv_up", 9 * c, c, 1.0);
        linear(&mut p, "unet.conv_out", 9 * c, c, 1.0);
        linear(&mut p, "unet.out", c, lc, 0.5);
        // k/v biases would make every token attend alike; drop them.
        for layer in 0..2 {
            p.params.remove(&format!("unet.ca{layer}.q.b"));
            p.params.remove(&format!("unet.ca{layer}.k.b"));
            p.params.remove(&format!("unet.ca{layer}.v.b"));
        }
        p.insert(
            names::TEXT_TABLE,
            normal_matrix(vocab.len(), d, 1.0, &mut rng),
        );
        Ok(Self::from_parts(config, vocab, schedule, p))
    }

    pub fn from_parts(
        config: ModelConfig,
        mut vocab: Vocabulary,
        schedule: NoiseSchedule,
        params: ParamStore,
    ) -> Self {
        vocab.rebuild_index();
        let geometry = Geometry::new(&config);
        Self {
            config,
            vocab,
            schedule,
            params,
            geometry,
        }
    }

    fn check_image(&self, image: &PixelImage) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Config(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    // ---- graph builders ----------------------------------------------------

    fn dense(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let w = b.get(g, &format!("{name}.w"))?;
        let y = g.matmul(x, w);
        match self.params.get(&format!("{name}.b")) {
            Ok(_) => {
                let bias = b.get(g, &format!("{name}.b"))?;
                Ok(g.add_row(y, bias))
            }
            Err(_) => Ok(y),
        }
    }

    /// `(H·W) × 3` pixels → normalized latent `(side²) × channels`.
    pub fn encode_graph(&self, g: &mut Graph, b: &mut Binder, pixels: Var) -> Result<Var> {
        let side = self.config.latent_side();
        let patches = g.gather(
            pixels,
            self.geometry.patchify.clone(),
            side * side,
            self.config.patch_dim(),
        );
        let h = self.dense(g, b, patches, "ae.enc1")?;
        let h = g.tanh(h);
        self.dense(g, b, h, "ae.enc2")
    }

    /// Latent → `(H·W) × 3` pixels in `(0, 1)`.
    pub fn decode_graph(&self, g: &mut Graph, b: &mut Binder, latent: Var) -> Result<Var> {
        let h = self.dense(g, b, latent, "ae.dec1")?;
        let h = g.tanh(h);
        let out = self.dense(g, b, h, "ae.dec2")?;
        let out = g.sigmoid(out);
        let s = self.config.image_size;
        Ok(g.gather(
            out,
            self.geometry.unpatchify.clone(),
            s * s,
            PixelImage::CHANNELS,
        ))
    }

    /// Conditioning matrix for `tokens`; `user` supplies the `<v>` row.
    pub fn cond_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        tokens: &[String],
        user: Option<Var>,
    ) -> Result<Var> {
        let d = self.config.text_dim;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Argument("empty prompt".into()));
        }
        let mut table_idx = Vec::with_capacity(n * d);
        let mut user_idx = Vec::with_capacity(n * d);
        let mut has_user = false;
        for tok in tokens {
            if tok == USER_TOKEN {
                has_user = true;
                table_idx.extend(std::iter::repeat_n(None, d));
                user_idx.extend((0..d).map(Some));
            } else {
                let id = self.vocab.id(tok)?;
                table_idx.extend((0..d).map(|j| Some(id * d + j)));
                user_idx.extend(std::iter::repeat_n(None, d));
            }
        }
        let table = b.get(g, names::TEXT_TABLE)?;
        let base = g.gather(table, Arc::new(table_idx), n, d);
        if !has_user {
            return Ok(base);
        }
        let user = user.ok_or_else(|| Error::Vocabulary(USER_TOKEN.to_string()))?;
        if g.shape(user) != (1, d) {
            return Err(Error::Config(format!("user embedding must be 1x{d}")));
        }
        let spliced = g.gather(user, Arc::new(user_idx), n, d);
        Ok(g.add(base, spliced))
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_attention(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        cond: Var,
        layer: usize,
        side: usize,
        records: &mut Vec<GraphAttention>,
    ) -> Result<Var> {
        let dh = self.config.head_dim();
        let q = self.dense(g, b, x, &format!("unet.ca{layer}.q"))?;
        let k = self.dense(g, b, cond, &format!("unet.ca{layer}.k"))?;
        let v = self.dense(g, b, cond, &format!("unet.ca{layer}.v"))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = g.cols(q, head * dh, dh);
            let kh = g.cols(k, head * dh, dh);
            let vh = g.cols(v, head * dh, dh);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
            let probs = g.softmax_rows(logits);
            records.push(GraphAttention {
                layer,
                head,
                side,
                probs,
            });
            heads.push(g.matmul(probs, vh));
        }
        let merged = g.concat_cols(&heads);
        self.dense(g, b, merged, &format!("unet.ca{layer}.o"))
    }

    fn mlp(&self, g: &mut Graph, b: &mut Binder, x: Var, layer: usize) -> Result<Var> {
        let h = self.dense(g, b, x, &format!("unet.mlp{layer}.fc1"))?;
        let h = g.silu(h);
        self.dense(g, b, h, &format!("unet.mlp{layer}.fc2"))
    }

    fn conv(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let c = self.config.channels;
        let side = self.config.latent_side();
        let (side, index) = if g.shape(x).0 == side * side {
            (side, self.geometry.im2col.clone())
        } else {
            (side / 2, self.geometry.im2col_half.clone())
        };
        let act = g.silu(x);
        let cols = g.gather(act, index, side * side, 9 * c);
        self.dense(g, b, cols, name)
    }

    /// Differentiable `ε_θ(z_t, t, 𝒞)`; records every cross-attention
    /// probability matrix.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        z: Var,
        t: usize,
        cond: Var,
    ) -> Result<DenoiseTrace> {
        if t > self.config.timesteps {
            return Err(Error::Argument(format!(
                "timestep {t} outside 0..={}",
                self.config.timesteps
            )));
        }
        if g.shape(z) != self.config.latent_shape() {
            return Err(Error::Config(format!(
                "latent shape {:?}, expected {:?}",
                g.shape(z),
                self.config.latent_shape()
            )));
        }
        if g.shape(cond).1 != self.config.text_dim {
            return Err(Error::Config(format!(
                "conditioning width {} != text width {}",
                g.shape(cond).1,
                self.config.text_dim
            )));
        }
        let side = self.config.latent_side();
        let mut records = Vec::with_capacity(2 * self.config.heads);

        let tf = g.constant(timestep_features(t, self.config.text_dim));
        let temb = self.dense(g, b, tf, "unet.time1")?;
        let temb = g.silu(temb);
        let temb = self.dense(g, b, temb, "unet.time2")?;

        let h = self.dense(g, b, z, "unet.in")?;
        let h = g.add_row(h, temb);
        let c = self.conv(g, b, h, "unet.conv_in")?;
        let h = g.add(h, c);
        let a = self.cross_attention(g, b, h, cond, 0, side, &mut records)?;
        let h = g.add(h, a);
        let m = self.mlp(g, b, h, 0)?;
        let skip = g.add(h, m);

        let d = g.const_left(self.geometry.pool.clone(), skip);
        let d = g.add_row(d, temb);
        let a = self.cross_attention(g, b, d, cond, 1, side / 2, &mut records)?;
        let d = g.add(d, a);
        let m = self.mlp(g, b, d, 1)?;
        let d = g.add(d, m);
        let c = self.conv(g, b, d, "unet.conv_mid")?;
        let d = g.add(d, c);
        let up = g.const_left(self.geometry.upsample.clone(), d);

        let h = g.add(skip, up);
        let c = self.conv(g, b, h, "unet.conv_up")?;
        let h = g.add(h, c);
        let c = self.conv(g, b, h, "unet.conv_out")?;
        let h = g.add(h, c);
        let h = g.silu(h);
        let eps = self.dense(g, b, h, "unet.out")?;
        if g.value(eps).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite denoiser output at t={t}"
            )));
        }
        Ok(DenoiseTrace {
            eps,
            attention: records,
        })
    }

    // ---- plain API ---------------------------------------------------------

    pub fn encode(&self, image: &PixelImage) -> Result<LatentCode> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(image.to_matrix());
        let z = self.encode_graph(&mut g, &mut b, x)?;
        Ok(LatentCode {
            tensor: g.value(z).clone(),
            timestep: 0,
        })
    }

    pub fn decode(&self, latent: &LatentCode) -> Result<PixelImage> {
        if latent.tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite latent".into()));
        }
        if latent.tensor.dim() != self.config.latent_shape() {
            return Err(Error::Config(format!(
                "latent shape {:?}, expected {:?}",
                latent.tensor.dim(),
                self.config.latent_shape()
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let z = g.constant(latent.tensor.clone());
        let x = self.decode_graph(&mut g, &mut b, z)?;
        let s = self.config.image_size;
        PixelImage::from_matrix(s, s, g.value(x))
    }

    /// `z_t = √ᾱ_t · z₀ + √(1−ᾱ_t) · ε`.
    pub fn add_noise(&self, z0: &LatentCode, t: usize, eps: &Array2<f64>) -> Result<LatentCode> {
        add_noise(&self.schedule, z0, t, eps)
    }

    /// Embeds a whitespace-tokenized prompt. `<v>` requires `user_embedding`.
    pub fn embed_tokens(
        &self,
        tokens: &[String],
        user_embedding: Option<&Array2<f64>>,
    ) -> Result<PromptEmbedding> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let user = user_embedding.map(|u| g.constant(u.clone()));
        let c = self.cond_graph(&mut g, &mut b, tokens, user)?;
        Ok(PromptEmbedding {
            matrix: g.value(c).clone(),
        })
    }

    pub fn embed_prompt(
        &self,
        prompt: &str,
        user_embedding: Option<&Array2<f64>>,
    ) -> Result<PromptEmbedding> {
        self.embed_tokens(&crate::prompt::tokenize(prompt), user_embedding)
    }

    pub fn embed_binding(&self, binding: &PromptBinding) -> Result<PromptEmbedding> {
        self.embed_tokens(&binding.tokens, Some(&binding.user_embedding))
    }

    /// Subject-token binding seeded from `init_token`.
    pub fn bind_token(
        &self,
        template: &str,
        class_word: &str,
        init_token: &str,
    ) -> Result<PromptBinding> {
        PromptBinding::new(
            &self.vocab,
            self.params.get(names::TEXT_TABLE)?,
            template,
            class_word,
            init_token,
        )
    }

    pub fn denoise(
        &self,
        z_t: &LatentCode,
        t: usize,
        cond: &PromptEmbedding,
    ) -> Result<DenoiserOutput> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let z = g.constant(z_t.tensor.clone());
        let c = g.constant(cond.matrix.clone());
        let trace = self.denoise_graph(&mut g, &mut b, z, t, c)?;
        let entries = trace
            .attention
            .iter()
            .map(|r| AttentionEntry {
                layer: r.layer,
                head: r.head,
                timestep: t,
                side: r.side,
                probs: g.value(r.probs).clone(),
            })
            .collect();
        Ok(DenoiserOutput {
            eps_pred: g.value(trace.eps).clone(),
            attention: AttentionStack::new(entries, self.config.latent_side())?,
        })
    }

    /// Strided timestep ladder `T = τ₀ > τ₁ > … > τ_k = 0`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps < 1 {
            return Err(Error::Argument("sampling needs at least one step".into()));
        }
        let big_t = self.config.timesteps;
        let steps = steps.min(big_t);
        let mut ts: Vec<usize> = (0..=steps)
            .map(|i| ((big_t as f64) * (1.0 - i as f64 / steps as f64)).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }

    /// Ancestral DDPM sampling from `z_T ~ 𝒩(0, I)`.
    pub fn sample(&self, cond: &PromptEmbedding, steps: usize, seed: u64) -> Result<PixelImage> {
        let ts = self.sampling_timesteps(steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = self.config.latent_shape();
        let mut z = normal_matrix(shape.0, shape.1, 1.0, &mut rng);
        for pair in ts.windows(2) {
            let (t, s) = (pair[0], pair[1]);
            let out = self.denoise(
                &LatentCode {
                    tensor: z.clone(),
                    timestep: t,
                },
                t,
                cond,
            )?;
            let ab_t = self.schedule.alpha_bar(t)?;
            let ab_s = self.schedule.alpha_bar(s)?;
            let z0 = ((&z - &(out.eps_pred * (1.0 - ab_t).sqrt())) / ab_t.sqrt())
                .mapv(|v| v.clamp(-LATENT_CLIP, LATENT_CLIP));
            if s == 0 {
                z = z0;
                break;
            }
            let alpha_ts = ab_t / ab_s;
            let beta_ts = 1.0 - alpha_ts;
            let c0 = ab_s.sqrt() * beta_ts / (1.0 - ab_t);
            let ct = alpha_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
            let var = (1.0 - ab_s) / (1.0 - ab_t) * beta_ts;
            let noise = normal_matrix(shape.0, shape.1, var.sqrt(), &mut rng);
            z = z0 * c0 + &z * ct + noise;
        }
        self.decode(&LatentCode {
            tensor: z,
            timestep: 0,
        })
    }

    /// Samples for `binding`'s prompt.
    pub fn sample_binding(
        &self,
        binding: &PromptBinding,
        steps: usize,
        seed: u64,
    ) -> Result<PixelImage> {
        let cond = self.embed_binding(binding)?;
        self.sample(&cond, steps, seed)
    }

    /// Sum of trainable-parameter counts, for reports.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }

    /// Folds an affine latent normalization `z ↦ (z − shift) / scale` into
    /// the encoder output layer and its inverse into the decoder input layer.
    pub fn fold_latent_normalization(&mut self, shift: &[f64], scale: &[f64]) -> Result<()> {
        let lc = self.config.latent_channels;
        if shift.len() != lc
            || scale.len() != lc
            || scale.iter().any(|s| *s <= 0.0 || !s.is_finite())
        {
            return Err(Error::Argument(
                "latent normalization needs one positive scale per channel".into(),
            ));
        }
        {
            let w = self.params.get_mut("ae.enc2.w")?;
            for (j, mut col) in w.axis_iter_mut(Axis(1)).enumerate() {
                col.mapv_inplace(|v| v / scale[j]);
            }
        }
        {
            let bias = self.params.get_mut("ae.enc2.b")?;
            for j in 0..lc {
                bias[[0, j]] = (bias[[0, j]] - shift[j]) / scale[j];
            }
        }
        let w1 = self.params.get("ae.dec1.w")?.clone();
        {
            let bias = self.params.get_mut("ae.dec1.b")?;
            let shift_row = Array2::from_shape_vec((1, lc), shift.to_vec()).expect("shift row");
            *bias = &*bias + &shift_row.dot(&w1);
        }
        {
            let w = self.params.get_mut("ae.dec1.w")?;
            for (j, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
                row.mapv_inplace(|v| v * scale[j]);
            }
        }
        Ok(())
    }
}

/// Clamp applied to predicted clean latents during sampling.
pub const LATENT_CLIP: f64 = 4.0;

pub fn add_noise(
    schedule: &NoiseSchedule,
    z0: &LatentCode,
    t: usize,
    eps: &Array2<f64>,
) -> Result<LatentCode> {
    let ab = schedule.alpha_bar(t)?;
    if eps.dim() != z0.tensor.dim() {
        return Err(Error::Argument(format!(
            "noise shape {:?} differs from latent shape {:?}",
            eps.dim(),
            z0.tensor.dim()
        )));
    }
    let tensor = &z0.tensor * ab.sqrt() + eps * (1.0 - ab).sqrt();
    Ok(LatentCode {
        tensor,
        timestep: t,
    })
}

/// Standard normal noise of `shape`.
pub fn gaussian(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    normal_matrix(shape.0, shape.1, 1.0, rng)
}
