//! Generation-quality metrics behind pluggable providers: identity score
//! matching (ISM), face detection failure rate (FDFR), Fréchet distance (FID)
//! and a face-quality score (SER-FIQ slot).

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::prompt::PromptBinding;
use crate::toy_ldm::ToyLdm;

/// Image → unit-norm identity embedding.
pub trait FaceEmbedder: Send + Sync {
    fn embed(&self, image: &PixelImage) -> Result<Array1<f64>>;
}

/// Image → whether a face is present.
pub trait FaceDetector: Send + Sync {
    fn detect(&self, image: &PixelImage) -> Result<bool>;
}

/// Image → feature vector for the Fréchet distance.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &PixelImage) -> Result<Array1<f64>>;
}

/// Image → scalar quality score.
pub trait QualityScorer: Send + Sync {
    fn quality(&self, image: &PixelImage) -> Result<f64>;
}

/// The four metric backends; a missing provider marks its metric absent.
#[derive(Clone, Default)]
pub struct ProviderSet {
    pub embedder: Option<Arc<dyn FaceEmbedder>>,
    pub detector: Option<Arc<dyn FaceDetector>>,
    pub feature_extractor: Option<Arc<dyn FeatureExtractor>>,
    pub quality: Option<Arc<dyn QualityScorer>>,
}

// ---- toy providers ---------------------------------------------------------

/// Fixed-seed Gaussian projection of `(pixels − 0.5)`.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    matrix: Array2<f64>,
}

impl RandomProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let matrix = Array2::from_shape_fn((output_dim, input_dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { matrix }
    }

    pub fn project(&self, image: &PixelImage) -> Result<Array1<f64>> {
        if image.len() != self.matrix.ncols() {
            return Err(Error::Argument(format!(
                "projection expects {} values, image has {}",
                self.matrix.ncols(),
                image.len()
            )));
        }
        let x: Array1<f64> = image.data().iter().map(|v| v - 0.5).collect();
        Ok(self.matrix.dot(&x))
    }
}

/// Random projection followed by normalization.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedder {
    projection: RandomProjection,
}

impl ProjectionEmbedder {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            projection: RandomProjection::new(input_dim, output_dim, seed),
        }
    }
}

impl FaceEmbedder for ProjectionEmbedder {
    fn embed(&self, image: &PixelImage) -> Result<Array1<f64>> {
        let v = self.projection.project(image)?;
        let n = v.dot(&v).sqrt();
        if n <= 1e-12 {
            return Err(Error::Degenerate(
                "image projects to the zero vector".into(),
            ));
        }
        Ok(v / n)
    }
}

/// Declares a face present when the embedding's cosine to the reference
/// centroid reaches `threshold`.
#[derive(Clone)]
pub struct CentroidDetector {
    embedder: Arc<dyn FaceEmbedder>,
    centroid: Array1<f64>,
    pub threshold: f64,
}

impl CentroidDetector {
    pub fn new(
        embedder: Arc<dyn FaceEmbedder>,
        references: &[PixelImage],
        threshold: f64,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Argument("detector needs reference images".into()));
        }
        let mut centroid: Option<Array1<f64>> = None;
        for r in references {
            let e = embedder.embed(r)?;
            centroid = Some(match centroid {
                Some(c) => c + e,
                None => e,
            });
        }
        let c = centroid.expect("non-empty references");
        let n = c.dot(&c).sqrt();
        if n <= 1e-12 {
            return Err(Error::Degenerate("reference centroid is zero".into()));
        }
        Ok(Self {
            embedder,
            centroid: c / n,
            threshold,
        })
    }
}

impl FaceDetector for CentroidDetector {
    fn detect(&self, image: &PixelImage) -> Result<bool> {
        Ok(self.embedder.embed(image)?.dot(&self.centroid) >= self.threshold)
    }
}

/// Unnormalized random projection features.
#[derive(Debug, Clone)]
pub struct ProjectionFeatures {
    projection: RandomProjection,
}

impl ProjectionFeatures {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            projection: RandomProjection::new(input_dim, output_dim, seed),
        }
    }
}

impl FeatureExtractor for ProjectionFeatures {
    fn features(&self, image: &PixelImage) -> Result<Array1<f64>> {
        self.projection.project(image)
    }
}

/// Variance of the grayscale 4-neighbour Laplacian, min-max normalized
/// against fixed bounds and clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct LaplacianSharpness {
    pub min_var: f64,
    pub max_var: f64,
}

impl Default for LaplacianSharpness {
    fn default() -> Self {
        Self {
            min_var: 0.0,
            max_var: 0.01,
        }
    }
}

pub fn laplacian_variance(image: &PixelImage) -> f64 {
    let (h, w) = (image.height(), image.width());
    if h < 3 || w < 3 {
        return 0.0;
    }
    let gray =
        |y: usize, x: usize| (image.get(y, x, 0) + image.get(y, x, 1) + image.get(y, x, 2)) / 3.0;
    let mut values = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            values.push(
                gray(y - 1, x) + gray(y + 1, x) + gray(y, x - 1) + gray(y, x + 1)
                    - 4.0 * gray(y, x),
            );
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

impl QualityScorer for LaplacianSharpness {
    fn quality(&self, image: &PixelImage) -> Result<f64> {
        let span = self.max_var - self.min_var;
        if span <= 0.0 {
            return Err(Error::Config(
                "sharpness bounds must satisfy min < max".into(),
            ));
        }
        Ok(((laplacian_variance(image) - self.min_var) / span).clamp(0.0, 1.0))
    }
}

pub const TOY_EMBED_DIM: usize = 64;
pub const TOY_FEATURE_DIM: usize = 8;
pub const TOY_DETECTOR_THRESHOLD: f64 = 0.5;

/// Test-double providers keyed to a reference set.
pub fn toy_providers(references: &[PixelImage], seed: u64) -> Result<ProviderSet> {
    let first = references
        .first()
        .ok_or_else(|| Error::Argument("toy providers need reference images".into()))?;
    let dim = first.len();
    let embedder: Arc<dyn FaceEmbedder> =
        Arc::new(ProjectionEmbedder::new(dim, TOY_EMBED_DIM, seed));
    let detector = CentroidDetector::new(embedder.clone(), references, TOY_DETECTOR_THRESHOLD)?;
    Ok(ProviderSet {
        embedder: Some(embedder),
        detector: Some(Arc::new(detector)),
        feature_extractor: Some(Arc::new(ProjectionFeatures::new(
            dim,
            TOY_FEATURE_DIM,
            seed.wrapping_add(1),
        ))),
        quality: Some(Arc::new(LaplacianSharpness::default())),
    })
}

// ---- metrics ---------------------------------------------------------------

/// A metric value plus the number of images its provider failed on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub value: Option<f64>,
    pub skipped: usize,
}

fn embed_all(images: &[PixelImage], embedder: &dyn FaceEmbedder) -> (Vec<Array1<f64>>, usize) {
    let mut out = Vec::with_capacity(images.len());
    let mut skipped = 0;
    for img in images {
        match embedder.embed(img) {
            Ok(e) => out.push(e),
            Err(e) => {
                log::warn!("embedder failed on an image: {e}");
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

/// Mean cosine similarity over all (generated, reference) pairs.
pub fn ism(
    generated: &[PixelImage],
    references: &[PixelImage],
    embedder: &dyn FaceEmbedder,
) -> Result<Scored> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::Argument(
            "ISM needs non-empty generated and reference sets".into(),
        ));
    }
    let (gen, s1) = embed_all(generated, embedder);
    let (refs, s2) = embed_all(references, embedder);
    let skipped = s1 + s2;
    if gen.is_empty() || refs.is_empty() {
        return Ok(Scored {
            value: None,
            skipped,
        });
    }
    let mut total = 0.0;
    for g in &gen {
        for r in &refs {
            let denom = (g.dot(g) * r.dot(r)).sqrt();
            total += g.dot(r) / denom;
        }
    }
    Ok(Scored {
        value: Some(total / (gen.len() * refs.len()) as f64),
        skipped,
    })
}

/// Fraction of images without a detected face.
pub fn fdfr(generated: &[PixelImage], detector: &dyn FaceDetector) -> Result<Scored> {
    if generated.is_empty() {
        return Err(Error::Argument("FDFR needs a non-empty set".into()));
    }
    let mut failures = 0usize;
    let mut skipped = 0usize;
    for img in generated {
        match detector.detect(img) {
            Ok(true) => {}
            Ok(false) => failures += 1,
            Err(e) => {
                log::warn!("detector failed: {e}; counted as no face");
                failures += 1;
                skipped += 1;
            }
        }
    }
    Ok(Scored {
        value: Some(failures as f64 / generated.len() as f64),
        skipped,
    })
}

/// Mean quality score; absent when every image failed.
pub fn serfiq(generated: &[PixelImage], quality: &dyn QualityScorer) -> Result<Scored> {
    if generated.is_empty() {
        return Err(Error::Argument("quality needs a non-empty set".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for img in generated {
        match quality.quality(img) {
            Ok(q) => {
                total += q;
                n += 1;
            }
            Err(e) => {
                log::warn!("quality scorer failed: {e}");
                skipped += 1;
            }
        }
    }
    Ok(Scored {
        value: (n > 0).then(|| total / n as f64),
        skipped,
    })
}

/// Mean and unbiased covariance of a gaussian fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    /// Fit to the rows of `features` (needs ≥ 2 rows).
    pub fn from_rows(features: &Array2<f64>) -> Result<Self> {
        let (n, d) = features.dim();
        if n < 2 {
            return Err(Error::Argument(
                "covariance needs at least two samples".into(),
            ));
        }
        let mut mean = DVector::zeros(d);
        for row in features.rows() {
            for j in 0..d {
                mean[j] += row[j];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for row in features.rows() {
            let c = DVector::from_iterator(d, row.iter().copied()) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Eigenvalues below this are rounding noise; anything lower is not PSD.
pub const PSD_TOLERANCE: f64 = 1e-8;
pub const FID_RIDGE: f64 = 1e-6;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -PSD_TOLERANCE {
            return Err(Error::Argument(format!(
                "matrix is not positive semidefinite (eigenvalue {min})"
            )));
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    // Tr((Σ₁Σ₂)^½) = Tr((√Σ₁ Σ₂ √Σ₁)^½), the latter symmetric PSD
    let r1 = psd_sqrt(s1)?;
    let inner = &r1 * s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut total = 0.0;
    for l in eig.eigenvalues.iter() {
        if *l < -PSD_TOLERANCE {
            return Err(Error::Argument(format!(
                "covariance product has eigenvalue {l}"
            )));
        }
        total += l.max(0.0).sqrt();
    }
    Ok(total)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Argument("covariance must be square".into()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Argument("covariance must be symmetric".into()));
    }
    Ok(())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`.
pub fn gaussian_fid(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.shape() != (d, d) || sigma2.shape() != (d, d) {
        return Err(Error::Argument(
            "mean/covariance dimensions disagree".into(),
        ));
    }
    check_symmetric(sigma1)?;
    check_symmetric(sigma2)?;
    psd_sqrt(sigma2)?;
    if mu1 == mu2 && sigma1 == sigma2 {
        psd_sqrt(sigma1)?;
        return Ok(0.0);
    }
    let diff = mu1 - mu2;
    let tr = sigma1.trace() + sigma2.trace() - 2.0 * trace_sqrt_product(sigma1, sigma2)?;
    Ok(diff.dot(&diff) + tr)
}

fn is_degenerate(cov: &DMatrix<f64>, n: usize) -> bool {
    let d = cov.nrows();
    if n <= d {
        return true;
    }
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    eig.eigenvalues.iter().any(|l| *l <= 1e-10)
}

/// Fréchet distance between gaussian fits of two feature matrices (rows are
/// samples).
pub fn fid_from_features(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Argument("feature dimensions differ".into()));
    }
    let mut fa = GaussianFit::from_rows(a)?;
    let mut fb = GaussianFit::from_rows(b)?;
    if is_degenerate(&fa.cov, a.nrows()) || is_degenerate(&fb.cov, b.nrows()) {
        log::info!("degenerate feature covariance; adding ridge {FID_RIDGE}");
        let ridge = DMatrix::identity(a.ncols(), a.ncols()) * FID_RIDGE;
        fa.cov += &ridge;
        fb.cov += &ridge;
    }
    gaussian_fid(&fa.mean, &fa.cov, &fb.mean, &fb.cov)
}

fn feature_matrix(images: &[PixelImage], extractor: &dyn FeatureExtractor) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = images
        .iter()
        .map(|i| extractor.features(i))
        .collect::<Result<_>>()?;
    let d = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), d), flat)
        .map_err(|_| Error::Argument("ragged feature vectors".into()))
}

pub fn fid(
    set_a: &[PixelImage],
    set_b: &[PixelImage],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Argument(
            "FID needs at least two images per set".into(),
        ));
    }
    fid_from_features(
        &feature_matrix(set_a, extractor)?,
        &feature_matrix(set_b, extractor)?,
    )
}

// ---- reports ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ism: Option<f64>,
    pub fdfr: Option<f64>,
    pub fid: Option<f64>,
    pub serfiq: Option<f64>,
    pub n_images: usize,
    /// Images a provider could not score.
    pub skipped: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Argument(format!("bad metrics report: {e}")))
    }

    /// Markdown table with one row per labelled report.
    pub fn table(rows: &[(&str, &MetricsReport)]) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out =
            String::from("| Method | ISM↓ | FDFR↑ | FID↑ | SER-FIQ↓ |\n|---|---|---|---|---|\n");
        for (label, r) in rows {
            let _ = writeln!(
                out,
                "| {label} | {} | {} | {} | {} |",
                cell(r.ism),
                cell(r.fdfr),
                cell(r.fid),
                cell(r.serfiq)
            );
        }
        out
    }

    pub fn all_present(&self) -> bool {
        self.ism.is_some() && self.fdfr.is_some() && self.fid.is_some() && self.serfiq.is_some()
    }
}

/// Scores an already generated set against references.
pub fn score(
    generated: &[PixelImage],
    references: &[PixelImage],
    providers: &ProviderSet,
) -> Result<MetricsReport> {
    if generated.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let mut skipped = 0;
    let ism_v = match &providers.embedder {
        Some(e) => {
            let s = ism(generated, references, e.as_ref())?;
            skipped += s.skipped;
            s.value
        }
        None => None,
    };
    let fdfr_v = match &providers.detector {
        Some(d) => {
            let s = fdfr(generated, d.as_ref())?;
            skipped += s.skipped;
            s.value
        }
        None => None,
    };
    let fid_v = match &providers.feature_extractor {
        Some(f) => match fid(generated, references, f.as_ref()) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("FID unavailable: {e}");
                None
            }
        },
        None => None,
    };
    let q_v = match &providers.quality {
        Some(q) => {
            let s = serfiq(generated, q.as_ref())?;
            skipped += s.skipped;
            s.value
        }
        None => None,
    };
    Ok(MetricsReport {
        ism: ism_v,
        fdfr: fdfr_v,
        fid: fid_v,
        serfiq: q_v,
        n_images: generated.len(),
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub sampling_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 50,
            sampling_steps: 25,
            seed: 0,
        }
    }
}

/// Per-sample seed derived from the evaluation seed.
pub fn sub_seed(seed: u64, index: usize) -> u64 {
    // splitmix64
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `n_samples` images for `binding`'s prompt.
pub fn generate(
    model: &ToyLdm,
    binding: &PromptBinding,
    config: &EvalConfig,
) -> Result<Vec<PixelImage>> {
    if config.n_samples == 0 {
        return Err(Error::Argument("n_samples must be ≥ 1".into()));
    }
    let cond = model.embed_binding(binding)?;
    (0..config.n_samples)
        .into_par_iter()
        .map(|i| model.sample(&cond, config.sampling_steps, sub_seed(config.seed, i)))
        .collect()
}

/// Generates with the fine-tuned model and scores against `references`.
pub fn evaluate(
    model: &ToyLdm,
    binding: &PromptBinding,
    references: &[PixelImage],
    providers: &ProviderSet,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let generated = generate(model, binding, config)?;
    score(&generated, references, providers)
}
