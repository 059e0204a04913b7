//! Attack objective: noise reconstruction loss, cosine similarity between the
//! subject-token and class-token attention maps, and their λ-blend.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{token_map_graph, TokenAttentionMap};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::prompt::PromptBinding;
use crate::toy_ldm::{Binder, ToyLdm};

/// Maps with a Euclidean norm at or below this are degenerate.
pub const MIN_MAP_NORM: f64 = 1e-12;

/// How the cosine term enters the ascended objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// `(1−λ)·rec + λ·cos`
    Additive,
    /// `(1−λ)·rec − λ·cos`: ascending it pushes the two maps apart.
    #[default]
    Divergence,
}

impl SignMode {
    pub fn cos_sign(self) -> f64 {
        match self {
            SignMode::Additive => 1.0,
            SignMode::Divergence => -1.0,
        }
    }
}

impl std::str::FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(SignMode::Additive),
            "divergence" => Ok(SignMode::Divergence),
            other => Err(Error::Argument(format!("unknown sign mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignMode::Additive => "additive",
            SignMode::Divergence => "divergence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cos: f64,
    pub total: f64,
    pub lambda: f64,
    pub sign_mode: SignMode,
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Argument(format!("blend λ={lambda} outside [0, 1]")))
    }
}

/// Blends the two terms according to `sign_mode`.
pub fn total_loss(rec: f64, cos: f64, lambda: f64, sign_mode: SignMode) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let total = (1.0 - lambda) * rec + sign_mode.cos_sign() * lambda * cos;
    Ok(LossBreakdown {
        rec,
        cos,
        total,
        lambda,
        sign_mode,
    })
}

/// Cosine similarity of two flattened maps.
pub fn cos_loss(map_v: &TokenAttentionMap, map_o: &TokenAttentionMap) -> Result<f64> {
    cosine(
        map_v.grid.as_slice_memory_order(),
        map_o.grid.as_slice_memory_order(),
    )
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: Option<&[f64]>, b: Option<&[f64]>) -> Result<f64> {
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Argument("maps must be contiguous".into())),
    };
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "map sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= MIN_MAP_NORM || nb <= MIN_MAP_NORM {
        return Err(Error::Degenerate("zero-norm attention map".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Differentiable cosine similarity of two equally shaped nodes.
pub fn cos_loss_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Argument("map shapes differ".into()));
    }
    let na = g.sum_squares(a);
    let nb = g.sum_squares(b);
    if g.scalar(na).sqrt() <= MIN_MAP_NORM || g.scalar(nb).sqrt() <= MIN_MAP_NORM {
        return Err(Error::Degenerate("zero-norm attention map".into()));
    }
    let prod = g.mul(a, b);
    let dot = g.sum(prod);
    let nn = g.mul(na, nb);
    let denom = g.sqrt(nn);
    Ok(g.div(dot, denom))
}

/// `‖ε − ε̂‖²` (sum of squares).
pub fn rec_loss_graph(g: &mut Graph, eps_pred: Var, eps: &Array2<f64>) -> Result<Var> {
    if g.shape(eps_pred) != eps.dim() {
        return Err(Error::Argument("noise and prediction shapes differ".into()));
    }
    let target = g.constant(eps.clone());
    let diff = g.sub(target, eps_pred);
    Ok(g.sum_squares(diff))
}

/// Graph nodes of one evaluation of the attack objective.
pub struct ObjectiveNodes {
    pub rec: Var,
    /// `None` when a map was degenerate and the cosine term was dropped.
    pub cos: Option<Var>,
    pub total: Var,
}

/// Builds rec, cos and the blended objective for `pixels` (a `(H·W)×3` node)
/// at timestep `t` with noise `eps`.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph(
    model: &ToyLdm,
    g: &mut Graph,
    binder: &mut Binder,
    pixels: Var,
    binding: &PromptBinding,
    user: Var,
    t: usize,
    eps: &Array2<f64>,
    lambda: f64,
    sign_mode: SignMode,
) -> Result<ObjectiveNodes> {
    check_lambda(lambda)?;
    binding.validate()?;
    let z0 = model.encode_graph(g, binder, pixels)?;
    let ab = model.schedule.alpha_bar(t)?;
    let noise = g.constant(eps * (1.0 - ab).sqrt());
    let scaled = g.scale(z0, ab.sqrt());
    let zt = g.add(scaled, noise);
    let cond = model.cond_graph(g, binder, &binding.tokens, Some(user))?;
    let trace = model.denoise_graph(g, binder, zt, t, cond)?;
    let rec = rec_loss_graph(g, trace.eps, eps)?;

    let side = model.config.latent_side();
    let map_v = token_map_graph(g, &trace.attention, binding.v_index, side)?;
    let map_o = token_map_graph(g, &trace.attention, binding.o_index, side)?;
    let cos = match cos_loss_graph(g, map_v, map_o) {
        Ok(c) => Some(c),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let rec_part = g.scale(rec, 1.0 - lambda);
    let total = match cos {
        Some(c) => {
            let cos_part = g.scale(c, sign_mode.cos_sign() * lambda);
            g.add(rec_part, cos_part)
        }
        None => rec_part,
    };
    if !g.scalar(total).is_finite() {
        return Err(Error::Numerical(format!("non-finite objective at t={t}")));
    }
    Ok(ObjectiveNodes { rec, cos, total })
}

/// Which scalar a pixel-gradient evaluation differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Rec,
    Cos,
    Total,
}

/// Value of `component` and its gradient with respect to the pixels of
/// `image`, as a `(H·W)×3` matrix.
#[allow(clippy::too_many_arguments)]
pub fn pixel_gradient(
    model: &ToyLdm,
    image: &PixelImage,
    binding: &PromptBinding,
    t: usize,
    eps: &Array2<f64>,
    lambda: f64,
    sign_mode: SignMode,
    component: Component,
) -> Result<(f64, Array2<f64>)> {
    pixel_gradient_raw(
        model,
        &image.to_matrix(),
        binding,
        t,
        eps,
        lambda,
        sign_mode,
        component,
    )
}

/// As [`pixel_gradient`] on an unclamped pixel matrix.
#[allow(clippy::too_many_arguments)]
pub fn pixel_gradient_raw(
    model: &ToyLdm,
    pixels: &Array2<f64>,
    binding: &PromptBinding,
    t: usize,
    eps: &Array2<f64>,
    lambda: f64,
    sign_mode: SignMode,
    component: Component,
) -> Result<(f64, Array2<f64>)> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.params);
    let x = g.variable(pixels.clone());
    let user = g.constant(binding.user_embedding.clone());
    let nodes = objective_graph(
        model, &mut g, &mut b, x, binding, user, t, eps, lambda, sign_mode,
    )?;
    let out = match component {
        Component::Rec => nodes.rec,
        Component::Total => nodes.total,
        Component::Cos => nodes
            .cos
            .ok_or_else(|| Error::Degenerate("zero-norm attention map".into()))?,
    };
    let grads = g.backward(out);
    Ok((g.scalar(out), grads.get_or_zeros(x, pixels.dim())))
}

/// Loss breakdown and pixel gradient of the blended objective from one
/// forward/backward pass.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub cos_skipped: bool,
    pub grad: Array2<f64>,
}

pub fn evaluate_objective(
    model: &ToyLdm,
    pixels: &Array2<f64>,
    binding: &PromptBinding,
    t: usize,
    eps: &Array2<f64>,
    lambda: f64,
    sign_mode: SignMode,
) -> Result<ObjectiveEval> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.params);
    let x = g.variable(pixels.clone());
    let user = g.constant(binding.user_embedding.clone());
    let nodes = objective_graph(
        model, &mut g, &mut b, x, binding, user, t, eps, lambda, sign_mode,
    )?;
    let grads = g.backward(nodes.total);
    let rec = g.scalar(nodes.rec);
    let (cos, cos_skipped) = match nodes.cos {
        Some(c) => (g.scalar(c), false),
        None => (0.0, true),
    };
    let breakdown = LossBreakdown {
        rec,
        cos,
        total: g.scalar(nodes.total),
        lambda,
        sign_mode,
    };
    Ok(ObjectiveEval {
        breakdown,
        cos_skipped,
        grad: grads.get_or_zeros(x, pixels.dim()),
    })
}

/// Plain value of `‖ε − ε_θ(z_t, t, τ(y))‖²` for `image`.
pub fn rec_loss(
    model: &ToyLdm,
    image: &PixelImage,
    binding: &PromptBinding,
    t: usize,
    eps: &Array2<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.params);
    let x = g.constant(image.to_matrix());
    let user = g.constant(binding.user_embedding.clone());
    let nodes = objective_graph(
        model,
        &mut g,
        &mut b,
        x,
        binding,
        user,
        t,
        eps,
        0.0,
        SignMode::Divergence,
    )?;
    Ok(g.scalar(nodes.rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ReductionPolicy;
    use proptest::prelude::*;

    fn map(values: Vec<f64>, side: usize) -> TokenAttentionMap {
        TokenAttentionMap {
            grid: Array2::from_shape_vec((side, side), values).unwrap(),
            token_index: 0,
            reduction: ReductionPolicy::default(),
        }
    }

    #[test]
    fn cosine_identities() {
        let a = map(vec![0.3, 0.1, 0.5, 0.2], 2);
        assert!((cos_loss(&a, &a).unwrap() - 1.0).abs() < 1e-10);
        let e1 = map(vec![1.0, 0.0, 0.0, 0.0], 2);
        let e2 = map(vec![0.0, 1.0, 0.0, 0.0], 2);
        assert_eq!(cos_loss(&e1, &e2).unwrap(), 0.0);
        let zero = map(vec![0.0; 4], 2);
        assert!(matches!(cos_loss(&a, &zero), Err(Error::Degenerate(_))));
        let big = map(vec![0.0; 9], 3);
        assert!(matches!(cos_loss(&a, &big), Err(Error::Argument(_))));
    }

    #[test]
    fn blend_arithmetic() {
        let b = total_loss(0.5, 0.8, 0.1, SignMode::Additive).unwrap();
        assert_eq!(b.total, 0.9 * 0.5 + 0.1 * 0.8);
        assert_eq!(b.total, 0.53);
        assert_eq!(
            total_loss(0.5, 0.8, 0.0, SignMode::Divergence)
                .unwrap()
                .total,
            0.5
        );
        assert_eq!(
            total_loss(0.5, 0.8, 1.0, SignMode::Divergence)
                .unwrap()
                .total,
            -0.8
        );
        assert_eq!(
            total_loss(0.5, 0.8, 1.0, SignMode::Additive).unwrap().total,
            0.8
        );
        assert!(total_loss(0.5, 0.8, 1.5, SignMode::Divergence).is_err());
        assert!(total_loss(0.5, 0.8, -0.1, SignMode::Divergence).is_err());
    }

    #[test]
    fn affine_in_lambda() {
        for mode in [SignMode::Additive, SignMode::Divergence] {
            let at = |l| total_loss(2.5, 0.4, l, mode).unwrap().total;
            assert!((at(0.5) - 0.5 * (at(0.0) + at(1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn rec_loss_closed_forms() {
        let eps = Array2::ones((16, 4));
        let mut g = Graph::new();
        let perfect = g.constant(eps.clone());
        let l = rec_loss_graph(&mut g, perfect, &eps).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let zero = g.constant(Array2::zeros((16, 4)));
        let l = rec_loss_graph(&mut g, zero, &eps).unwrap();
        assert_eq!(g.scalar(l), 64.0);
    }

    #[test]
    fn sign_mode_parsing() {
        assert_eq!(
            "divergence".parse::<SignMode>().unwrap(),
            SignMode::Divergence
        );
        assert_eq!("additive".parse::<SignMode>().unwrap(), SignMode::Additive);
        assert!("up".parse::<SignMode>().is_err());
        assert_eq!(SignMode::default(), SignMode::Divergence);
    }

    proptest! {
        #[test]
        fn cosine_symmetric_bounded_and_scale_free(
            a in proptest::collection::vec(-1.0f64..1.0, 9),
            b in proptest::collection::vec(-1.0f64..1.0, 9),
            sa in 1e-3f64..1e3,
            sb in 1e-3f64..1e3,
        ) {
            let ma = map(a.clone(), 3);
            let mb = map(b.clone(), 3);
            prop_assume!(cos_loss(&ma, &mb).is_ok());
            let ab = cos_loss(&ma, &mb).unwrap();
            let ba = cos_loss(&mb, &ma).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
            let scaled = cos_loss(&map(a.iter().map(|v| v * sa).collect(), 3), &map(b.iter().map(|v| v * sb).collect(), 3)).unwrap();
            prop_assert!((scaled - ab).abs() <= 1e-10);
        }

        #[test]
        fn cosine_of_nonnegative_maps_in_unit_interval(
            a in proptest::collection::vec(0.0f64..1.0, 16),
            b in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let (ma, mb) = (map(a, 4), map(b, 4));
            prop_assume!(cos_loss(&ma, &mb).is_ok());
            let c = cos_loss(&ma, &mb).unwrap();
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&c));
        }

        #[test]
        fn graph_cosine_matches_plain(a in proptest::collection::vec(0.01f64..1.0, 4), b in proptest::collection::vec(0.01f64..1.0, 4)) {
            let mut g = Graph::new();
            let va = g.constant(Array2::from_shape_vec((4, 1), a.clone()).unwrap());
            let vb = g.constant(Array2::from_shape_vec((4, 1), b.clone()).unwrap());
            let c = cos_loss_graph(&mut g, va, vb).unwrap();
            let plain = cos_loss(&map(a, 2), &map(b, 2)).unwrap();
            prop_assert!((g.scalar(c) - plain).abs() < 1e-14);
        }
    }
}
