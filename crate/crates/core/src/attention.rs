//! Capture, reduction and rendering of per-token cross-attention maps.
//!
//! Maps are the softmax probabilities `softmax(Q·Kᵀ/√d)` taken before the
//! multiplication by `V`; column `j` of a layer's matrix is the spatial
//! responsibility of prompt token `j`.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::prompt::PromptBinding;
use crate::toy_ldm::bilinear_matrix;

/// One softmax probability matrix (`side² × n_tokens`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEntry {
    pub layer: usize,
    pub head: usize,
    pub timestep: usize,
    pub side: usize,
    pub probs: Array2<f64>,
}

/// A probability matrix still attached to a graph.
#[derive(Debug, Clone, Copy)]
pub struct GraphAttention {
    pub layer: usize,
    pub head: usize,
    pub side: usize,
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    entries: Vec<AttentionEntry>,
    /// Common grid side that token maps are resampled to.
    target_side: usize,
}

impl AttentionStack {
    pub fn new(entries: Vec<AttentionEntry>, target_side: usize) -> Result<Self> {
        if let Some(first) = entries.first() {
            let n = first.probs.ncols();
            for e in &entries {
                if e.probs.ncols() != n {
                    return Err(Error::Argument(
                        "attention entries disagree on token count".into(),
                    ));
                }
                if e.probs.nrows() != e.side * e.side {
                    return Err(Error::Argument(format!(
                        "layer {} has {} rows for a {}x{} grid",
                        e.layer,
                        e.probs.nrows(),
                        e.side,
                        e.side
                    )));
                }
            }
        }
        Ok(Self {
            entries,
            target_side,
        })
    }

    pub fn entries(&self) -> &[AttentionEntry] {
        &self.entries
    }

    pub fn target_side(&self) -> usize {
        self.target_side
    }

    pub fn n_tokens(&self) -> Option<usize> {
        self.entries.first().map(|e| e.probs.ncols())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends another stack's entries (e.g. from another timestep).
    pub fn extend(&mut self, other: AttentionStack) -> Result<()> {
        if let (Some(a), Some(b)) = (self.n_tokens(), other.n_tokens()) {
            if a != b {
                return Err(Error::Argument(
                    "cannot merge stacks over different prompts".into(),
                ));
            }
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    /// Named arrays plus entry metadata, for offline inspection.
    pub fn to_archive(&self, policy: Option<&ReductionPolicy>) -> Archive {
        let mut arrays = BTreeMap::new();
        let mut index = Vec::new();
        for e in &self.entries {
            let name = format!("attn.l{}.h{}.t{}", e.layer, e.head, e.timestep);
            index.push(serde_json::json!({
                "name": name, "layer": e.layer, "head": e.head, "timestep": e.timestep, "side": e.side,
            }));
            arrays.insert(name, e.probs.clone());
        }
        let metadata = serde_json::json!({
            "kind": "attention_stack",
            "target_side": self.target_side,
            "entries": index,
            "reduction": policy,
        });
        Archive { metadata, arrays }
    }
}

/// Which entries are averaged into a token map. `None` selects everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReductionPolicy {
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
    pub timesteps: Option<Vec<usize>>,
}

impl ReductionPolicy {
    pub fn mean_all() -> Self {
        Self::default()
    }

    fn selects(&self, layer: usize, head: usize, timestep: usize) -> bool {
        let pick = |set: &Option<Vec<usize>>, v: usize| set.as_ref().is_none_or(|s| s.contains(&v));
        pick(&self.layers, layer) && pick(&self.heads, head) && pick(&self.timesteps, timestep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenAttentionMap {
    /// `side × side` grid.
    pub grid: Array2<f64>,
    pub token_index: usize,
    pub reduction: ReductionPolicy,
}

impl TokenAttentionMap {
    pub fn side(&self) -> usize {
        self.grid.nrows()
    }

    pub fn flat(&self) -> Array1<f64> {
        self.grid.iter().copied().collect()
    }
}

/// `softmax(Q·Kᵀ/√d)` for a single head.
pub fn attention_probs(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let d = q.ncols() as f64;
    softmax_rows(&(q.dot(&k.t()) / d.sqrt()))
}

/// The attention stack of a denoiser pass, checked against `binding`.
pub fn capture(stack: &AttentionStack, binding: &PromptBinding) -> Result<AttentionStack> {
    binding.validate()?;
    let n = stack
        .n_tokens()
        .ok_or_else(|| Error::State("denoiser pass recorded no attention".into()))?;
    if binding.v_index >= n || binding.o_index >= n {
        return Err(Error::Argument(format!(
            "binding indices ({}, {}) outside {n} attended tokens",
            binding.v_index, binding.o_index
        )));
    }
    Ok(stack.clone())
}

fn resample_column(col: Array1<f64>, side: usize, target: usize) -> Array1<f64> {
    if side == target {
        col
    } else {
        bilinear_matrix(side, target).dot(&col)
    }
}

/// Mean over the selected entries of token `token_index`'s column, each
/// resampled to the stack's common grid.
pub fn token_map(
    stack: &AttentionStack,
    token_index: usize,
    policy: &ReductionPolicy,
) -> Result<TokenAttentionMap> {
    let n = stack
        .n_tokens()
        .ok_or_else(|| Error::State("empty attention stack".into()))?;
    if token_index >= n {
        return Err(Error::Argument(format!(
            "token {token_index} outside prompt of {n} tokens"
        )));
    }
    let target = stack.target_side;
    let mut acc = Array1::<f64>::zeros(target * target);
    let mut count = 0usize;
    for e in stack
        .entries
        .iter()
        .filter(|e| policy.selects(e.layer, e.head, e.timestep))
    {
        let col = e.probs.column(token_index).to_owned();
        acc += &resample_column(col, e.side, target);
        count += 1;
    }
    if count == 0 {
        return Err(Error::State(
            "reduction policy selected no attention entries".into(),
        ));
    }
    acc /= count as f64;
    Ok(TokenAttentionMap {
        grid: acc
            .into_shape_with_order((target, target))
            .expect("square grid"),
        token_index,
        reduction: policy.clone(),
    })
}

/// Differentiable counterpart of [`token_map`] over all recorded layers and
/// heads of one pass; returns a `target² × 1` column.
pub fn token_map_graph(
    g: &mut Graph,
    records: &[GraphAttention],
    token_index: usize,
    target_side: usize,
) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::State("empty attention stack".into()));
    }
    let mut resamplers: BTreeMap<usize, Arc<Array2<f64>>> = BTreeMap::new();
    let mut parts = Vec::with_capacity(records.len());
    for r in records {
        let n = g.shape(r.probs).1;
        if token_index >= n {
            return Err(Error::Argument(format!(
                "token {token_index} outside prompt of {n} tokens"
            )));
        }
        let col = g.cols(r.probs, token_index, 1);
        let col = if r.side == target_side {
            col
        } else {
            let m = resamplers
                .entry(r.side)
                .or_insert_with(|| Arc::new(bilinear_matrix(r.side, target_side)))
                .clone();
            g.const_left(m, col)
        };
        parts.push(col);
    }
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = g.add(acc, *p);
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(grid: &Array2<f64>) -> Array2<f64> {
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 1e-12 {
        Array2::zeros(grid.dim())
    } else {
        grid.mapv(|v| (v - lo) / span)
    }
}

/// Red-emphasis colormap: cold values render blue, hot values red.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let green = (1.0 - (2.0 * v - 1.0).abs()) * 0.6;
    [v, green, 1.0 - v]
}

pub const HEATMAP_ALPHA: f64 = 0.5;

/// Blends the normalized, block-upsampled map over `base`.
pub fn render_heatmap(map: &TokenAttentionMap, base: &PixelImage) -> Result<PixelImage> {
    let norm = normalize_map(&map.grid);
    let side = norm.nrows();
    if side == 0 || !base.height().is_multiple_of(side) || !base.width().is_multiple_of(side) {
        return Err(Error::Argument(format!(
            "{}x{} image is not a multiple of the {side}x{side} attention grid",
            base.height(),
            base.width()
        )));
    }
    let by = base.height() / side;
    let bx = base.width() / side;
    Ok(PixelImage::from_fn(
        base.height(),
        base.width(),
        |y, x, c| {
            let color = heat_color(norm[[y / by, x / bx]]);
            (1.0 - HEATMAP_ALPHA) * base.get(y, x, c) + HEATMAP_ALPHA * color[c]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Vocabulary;
    use ndarray::array;

    fn entry(layer: usize, side: usize, probs: Array2<f64>) -> AttentionEntry {
        AttentionEntry {
            layer,
            head: 0,
            timestep: 10,
            side,
            probs,
        }
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let q = Array2::zeros((16, 8));
        let k = Array2::from_shape_fn((5, 8), |(i, j)| (i as f64 - j as f64) * 0.3);
        let p = attention_probs(&q, &k);
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        // identical query rows also give identical (not necessarily uniform) rows
        let q = Array2::from_elem((4, 8), 0.7);
        let p = attention_probs(&q, &k);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row, p.row(0));
        }
    }

    #[test]
    fn two_token_closed_form() {
        let p = attention_probs(&array![[1.0]], &array![[1.0], [0.0]]);
        assert!((p[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn single_entry_mean_is_identity() {
        let probs = Array2::from_shape_fn((4, 3), |(i, j)| {
            if j == 1 {
                0.1 * i as f64
            } else {
                0.5 - 0.05 * i as f64
            }
        });
        let stack = AttentionStack::new(vec![entry(0, 2, probs.clone())], 2).unwrap();
        let m = token_map(&stack, 1, &ReductionPolicy::mean_all()).unwrap();
        assert_eq!(m.flat(), probs.column(1).to_owned());
    }

    #[test]
    fn two_entries_average() {
        let a = Array2::from_shape_fn((4, 2), |(i, j)| {
            if j == 0 {
                0.25 * i as f64
            } else {
                1.0 - 0.25 * i as f64
            }
        });
        let b = Array2::from_elem((4, 2), 0.5);
        let stack =
            AttentionStack::new(vec![entry(0, 2, a.clone()), entry(1, 2, b.clone())], 2).unwrap();
        let m = token_map(&stack, 0, &ReductionPolicy::mean_all()).unwrap();
        let expected = (&a.column(0) + &b.column(0)) / 2.0;
        assert_eq!(m.flat(), expected);
        let only_first = ReductionPolicy {
            layers: Some(vec![0]),
            ..Default::default()
        };
        assert_eq!(
            token_map(&stack, 0, &only_first).unwrap().flat(),
            a.column(0).to_owned()
        );
    }

    #[test]
    fn uniform_stack_propagates_to_constant_map() {
        let u8x8 = Array2::from_elem((64, 5), 0.2);
        let u4x4 = Array2::from_elem((16, 5), 0.2);
        let stack = AttentionStack::new(vec![entry(0, 8, u8x8), entry(1, 4, u4x4)], 8).unwrap();
        let m = token_map(&stack, 3, &ReductionPolicy::mean_all()).unwrap();
        assert!(m.grid.iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn reduction_errors() {
        let empty = AttentionStack::new(vec![], 8).unwrap();
        assert!(matches!(
            token_map(&empty, 0, &ReductionPolicy::mean_all()),
            Err(Error::State(_))
        ));
        let stack = AttentionStack::new(vec![entry(0, 2, Array2::from_elem((4, 3), 1.0 / 3.0))], 2)
            .unwrap();
        assert!(matches!(
            token_map(&stack, 3, &ReductionPolicy::mean_all()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn capture_checks_binding_range() {
        let vocab = Vocabulary::toy();
        let table = Array2::zeros((vocab.len(), 4));
        let binding =
            PromptBinding::new(&vocab, &table, "a photo of a <v> man", "man", "ktn").unwrap();
        let short =
            AttentionStack::new(vec![entry(0, 2, Array2::from_elem((4, 5), 0.2))], 2).unwrap();
        assert!(matches!(capture(&short, &binding), Err(Error::Argument(_))));
        let ok = AttentionStack::new(vec![entry(0, 2, Array2::from_elem((4, 6), 1.0 / 6.0))], 2)
            .unwrap();
        assert_eq!(capture(&ok, &binding).unwrap(), ok);
    }

    #[test]
    fn heatmap_rendering() {
        let base = PixelImage::filled(16, 16, 0.4);
        let constant = TokenAttentionMap {
            grid: Array2::from_elem((4, 4), 0.3),
            token_index: 0,
            reduction: ReductionPolicy::default(),
        };
        let out = render_heatmap(&constant, &base).unwrap();
        let first: Vec<f64> = (0..3).map(|c| out.get(0, 0, c)).collect();
        for y in 0..16 {
            for x in 0..16 {
                for (c, &v) in first.iter().enumerate() {
                    assert_eq!(out.get(y, x, c), v);
                }
            }
        }

        let mut grid = Array2::from_elem((4, 4), 0.1);
        grid[[2, 1]] = 0.9;
        let norm = normalize_map(&grid);
        assert_eq!(norm.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(norm[[2, 1]], 1.0);
        let hot = TokenAttentionMap {
            grid,
            token_index: 0,
            reduction: ReductionPolicy::default(),
        };
        let out = render_heatmap(&hot, &base).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.get(9, 5, 0) > out.get(0, 0, 0));
    }
}
