//! Dynamic token selection: score context tokens, keep the top fraction,
//! and route only those through attention and the feed-forward network.
//!
//! Scores come from a small learned MLP over per-token features (the value
//! vector prefixed with its L2 norm). Selection is a hard top-k with
//! deterministic tie-breaking; bypassed tokens skip the block entirely and
//! are merged back unchanged afterwards, so selection at ratio 1 is the
//! identity routing.

use crate::attention::SequenceLayout;
use crate::kernels::mlp_forward;
use crate::tensor::{Rng, Tensor};
use crate::{CoreError, Result};

/// Number of kept tokens for `n_c` candidates at `ratio`: `⌊ratio·n_c⌋`,
/// never below one while any candidate exists, zero only when `n_c = 0`.
pub fn keep_count(n_c: usize, ratio: f64) -> usize {
    if n_c == 0 {
        return 0;
    }
    ((ratio * n_c as f64).floor() as usize).clamp(1, n_c)
}

/// Learned scorer: an MLP mapping per-token features to one scalar.
///
/// Features are `[‖v‖₂, v]` (width `d + 1`) so the scorer sees both the
/// magnitude and the direction of each value vector.
#[derive(Debug, Clone)]
pub struct ImportanceScorer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ImportanceScorer {
    /// Gaussian initialization scaled by fan-in.
    pub fn init(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        let f_in = d + 1;
        ImportanceScorer {
            w1: rng.normal_tensor(vec![f_in, hidden], 1.0 / (f_in as f64).sqrt()),
            b1: Tensor::zeros(vec![1, hidden]),
            w2: rng.normal_tensor(vec![hidden, 1], 1.0 / (hidden as f64).sqrt()),
            b2: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.shape()[1]
    }
}

/// Per-token features for the scorer: value vector prefixed by its L2 norm.
pub fn token_features(v_c: &Tensor) -> Result<Tensor> {
    let (n, d) = v_c.dims2()?;
    Tensor::from_fn(vec![n, d + 1], |flat| {
        let (i, j) = (flat / (d + 1), flat % (d + 1));
        if j == 0 {
            let norm2: f64 = (0..d).map(|p| (v_c.at(i, p) as f64).powi(2)).sum();
            norm2.sqrt() as f32
        } else {
            v_c.at(i, j - 1)
        }
    })
}

/// Scores every context token; returns an `n_c × 1` tensor (empty for an
/// empty context).
pub fn score_tokens(scorer: &ImportanceScorer, v_c: &Tensor) -> Result<Tensor> {
    let (n, d) = v_c.dims2()?;
    if d + 1 != scorer.feature_width() {
        return Err(CoreError::Shape(format!(
            "scorer expects value width {}, got {d}",
            scorer.feature_width() - 1
        )));
    }
    if n == 0 {
        return Ok(Tensor::zeros(vec![0, 1]));
    }
    mlp_forward(
        &token_features(v_c)?,
        &scorer.w1,
        &scorer.b1,
        &scorer.w2,
        &scorer.b2,
    )
}

/// Outcome of a top-k selection over context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Scores the decision was made from (`n_c × 1`).
    pub scores: Tensor,
    /// Kept token indices, strictly ascending.
    pub kept: Vec<usize>,
    /// Bypassed token indices, strictly ascending.
    pub skipped: Vec<usize>,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.kept.len()
    }

    /// Trivial selection that keeps everything (used when selection is off).
    pub fn keep_all(n_c: usize) -> Self {
        SelectionResult {
            scores: Tensor::zeros(vec![n_c, 1]),
            kept: (0..n_c).collect(),
            skipped: Vec::new(),
        }
    }
}

/// Keeps the `keep_count(n_c, ratio)` highest-scoring tokens. Ties go to
/// the lower index, so the result is a pure function of the scores.
pub fn select_topk(scores: &Tensor, ratio: f64) -> Result<SelectionResult> {
    let (n_c, cols) = scores.dims2()?;
    if cols != 1 {
        return Err(CoreError::Shape(format!(
            "scores must be a column, got {n_c}×{cols}"
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CoreError::Invalid(format!(
            "selection ratio must be in (0, 1], got {ratio}"
        )));
    }
    let k = keep_count(n_c, ratio);
    let mut order: Vec<usize> = (0..n_c).collect();
    // Stable ordering: score descending, index ascending on exact ties.
    order.sort_by(|&a, &b| {
        scores
            .at(b, 0)
            .partial_cmp(&scores.at(a, 0))
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    let mut skipped: Vec<usize> = order[k..].to_vec();
    kept.sort_unstable();
    skipped.sort_unstable();
    Ok(SelectionResult {
        scores: scores.clone(),
        kept,
        skipped,
    })
}

/// Rows of `t` at the given indices, in the given order. Indices must be in
/// range; the selection paths always pass ascending index lists.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (n, d) = t.dims2()?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(CoreError::Invalid(format!(
            "gather index {bad} out of range for {n} rows"
        )));
    }
    Tensor::from_fn(vec![idx.len(), d], |flat| t.at(idx[flat / d], flat % d))
}

/// Inverse of the gather split. `processed` holds the rows that went
/// through the block — all noisy rows first, then the kept context rows —
/// and `bypassed` holds the skipped context rows untouched. The result is
/// the full sequence in original order: noisy rows, then context rows with
/// kept positions filled from `processed` and skipped positions from
/// `bypassed`, each copied bit-exactly.
pub fn scatter_merge(
    processed: &Tensor,
    bypassed: &Tensor,
    layout: &SequenceLayout,
    sel: &SelectionResult,
) -> Result<Tensor> {
    let (pr, d) = processed.dims2()?;
    let (sk, sd) = bypassed.dims2()?;
    let n_z = layout.n_z();
    if pr != n_z + sel.kept.len() || sk != sel.skipped.len() {
        return Err(CoreError::Shape(format!(
            "scatter_merge row counts: processed {pr} vs {} noisy + {} kept, bypassed {sk} vs {} skipped",
            n_z,
            sel.kept.len(),
            sel.skipped.len()
        )));
    }
    if sel.kept.len() + sel.skipped.len() != layout.n_c() {
        return Err(CoreError::Shape(format!(
            "selection covers {} tokens but layout has {}",
            sel.kept.len() + sel.skipped.len(),
            layout.n_c()
        )));
    }
    if sk > 0 && sd != d {
        return Err(CoreError::Shape(format!(
            "scatter_merge width mismatch: {d} vs {sd}"
        )));
    }
    let mut out = vec![0.0f32; layout.total() * d];
    out[..n_z * d].copy_from_slice(&processed.data()[..n_z * d]);
    for (r, &tok) in sel.kept.iter().enumerate() {
        let src = (n_z + r) * d;
        let dst = (n_z + tok) * d;
        out[dst..dst + d].copy_from_slice(&processed.data()[src..src + d]);
    }
    for (r, &tok) in sel.skipped.iter().enumerate() {
        let dst = (n_z + tok) * d;
        out[dst..dst + d].copy_from_slice(&bypassed.data()[r * d..(r + 1) * d]);
    }
    Tensor::matrix(layout.total(), d, out)
}
