//! Dense and post-softmax-masked single-query attention kernels.
//!
//! The sparse kernel supports two semantics for a keep-mask over cached
//! positions:
//!
//! * [`AttentionMode::Eq2`]: softmax over every position, then dropped
//!   positions contribute nothing. Retained mass is NOT redistributed, so the
//!   output error obeys the convex-combination bound of
//!   [`masked_error_bound`].
//! * [`AttentionMode::Renormalized`]: softmax computed over the selected
//!   positions only, matching what practical sparse kernels do.
//!
//! With a full mask both modes reproduce [`dense_attention`] bit for bit;
//! the shared accumulation helpers keep the floating-point operation order
//! identical on purpose.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{AttnWeights, MaskVector, Tensor2D};

/// How a sparse mask is applied to attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionMode {
    /// Mask after a full softmax; dropped mass is lost.
    Eq2,
    /// Softmax over the selected positions only.
    Renormalized,
}

impl Default for AttentionMode {
    fn default() -> Self {
        AttentionMode::Renormalized
    }
}

/// Numerically stable max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<AttnWeights> {
    let probs = masked_softmax(logits, None)?;
    AttnWeights::new(probs)
}

/// Softmax restricted to `keep`-selected positions; unselected entries are 0.
///
/// `keep = None` means all positions. The loop structure is shared with the
/// dense path so a full mask reproduces it exactly.
pub(crate) fn masked_softmax(logits: &[f64], keep: Option<&MaskVector>) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let selected = |i: usize| keep.is_none_or(|m| m.is_selected(i));

    let mut max = f64::NEG_INFINITY;
    for (i, &x) in logits.iter().enumerate() {
        if selected(i) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionSupport);
    }

    let mut probs = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, &x) in logits.iter().enumerate() {
        if selected(i) {
            let e = math::exp(x - max);
            probs[i] = e;
            sum += e;
        }
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(probs)
}

/// `q . keys[i] / sqrt(d)` for `len` rows stored flat with stride `q.len()`.
pub(crate) fn scaled_scores_flat(q: &[f64], keys_flat: &[f64], len: usize) -> Vec<f64> {
    let d = q.len();
    let scale = 1.0 / math::sqrt(d as f64);
    (0..len)
        .map(|i| {
            let row = &keys_flat[i * d..(i + 1) * d];
            let dot: f64 = q.iter().zip(row).map(|(a, b)| a * b).sum();
            dot * scale
        })
        .collect()
}

/// `out[j] = sum over kept rows i of w[i] * values[i][j]`, rows visited in
/// order; `values_flat` has stride `d`.
pub(crate) fn blend_rows_flat(
    weights: &[f64],
    values_flat: &[f64],
    d: usize,
    keep: Option<&MaskVector>,
) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        if keep.is_none_or(|m| m.is_selected(i)) {
            let row = &values_flat[i * d..(i + 1) * d];
            for (o, x) in out.iter_mut().zip(row) {
                *o += w * x;
            }
        }
    }
    out
}

/// `q.row(0) . k.row(i) / sqrt(d)` for every cached position `i`.
fn scaled_scores(q: &Tensor2D, k: &Tensor2D) -> Result<Vec<f64>> {
    if q.rows() != 1 || q.cols() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "query must be 1xd with d > 0, got {}x{}",
            q.rows(),
            q.cols()
        )));
    }
    if k.rows() == 0 || k.cols() != q.cols() {
        return Err(Error::ShapeMismatch(format!(
            "keys must be Lx{} with L >= 1, got {}x{}",
            q.cols(),
            k.rows(),
            k.cols()
        )));
    }
    Ok(scaled_scores_flat(q.row(0), k.data(), k.rows()))
}

/// `out[j] = sum over kept rows i of w[i] * v[i][j]`, rows visited in order.
fn weighted_value_sum(weights: &[f64], v: &Tensor2D, keep: Option<&MaskVector>) -> Tensor2D {
    let blended = blend_rows_flat(weights, v.data(), v.cols(), keep);
    let mut out = Tensor2D::zeros(1, v.cols());
    out.row_mut(0).copy_from_slice(&blended);
    out
}

fn check_values(k: &Tensor2D, v: &Tensor2D) -> Result<()> {
    if v.rows() != k.rows() {
        return Err(Error::ShapeMismatch(format!(
            "values must have one row per key, got {} keys and {} value rows",
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

/// Single-query dense attention: weights from the scaled scores, output as
/// the weight-blend of value rows. The weights are returned so callers can
/// trace attention patterns.
pub fn dense_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<(Tensor2D, AttnWeights)> {
    let scores = scaled_scores(q, k)?;
    check_values(k, v)?;
    let w = softmax(&scores)?;
    let out = weighted_value_sum(w.weights(), v, None);
    Ok((out, w))
}

/// Single-query sparse attention over a keep-mask.
///
/// `renormalize = false` keeps the full-softmax weights and drops unselected
/// rows (the dropped mass is lost); an all-false mask yields a zero vector.
/// `renormalize = true` restricts the softmax to selected rows and errors on
/// an all-false mask.
pub fn sparse_attention_postmask(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    mask: &MaskVector,
    renormalize: bool,
) -> Result<Tensor2D> {
    let scores = scaled_scores(q, k)?;
    check_values(k, v)?;
    if mask.len() != k.rows() {
        return Err(Error::MaskLength {
            expected: k.rows(),
            got: mask.len(),
        });
    }
    if renormalize {
        let probs = masked_softmax(&scores, Some(mask))?;
        Ok(weighted_value_sum(&probs, v, Some(mask)))
    } else {
        let probs = masked_softmax(&scores, None)?;
        Ok(weighted_value_sum(&probs, v, Some(mask)))
    }
}

/// Tight convex-combination bound on the error of mask-after-softmax
/// attention: `sum over dropped i of w[i] * ||v_i||_2`.
///
/// Lengths must agree; this is an internal-invariant helper, so mismatches
/// panic rather than returning an error.
pub fn masked_error_bound(w: &AttnWeights, mask: &MaskVector, v: &Tensor2D) -> f64 {
    assert_eq!(w.len(), mask.len(), "weights and mask must cover the same positions");
    assert_eq!(w.len(), v.rows(), "one value row per attention weight");
    let mut bound = 0.0;
    for (i, &wi) in w.weights().iter().enumerate() {
        if !mask.is_selected(i) {
            bound += wi * v.row_norm2(i);
        }
    }
    bound
}
