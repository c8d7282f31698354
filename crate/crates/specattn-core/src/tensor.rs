//! Row-major matrices, attention-weight rows, and boolean masks.
//!
//! Everything numeric in this crate flows through these types as 64-bit
//! floats: correctness and tight oracle tolerances matter more here than
//! throughput.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a tensor from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} tensor needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Euclidean norm of row `r`.
    pub fn row_norm2(&self, r: usize) -> f64 {
        math::sqrt(self.row(r).iter().map(|x| x * x).sum())
    }
}

/// One query's normalized attention weights over `L` cached positions.
///
/// Entries are non-negative and sum to 1 within `1e-9`; the constructor
/// enforces both.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    weights: Vec<f64>,
}

impl AttnWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("weights"));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attention weights must be non-negative, got {:?}",
                weights.iter().cloned().fold(f64::INFINITY, f64::min)
            )));
        }
        let sum: f64 = weights.iter().sum();
        if math::abs(sum - 1.0) > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "attention weights must sum to 1, got {sum}"
            )));
        }
        Ok(AttnWeights { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }
}

/// Per-position keep/drop flags over a layer's cached positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    selected: Vec<bool>,
}

impl MaskVector {
    pub fn new(selected: Vec<bool>) -> Self {
        MaskVector { selected }
    }

    pub fn full(len: usize) -> Self {
        MaskVector {
            selected: vec![true; len],
        }
    }

    pub fn empty(len: usize) -> Self {
        MaskVector {
            selected: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.selected[i]
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        self.selected[i] = keep;
    }

    pub fn count_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.selected
    }
}
