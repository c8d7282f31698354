//! Token-selection kernels that turn draft attention rows into verifier
//! masks.
//!
//! The workhorse is [`nucleus_select_sortfree`]: a binary search on a weight
//! threshold that finds a top-p nucleus without sorting. The search keeps the
//! invariant `mass(theta_low) >= p * total`, so returning `theta_low` (rather
//! than the last midpoint) guarantees the selected set always retains at
//! least the target mass. [`nucleus_select_oracle`] is the sorting-based
//! reference with tie-closure, kept as an independent check. Fixed-budget
//! top-k and sink+window selection cover the baseline methods.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layer_map::LayerMapping;
use crate::tensor::{AttnWeights, MaskVector};

/// Knobs for mask construction from draft attention.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SelectionConfig {
    /// Attention-mass threshold in (0, 1].
    pub p: f64,
    /// Binary-search rounds for the sorting-free selection.
    pub iterations: usize,
    /// Selected positions are widened to whole blocks of this size.
    pub block_size: usize,
    /// Leading verifier layers that always use full attention.
    pub dense_prefix_layers: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            p: 0.95,
            iterations: 10,
            block_size: 1,
            dense_prefix_layers: 2,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p must be in (0, 1], got {}",
                self.p
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("block_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Strictly increasing position indices inside a universe of length `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSet {
    indices: Vec<usize>,
    universe: usize,
}

impl TokenSet {
    /// Sorts, deduplicates, and range-checks the given indices.
    pub fn new(mut indices: Vec<usize>, universe: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= universe {
                return Err(Error::InvalidArgument(format!(
                    "token index {last} outside universe of length {universe}"
                )));
            }
        }
        Ok(TokenSet { indices, universe })
    }

    pub fn full(universe: usize) -> Self {
        TokenSet {
            indices: (0..universe).collect(),
            universe,
        }
    }

    pub fn empty(universe: usize) -> Self {
        TokenSet {
            indices: Vec::new(),
            universe,
        }
    }

    /// Internal: `indices` must already be strictly increasing and in range.
    fn from_sorted(indices: Vec<usize>, universe: usize) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(indices.last().is_none_or(|&i| i < universe));
        TokenSet { indices, universe }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Drops indices at or beyond `universe` and shrinks the universe.
    pub fn clip(&self, universe: usize) -> TokenSet {
        let indices = self
            .indices
            .iter()
            .copied()
            .take_while(|&i| i < universe)
            .collect();
        TokenSet { indices, universe }
    }

    /// Boolean mask over this set's universe.
    pub fn to_mask(&self) -> MaskVector {
        self.to_mask_of_len(self.universe)
    }

    /// Boolean mask of an explicit length; indices past the end are ignored.
    pub fn to_mask_of_len(&self, len: usize) -> MaskVector {
        let mut mask = MaskVector::empty(len);
        for &i in &self.indices {
            if i < len {
                mask.set(i, true);
            }
        }
        mask
    }

    pub fn from_mask(mask: &MaskVector) -> TokenSet {
        let indices = (0..mask.len()).filter(|&i| mask.is_selected(i)).collect();
        TokenSet {
            indices,
            universe: mask.len(),
        }
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument(
            "selection weights must be non-negative".into(),
        ));
    }
    Ok(())
}

fn validate_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p must be in (0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Top-p nucleus selection by binary search on a weight threshold.
///
/// Runs a fixed number of bisection rounds between 0 and `max(weights)`,
/// keeping `mass(theta_low) >= p * total` as a loop invariant, and selects
/// `{i : w_i >= theta_low}`. Returns the set together with the final
/// threshold. The retained mass is always at least `p * total`; with enough
/// iterations the result coincides with the tie-closed sorting oracle.
pub fn nucleus_select_sortfree(
    weights: &[f64],
    p: f64,
    iterations: usize,
) -> Result<(TokenSet, f64)> {
    validate_weights(weights)?;
    validate_p(p)?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    if p >= 1.0 {
        // Full mass required: only exact zeros can be dropped. Resolving this
        // by bisection is numerically ill-posed (weights below one ulp of the
        // total are invisible to the mass comparison), so take the
        // exact-arithmetic limit directly: threshold 0, every positive weight
        // kept.
        let indices: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        return Ok((TokenSet::from_sorted(indices, weights.len()), 0.0));
    }
    let total: f64 = weights.iter().sum();
    let target = p * total;
    let mut lo = 0.0_f64;
    let mut hi = weights.iter().cloned().fold(0.0, f64::max);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        let mass: f64 = weights.iter().filter(|&&w| w >= mid).sum();
        if mass < target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let indices: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] >= lo).collect();
    Ok((TokenSet::from_sorted(indices, weights.len()), lo))
}

/// Sorting-based nucleus reference: minimal descending prefix reaching
/// `p * total`, extended to close ties with the last included weight.
pub fn nucleus_select_oracle(weights: &[f64], p: f64) -> Result<TokenSet> {
    validate_weights(weights)?;
    validate_p(p)?;
    if p >= 1.0 {
        // Minimality excludes exact zeros; everything else is required.
        let indices: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        return Ok(TokenSet::from_sorted(indices, weights.len()));
    }
    let total: f64 = weights.iter().sum();
    let target = p * total;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .expect("weights validated finite")
            .then(a.cmp(&b))
    });
    let mut cut = order.len();
    let mut cum = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        cum += weights[i];
        if cum >= target {
            cut = pos + 1;
            break;
        }
    }
    let cut_weight = weights[order[cut - 1]];
    while cut < order.len() && weights[order[cut]] == cut_weight {
        cut += 1;
    }
    order.truncate(cut);
    order.sort_unstable();
    Ok(TokenSet::from_sorted(order, weights.len()))
}

/// Indices of the `budget` largest weights, lower index winning ties.
pub fn topk_select(weights: &[f64], budget: usize) -> Result<TokenSet> {
    validate_weights(weights)?;
    if budget == 0 || budget > weights.len() {
        return Err(Error::InvalidArgument(format!(
            "budget must be in 1..={}, got {budget}",
            weights.len()
        )));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .expect("weights validated finite")
            .then(a.cmp(&b))
    });
    order.truncate(budget);
    order.sort_unstable();
    Ok(TokenSet::from_sorted(order, weights.len()))
}

/// Sink-plus-recent-window selection: the first `n_sink` and last `n_recent`
/// positions, clipped to the universe.
pub fn streaming_select(len: usize, n_sink: usize, n_recent: usize) -> TokenSet {
    let mut indices: Vec<usize> = (0..n_sink.min(len)).collect();
    let start = len.saturating_sub(n_recent);
    for i in start..len {
        if indices.last().is_none_or(|&last| i > last) {
            indices.push(i);
        }
    }
    TokenSet::from_sorted(indices, len)
}

/// Union of per-step selections; indices are absolute positions, so the
/// result lives in the largest universe seen.
pub fn union_steps(sets: &[TokenSet]) -> TokenSet {
    let universe = sets.iter().map(TokenSet::universe).max().unwrap_or(0);
    let mut indices: Vec<usize> = sets.iter().flat_map(|s| s.indices.iter().copied()).collect();
    indices.sort_unstable();
    indices.dedup();
    TokenSet::from_sorted(indices, universe)
}

/// Widens every selected position to its whole block of `block_size`
/// positions (clipped to the universe). `block_size = 1` is the identity.
pub fn coarsen_to_blocks(set: &TokenSet, block_size: usize) -> TokenSet {
    if block_size <= 1 {
        return set.clone();
    }
    let mut indices = Vec::new();
    let mut last_block = usize::MAX;
    for &i in &set.indices {
        let block = i / block_size;
        if block != last_block {
            let start = block * block_size;
            let end = (start + block_size).min(set.universe);
            indices.extend(start..end);
            last_block = block;
        }
    }
    TokenSet::from_sorted(indices, set.universe)
}

/// Compressed sparse row encoding of per-row index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CsrMask {
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
}

impl CsrMask {
    /// Validates structural invariants: offsets start at 0, are
    /// non-decreasing, end at the index count, and each row's columns are
    /// strictly increasing.
    pub fn new(row_offsets: Vec<usize>, col_indices: Vec<usize>) -> Result<Self> {
        if row_offsets.first() != Some(&0) {
            return Err(Error::MalformedCsr("row_offsets must start at 0".into()));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::MalformedCsr(
                "row_offsets must be non-decreasing".into(),
            ));
        }
        if *row_offsets.last().expect("non-empty by first check") != col_indices.len() {
            return Err(Error::MalformedCsr(format!(
                "row_offsets must end at {}, got {}",
                col_indices.len(),
                row_offsets.last().unwrap()
            )));
        }
        let mask = CsrMask {
            row_offsets,
            col_indices,
        };
        for r in 0..mask.n_rows() {
            if mask.row(r).windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::MalformedCsr(format!(
                    "columns in row {r} must be strictly increasing"
                )));
            }
        }
        Ok(mask)
    }

    pub fn n_rows(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[r]..self.row_offsets[r + 1]]
    }

    pub fn from_mask_rows(rows: &[MaskVector]) -> CsrMask {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in rows {
            col_indices.extend((0..row.len()).filter(|&i| row.is_selected(i)));
            row_offsets.push(col_indices.len());
        }
        CsrMask {
            row_offsets,
            col_indices,
        }
    }

    pub fn from_token_rows(rows: &[TokenSet]) -> CsrMask {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in rows {
            col_indices.extend_from_slice(row.indices());
            row_offsets.push(col_indices.len());
        }
        CsrMask {
            row_offsets,
            col_indices,
        }
    }

    /// Decodes back to boolean rows of the given length, range-checking every
    /// column index.
    pub fn to_mask_rows(&self, row_len: usize) -> Result<Vec<MaskVector>> {
        let mut rows = Vec::with_capacity(self.n_rows());
        for r in 0..self.n_rows() {
            let mut mask = MaskVector::empty(row_len);
            for &c in self.row(r) {
                if c >= row_len {
                    return Err(Error::MalformedCsr(format!(
                        "column {c} out of range for row length {row_len}"
                    )));
                }
                mask.set(c, true);
            }
            rows.push(mask);
        }
        Ok(rows)
    }

    pub fn row_token_set(&self, r: usize, universe: usize) -> Result<TokenSet> {
        let row = self.row(r).to_vec();
        TokenSet::new(row, universe)
    }
}

/// Builds one mask row per verifier layer from the draft attention captured
/// over a round of speculative steps.
///
/// `step_traces[s][i]` is draft layer `i`'s head-averaged attention at
/// speculative step `s`. For each verifier layer: layers inside the dense
/// prefix get a full row; otherwise the mapped draft layer's row is
/// nucleus-selected per step, the steps are unioned, widened to blocks,
/// clipped to the verifier cache length, and CSR-encoded.
pub fn build_layer_masks(
    step_traces: &[Vec<AttnWeights>],
    mapping: &LayerMapping,
    cfg: &SelectionConfig,
    l_verifier: usize,
) -> Result<CsrMask> {
    if step_traces.is_empty() {
        return Err(Error::Empty("draft traces"));
    }
    cfg.validate()?;
    let n_draft = step_traces[0].len();
    if step_traces.iter().any(|step| step.len() != n_draft) {
        return Err(Error::ShapeMismatch(
            "all speculative steps must trace the same draft layers".into(),
        ));
    }
    let mut rows = Vec::with_capacity(mapping.len());
    for (j, &draft_layer) in mapping.assignments().iter().enumerate() {
        if j < cfg.dense_prefix_layers {
            rows.push(TokenSet::full(l_verifier));
            continue;
        }
        if draft_layer >= n_draft {
            return Err(Error::InvalidArgument(format!(
                "layer mapping sends verifier layer {j} to draft layer {draft_layer}, \
                 but only {n_draft} draft layers were traced"
            )));
        }
        let mut per_step = Vec::with_capacity(step_traces.len());
        for step in step_traces {
            let (set, _) = nucleus_select_sortfree(step[draft_layer].weights(), cfg.p, cfg.iterations)?;
            per_step.push(set);
        }
        let merged = union_steps(&per_step);
        let coarse = coarsen_to_blocks(&merged, cfg.block_size);
        rows.push(coarse.clip(l_verifier));
    }
    Ok(CsrMask::from_token_rows(&rows))
}
