//! Offline calibration: which draft layer should speak for each verifier
//! layer?
//!
//! Both models are run over a shared corpus; at every sampled position the
//! negative KL divergence between a verifier layer's attention row and each
//! draft layer's row is accumulated into a score matrix (draft rows,
//! verifier columns). A modified dynamic-time-warping pass then picks one
//! draft layer per verifier layer under a monotonicity constraint: later
//! verifier layers may repeat a draft layer or skip forward, never move
//! back.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{KvCache, Model};
use crate::tensor::Tensor2D;

/// Score matrix with draft layers as rows and verifier layers as columns.
/// Entries are `-D_KL(verifier row || draft row) <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Tensor2D,
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor2D) -> Result<Self> {
        if scores.data().iter().any(|&s| s > 0.0) {
            return Err(Error::InvalidArgument(
                "similarity scores must be non-positive".into(),
            ));
        }
        Ok(SimilarityMatrix { scores })
    }

    pub fn draft_layers(&self) -> usize {
        self.scores.rows()
    }

    pub fn verifier_layers(&self) -> usize {
        self.scores.cols()
    }

    pub fn get(&self, draft_layer: usize, verifier_layer: usize) -> f64 {
        self.scores.row(draft_layer)[verifier_layer]
    }

    pub fn as_tensor(&self) -> &Tensor2D {
        &self.scores
    }
}

/// Monotone assignment of a draft layer to every verifier layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerMapping {
    assignments: Vec<usize>,
    total_score: f64,
}

impl LayerMapping {
    pub fn new(assignments: Vec<usize>, total_score: f64) -> Result<Self> {
        if assignments.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "layer mapping must be monotone non-decreasing".into(),
            ));
        }
        Ok(LayerMapping {
            assignments,
            total_score,
        })
    }

    /// Identity mapping for same-depth models.
    pub fn identity(n_layers: usize) -> Self {
        LayerMapping {
            assignments: (0..n_layers).collect(),
            total_score: 0.0,
        }
    }

    /// Draft layer per verifier layer, indexed by verifier layer.
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn total_score(&self) -> f64 {
        self.total_score
    }

    /// Checks the mapping covers exactly the verifier's layers and stays in
    /// the draft's layer range.
    pub fn validate_for(&self, draft_layers: usize, verifier_layers: usize) -> Result<()> {
        if self.assignments.len() != verifier_layers {
            return Err(Error::ShapeMismatch(format!(
                "mapping covers {} verifier layers, model has {verifier_layers}",
                self.assignments.len()
            )));
        }
        if let Some(&bad) = self.assignments.iter().find(|&&d| d >= draft_layers) {
            return Err(Error::InvalidArgument(format!(
                "mapping references draft layer {bad}, model has {draft_layers}"
            )));
        }
        Ok(())
    }
}

/// Negative KL divergence `-D_KL(a_v || a_d)` after epsilon-smoothing both
/// distributions. Zero exactly when the smoothed inputs coincide, negative
/// otherwise.
///
/// Smoothing adds `epsilon` to every entry and renormalizes, which keeps the
/// divergence finite when the draft row has zeros where the verifier row
/// does not.
pub fn kl_similarity(a_v: &[f64], a_d: &[f64], epsilon: f64) -> Result<f64> {
    if a_v.len() != a_d.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions must have equal length, got {} and {}",
            a_v.len(),
            a_d.len()
        )));
    }
    if a_v.is_empty() {
        return Err(Error::Empty("distributions"));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let n = a_v.len() as f64;
    let v_total: f64 = a_v.iter().sum::<f64>() + n * epsilon;
    let d_total: f64 = a_d.iter().sum::<f64>() + n * epsilon;
    let mut kl = 0.0;
    for (&v, &d) in a_v.iter().zip(a_d) {
        let p = (v + epsilon) / v_total;
        let q = (d + epsilon) / d_total;
        kl += p * math::ln(p / q);
    }
    // Gibbs' inequality makes the divergence non-negative; clamp the residual
    // rounding error so similarity never exceeds zero.
    Ok(-kl.max(0.0))
}

/// Mean per-position KL similarity for every (draft layer, verifier layer)
/// pair. `traces[layer][position]` holds the attention row captured from
/// that model; positions must align between the two models.
pub fn build_similarity_matrix(
    draft_trace: &[Vec<crate::tensor::AttnWeights>],
    verifier_trace: &[Vec<crate::tensor::AttnWeights>],
    epsilon: f64,
) -> Result<SimilarityMatrix> {
    let m = draft_trace.len();
    let n = verifier_trace.len();
    if m == 0 || n == 0 {
        return Err(Error::Empty("attention traces"));
    }
    let positions = draft_trace[0].len();
    if positions == 0 {
        return Err(Error::Empty("calibration positions"));
    }
    let aligned = draft_trace.iter().all(|l| l.len() == positions)
        && verifier_trace.iter().all(|l| l.len() == positions);
    if !aligned {
        return Err(Error::ShapeMismatch(
            "draft and verifier traces must cover the same calibration positions".into(),
        ));
    }
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for pos in 0..positions {
                acc += kl_similarity(
                    verifier_trace[j][pos].weights(),
                    draft_trace[i][pos].weights(),
                    epsilon,
                )?;
            }
            data[i * n + j] = acc / positions as f64;
        }
    }
    SimilarityMatrix::new(Tensor2D::from_vec(m, n, data)?)
}

/// Monotone DTW over the score matrix.
///
/// Converts scores to costs (`D = -S`) and runs a dynamic program where
/// state `(i, j)` is the cheapest way to assign verifier layers `0..=j` with
/// layer `j` mapped to draft layer `i`. The predecessor of `(i, j)` is any
/// `(k, j-1)` with `k <= i`: `k = i-1` matches layers diagonally, `k = i`
/// repeats the draft layer, smaller `k` skips draft layers. Ties prefer
/// diagonal, then repeat, then the smallest skip, and the endpoint is the
/// cheapest cell of the last column (smallest row index on ties), so the
/// backtrack is deterministic.
///
/// The prefix-minimum over `k` is carried while scanning rows, keeping the
/// whole program at O(draft_layers x verifier_layers).
pub fn monotonic_dtw(similarity: &SimilarityMatrix) -> Result<LayerMapping> {
    let m = similarity.draft_layers();
    let n = similarity.verifier_layers();
    if m == 0 || n == 0 {
        return Err(Error::Empty("similarity matrix"));
    }
    let mut dp = vec![vec![0.0_f64; n]; m];
    let mut pred = vec![vec![0_usize; n]; m];
    for i in 0..m {
        dp[i][0] = -similarity.get(i, 0);
    }
    for j in 1..n {
        let mut best_k = 0;
        let mut best = f64::INFINITY;
        for i in 0..m {
            // Prefix minimum over dp[k][j-1] for k <= i, keeping the smallest k.
            if dp[i][j - 1] < best {
                best = dp[i][j - 1];
                best_k = i;
            }
            let choice = if i > 0 && dp[i - 1][j - 1] == best {
                i - 1 // match current layers
            } else if dp[i][j - 1] == best {
                i // repeat draft layer
            } else {
                best_k // skip draft layers
            };
            dp[i][j] = best - similarity.get(i, j);
            pred[i][j] = choice;
        }
    }
    let mut end = 0;
    for i in 1..m {
        if dp[i][n - 1] < dp[end][n - 1] {
            end = i;
        }
    }
    let mut assignments = vec![0_usize; n];
    let mut i = end;
    for j in (0..n).rev() {
        assignments[j] = i;
        if j > 0 {
            i = pred[i][j];
        }
    }
    let total_score = assignments
        .iter()
        .enumerate()
        .map(|(j, &d)| similarity.get(d, j))
        .sum();
    LayerMapping::new(assignments, total_score)
}

/// Calibration knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CalibrationConfig {
    /// Smoothing constant for [`kl_similarity`].
    pub epsilon: f64,
    /// Skip this many leading corpus positions before sampling attention.
    pub warmup: usize,
    /// Cap on sampled positions (evenly strided); `None` keeps every
    /// position after the warmup.
    pub max_positions: Option<usize>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            epsilon: 1e-10,
            warmup: 8,
            max_positions: None,
        }
    }
}

/// Runs both models over the corpus and accumulates the mean KL similarity
/// for every layer pair, without retaining per-position traces.
pub fn calibrate_matrix(
    draft: &Model,
    verifier: &Model,
    corpus: &[u8],
    cfg: &CalibrationConfig,
) -> Result<SimilarityMatrix> {
    if cfg.epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if corpus.len() <= cfg.warmup {
        return Err(Error::InvalidArgument(format!(
            "corpus too short for calibration: {} bytes with warmup {}",
            corpus.len(),
            cfg.warmup
        )));
    }
    let usable = corpus.len() - cfg.warmup;
    let stride = match cfg.max_positions {
        Some(cap) if cap == 0 => {
            return Err(Error::InvalidArgument("max_positions must be >= 1".into()))
        }
        Some(cap) => usable.div_ceil(cap),
        None => 1,
    };
    let m = draft.config.n_layers;
    let n = verifier.config.n_layers;
    let mut acc = vec![0.0_f64; m * n];
    let mut count = 0_usize;
    let mut cache_d = KvCache::new(&draft.config);
    let mut cache_v = KvCache::new(&verifier.config);
    for (pos, &byte) in corpus.iter().enumerate() {
        let out_d = draft.forward_step(byte as u32, &mut cache_d)?;
        let out_v = verifier.forward_step(byte as u32, &mut cache_v)?;
        if pos < cfg.warmup || (pos - cfg.warmup) % stride != 0 {
            continue;
        }
        for i in 0..m {
            for j in 0..n {
                acc[i * n + j] += kl_similarity(
                    out_v.attentions[j].weights(),
                    out_d.attentions[i].weights(),
                    cfg.epsilon,
                )?;
            }
        }
        count += 1;
    }
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    SimilarityMatrix::new(Tensor2D::from_vec(m, n, acc)?)
}

/// Full offline calibration: similarity matrix plus the DTW solve.
pub fn calibrate(
    draft: &Model,
    verifier: &Model,
    corpus: &[u8],
    cfg: &CalibrationConfig,
) -> Result<LayerMapping> {
    let matrix = calibrate_matrix(draft, verifier, corpus, cfg)?;
    monotonic_dtw(&matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AttnWeights;

    #[test]
    fn kl_zero_on_identical_inputs() {
        let a = [0.2, 0.3, 0.5];
        let s = kl_similarity(&a, &a, 1e-10).unwrap();
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn kl_hand_value() {
        // One-hot vs uniform: divergence ln 2 as epsilon vanishes.
        let s = kl_similarity(&[1.0, 0.0], &[0.5, 0.5], 1e-12).unwrap();
        assert!((s + core::f64::consts::LN_2).abs() < 1e-9, "{s}");
    }

    #[test]
    fn kl_never_positive() {
        let cases = [
            (vec![0.9, 0.1], vec![0.1, 0.9]),
            (vec![0.25, 0.25, 0.25, 0.25], vec![0.7, 0.1, 0.1, 0.1]),
            (vec![0.5, 0.5], vec![0.5, 0.5]),
        ];
        for (v, d) in cases {
            assert!(kl_similarity(&v, &d, 1e-10).unwrap() <= 0.0);
        }
    }

    #[test]
    fn kl_rejects_mismatched_lengths() {
        assert!(kl_similarity(&[1.0], &[0.5, 0.5], 1e-10).is_err());
        assert!(kl_similarity(&[0.5, 0.5], &[0.5, 0.5], 0.0).is_err());
    }

    fn rows(r: &[&[f64]]) -> Vec<AttnWeights> {
        r.iter().map(|w| AttnWeights::new(w.to_vec()).unwrap()).collect()
    }

    #[test]
    fn similarity_matrix_self_comparison_diagonal_is_zero() {
        let trace = vec![
            rows(&[&[0.6, 0.4], &[0.5, 0.2, 0.3]]),
            rows(&[&[0.1, 0.9], &[0.3, 0.3, 0.4]]),
        ];
        let s = build_similarity_matrix(&trace, &trace, 1e-10).unwrap();
        for i in 0..2 {
            assert!(s.get(i, i).abs() < 1e-12);
            for j in 0..2 {
                assert!(s.get(i, j) <= 0.0);
                // Diagonal entries are the row-wise maxima.
                assert!(s.get(i, i) >= s.get(i, j));
            }
        }
    }

    #[test]
    fn similarity_matrix_single_position_hand_values() {
        let draft = vec![rows(&[&[0.5, 0.5]]), rows(&[&[0.9, 0.1]])];
        let verifier = vec![rows(&[&[0.5, 0.5]]), rows(&[&[0.2, 0.8]])];
        let eps = 1e-10;
        let s = build_similarity_matrix(&draft, &verifier, eps).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want =
                    kl_similarity(verifier[j][0].weights(), draft[i][0].weights(), eps).unwrap();
                assert_eq!(s.get(i, j), want);
            }
        }
    }

    #[test]
    fn similarity_matrix_invariant_to_duplicated_positions() {
        let draft_once = vec![rows(&[&[0.6, 0.4]])];
        let verifier_once = vec![rows(&[&[0.3, 0.7]])];
        let dup = 5;
        let draft_many = vec![rows(&vec![&[0.6, 0.4][..]; dup])];
        let verifier_many = vec![rows(&vec![&[0.3, 0.7][..]; dup])];
        let a = build_similarity_matrix(&draft_once, &verifier_once, 1e-10).unwrap();
        let b = build_similarity_matrix(&draft_many, &verifier_many, 1e-10).unwrap();
        assert!((a.get(0, 0) - b.get(0, 0)).abs() < 1e-15);
    }

    fn matrix(m: usize, n: usize, data: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix::new(Tensor2D::from_vec(m, n, data).unwrap()).unwrap()
    }

    #[test]
    fn dtw_identity_under_diagonal_dominance() {
        let mut data = vec![-10.0; 16];
        for i in 0..4 {
            data[i * 4 + i] = 0.0;
        }
        let mapping = monotonic_dtw(&matrix(4, 4, data)).unwrap();
        assert_eq!(mapping.assignments(), &[0, 1, 2, 3]);
        assert_eq!(mapping.total_score(), 0.0);
    }

    #[test]
    fn dtw_all_equal_scores_tie_break_deterministically(){
        let mapping = monotonic_dtw(&matrix(3, 4, vec![-1.0; 12])).unwrap();
        assert_eq!(mapping.assignments(), &[0, 0, 0, 0]);
        assert_eq!(mapping.total_score(), -4.0);
    }

    #[test]
    fn dtw_rejects_empty() {
        assert!(monotonic_dtw(&matrix(0, 0, vec![])).is_err());
    }

    use crate::testutil::brute_force_monotone_best as brute_force_best;

    #[test]
    fn dtw_matches_enumeration_on_fixed_instances() {
        // A handful of irregular matrices with mixed magnitudes.
        let cases = [
            matrix(4, 6, (0..24).map(|k| -(((k * 7 + 3) % 11) as f64) / 3.0).collect()),
            matrix(2, 5, (0..10).map(|k| -(((k * 13 + 5) % 7) as f64)).collect()),
            matrix(5, 3, (0..15).map(|k| -(((k * 5 + 1) % 9) as f64) / 2.0).collect()),
            matrix(1, 4, vec![-0.5, -0.25, -3.0, -1.0]),
        ];
        for s in &cases {
            let mapping = monotonic_dtw(s).unwrap();
            let best = brute_force_best(s);
            assert!(
                (mapping.total_score() - best).abs() < 1e-9,
                "dtw {} vs brute force {best}",
                mapping.total_score()
            );
        }
    }

    #[test]
    fn self_calibration_is_identity_and_deterministic() {
        let model = Model::new(crate::model::ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            vocab: 256,
            max_seq: 64,
            seed: 31,
        })
        .unwrap();
        let corpus = crate::testutil::synthetic_corpus(48, 2);
        let cfg = CalibrationConfig {
            warmup: 4,
            ..CalibrationConfig::default()
        };
        let a = calibrate(&model, &model, &corpus, &cfg).unwrap();
        assert_eq!(a.assignments(), &[0, 1, 2]);
        assert!(a.total_score().abs() < 1e-12);
        let b = calibrate(&model, &model, &corpus, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_needs_positions_past_warmup() {
        let model = Model::new(crate::model::ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            vocab: 256,
            max_seq: 32,
            seed: 1,
        })
        .unwrap();
        let cfg = CalibrationConfig::default();
        let err = calibrate(&model, &model, &[1, 2, 3], &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dtw_output_monotone_and_optimal(
                m in 1usize..=5,
                n in 1usize..=6,
                raw in proptest::collection::vec(0.0f64..8.0, 30),
            ) {
                let data: Vec<f64> = raw.iter().take(m * n).map(|&x| -x).collect();
                prop_assume!(data.len() == m * n);
                let s = matrix(m, n, data);
                let mapping = monotonic_dtw(&s).unwrap();
                prop_assert!(mapping.assignments().windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(mapping.assignments().iter().all(|&d| d < m));
                let best = brute_force_best(&s);
                prop_assert!((mapping.total_score() - best).abs() < 1e-9);
            }
        }
    }
}
