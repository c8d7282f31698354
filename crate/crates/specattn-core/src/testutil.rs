//! Deterministic support code for tests and cross-checks: a straight-line
//! full-sequence reference forward, a tiny seedable RNG, and synthetic
//! corpus / distribution generators.
//!
//! The reference forward recomputes the whole stack from scratch over the
//! full sequence with no KV cache and its own inline helpers; incremental
//! decoding must reproduce it.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::model::Model;

/// SplitMix64: small, seedable, no_std-friendly.
#[derive(Debug, Clone)]
pub struct TestRng {
    state: u64,
}

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0
    }

    /// Uniform in 0..bound (bound > 0).
    pub fn below(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_f64()).max(1e-12);
        let u2 = self.next_f64();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
    }
}

/// Pseudo-text: a seeded word list chained by a seeded successor table, so
/// the byte stream has repeating structure for attention to pick up.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = TestRng::new(seed);
    let n_words = 24;
    let words: Vec<Vec<u8>> = (0..n_words)
        .map(|_| {
            let wlen = 3 + rng.below(5);
            (0..wlen).map(|_| b'a' + rng.below(26) as u8).collect()
        })
        .collect();
    let successors: Vec<[usize; 3]> = (0..n_words)
        .map(|_| [rng.below(n_words), rng.below(n_words), rng.below(n_words)])
        .collect();
    let mut out = Vec::with_capacity(len + 8);
    let mut word = 0;
    while out.len() < len {
        out.extend_from_slice(&words[word]);
        out.push(b' ');
        word = if rng.next_f64() < 0.85 {
            successors[word][rng.below(3)]
        } else {
            rng.below(n_words)
        };
    }
    out.truncate(len);
    out
}

/// Random distribution of the given length; larger `peakedness` concentrates
/// mass on fewer entries (0 gives the flat regime).
pub fn random_distribution(rng: &mut TestRng, len: usize, peakedness: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..len).map(|_| rng.normal() * peakedness).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| math::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Exhaustive search over all monotone layer maps; the reference for the
/// dynamic-programming solver. Feasible for a handful of layers only.
pub fn brute_force_monotone_best(s: &crate::layer_map::SimilarityMatrix) -> f64 {
    let m = s.draft_layers();
    let n = s.verifier_layers();
    let mut best = f64::NEG_INFINITY;
    let total = m.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut f = Vec::with_capacity(n);
        for _ in 0..n {
            f.push(c % m);
            c /= m;
        }
        if f.windows(2).any(|w| w[0] > w[1]) {
            continue;
        }
        let score: f64 = f.iter().enumerate().map(|(j, &i)| s.get(i, j)).sum();
        if score > best {
            best = score;
        }
    }
    best
}

fn ref_matvec(w: &crate::tensor::Tensor2D, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        for c in 0..x.len() {
            *o += row[c] * x[c];
        }
    }
    out
}

fn ref_rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let mut ss = 0.0;
    for &v in x {
        ss += v * v;
    }
    let rms = math::sqrt(ss / x.len() as f64 + 1e-5);
    (0..x.len()).map(|i| x[i] * gain[i] / rms).collect()
}

fn ref_rope(x: &mut [f64], pos: usize) {
    let d = x.len();
    let mut i = 0;
    while 2 * i + 1 < d {
        let freq = math::pow(10000.0, -((2 * i) as f64) / d as f64);
        let angle = pos as f64 * freq;
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * math::cos(angle) - b * math::sin(angle);
        x[2 * i + 1] = a * math::sin(angle) + b * math::cos(angle);
        i += 1;
    }
}

fn ref_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| math::exp(s - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Recomputes logits at every position of `tokens` from scratch: no cache,
/// causal attention materialized per position.
pub fn reference_full_forward(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let n = tokens.len();
    let dh = cfg.d_head;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| model.embedding.row(t as usize).to_vec())
        .collect();
    for layer in &model.layers {
        // Project and rotate queries/keys for the whole sequence.
        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for (pos, x) in xs.iter().enumerate() {
            let xn = ref_rmsnorm(x, layer.attn_norm.row(0));
            let mut q = ref_matvec(&layer.wq, &xn);
            let mut k = ref_matvec(&layer.wk, &xn);
            let v = ref_matvec(&layer.wv, &xn);
            for h in 0..cfg.n_heads {
                ref_rope(&mut q[h * dh..(h + 1) * dh], pos);
                ref_rope(&mut k[h * dh..(h + 1) * dh], pos);
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        // Causal attention per position, then the residual updates.
        for pos in 0..n {
            let mut attn_out = vec![0.0; cfg.d_model];
            for h in 0..cfg.n_heads {
                let qh = &qs[pos][h * dh..(h + 1) * dh];
                let mut scores = Vec::with_capacity(pos + 1);
                for j in 0..=pos {
                    let kh = &ks[j][h * dh..(h + 1) * dh];
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += qh[t] * kh[t];
                    }
                    scores.push(dot / math::sqrt(dh as f64));
                }
                let probs = ref_softmax(&scores);
                for (j, &p) in probs.iter().enumerate() {
                    let vh = &vs[j][h * dh..(h + 1) * dh];
                    for t in 0..dh {
                        attn_out[h * dh + t] += p * vh[t];
                    }
                }
            }
            let o = ref_matvec(&layer.wo, &attn_out);
            for (xi, oi) in xs[pos].iter_mut().zip(&o) {
                *xi += oi;
            }
            let xm = ref_rmsnorm(&xs[pos], layer.mlp_norm.row(0));
            let gate = ref_matvec(&layer.w_gate, &xm);
            let up = ref_matvec(&layer.w_up, &xm);
            let hidden: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(&g, &u)| g / (1.0 + math::exp(-g)) * u)
                .collect();
            let mlp = ref_matvec(&layer.w_down, &hidden);
            for (xi, mi) in xs[pos].iter_mut().zip(&mlp) {
                *xi += mi;
            }
        }
    }
    xs.iter()
        .map(|x| ref_matvec(&model.output, &ref_rmsnorm(x, model.final_norm.row(0))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KvCache, ModelConfig};

    #[test]
    fn incremental_decoding_matches_reference() {
        let model = Model::new(ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 12,
            d_head: 6,
            vocab: 32,
            max_seq: 16,
            seed: 77,
        })
        .unwrap();
        let tokens = [5_u32, 12, 0, 31, 7];
        let reference = reference_full_forward(&model, &tokens);
        let mut cache = KvCache::new(&model.config);
        let steps = model.prefill(&tokens, &mut cache).unwrap();
        for (step, want) in steps.iter().zip(&reference) {
            for (a, b) in step.logits.iter().zip(want) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_textual() {
        let a = synthetic_corpus(256, 9);
        let b = synthetic_corpus(256, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert!(a.iter().all(|&c| c == b' ' || c.is_ascii_lowercase()));
        assert_ne!(a, synthetic_corpus(256, 10));
    }

    #[test]
    fn distributions_normalize() {
        let mut rng = TestRng::new(4);
        for peak in [0.0, 1.0, 6.0] {
            let d = random_distribution(&mut rng, 50, peak);
            let sum: f64 = d.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|&x| x >= 0.0));
        }
    }
}
