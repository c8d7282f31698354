//! A small decoder-only byte-level transformer with per-layer attention
//! capture, rollback-able KV caches, and per-layer external attention masks.
//!
//! Pre-norm blocks with rotary position embeddings and a SwiGLU MLP. Weights
//! are generated deterministically per element from `(seed, tensor name,
//! row, col)`, so two models built from the same seed share values wherever
//! their tensor shapes overlap: a shallower, narrower model is a truncated
//! slice of the deeper one, which gives a draft/verifier pair correlated
//! attention without any training.
//!
//! The current token's own cache position is always attendable regardless of
//! any external mask; masks only restrict attention over pre-existing
//! positions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttentionMode};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{AttnWeights, MaskVector, Tensor2D};

const RMS_NORM_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10000.0;
/// Extra gain on the query/key projections; spreads attention logits enough
/// to produce distinctly peaked rows from untrained weights.
const ATTN_GAIN: f64 = 4.0;

/// Shape and seed of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidArgument("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::InvalidArgument(
                "n_heads and d_head must be >= 1".into(),
            ));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidArgument(format!(
                "d_model must equal n_heads * d_head: {} != {} * {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidArgument("vocab must be >= 2".into()));
        }
        if self.max_seq == 0 {
            return Err(Error::InvalidArgument("max_seq must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Canonical tensor list for a config: `(name, rows, cols)` in storage order.
pub fn tensor_manifest(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.d_model;
    let h = config.hidden_dim();
    let mut manifest = vec![("embedding".into(), config.vocab, d)];
    for l in 0..config.n_layers {
        manifest.push((format!("layers.{l}.attn_norm"), 1, d));
        manifest.push((format!("layers.{l}.wq"), d, d));
        manifest.push((format!("layers.{l}.wk"), d, d));
        manifest.push((format!("layers.{l}.wv"), d, d));
        manifest.push((format!("layers.{l}.wo"), d, d));
        manifest.push((format!("layers.{l}.mlp_norm"), 1, d));
        manifest.push((format!("layers.{l}.w_gate"), h, d));
        manifest.push((format!("layers.{l}.w_up"), h, d));
        manifest.push((format!("layers.{l}.w_down"), d, h));
    }
    manifest.push(("final_norm".into(), 1, d));
    manifest.push(("output".into(), config.vocab, d));
    manifest
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor2D,
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    pub mlp_norm: Tensor2D,
    pub w_gate: Tensor2D,
    pub w_up: Tensor2D,
    pub w_down: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: Tensor2D,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor2D,
    pub output: Tensor2D,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Uniform value in [0, 1) determined by `(seed, tag, row, col)` alone, so it
/// is independent of tensor shape.
fn cell_unit(seed: u64, tag: u64, r: usize, c: usize) -> f64 {
    let mut h = mix64(seed ^ GOLDEN);
    h = mix64(h ^ tag);
    h = mix64(h.wrapping_add(GOLDEN.wrapping_mul(r as u64 + 1)));
    h = mix64(h.wrapping_add(GOLDEN.wrapping_mul(c as u64 + 1)));
    (h >> 11) as f64 / 9_007_199_254_740_992.0
}

fn init_tensor(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor2D {
    if name.ends_with("_norm") {
        return Tensor2D::from_vec(rows, cols, vec![1.0; rows * cols])
            .expect("constant tensor is valid");
    }
    let gain = if name.ends_with("wq") || name.ends_with("wk") {
        ATTN_GAIN
    } else {
        1.0
    };
    let scale = gain / math::sqrt(cols as f64);
    let tag = fnv1a(name.as_bytes());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(scale * (2.0 * cell_unit(seed, tag, r, c) - 1.0));
        }
    }
    Tensor2D::from_vec(rows, cols, data).expect("generated tensor is valid")
}

impl Model {
    /// Deterministically initializes a model from its config: the same
    /// `(config, seed)` always yields bit-identical weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, rows, cols) in tensor_manifest(&config) {
            let t = init_tensor(config.seed, &name, rows, cols);
            tensors.insert(name, t);
        }
        Model::from_named_tensors(config, tensors)
    }

    /// Assembles a model from named tensors, checking the set of names and
    /// every shape against the config's manifest.
    pub fn from_named_tensors(
        config: ModelConfig,
        mut tensors: BTreeMap<String, Tensor2D>,
    ) -> Result<Self> {
        config.validate()?;
        let manifest = tensor_manifest(&config);
        if tensors.len() != manifest.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Tensor2D> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
            if t.rows() != rows || t.cols() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} must be {rows}x{cols}, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            Ok(t)
        };
        let d = config.d_model;
        let h = config.hidden_dim();
        let embedding = take("embedding", config.vocab, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: take(&format!("layers.{l}.attn_norm"), 1, d)?,
                wq: take(&format!("layers.{l}.wq"), d, d)?,
                wk: take(&format!("layers.{l}.wk"), d, d)?,
                wv: take(&format!("layers.{l}.wv"), d, d)?,
                wo: take(&format!("layers.{l}.wo"), d, d)?,
                mlp_norm: take(&format!("layers.{l}.mlp_norm"), 1, d)?,
                w_gate: take(&format!("layers.{l}.w_gate"), h, d)?,
                w_up: take(&format!("layers.{l}.w_up"), h, d)?,
                w_down: take(&format!("layers.{l}.w_down"), d, h)?,
            });
        }
        let final_norm = take("final_norm", 1, d)?;
        let output = take("output", config.vocab, d)?;
        Ok(Model {
            config,
            embedding,
            layers,
            final_norm,
            output,
        })
    }

    /// Tensors in manifest order, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut out: Vec<(String, &Tensor2D)> = vec![("embedding".into(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.wq"), &layer.wq));
            out.push((format!("layers.{l}.wk"), &layer.wk));
            out.push((format!("layers.{l}.wv"), &layer.wv));
            out.push((format!("layers.{l}.wo"), &layer.wo));
            out.push((format!("layers.{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layers.{l}.w_gate"), &layer.w_gate));
            out.push((format!("layers.{l}.w_up"), &layer.w_up));
            out.push((format!("layers.{l}.w_down"), &layer.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("output".into(), &self.output));
        out
    }

    /// Order-sensitive hash of config and weight bits; equal iff the models
    /// are bit-identical.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325_u64;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x1000_0000_01b3);
            }
        };
        let c = &self.config;
        for x in [
            c.n_layers as u64,
            c.n_heads as u64,
            c.d_model as u64,
            c.d_head as u64,
            c.vocab as u64,
            c.max_seq as u64,
            c.seed,
        ] {
            feed(x);
        }
        for (_, t) in self.named_tensors() {
            for &x in t.data() {
                feed(x.to_bits());
            }
        }
        hash
    }
}

/// Per-layer, per-head append-only key/value history.
#[derive(Debug, Clone)]
pub struct KvCache {
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let slots = config.n_layers * config.n_heads;
        KvCache {
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            d_head: config.d_head,
            len: 0,
            keys: vec![Vec::new(); slots],
            values: vec![Vec::new(); slots],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Truncates every layer and head to `new_len` positions; subsequent
    /// steps behave as if the dropped entries never existed.
    pub fn rollback(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.len {
            return Err(Error::InvalidArgument(format!(
                "cannot roll back to {new_len}, cache holds {}",
                self.len
            )));
        }
        for k in self.keys.iter_mut() {
            k.truncate(new_len * self.d_head);
        }
        for v in self.values.iter_mut() {
            v.truncate(new_len * self.d_head);
        }
        self.len = new_len;
        Ok(())
    }

    fn slot(&self, layer: usize, head: usize) -> usize {
        layer * self.n_heads + head
    }

    pub(crate) fn keys(&self, layer: usize, head: usize) -> &[f64] {
        &self.keys[self.slot(layer, head)]
    }

    pub(crate) fn values(&self, layer: usize, head: usize) -> &[f64] {
        &self.values[self.slot(layer, head)]
    }

    fn append(&mut self, layer: usize, head: usize, k: &[f64], v: &[f64]) {
        debug_assert_eq!(k.len(), self.d_head);
        let slot = self.slot(layer, head);
        debug_assert_eq!(self.keys[slot].len(), self.len * self.d_head);
        self.keys[slot].extend_from_slice(k);
        self.values[slot].extend_from_slice(v);
    }

    fn commit(&mut self) {
        self.len += 1;
    }
}

/// Dense-vs-masked attention discrepancy for one layer/head at one step,
/// together with the mass-based bound it must respect.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundSample {
    pub layer: usize,
    pub head: usize,
    pub diff_norm2: f64,
    pub bound: f64,
}

/// Everything captured from one decoding step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Next-token logits over the vocabulary.
    pub logits: Vec<f64>,
    /// Head-averaged attention per layer, over the cache including the
    /// just-appended position.
    pub attentions: Vec<AttnWeights>,
    /// Per-layer, per-head rows when requested.
    pub per_head: Option<Vec<Vec<AttnWeights>>>,
    /// Error-bound audit samples; populated only for masked layers under
    /// [`AttentionMode::Eq2`] with auditing enabled.
    pub bound_samples: Vec<BoundSample>,
}

impl StepOutput {
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &x) in self.logits.iter().enumerate() {
            if x > self.logits[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Options for a single forward step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOptions<'a> {
    /// One mask per layer over the cache as it exists BEFORE this step's
    /// append; the new position is always attendable.
    pub masks: Option<&'a [MaskVector]>,
    /// How masked layers treat the softmax (ignored without masks).
    pub mode: AttentionMode,
    /// Retain per-head attention rows in the output.
    pub capture_per_head: bool,
    /// In `Eq2` mode, also compute dense outputs per masked layer/head and
    /// record the discrepancy against [`crate::attention::masked_error_bound`]
    /// semantics.
    pub audit_bounds: bool,
}

fn matvec(w: &Tensor2D, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols(), x.len());
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ss: f64 = x.iter().map(|v| v * v).sum();
    let rms = math::sqrt(ss / x.len() as f64 + RMS_NORM_EPS);
    x.iter().zip(gain).map(|(v, g)| v * g / rms).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + math::exp(-x))
}

/// In-place rotary embedding over consecutive dimension pairs.
fn rope_rotate(x: &mut [f64], pos: usize) {
    let d = x.len();
    for i in 0..d / 2 {
        let freq = math::pow(ROPE_BASE, -((2 * i) as f64) / d as f64);
        let angle = pos as f64 * freq;
        let (sin, cos) = (math::sin(angle), math::cos(angle));
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
}

impl Model {
    /// Unmasked forward step; see [`Model::forward_step_with`].
    pub fn forward_step(&self, token: u32, cache: &mut KvCache) -> Result<StepOutput> {
        self.forward_step_with(token, cache, &StepOptions::default())
    }

    /// Feeds one token: appends its keys/values to every layer's cache and
    /// returns next-token logits plus the attention rows actually used.
    ///
    /// All validation happens before the cache is touched, so an `Err` leaves
    /// the cache unchanged.
    pub fn forward_step_with(
        &self,
        token: u32,
        cache: &mut KvCache,
        opts: &StepOptions,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        if token as usize >= cfg.vocab {
            return Err(Error::InvalidArgument(format!(
                "token {token} outside vocabulary of size {}",
                cfg.vocab
            )));
        }
        let pos = cache.len();
        if pos >= cfg.max_seq {
            return Err(Error::ContextOverflow);
        }
        if cache.n_layers != cfg.n_layers || cache.n_heads != cfg.n_heads || cache.d_head != cfg.d_head
        {
            return Err(Error::ShapeMismatch(
                "cache was created for a different model shape".into(),
            ));
        }
        if let Some(masks) = opts.masks {
            if masks.len() != cfg.n_layers {
                return Err(Error::ShapeMismatch(format!(
                    "need one mask per layer ({}), got {}",
                    cfg.n_layers,
                    masks.len()
                )));
            }
            for mask in masks {
                if mask.len() != pos {
                    return Err(Error::MaskLength {
                        expected: pos,
                        got: mask.len(),
                    });
                }
            }
        }

        let new_len = pos + 1;
        let dh = cfg.d_head;
        let mut x: Vec<f64> = self.embedding.row(token as usize).to_vec();
        let mut attentions = Vec::with_capacity(cfg.n_layers);
        let mut per_head_all = opts.capture_per_head.then(Vec::new);
        let mut bound_samples = Vec::new();

        for (l, layer) in self.layers.iter().enumerate() {
            let xn = rmsnorm(&x, layer.attn_norm.row(0));
            let q = matvec(&layer.wq, &xn);
            let k = matvec(&layer.wk, &xn);
            let v = matvec(&layer.wv, &xn);

            // The just-appended position is attendable regardless of the mask.
            let eff_mask = opts.masks.map(|masks| {
                let mut eff = MaskVector::empty(new_len);
                for i in 0..pos {
                    if masks[l].is_selected(i) {
                        eff.set(i, true);
                    }
                }
                eff.set(pos, true);
                eff
            });

            let mut attn_out = vec![0.0; cfg.d_model];
            let mut head_rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let mut qh = q[h * dh..(h + 1) * dh].to_vec();
                let mut kh = k[h * dh..(h + 1) * dh].to_vec();
                rope_rotate(&mut qh, pos);
                rope_rotate(&mut kh, pos);
                cache.append(l, h, &kh, &v[h * dh..(h + 1) * dh]);

                let keys = cache.keys(l, h);
                let vals = cache.values(l, h);
                let scores = attention::scaled_scores_flat(&qh, keys, new_len);
                let (captured, out_h) = match (&eff_mask, opts.mode) {
                    (None, _) => {
                        let probs = attention::masked_softmax(&scores, None)
                            .expect("finite non-empty scores");
                        let out = attention::blend_rows_flat(&probs, vals, dh, None);
                        (probs, out)
                    }
                    (Some(mask), AttentionMode::Eq2) => {
                        let probs = attention::masked_softmax(&scores, None)
                            .expect("finite non-empty scores");
                        let out = attention::blend_rows_flat(&probs, vals, dh, Some(mask));
                        if opts.audit_bounds {
                            let dense_out = attention::blend_rows_flat(&probs, vals, dh, None);
                            let mut bound = 0.0;
                            for (i, &p) in probs.iter().enumerate() {
                                if !mask.is_selected(i) {
                                    let row = &vals[i * dh..(i + 1) * dh];
                                    bound += p * math::sqrt(row.iter().map(|x| x * x).sum());
                                }
                            }
                            let diff_norm2 = math::sqrt(
                                dense_out
                                    .iter()
                                    .zip(&out)
                                    .map(|(a, b)| (a - b) * (a - b))
                                    .sum(),
                            );
                            bound_samples.push(BoundSample {
                                layer: l,
                                head: h,
                                diff_norm2,
                                bound,
                            });
                        }
                        (probs, out)
                    }
                    (Some(mask), AttentionMode::Renormalized) => {
                        let probs = attention::masked_softmax(&scores, Some(mask))
                            .expect("self position keeps the support non-empty");
                        let out = attention::blend_rows_flat(&probs, vals, dh, Some(mask));
                        (probs, out)
                    }
                };
                attn_out[h * dh..(h + 1) * dh].copy_from_slice(&out_h);
                head_rows.push(captured);
            }

            let mut avg = vec![0.0; new_len];
            for row in &head_rows {
                for (a, p) in avg.iter_mut().zip(row) {
                    *a += p;
                }
            }
            for a in avg.iter_mut() {
                *a /= cfg.n_heads as f64;
            }
            attentions.push(AttnWeights::new(avg).expect("head average is a distribution"));
            if let Some(per_head) = per_head_all.as_mut() {
                let rows = head_rows
                    .into_iter()
                    .map(|r| AttnWeights::new(r).expect("head row is a distribution"))
                    .collect();
                per_head.push(rows);
            }

            let o = matvec(&layer.wo, &attn_out);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let xm = rmsnorm(&x, layer.mlp_norm.row(0));
            let gate = matvec(&layer.w_gate, &xm);
            let up = matvec(&layer.w_up, &xm);
            let hidden: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let mlp = matvec(&layer.w_down, &hidden);
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += mi;
            }
        }
        cache.commit();

        let xf = rmsnorm(&x, self.final_norm.row(0));
        let logits = matvec(&self.output, &xf);
        Ok(StepOutput {
            logits,
            attentions,
            per_head: per_head_all,
            bound_samples,
        })
    }

    /// Feeds a token sequence step by step, returning every step's output
    /// (attention traces included) for calibration-style consumers.
    pub fn prefill(&self, tokens: &[u32], cache: &mut KvCache) -> Result<Vec<StepOutput>> {
        if tokens.is_empty() {
            return Err(Error::Empty("tokens"));
        }
        tokens
            .iter()
            .map(|&t| self.forward_step(t, cache))
            .collect()
    }
}
