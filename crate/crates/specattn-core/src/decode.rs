//! The draft/verify orchestration loop.
//!
//! Each round: the draft model proposes `gamma` greedy tokens while its
//! per-layer attention rows are captured, those rows become per-verifier-layer
//! sparse masks (via the layer mapping and top-p selection), the verifier
//! replays the proposals under the masks, and the longest agreeing prefix is
//! accepted plus one verifier token. Both caches are rolled back to the
//! accepted frontier and the final emitted token is fed to both models, so
//! every round ends with both caches holding exactly the emitted sequence and
//! a fresh next-token prediction carried into the next round.
//!
//! The carried prediction is also where each draft trace comes from: the
//! attention row stored for a proposal is the one computed by the forward
//! pass that produced it, captured before the proposal itself is appended.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::layer_map::LayerMapping;
use crate::model::{BoundSample, KvCache, Model, StepOptions, StepOutput};
use crate::select::{
    build_layer_masks, streaming_select, topk_select, CsrMask, SelectionConfig, TokenSet,
};
use crate::tensor::{AttnWeights, MaskVector};

/// Where verification masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// Top-p nucleus selection over mapped draft attention (the main path).
    DraftTopP,
    /// Sink-plus-recent-window baseline.
    Streaming { n_sink: usize, n_recent: usize },
    /// Fixed-budget top-k over mapped draft attention.
    TopK { budget: usize },
}

/// Configuration of one generation session.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecConfig {
    /// Speculative lookahead: draft proposals per round.
    pub gamma: usize,
    pub selection: SelectionConfig,
    /// New tokens to generate beyond the prompt.
    pub max_tokens: usize,
    pub eos_token: Option<u32>,
    /// Masked-softmax semantics inside the verifier.
    pub attention_mode: AttentionMode,
    pub mask_source: MaskSource,
    /// Record per-layer/head dense-vs-sparse error-bound samples (Eq2 mode).
    pub collect_bound_samples: bool,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig {
            gamma: 4,
            selection: SelectionConfig::default(),
            max_tokens: 64,
            eos_token: None,
            attention_mode: AttentionMode::Renormalized,
            mask_source: MaskSource::DraftTopP,
            collect_bound_samples: false,
        }
    }
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::InvalidArgument("gamma must be >= 1".into()));
        }
        self.selection.validate()
    }
}

/// Telemetry for one speculative round.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundRecord {
    pub draft_tokens: Vec<u32>,
    pub verifier_tokens: Vec<u32>,
    pub n_accepted: usize,
    /// Size of each verifier layer's shared token set for this round.
    pub per_layer_selected: Vec<usize>,
    pub cache_len_before: usize,
    pub cache_len_after: usize,
    /// KV entries actually read per verifier layer over the round's verifier
    /// forwards (verification steps plus the round-ending dense append).
    pub kv_attended: Vec<u64>,
    /// KV entries dense attention would have read for the same forwards.
    pub kv_dense: Vec<u64>,
}

/// Why a generation session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StopReason {
    MaxTokens,
    Eos,
    /// The next round would not fit in the shorter model context; the
    /// partial output is returned.
    ContextFull,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// Prompt plus generated tokens.
    pub tokens: Vec<u32>,
    pub rounds: Vec<RoundRecord>,
    pub bound_samples: Vec<BoundSample>,
    pub stop: StopReason,
}

fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Longest common prefix of draft proposals and verifier predictions.
pub fn check_acceptance(draft_tokens: &[u32], verifier_tokens: &[u32]) -> usize {
    draft_tokens
        .iter()
        .zip(verifier_tokens)
        .take_while(|(a, b)| a == b)
        .count()
}

/// Greedily proposes `gamma` tokens starting from the carried prediction.
///
/// `pending` is the draft's output for the current frontier; its attentions
/// become the trace for the first proposal. Returns the proposals and one
/// per-layer trace per speculative step; the cache gains `gamma` entries.
pub fn draft_phase(
    model: &Model,
    cache: &mut KvCache,
    pending: StepOutput,
    gamma: usize,
) -> Result<(Vec<u32>, Vec<Vec<AttnWeights>>)> {
    let mut tokens = Vec::with_capacity(gamma);
    let mut traces = Vec::with_capacity(gamma);
    let mut current = pending;
    for _ in 0..gamma {
        let token = argmax(&current.logits);
        tokens.push(token);
        traces.push(current.attentions);
        current = model.forward_step(token, cache)?;
    }
    Ok((tokens, traces))
}

/// Outcome of a verification pass.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    /// `gamma + 1` predictions: one per draft token plus the carried one.
    pub tokens: Vec<u32>,
    pub kv_attended: Vec<u64>,
    pub kv_dense: Vec<u64>,
    pub bound_samples: Vec<BoundSample>,
}

/// Replays the draft proposals through the verifier under per-layer masks.
///
/// `pending_logits` is the verifier's carried prediction for the current
/// frontier and supplies the first verdict; each proposal is then fed
/// sequentially (the cache gains `gamma` entries). At step `s` a layer's mask
/// is its shared token set plus the `s-1` proposals already fed, so causal
/// self-attention within the speculative block is always allowed.
pub fn verify_phase(
    model: &Model,
    cache: &mut KvCache,
    pending_logits: &[f64],
    draft_tokens: &[u32],
    layer_sets: &[TokenSet],
    mode: AttentionMode,
    audit_bounds: bool,
) -> Result<VerifyOutcome> {
    let n_layers = model.config.n_layers;
    if layer_sets.len() != n_layers {
        return Err(Error::ShapeMismatch(alloc::format!(
            "need one token set per verifier layer ({n_layers}), got {}",
            layer_sets.len()
        )));
    }
    let frontier = cache.len();
    for set in layer_sets {
        if set.universe() != frontier {
            return Err(Error::MaskLength {
                expected: frontier,
                got: set.universe(),
            });
        }
    }
    let mut tokens = Vec::with_capacity(draft_tokens.len() + 1);
    tokens.push(argmax(pending_logits));
    let mut kv_attended = vec![0_u64; n_layers];
    let mut kv_dense = vec![0_u64; n_layers];
    let mut bound_samples = Vec::new();
    for &token in draft_tokens {
        let cache_len = cache.len();
        let masks: Vec<MaskVector> = layer_sets
            .iter()
            .map(|set| {
                let mut mask = set.to_mask_of_len(cache_len);
                for p in frontier..cache_len {
                    mask.set(p, true);
                }
                mask
            })
            .collect();
        let out = model.forward_step_with(
            token,
            cache,
            &StepOptions {
                masks: Some(&masks),
                mode,
                capture_per_head: false,
                audit_bounds,
            },
        )?;
        for (l, mask) in masks.iter().enumerate() {
            kv_attended[l] += mask.count_selected() as u64 + 1;
            kv_dense[l] += cache_len as u64 + 1;
        }
        tokens.push(argmax(&out.logits));
        bound_samples.extend(out.bound_samples);
    }
    Ok(VerifyOutcome {
        tokens,
        kv_attended,
        kv_dense,
        bound_samples,
    })
}

/// Builds the round's per-layer token sets over `frontier` cached positions,
/// routed through the CSR encoding.
fn round_layer_sets(
    traces: &[Vec<AttnWeights>],
    mapping: &LayerMapping,
    cfg: &SpecConfig,
    frontier: usize,
) -> Result<Vec<TokenSet>> {
    let csr = match cfg.mask_source {
        MaskSource::DraftTopP => build_layer_masks(traces, mapping, &cfg.selection, frontier)?,
        MaskSource::Streaming { n_sink, n_recent } => {
            let rows: Vec<TokenSet> = (0..mapping.len())
                .map(|j| {
                    if j < cfg.selection.dense_prefix_layers {
                        TokenSet::full(frontier)
                    } else {
                        streaming_select(frontier, n_sink, n_recent)
                    }
                })
                .collect();
            CsrMask::from_token_rows(&rows)
        }
        MaskSource::TopK { budget } => {
            let mut rows = Vec::with_capacity(mapping.len());
            for (j, &draft_layer) in mapping.assignments().iter().enumerate() {
                if j < cfg.selection.dense_prefix_layers {
                    rows.push(TokenSet::full(frontier));
                    continue;
                }
                let row = traces[0][draft_layer].weights();
                let set = topk_select(row, budget.clamp(1, row.len()))?;
                rows.push(set.clip(frontier));
            }
            CsrMask::from_token_rows(&rows)
        }
    };
    (0..csr.n_rows())
        .map(|j| csr.row_token_set(j, frontier))
        .collect()
}

/// Full speculative generation per the round structure in the module docs.
///
/// With `p = 1` and a dense prefix covering every layer the output is
/// token-for-token identical to greedy decoding of the verifier alone.
pub fn generate(
    draft: &Model,
    verifier: &Model,
    mapping: &LayerMapping,
    prompt: &[u32],
    cfg: &SpecConfig,
) -> Result<GenerateOutput> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    cfg.validate()?;
    if draft.config.vocab != verifier.config.vocab {
        return Err(Error::InvalidArgument(
            "draft and verifier must share a vocabulary".into(),
        ));
    }
    mapping.validate_for(draft.config.n_layers, verifier.config.n_layers)?;
    let max_shared = draft.config.max_seq.min(verifier.config.max_seq);
    if prompt.len() > max_shared {
        return Err(Error::ContextOverflow);
    }

    let mut tokens = prompt.to_vec();
    let mut rounds = Vec::new();
    let mut all_samples = Vec::new();
    let goal = prompt.len() + cfg.max_tokens;
    if cfg.max_tokens == 0 {
        return Ok(GenerateOutput {
            tokens,
            rounds,
            bound_samples: all_samples,
            stop: StopReason::MaxTokens,
        });
    }

    let mut cache_d = KvCache::new(&draft.config);
    let mut cache_v = KvCache::new(&verifier.config);
    let mut pending_d = None;
    let mut pending_v = None;
    for &t in prompt {
        pending_d = Some(draft.forward_step(t, &mut cache_d)?);
        pending_v = Some(verifier.forward_step(t, &mut cache_v)?);
    }
    let mut pending_d = pending_d.expect("prompt is non-empty");
    let mut pending_v = pending_v.expect("prompt is non-empty");

    let mut stop = StopReason::MaxTokens;
    while tokens.len() < goal {
        let frontier = tokens.len();
        if frontier + cfg.gamma + 1 > max_shared {
            stop = StopReason::ContextFull;
            break;
        }

        let (draft_tokens, traces) = draft_phase(draft, &mut cache_d, pending_d, cfg.gamma)?;
        let layer_sets = round_layer_sets(&traces, mapping, cfg, frontier)?;
        let verdict = verify_phase(
            verifier,
            &mut cache_v,
            &pending_v.logits,
            &draft_tokens,
            &layer_sets,
            cfg.attention_mode,
            cfg.collect_bound_samples,
        )?;
        let n_accepted = check_acceptance(&draft_tokens, &verdict.tokens);

        // Accepted proposals plus the verifier's next token, trimmed to the
        // generation budget and to EOS.
        let mut emitted: Vec<u32> = draft_tokens[..n_accepted].to_vec();
        emitted.push(verdict.tokens[n_accepted]);
        emitted.truncate(goal - tokens.len());
        if let Some(eos) = cfg.eos_token {
            if let Some(pos) = emitted.iter().position(|&t| t == eos) {
                emitted.truncate(pos + 1);
                stop = StopReason::Eos;
            }
        }
        let kept = emitted.len() - 1;
        let last = emitted[kept];
        tokens.extend_from_slice(&emitted);

        // Both caches: back to the accepted frontier, then consume the final
        // emitted token densely so the next round starts with a carried
        // prediction and caches matching the emitted sequence.
        cache_d.rollback(frontier + kept)?;
        cache_v.rollback(frontier + kept)?;
        let append_len = cache_v.len();
        pending_d = draft.forward_step(last, &mut cache_d)?;
        pending_v = verifier.forward_step(last, &mut cache_v)?;

        let mut kv_attended = verdict.kv_attended;
        let mut kv_dense = verdict.kv_dense;
        for l in 0..kv_attended.len() {
            kv_attended[l] += append_len as u64 + 1;
            kv_dense[l] += append_len as u64 + 1;
        }
        rounds.push(RoundRecord {
            draft_tokens,
            verifier_tokens: verdict.tokens,
            n_accepted,
            per_layer_selected: layer_sets.iter().map(TokenSet::len).collect(),
            cache_len_before: frontier,
            cache_len_after: tokens.len(),
            kv_attended,
            kv_dense,
        });
        all_samples.extend(verdict.bound_samples);
        if stop == StopReason::Eos {
            break;
        }
    }
    Ok(GenerateOutput {
        tokens,
        rounds,
        bound_samples: all_samples,
        stop,
    })
}

/// Degradation hook: dual verification along the dense-verified path.
///
/// Runs the usual round loop but verifies every round twice from the same
/// state, once under the configured masks and once densely, and advances
/// along the dense verdicts. Returns the mean per-round edit distance
/// between the two verdict lists; 0 means masking never changed a verdict.
pub fn verification_drift(
    draft: &Model,
    verifier: &Model,
    mapping: &LayerMapping,
    prompt: &[u32],
    cfg: &SpecConfig,
    max_rounds: usize,
) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    cfg.validate()?;
    mapping.validate_for(draft.config.n_layers, verifier.config.n_layers)?;
    let max_shared = draft.config.max_seq.min(verifier.config.max_seq);

    let mut cache_d = KvCache::new(&draft.config);
    let mut cache_v = KvCache::new(&verifier.config);
    let mut pending_d = None;
    let mut pending_v = None;
    for &t in prompt {
        pending_d = Some(draft.forward_step(t, &mut cache_d)?);
        pending_v = Some(verifier.forward_step(t, &mut cache_v)?);
    }
    let mut pending_d = pending_d.expect("prompt is non-empty");
    let mut pending_v = pending_v.expect("prompt is non-empty");

    let mut frontier = prompt.len();
    let mut total_edit = 0_usize;
    let mut rounds = 0_usize;
    while rounds < max_rounds && frontier + cfg.gamma + 1 <= max_shared {
        let (draft_tokens, traces) = draft_phase(draft, &mut cache_d, pending_d, cfg.gamma)?;
        let layer_sets = round_layer_sets(&traces, mapping, cfg, frontier)?;
        let full_sets: Vec<TokenSet> = (0..verifier.config.n_layers)
            .map(|_| TokenSet::full(frontier))
            .collect();

        let mut sparse_cache = cache_v.clone();
        let sparse = verify_phase(
            verifier,
            &mut sparse_cache,
            &pending_v.logits,
            &draft_tokens,
            &layer_sets,
            cfg.attention_mode,
            false,
        )?;
        let dense = verify_phase(
            verifier,
            &mut cache_v,
            &pending_v.logits,
            &draft_tokens,
            &full_sets,
            cfg.attention_mode,
            false,
        )?;
        total_edit += crate::harness::edit_distance(&sparse.tokens, &dense.tokens);
        rounds += 1;

        // Advance both models along the densely verified path.
        let n_accepted = check_acceptance(&draft_tokens, &dense.tokens);
        let last = dense.tokens[n_accepted];
        cache_d.rollback(frontier + n_accepted)?;
        cache_v.rollback(frontier + n_accepted)?;
        pending_d = draft.forward_step(last, &mut cache_d)?;
        pending_v = verifier.forward_step(last, &mut cache_v)?;
        frontier += n_accepted + 1;
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument(
            "no verification rounds fit in the model context".into(),
        ));
    }
    Ok(total_edit as f64 / rounds as f64)
}

/// Plain greedy decoding of a single model; the dense baseline speculative
/// runs are checked against.
pub fn greedy_decode(
    model: &Model,
    prompt: &[u32],
    max_tokens: usize,
    eos_token: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let mut tokens = prompt.to_vec();
    if max_tokens == 0 {
        return Ok(tokens);
    }
    let mut cache = KvCache::new(&model.config);
    let mut pending = None;
    for &t in prompt {
        pending = Some(model.forward_step(t, &mut cache)?);
    }
    let mut pending = pending.expect("prompt is non-empty");
    let goal = prompt.len() + max_tokens;
    while tokens.len() < goal {
        let token = argmax(&pending.logits);
        tokens.push(token);
        if eos_token == Some(token) {
            break;
        }
        if tokens.len() == goal || cache.len() >= model.config.max_seq {
            break;
        }
        pending = model.forward_step(token, &mut cache)?;
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model_pair(seed: u64) -> (Model, Model) {
        let draft = Model::new(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            vocab: 256,
            max_seq: 128,
            seed,
        })
        .unwrap();
        let verifier = Model::new(ModelConfig {
            n_layers: 4,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            vocab: 256,
            max_seq: 128,
            seed,
        })
        .unwrap();
        (draft, verifier)
    }

    fn dense_cfg(gamma: usize, max_tokens: usize) -> SpecConfig {
        SpecConfig {
            gamma,
            max_tokens,
            selection: SelectionConfig {
                p: 1.0,
                dense_prefix_layers: usize::MAX,
                ..SelectionConfig::default()
            },
            ..SpecConfig::default()
        }
    }

    #[test]
    fn acceptance_counting() {
        assert_eq!(check_acceptance(&[1, 2, 3], &[1, 2, 3, 9]), 3);
        assert_eq!(check_acceptance(&[1, 2, 3], &[0, 2, 3, 9]), 0);
        assert_eq!(check_acceptance(&[1, 2, 3], &[1, 2, 9, 9]), 2);
    }

    #[test]
    fn lossless_with_dense_masks_matches_greedy() {
        let (draft, verifier) = model_pair(21);
        let mapping = crate::layer_map::LayerMapping::new(vec![0, 0, 1, 1], 0.0).unwrap();
        for (seed, prompt_len) in [(1_u64, 5), (2, 9), (3, 13)] {
            let mut rng = crate::testutil::TestRng::new(seed);
            let prompt: Vec<u32> = (0..prompt_len).map(|_| rng.below(256) as u32).collect();
            let spec = generate(&draft, &verifier, &mapping, &prompt, &dense_cfg(3, 24)).unwrap();
            let plain = greedy_decode(&verifier, &prompt, 24, None).unwrap();
            assert_eq!(spec.tokens, plain);
            assert_eq!(spec.tokens.len(), prompt.len() + 24);
        }
    }

    #[test]
    fn self_speculation_accepts_everything() {
        let (_, verifier) = model_pair(33);
        let mapping = crate::layer_map::LayerMapping::identity(4);
        let prompt = [10_u32, 20, 30];
        let out = generate(&verifier, &verifier, &mapping, &prompt, &dense_cfg(1, 12)).unwrap();
        assert_eq!(out.rounds.len(), 6, "each round emits gamma+1 = 2 tokens");
        for round in &out.rounds {
            assert_eq!(round.n_accepted, 1);
            assert_eq!(round.verifier_tokens[0], round.draft_tokens[0]);
            assert_eq!(round.cache_len_after, round.cache_len_before + 2);
        }
        let plain = greedy_decode(&verifier, &prompt, 12, None).unwrap();
        assert_eq!(out.tokens, plain);
    }

    #[test]
    fn zero_budget_returns_prompt() {
        let (draft, verifier) = model_pair(5);
        let mapping = crate::layer_map::LayerMapping::new(vec![0, 0, 1, 1], 0.0).unwrap();
        let prompt = [1_u32, 2, 3];
        let out = generate(&draft, &verifier, &mapping, &prompt, &dense_cfg(2, 0)).unwrap();
        assert_eq!(out.tokens, prompt);
        assert!(out.rounds.is_empty());
    }

    #[test]
    fn empty_prompt_rejected() {
        let (draft, verifier) = model_pair(5);
        let mapping = crate::layer_map::LayerMapping::new(vec![0, 0, 1, 1], 0.0).unwrap();
        assert_eq!(
            generate(&draft, &verifier, &mapping, &[], &dense_cfg(2, 4)).unwrap_err(),
            Error::Empty("prompt")
        );
    }

    #[test]
    fn sparse_run_invariants_and_determinism() {
        let (draft, verifier) = model_pair(8);
        let mapping = crate::layer_map::LayerMapping::new(vec![0, 0, 1, 1], 0.0).unwrap();
        let cfg = SpecConfig {
            gamma: 3,
            max_tokens: 20,
            selection: SelectionConfig {
                p: 0.9,
                dense_prefix_layers: 2,
                block_size: 4,
                ..SelectionConfig::default()
            },
            ..SpecConfig::default()
        };
        let prompt: Vec<u32> = crate::testutil::synthetic_corpus(12, 4)
            .iter()
            .map(|&b| b as u32)
            .collect();
        let a = generate(&draft, &verifier, &mapping, &prompt, &cfg).unwrap();
        let b = generate(&draft, &verifier, &mapping, &prompt, &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.tokens.len(), prompt.len() + 20);
        let mut expected_len = prompt.len();
        for round in &a.rounds {
            assert!(round.n_accepted <= cfg.gamma);
            assert_eq!(round.draft_tokens.len(), cfg.gamma);
            assert_eq!(round.verifier_tokens.len(), cfg.gamma + 1);
            assert_eq!(
                &round.verifier_tokens[..round.n_accepted],
                &round.draft_tokens[..round.n_accepted]
            );
            assert_eq!(round.cache_len_before, expected_len);
            expected_len = round.cache_len_after;
            // Dense prefix layers read everything; masked layers never more.
            for l in 0..4 {
                assert!(round.kv_attended[l] <= round.kv_dense[l]);
            }
            assert_eq!(round.kv_attended[0], round.kv_dense[0]);
            assert_eq!(round.kv_attended[1], round.kv_dense[1]);
        }
        assert_eq!(expected_len, a.tokens.len());
    }

    #[test]
    fn eos_truncates_mid_round() {
        let (draft, verifier) = model_pair(13);
        let mapping = crate::layer_map::LayerMapping::new(vec![0, 0, 1, 1], 0.0).unwrap();
        let prompt = [7_u32, 8, 9];
        let probe = generate(&draft, &verifier, &mapping, &prompt, &dense_cfg(2, 16)).unwrap();
        // Use an actually generated token as the EOS marker.
        let eos = probe.tokens[prompt.len() + 3];
        let cfg = SpecConfig {
            eos_token: Some(eos),
            ..dense_cfg(2, 16)
        };
        let out = generate(&draft, &verifier, &mapping, &prompt, &cfg).unwrap();
        assert_eq!(out.stop, StopReason::Eos);
        assert_eq!(*out.tokens.last().unwrap(), eos);
        assert!(out.tokens.len() <= probe.tokens.len());
        assert!(!out.tokens[prompt.len()..out.tokens.len() - 1].contains(&eos));
    }

    #[test]
    fn verify_phase_matches_hand_masked_forwards() {
        let (_, verifier) = model_pair(29);
        let mut cache = KvCache::new(&verifier.config);
        let prompt = [3_u32, 1, 4];
        let mut pending = None;
        for &t in &prompt {
            pending = Some(verifier.forward_step(t, &mut cache).unwrap());
        }
        let pending = pending.unwrap();
        let frontier = cache.len();
        let set = TokenSet::new(vec![0], frontier).unwrap();
        let sets = vec![set; 4];
        let draft_tokens = [11_u32, 12];

        let mut hand_cache = cache.clone();
        let outcome = verify_phase(
            &verifier,
            &mut cache,
            &pending.logits,
            &draft_tokens,
            &sets,
            AttentionMode::Renormalized,
            false,
        )
        .unwrap();

        // Hand-compose the same pass from raw masked forward steps.
        let mut expected = vec![argmax(&pending.logits)];
        for (s, &tok) in draft_tokens.iter().enumerate() {
            let len = frontier + s;
            let mut mask = MaskVector::empty(len);
            mask.set(0, true);
            for p in frontier..len {
                mask.set(p, true);
            }
            let masks = vec![mask; 4];
            let out = verifier
                .forward_step_with(
                    tok,
                    &mut hand_cache,
                    &StepOptions {
                        masks: Some(&masks),
                        mode: AttentionMode::Renormalized,
                        ..StepOptions::default()
                    },
                )
                .unwrap();
            expected.push(argmax(&out.logits));
        }
        assert_eq!(outcome.tokens, expected);
        assert_eq!(cache.len(), frontier + 2);
    }

    #[test]
    fn draft_phase_matches_plain_greedy() {
        let (draft, _) = model_pair(17);
        let prompt = [100_u32, 50, 25];
        let mut cache = KvCache::new(&draft.config);
        let mut pending = None;
        for &t in &prompt {
            pending = Some(draft.forward_step(t, &mut cache).unwrap());
        }
        let before = cache.len();
        let (tokens, traces) =
            draft_phase(&draft, &mut cache, pending.unwrap(), 4).unwrap();
        assert_eq!(cache.len(), before + 4);
        assert_eq!(traces.len(), 4);
        // Trace s covers the cache as it was when proposal s was predicted.
        for (s, step) in traces.iter().enumerate() {
            for row in step {
                assert_eq!(row.len(), before + s);
            }
        }
        let plain = greedy_decode(&draft, &prompt, 4, None).unwrap();
        assert_eq!(tokens, plain[prompt.len()..]);
    }
}
