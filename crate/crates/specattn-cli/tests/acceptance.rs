//! Acceptance suite: every release gate as one test, each printing a
//! PASS line with the measured values (run with `--nocapture` to see them).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::json;
use specattn_core::attention::AttentionMode;
use specattn_core::decode::{generate, greedy_decode, MaskSource, SpecConfig};
use specattn_core::harness::{bound_audit, perplexity, EvalMasks};
use specattn_core::layer_map::{calibrate, monotonic_dtw, CalibrationConfig, LayerMapping, SimilarityMatrix};
use specattn_core::model::{KvCache, Model, ModelConfig};
use specattn_core::select::{
    nucleus_select_oracle, nucleus_select_sortfree, CsrMask, SelectionConfig,
};
use specattn_core::tensor::{MaskVector, Tensor2D};
use specattn_core::testutil::{
    brute_force_monotone_best, random_distribution, reference_full_forward, synthetic_corpus,
    TestRng,
};

fn draft_config(seed: u64, max_seq: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        vocab: 256,
        max_seq,
        seed,
    }
}

fn verifier_config(seed: u64, max_seq: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        vocab: 256,
        max_seq,
        seed,
    }
}

/// 1. Sorting-free nucleus selection against the tie-closed sorting oracle:
/// exact agreement at 60 iterations, mass guarantee at 10.
#[test]
fn criterion_1_nucleus_oracle_equivalence() {
    let mut rng = TestRng::new(0xC1);
    let trials = 1200;
    for trial in 0..trials {
        let len = match trial % 3 {
            0 => 1 + rng.below(64),
            1 => 64 + rng.below(960),
            _ => 1024 + rng.below(3072),
        };
        let peakedness = [0.0, 0.5, 2.0, 6.0][rng.below(4)];
        let weights = random_distribution(&mut rng, len, peakedness);
        let p = if trial % 20 == 0 {
            1.0
        } else {
            0.001 + 0.999 * rng.next_f64()
        };

        let (exact, _) = nucleus_select_sortfree(&weights, p, 60).unwrap();
        let oracle = nucleus_select_oracle(&weights, p).unwrap();
        assert_eq!(
            exact.indices(),
            oracle.indices(),
            "trial {trial}: len {len} p {p} peakedness {peakedness}"
        );

        let (coarse, _) = nucleus_select_sortfree(&weights, p, 10).unwrap();
        let total: f64 = weights.iter().sum();
        let mass: f64 = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| coarse.contains(*i))
            .map(|(_, &w)| w)
            .sum();
        assert!(
            mass >= p * total,
            "trial {trial}: retained {mass} < target {}",
            p * total
        );
    }
    println!("criterion 1 PASS: {trials} trials, 60-iteration selection == oracle, 10-iteration mass guarantee held");
}

/// 2. The monotone DTW solver matches brute-force enumeration and always
/// returns a monotone mapping.
#[test]
fn criterion_2_dtw_optimality() {
    let mut rng = TestRng::new(0xC2);
    let trials = 500;
    for trial in 0..trials {
        let m = 1 + rng.below(5);
        let n = 1 + rng.below(6);
        let data: Vec<f64> = (0..m * n).map(|_| -8.0 * rng.next_f64()).collect();
        let matrix = SimilarityMatrix::new(Tensor2D::from_vec(m, n, data).unwrap()).unwrap();
        let mapping = monotonic_dtw(&matrix).unwrap();
        assert!(
            mapping.assignments().windows(2).all(|w| w[0] <= w[1]),
            "trial {trial}: non-monotone {:?}",
            mapping.assignments()
        );
        let best = brute_force_monotone_best(&matrix);
        assert!(
            (mapping.total_score() - best).abs() < 1e-9,
            "trial {trial}: dtw {} vs enumeration {best}",
            mapping.total_score()
        );
    }
    println!("criterion 2 PASS: {trials} random matrices, DTW score == enumeration optimum, all mappings monotone");
}

/// 3. Lossless speculation: p = 1 with a dense prefix covering every layer
/// reproduces verifier-only greedy decoding token for token.
#[test]
fn criterion_3_losslessness_at_p1_dense() {
    let draft = Model::new(draft_config(3, 256)).unwrap();
    let verifier = Model::new(verifier_config(3, 256)).unwrap();
    let mapping = LayerMapping::new(vec![0, 0, 1, 1, 2, 2, 3, 3], 0.0).unwrap();
    let cfg = SpecConfig {
        gamma: 4,
        max_tokens: 24,
        selection: SelectionConfig {
            p: 1.0,
            dense_prefix_layers: usize::MAX,
            ..SelectionConfig::default()
        },
        ..SpecConfig::default()
    };
    let mut rng = TestRng::new(0xC3);
    let prompts = 100;
    for trial in 0..prompts {
        let len = 4 + rng.below(20);
        let prompt: Vec<u32> = (0..len).map(|_| rng.below(256) as u32).collect();
        let spec = generate(&draft, &verifier, &mapping, &prompt, &cfg).unwrap();
        let plain = greedy_decode(&verifier, &prompt, cfg.max_tokens, None).unwrap();
        assert_eq!(spec.tokens, plain, "trial {trial} diverged");
    }
    println!("criterion 3 PASS: {prompts} random prompts, speculative output == verifier greedy output");
}

/// 4. Error-bound audit: a 500-token Eq2-mode generation at p in
/// {0.8, 0.9, 0.95} produces zero violations of the dropped-mass bound.
#[test]
fn criterion_4_error_bound_audit() {
    let draft = Model::new(draft_config(5, 640)).unwrap();
    let verifier = Model::new(verifier_config(5, 640)).unwrap();
    let mapping = LayerMapping::new(vec![0, 0, 1, 1, 2, 2, 3, 3], 0.0).unwrap();
    let prompt: Vec<u32> = synthetic_corpus(64, 0xC4)
        .iter()
        .map(|&b| b as u32)
        .collect();
    let mut total_samples = 0;
    for p in [0.8, 0.9, 0.95] {
        let cfg = SpecConfig {
            gamma: 4,
            max_tokens: 500,
            selection: SelectionConfig {
                p,
                dense_prefix_layers: 2,
                ..SelectionConfig::default()
            },
            attention_mode: AttentionMode::Eq2,
            collect_bound_samples: true,
            ..SpecConfig::default()
        };
        let out = generate(&draft, &verifier, &mapping, &prompt, &cfg).unwrap();
        assert_eq!(out.tokens.len(), prompt.len() + 500);
        assert!(
            out.bound_samples.len() > 500,
            "p {p}: expected many layer-step samples, got {}",
            out.bound_samples.len()
        );
        let violations = bound_audit(&out.bound_samples);
        assert_eq!(violations, 0, "p {p}: {violations} bound violations");
        total_samples += out.bound_samples.len();
    }
    println!("criterion 4 PASS: 0 violations across {total_samples} dense-vs-masked layer/head samples");
}

/// 5. Trend reproduction on a fixed 4096-byte corpus: raising p lowers the
/// perplexity penalty and lowers the KV reduction.
#[test]
fn criterion_5_trend_reproduction() {
    let corpus = synthetic_corpus(4096, 0xC5);
    let draft = Model::new(draft_config(7, 4200)).unwrap();
    let verifier = Model::new(verifier_config(7, 4200)).unwrap();
    let mapping = calibrate(
        &draft,
        &verifier,
        &corpus[..1024],
        &CalibrationConfig {
            max_positions: Some(128),
            ..CalibrationConfig::default()
        },
    )
    .unwrap();

    let full = perplexity(
        &verifier,
        &corpus,
        0.1,
        AttentionMode::Renormalized,
        &EvalMasks::Full,
    )
    .unwrap();
    let run = |p: f64| {
        let selection = SelectionConfig {
            p,
            block_size: 16,
            dense_prefix_layers: 2,
            ..SelectionConfig::default()
        };
        perplexity(
            &verifier,
            &corpus,
            0.1,
            AttentionMode::Renormalized,
            &EvalMasks::DraftTopP {
                draft: &draft,
                mapping: &mapping,
                selection,
            },
        )
        .unwrap()
    };
    let low = run(0.8);
    let high = run(0.99);
    let delta_low = low.perplexity - full.perplexity;
    let delta_high = high.perplexity - full.perplexity;
    println!(
        "criterion 5: dense ppl {:.3}; p=0.80 delta {delta_low:+.4} at {:.2}% reduction; \
         p=0.99 delta {delta_high:+.4} at {:.2}% reduction",
        full.perplexity, low.kv_reduction_pct, high.kv_reduction_pct
    );
    assert!(
        delta_high <= delta_low,
        "perplexity penalty must not grow as p rises: {delta_high} vs {delta_low}"
    );
    assert!(
        low.kv_reduction_pct >= high.kv_reduction_pct,
        "kv reduction must not grow as p rises: {} vs {}",
        low.kv_reduction_pct,
        high.kv_reduction_pct
    );
    println!("criterion 5 PASS: higher p gives lower perplexity penalty and lower KV reduction");
}

/// 6. Incremental KV-cached decoding equals full-sequence recomputation
/// within 1e-8 per logit at every position.
#[test]
fn criterion_6_incremental_vs_recompute() {
    let mut rng = TestRng::new(0xC6);
    let sequences = 50;
    for trial in 0..sequences {
        let config = ModelConfig {
            n_layers: 1 + rng.below(4),
            n_heads: 1 + rng.below(3),
            d_model: 0,
            d_head: 4 + 2 * rng.below(5),
            vocab: 64,
            max_seq: 32,
            seed: 0x600D + trial as u64,
        };
        let config = ModelConfig {
            d_model: config.n_heads * config.d_head,
            ..config
        };
        let model = Model::new(config).unwrap();
        let len = 3 + rng.below(22);
        let tokens: Vec<u32> = (0..len).map(|_| rng.below(64) as u32).collect();
        let reference = reference_full_forward(&model, &tokens);
        let mut cache = KvCache::new(&model.config);
        let steps = model.prefill(&tokens, &mut cache).unwrap();
        for (pos, (step, want)) in steps.iter().zip(&reference).enumerate() {
            for (a, b) in step.logits.iter().zip(want) {
                assert!(
                    (a - b).abs() < 1e-8,
                    "trial {trial} position {pos}: {a} vs {b}"
                );
            }
        }
    }
    println!("criterion 6 PASS: {sequences} random sequences, cached decoding == recomputation within 1e-8");
}

/// 7. CSR masks round-trip losslessly and full masks leave the forward pass
/// bit-identical end to end.
#[test]
fn criterion_7_csr_roundtrip_and_full_mask_plumbing() {
    let mut rng = TestRng::new(0xC7);
    let trials = 1000;
    for trial in 0..trials {
        let rows = 1 + rng.below(8);
        let cols = 1 + rng.below(48);
        let masks: Vec<MaskVector> = (0..rows)
            .map(|_| MaskVector::new((0..cols).map(|_| rng.next_f64() < 0.4).collect()))
            .collect();
        let csr = CsrMask::from_mask_rows(&masks);
        let back = csr.to_mask_rows(cols).unwrap();
        assert_eq!(back, masks, "trial {trial}");
        // Re-encoding the decoded rows is stable too.
        assert_eq!(CsrMask::from_mask_rows(&back), csr);
    }

    let model = Model::new(verifier_config(9, 64)).unwrap();
    let tokens: Vec<u32> = synthetic_corpus(40, 0xC7).iter().map(|&b| b as u32).collect();
    let mut plain_cache = KvCache::new(&model.config);
    let mut eq2_cache = KvCache::new(&model.config);
    let mut renorm_cache = KvCache::new(&model.config);
    for (pos, &token) in tokens.iter().enumerate() {
        let plain = model.forward_step(token, &mut plain_cache).unwrap();
        let full_rows = vec![MaskVector::full(pos); model.config.n_layers];
        let opts = |mode| specattn_core::model::StepOptions {
            masks: Some(&full_rows),
            mode,
            ..Default::default()
        };
        let eq2 = model
            .forward_step_with(token, &mut eq2_cache, &opts(AttentionMode::Eq2))
            .unwrap();
        let renorm = model
            .forward_step_with(token, &mut renorm_cache, &opts(AttentionMode::Renormalized))
            .unwrap();
        assert_eq!(plain.logits, eq2.logits, "position {pos}");
        assert_eq!(plain.logits, renorm.logits, "position {pos}");
    }
    println!("criterion 7 PASS: {trials} CSR round-trips lossless, full masks bit-identical to dense in both modes");
}

// --- criterion 8: CLI determinism -----------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_specattn")
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(0),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn write_determinism_setup(dir: &Path) -> PathBuf {
    fs::write(
        dir.join("corpus.bin"),
        synthetic_corpus(600, 0xC8),
    )
    .unwrap();
    fs::write(dir.join("prompt.txt"), b"the cache keeps a key and a value").unwrap();
    let config = json!({
        "draft": {
            "n_layers": 2, "n_heads": 2, "d_model": 16, "d_head": 8,
            "vocab": 256, "max_seq": 768, "seed": 21
        },
        "verifier": {
            "n_layers": 4, "n_heads": 2, "d_model": 32, "d_head": 16,
            "vocab": 256, "max_seq": 768, "seed": 21
        },
        "corpus": "corpus.bin",
        "out_dir": "out",
        "spec": { "gamma": 3, "max_tokens": 24, "eos_token": null, "attention_mode": "renormalized" },
        "selection": { "p": 0.9, "iterations": 10, "block_size": 4, "dense_prefix_layers": 1 },
        "calibration": { "epsilon": 1e-10, "warmup": 4, "max_positions": 64 },
        "baselines": { "n_sink": 2, "n_recent": 8, "topk_budget": 8 },
        "bench": { "p_values": [0.9], "prefill_fraction": 0.1, "gen_tokens": 8 },
        "oracle": { "trials": 50, "seed": 5 }
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

/// 8. Every command rerun from the same config produces byte-identical
/// primary outputs.
#[test]
fn criterion_8_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_determinism_setup(dir.path());
    let config_str = config.to_str().unwrap();
    let prompt = dir.path().join("prompt.txt");
    let prompt_str = prompt.to_str().unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let mut compared = 0;
    for (out_dir, tag) in [(&out_a, "a"), (&out_b, "b")] {
        let dir_str = out_dir.to_str().unwrap();
        run_ok(&["calibrate", "--config", config_str, "--out-dir", dir_str]);
        run_ok(&[
            "generate", "--config", config_str, "--out-dir", dir_str, "--prompt", prompt_str,
        ]);
        run_ok(&["bench", "--config", config_str, "--out-dir", dir_str]);
        let _ = tag;
    }
    let stdout_a = run_ok(&["oracle-check", "--config", config_str]);
    let stdout_b = run_ok(&["oracle-check", "--config", config_str]);
    assert_eq!(stdout_a, stdout_b);

    for name in [
        "mapping.json",
        "simmatrix.csv",
        "output.bin",
        "rounds.jsonl",
        "report.csv",
        "report.json",
        "ppl_trace.csv",
    ] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
        compared += 1;
    }
    println!("criterion 8 PASS: {compared} output files byte-identical across reruns");
}
