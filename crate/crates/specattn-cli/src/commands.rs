//! Command implementations behind the `specattn` binary. Each command is
//! reproducible from its config alone: outputs embed the config fingerprint
//! and contain nothing time- or machine-dependent.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use log::info;
use specattn_core::decode::{self, MaskSource, SpecConfig};
use specattn_core::harness::{self, CompareConfig};
use specattn_core::layer_map::{calibrate_matrix, monotonic_dtw, SimilarityMatrix};
use specattn_core::select::{nucleus_select_oracle, nucleus_select_sortfree};
use specattn_core::tensor::Tensor2D;
use specattn_core::testutil::{brute_force_monotone_best, random_distribution, TestRng};

use crate::config::RunConfig;
use crate::{reports, usage_error};

/// Generation mask mode, as selected by `--mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    SpecAttn,
    DenseOnly,
    Streaming,
    TopK,
}

impl GenerationMode {
    pub fn tag(&self) -> &'static str {
        match self {
            GenerationMode::SpecAttn => "specattn",
            GenerationMode::DenseOnly => "dense-only",
            GenerationMode::Streaming => "streaming",
            GenerationMode::TopK => "topk",
        }
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// Calibrates the layer mapping on the configured corpus and writes
/// `mapping.json` plus the similarity-matrix heatmap data `simmatrix.csv`.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    let (draft, verifier) = cfg.build_models()?;
    let corpus = cfg.read_corpus()?;
    ensure_out_dir(cfg)?;
    info!(
        "calibrating {}-layer draft vs {}-layer verifier on {} bytes",
        draft.config.n_layers,
        verifier.config.n_layers,
        corpus.len()
    );
    let matrix = calibrate_matrix(&draft, &verifier, &corpus, &cfg.calibration)
        .map_err(|e| usage_error(format!("calibration failed: {e}")))?;
    let mapping = monotonic_dtw(&matrix)?;
    reports::write_mapping(
        &out_path(cfg, "mapping.json"),
        &mapping,
        draft.config.n_layers,
        &cfg.mapping_fingerprint(),
    )?;
    reports::write_similarity_csv(&out_path(cfg, "simmatrix.csv"), &matrix)?;
    println!(
        "calibrate: mapping {:?} (total score {:.6}) -> {}",
        mapping.assignments(),
        mapping.total_score(),
        out_path(cfg, "mapping.json").display()
    );
    Ok(())
}

/// Generates a continuation of the prompt file and writes `output.bin` (full
/// byte sequence) plus `rounds.jsonl` telemetry.
pub fn cmd_generate(cfg: &RunConfig, prompt_path: &std::path::Path, mode: GenerationMode) -> Result<()> {
    let prompt_bytes = fs::read(prompt_path)
        .map_err(|e| usage_error(format!("cannot read prompt {}: {e}", prompt_path.display())))?;
    if prompt_bytes.is_empty() {
        return Err(usage_error("empty prompt"));
    }
    let (draft, verifier) = cfg.build_models()?;
    ensure_out_dir(cfg)?;
    let prompt: Vec<u32> = prompt_bytes.iter().map(|&b| b as u32).collect();
    let fingerprint = cfg.fingerprint();

    let (tokens, rounds) = match mode {
        GenerationMode::DenseOnly => {
            let tokens = decode::greedy_decode(
                &verifier,
                &prompt,
                cfg.spec.max_tokens,
                cfg.spec.eos_token,
            )?;
            (tokens, Vec::new())
        }
        _ => {
            let mapping = reports::read_mapping(
                &out_path(cfg, "mapping.json"),
                &cfg.mapping_fingerprint(),
            )?;
            mapping
                .validate_for(draft.config.n_layers, verifier.config.n_layers)
                .map_err(|e| usage_error(format!("mapping does not fit the models: {e}")))?;
            let mask_source = match mode {
                GenerationMode::SpecAttn => MaskSource::DraftTopP,
                GenerationMode::Streaming => MaskSource::Streaming {
                    n_sink: cfg.baselines.n_sink,
                    n_recent: cfg.baselines.n_recent,
                },
                GenerationMode::TopK => MaskSource::TopK {
                    budget: cfg.baselines.topk_budget,
                },
                GenerationMode::DenseOnly => unreachable!(),
            };
            let spec = SpecConfig {
                gamma: cfg.spec.gamma,
                selection: cfg.selection,
                max_tokens: cfg.spec.max_tokens,
                eos_token: cfg.spec.eos_token,
                attention_mode: cfg.spec.attention_mode,
                mask_source,
                collect_bound_samples: false,
            };
            let out = decode::generate(&draft, &verifier, &mapping, &prompt, &spec)?;
            info!("generation stopped: {:?}", out.stop);
            (out.tokens, out.rounds)
        }
    };

    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    fs::write(out_path(cfg, "output.bin"), &bytes)
        .with_context(|| "writing output.bin".to_string())?;
    reports::write_rounds_jsonl(
        &out_path(cfg, "rounds.jsonl"),
        &rounds,
        &fingerprint,
        mode.tag(),
    )?;
    println!(
        "generate[{}]: {} prompt bytes -> {} total bytes, {} rounds",
        mode.tag(),
        prompt.len(),
        tokens.len(),
        rounds.len()
    );
    Ok(())
}

/// Runs the method comparison and writes `report.csv`, `report.json`, and
/// `ppl_trace.csv`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let (draft, verifier) = cfg.build_models()?;
    let corpus = cfg.read_corpus()?;
    let mapping = reports::read_mapping(
        &out_path(cfg, "mapping.json"),
        &cfg.mapping_fingerprint(),
    )?;
    mapping
        .validate_for(draft.config.n_layers, verifier.config.n_layers)
        .map_err(|e| usage_error(format!("mapping does not fit the models: {e}")))?;
    ensure_out_dir(cfg)?;
    let compare = CompareConfig {
        p_values: cfg.bench.p_values.clone(),
        prefill_fraction: cfg.bench.prefill_fraction,
        mode: cfg.spec.attention_mode,
        selection: cfg.selection,
        n_sink: cfg.baselines.n_sink,
        gamma: cfg.spec.gamma,
        gen_tokens: cfg.bench.gen_tokens,
    };
    let results = harness::compare_methods(&draft, &verifier, &mapping, &corpus, &compare)?;
    let fingerprint = cfg.fingerprint();
    let rows: Vec<_> = results.iter().map(|r| &r.report).collect();
    reports::write_report_csv(&out_path(cfg, "report.csv"), &rows)?;
    reports::write_report_json(&out_path(cfg, "report.json"), &rows, &fingerprint)?;
    reports::write_trace_csv(&out_path(cfg, "ppl_trace.csv"), &results)?;
    for row in &rows {
        println!(
            "bench: {:<28} ppl {:>10.4} (delta {:+.4}) kv-reduction {:>6.2}%",
            row.method, row.perplexity, row.perplexity_delta, row.kv_reduction_pct
        );
    }
    Ok(())
}

/// Runs the sorting-free-vs-oracle and DTW-vs-enumeration suites.
///
/// `inject_fault` corrupts one expected value to prove the failure path; the
/// command then exits 1.
pub fn cmd_oracle_check(cfg: &RunConfig, inject_fault: bool) -> Result<()> {
    let trials = cfg.oracle.trials;
    if trials == 0 {
        return Err(usage_error("no trials"));
    }
    let mut rng = TestRng::new(cfg.oracle.seed);

    for trial in 0..trials {
        let len = 1 + rng.below(1024);
        let peakedness = [0.5, 2.0, 6.0][rng.below(3)];
        let weights = random_distribution(&mut rng, len, peakedness);
        let p = 0.001 + 0.999 * rng.next_f64();

        let (fast, _) = nucleus_select_sortfree(&weights, p, 60)?;
        let oracle = nucleus_select_oracle(&weights, p)?;
        let mut expected = oracle.indices().to_vec();
        if inject_fault && trial == 0 && !expected.is_empty() {
            expected.pop();
        }
        if fast.indices() != expected.as_slice() {
            bail!(
                "nucleus check failed at trial {trial}: sorting-free selected {} indices, oracle {}",
                fast.len(),
                expected.len()
            );
        }

        let (coarse, _) = nucleus_select_sortfree(&weights, p, 10)?;
        let total: f64 = weights.iter().sum();
        let mass: f64 = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| coarse.contains(*i))
            .map(|(_, &w)| w)
            .sum();
        if mass < p * total {
            bail!(
                "mass guarantee failed at trial {trial}: retained {mass} of target {}",
                p * total
            );
        }
    }

    for trial in 0..trials {
        let m = 1 + rng.below(5);
        let n = 1 + rng.below(6);
        let data: Vec<f64> = (0..m * n).map(|_| -8.0 * rng.next_f64()).collect();
        let matrix = SimilarityMatrix::new(Tensor2D::from_vec(m, n, data)?)?;
        let mapping = monotonic_dtw(&matrix)?;
        if mapping.assignments().windows(2).any(|w| w[0] > w[1]) {
            bail!("dtw produced a non-monotone mapping at trial {trial}");
        }
        let best = brute_force_monotone_best(&matrix);
        if (mapping.total_score() - best).abs() > 1e-9 {
            bail!(
                "dtw check failed at trial {trial}: score {} vs enumeration {best}",
                mapping.total_score()
            );
        }
    }

    println!("oracle-check: {trials} nucleus trials and {trials} mapping trials passed");
    Ok(())
}
