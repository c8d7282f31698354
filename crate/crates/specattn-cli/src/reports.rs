//! Writers and readers for the stable output files: `mapping.json`,
//! `simmatrix.csv`, `report.csv`, `report.json`, `ppl_trace.csv`, and
//! `rounds.jsonl`. Everything is rendered deterministically so a rerun of
//! the same config is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use specattn_core::decode::RoundRecord;
use specattn_core::harness::{BenchReport, MethodResult, ReferenceRow, FULL_SCALE_REFERENCE, TOY_SCALE_BANNER};
use specattn_core::layer_map::{LayerMapping, SimilarityMatrix};

use crate::usage_error;

#[derive(Debug, Serialize, Deserialize)]
pub struct MappingFile {
    /// Draft layer chosen for each verifier layer.
    pub mapping: Vec<usize>,
    pub total_score: f64,
    pub draft_layers: usize,
    pub verifier_layers: usize,
    pub config_fingerprint: String,
}

pub fn write_mapping(
    path: &Path,
    mapping: &LayerMapping,
    draft_layers: usize,
    fingerprint: &str,
) -> Result<()> {
    let file = MappingFile {
        mapping: mapping.assignments().to_vec(),
        total_score: mapping.total_score(),
        draft_layers,
        verifier_layers: mapping.len(),
        config_fingerprint: fingerprint.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_mapping(path: &Path, expected_fingerprint: &str) -> Result<LayerMapping> {
    let text = fs::read_to_string(path).map_err(|e| {
        usage_error(format!(
            "cannot read mapping {} (run `specattn calibrate` first): {e}",
            path.display()
        ))
    })?;
    let file: MappingFile = serde_json::from_str(&text)
        .map_err(|e| usage_error(format!("invalid mapping file {}: {e}", path.display())))?;
    if file.config_fingerprint != expected_fingerprint {
        return Err(usage_error(format!(
            "mapping {} was calibrated for a different model/calibration config; rerun calibrate",
            path.display()
        )));
    }
    let mapping = LayerMapping::new(file.mapping, file.total_score)
        .map_err(|e| usage_error(format!("mapping file {}: {e}", path.display())))?;
    if mapping.len() != file.verifier_layers {
        return Err(usage_error("mapping file is internally inconsistent"));
    }
    Ok(mapping)
}

pub fn write_similarity_csv(path: &Path, matrix: &SimilarityMatrix) -> Result<()> {
    let mut text = String::from("draft_layer");
    for j in 0..matrix.verifier_layers() {
        write!(text, ",v{j}").unwrap();
    }
    text.push('\n');
    for i in 0..matrix.draft_layers() {
        write!(text, "{i}").unwrap();
        for j in 0..matrix.verifier_layers() {
            write!(text, ",{:.9}", matrix.get(i, j)).unwrap();
        }
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_report_csv(path: &Path, reports: &[&BenchReport]) -> Result<()> {
    let mut text = String::from(
        "method,perplexity,perplexity_delta,relative_increase_pct,kv_reduction_pct,rounds,mean_accepted\n",
    );
    for r in reports {
        writeln!(
            text,
            "{},{:.6},{:.6},{:.4},{:.4},{},{:.4}",
            r.method,
            r.perplexity,
            r.perplexity_delta,
            r.relative_increase_pct,
            r.kv_reduction_pct,
            r.rounds,
            r.mean_accepted
        )
        .unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct ReferenceRowView {
    method: &'static str,
    perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    perplexity_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_increase_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kv_reduction_pct: Option<f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    banner: &'static str,
    config_fingerprint: &'a str,
    rows: Vec<&'a BenchReport>,
    full_scale_reference: Vec<ReferenceRowView>,
}

pub fn write_report_json(path: &Path, reports: &[&BenchReport], fingerprint: &str) -> Result<()> {
    let reference = FULL_SCALE_REFERENCE
        .iter()
        .map(|r: &ReferenceRow| ReferenceRowView {
            method: r.method,
            perplexity: r.perplexity,
            perplexity_delta: r.perplexity_delta,
            relative_increase_pct: r.relative_increase_pct,
            kv_reduction_pct: r.kv_reduction_pct,
        })
        .collect();
    let doc = ReportJson {
        banner: TOY_SCALE_BANNER,
        config_fingerprint: fingerprint,
        rows: reports.to_vec(),
        full_scale_reference: reference,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, results: &[MethodResult]) -> Result<()> {
    let mut text = String::from("method,step,cum_nll,cum_ppl\n");
    for result in results {
        for (step, (nll, ppl)) in result
            .trace
            .cum_nll
            .iter()
            .zip(&result.trace.cum_ppl)
            .enumerate()
        {
            writeln!(text, "{},{step},{nll:.6},{ppl:.6}", result.report.method).unwrap();
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct RoundsHeader<'a> {
    config_fingerprint: &'a str,
    mode: &'a str,
}

pub fn write_rounds_jsonl(
    path: &Path,
    rounds: &[RoundRecord],
    fingerprint: &str,
    mode: &str,
) -> Result<()> {
    let mut text = serde_json::to_string(&RoundsHeader {
        config_fingerprint: fingerprint,
        mode,
    })?;
    text.push('\n');
    for round in rounds {
        text.push_str(&serde_json::to_string(round)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
