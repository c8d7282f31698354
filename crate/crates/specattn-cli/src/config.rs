//! Run configuration: one JSON document drives every command, with a few
//! flag overrides. Relative paths resolve against the config file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use specattn_core::attention::AttentionMode;
use specattn_core::layer_map::CalibrationConfig;
use specattn_core::model::{Model, ModelConfig};
use specattn_core::select::SelectionConfig;

use crate::{usage_error, weights};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecSettings {
    pub gamma: usize,
    pub max_tokens: usize,
    pub eos_token: Option<u32>,
    pub attention_mode: AttentionMode,
}

impl Default for SpecSettings {
    fn default() -> Self {
        SpecSettings {
            gamma: 4,
            max_tokens: 128,
            eos_token: None,
            attention_mode: AttentionMode::Renormalized,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    /// Always-kept leading positions for the sink+window mode.
    pub n_sink: usize,
    /// Trailing window for the sink+window mode.
    pub n_recent: usize,
    /// Fixed budget for top-k generation mode.
    pub topk_budget: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            n_sink: 4,
            n_recent: 32,
            topk_budget: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub p_values: Vec<f64>,
    pub prefill_fraction: f64,
    /// Length of the speculative run used for round statistics.
    pub gen_tokens: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            p_values: vec![0.8, 0.9, 0.95, 0.99],
            prefill_fraction: 0.1,
            gen_tokens: 48,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub trials: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            trials: 1000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub draft: ModelConfig,
    pub verifier: ModelConfig,
    #[serde(default)]
    pub draft_weights: Option<PathBuf>,
    #[serde(default)]
    pub verifier_weights: Option<PathBuf>,
    pub corpus: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub spec: SpecSettings,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub baselines: BaselineSettings,
    #[serde(default)]
    pub bench: BenchSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Flag overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub p: Option<f64>,
    pub gamma: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| usage_error(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus = resolve(base, &cfg.corpus);
        cfg.out_dir = resolve(base, &cfg.out_dir);
        cfg.draft_weights = cfg.draft_weights.map(|p| resolve(base, &p));
        cfg.verifier_weights = cfg.verifier_weights.map(|p| resolve(base, &p));

        if let Some(dir) = &overrides.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(p) = overrides.p {
            cfg.selection.p = p;
        }
        if let Some(gamma) = overrides.gamma {
            cfg.spec.gamma = gamma;
        }
        if let Some(seed) = overrides.seed {
            cfg.draft.seed = seed;
            cfg.verifier.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        for (role, model) in [("draft", &self.draft), ("verifier", &self.verifier)] {
            model
                .validate()
                .map_err(|e| usage_error(format!("invalid {role} config: {e}")))?;
            if model.vocab > 256 {
                return Err(usage_error(format!(
                    "{role} vocab is {}, byte-level IO needs vocab <= 256",
                    model.vocab
                )));
            }
        }
        self.selection
            .validate()
            .map_err(|e| usage_error(format!("invalid selection config: {e}")))?;
        if self.spec.gamma == 0 {
            return Err(usage_error("gamma must be >= 1"));
        }
        Ok(())
    }

    /// Hash of the semantic configuration (models plus all knobs, no paths);
    /// embedded in every output so a run can be traced to its config.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            draft: &'a ModelConfig,
            verifier: &'a ModelConfig,
            spec: &'a SpecSettings,
            selection: &'a SelectionConfig,
            calibration: &'a CalibrationConfig,
            baselines: &'a BaselineSettings,
            bench: &'a BenchSettings,
            oracle: &'a OracleSettings,
        }
        let view = View {
            draft: &self.draft,
            verifier: &self.verifier,
            spec: &self.spec,
            selection: &self.selection,
            calibration: &self.calibration,
            baselines: &self.baselines,
            bench: &self.bench,
            oracle: &self.oracle,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }

    /// Hash of only what the layer mapping depends on: model shapes and
    /// calibration settings. Selection and generation overrides do not
    /// invalidate a mapping file.
    pub fn mapping_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            draft: &'a ModelConfig,
            verifier: &'a ModelConfig,
            calibration: &'a CalibrationConfig,
        }
        let view = View {
            draft: &self.draft,
            verifier: &self.verifier,
            calibration: &self.calibration,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }

    pub fn read_corpus(&self) -> Result<Vec<u8>> {
        fs::read(&self.corpus)
            .map_err(|e| usage_error(format!("cannot read corpus {}: {e}", self.corpus.display())))
    }

    /// Builds or loads both models.
    pub fn build_models(&self) -> Result<(Model, Model)> {
        let draft = match &self.draft_weights {
            Some(path) => weights::load_model_expecting(path, &self.draft)
                .with_context(|| format!("loading draft weights {}", path.display()))?,
            None => Model::new(self.draft).map_err(|e| usage_error(format!("draft: {e}")))?,
        };
        let verifier = match &self.verifier_weights {
            Some(path) => weights::load_model_expecting(path, &self.verifier)
                .with_context(|| format!("loading verifier weights {}", path.display()))?,
            None => Model::new(self.verifier).map_err(|e| usage_error(format!("verifier: {e}")))?,
        };
        Ok((draft, verifier))
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}
