//! Experiment plans: grids, seeds, and the configuration of every stage.

use std::path::{Path, PathBuf};

use deconf_core::corpus::CorpusSpec;
use deconf_core::delta::Normalization;
use deconf_core::mask::MaskType;
use deconf_core::metrics::{DEFAULT_JACCARD_PERCENTILE, DEFAULT_THRESHOLD};
use deconf_core::model::ModelConfig;
use deconf_core::sampler::{conditionals_from_alpha, ShiftConfig};
use deconf_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    /// Generated when `pool_path` is absent.
    pub corpus: CorpusSpec,
    /// JSON-lines pool (`token_ids`, `y_p`, `y_c`, `source_id`).
    pub pool_path: Option<PathBuf>,
    pub alphas: Vec<f64>,
    /// Overrides the reciprocal test α for every grid point.
    pub alpha_test: Option<f64>,
    pub ecf_mask_pcts: Vec<f64>,
    pub df_k_grid: Vec<f64>,
    pub mask_types: Vec<MaskType>,
    pub seeds: Vec<u64>,
    pub tradeoff_alpha: f64,
    /// Split sizes and marginals; `alpha_*` and `seed` are set per job.
    pub shift: ShiftConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub threshold: f64,
    pub jaccard_percentile: f64,
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            pool_path: None,
            alphas: vec![0.2, 1.0 / 3.0, 1.0, 3.0, 5.0],
            alpha_test: None,
            ecf_mask_pcts: vec![5.0, 15.0, 25.0, 35.0],
            df_k_grid: (0..=60).map(f64::from).collect(),
            mask_types: MaskType::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            tradeoff_alpha: 3.0,
            shift: ShiftConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            normalization: Normalization::default(),
            threshold: DEFAULT_THRESHOLD,
            jaccard_percentile: DEFAULT_JACCARD_PERCENTILE,
            workers: 1,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentPlan {
    /// Reads a `.toml` or `.json` plan; missing fields take defaults. A
    /// provenance sidecar written next to a table also loads, yielding the
    /// plan that produced the table.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            Some("json") => {
                let mut value: serde_json::Value = serde_json::from_str(&text)?;
                if value.get("experiment").is_some() {
                    if let Some(inner) = value.get_mut("plan") {
                        value = inner.take();
                    }
                }
                serde_json::from_value(value)?
            }
            _ => return Err(Error::Config(format!("{}: plan must be .toml or .json", path.display()))),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.alphas.is_empty() || self.seeds.is_empty() {
            return cfg("alpha grid and seed list must be non-empty".into());
        }
        if self.ecf_mask_pcts.is_empty() || self.df_k_grid.is_empty() || self.mask_types.is_empty() {
            return cfg("mask grids and mask types must be non-empty".into());
        }
        for &p in self.ecf_mask_pcts.iter().chain(&self.df_k_grid) {
            if !(0.0..=100.0).contains(&p) {
                return cfg(format!("percentage {p} outside [0, 100]"));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return cfg("seeds must be distinct".into());
        }
        for &a in self.alphas.iter().chain([&self.tradeoff_alpha]) {
            for alpha in [a, self.alpha_test.unwrap_or(1.0 / a)] {
                conditionals_from_alpha(alpha, self.shift.p_yp, self.shift.p_yc)
                    .map_err(|e| Error::Config(format!("α grid: {e}")))?;
            }
        }
        if self.workers == 0 {
            return cfg("workers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) || !(0.0..=100.0).contains(&self.jaccard_percentile) {
            return cfg("threshold must lie in [0, 1] and jaccard_percentile in [0, 100]".into());
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.pool_path.is_none() {
            self.corpus.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Split configuration for one grid point.
    pub fn shift_for(&self, alpha: f64, seed: u64) -> ShiftConfig {
        ShiftConfig { alpha_train: alpha, alpha_test: self.alpha_test, seed, ..self.shift.clone() }
    }

    /// Training configuration for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}
