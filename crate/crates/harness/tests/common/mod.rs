//! A plan small enough to train every grid point in well under a second.

#![allow(dead_code)]

use std::path::Path;

use deconf_core::corpus::CorpusSpec;
use deconf_core::model::ModelConfig;
use deconf_core::sampler::ShiftConfig;
use deconf_core::training::TrainConfig;
use deconf_harness::plan::ExperimentPlan;

pub const N_LAYERS: usize = 2;

pub fn tiny_plan(out: &Path) -> ExperimentPlan {
    ExperimentPlan {
        corpus: CorpusSpec {
            vocab_size: 128,
            markers_per_set: 4,
            min_len: 8,
            max_len: 16,
            pool_size_per_cell: 60,
            ..Default::default()
        },
        alphas: vec![1.0, 3.0],
        seeds: vec![1, 2],
        ecf_mask_pcts: vec![0.0, 15.0],
        df_k_grid: vec![0.0, 10.0, 50.0, 100.0],
        shift: ShiftConfig { n_train: 96, n_valid: 32, n_test: 40, ..Default::default() },
        model: ModelConfig {
            n_layers: N_LAYERS,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 128,
            max_seq_len: 16,
            ..Default::default()
        },
        train: TrainConfig { epochs: 2, early_stop_patience: 1, warmup_steps: 2, max_seq_len: 16, ..Default::default() },
        output_dir: out.to_path_buf(),
        ..Default::default()
    }
}

/// Parses a CSV file into its header and rows.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

pub fn col(header: &[&str], name: &str) -> usize {
    header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"))
}
