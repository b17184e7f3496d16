//! Repeated stratified cross-validation of the per-gender AUPRC gap.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auprc, mann_whitney_u, MannWhitney, ScoredExample};
use crate::model::{EncoderModel, ModelConfig, SeedRng};
use crate::sampler::{derive_seed, Cell, Example};
use crate::training::{score_examples, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    /// Down-sample every `(y_p, y_c)` cell to the smallest one first.
    pub balanced: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 3,
            balanced: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 3 {
            return Err(Error::Validation(format!("folds = {} (need ≥ 3: train, validation, test)", self.folds)));
        }
        if self.repeats == 0 || self.workers == 0 {
            return Err(Error::Validation("repeats and workers must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupGap {
    /// |mean female AUPRC − mean male AUPRC| over all fold models.
    pub gap: f64,
    pub p_value: f64,
    pub test: MannWhitney,
    /// One entry per (repeat, fold), repeat major.
    pub auprc_female: Vec<f64>,
    pub auprc_male: Vec<f64>,
}

/// Fold index of every pool example for one repeat. Each cell is shuffled
/// and dealt round-robin, so every fold holds its share of every cell.
pub fn stratified_folds(pool: &[Example], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut assign = vec![0; pool.len()];
    for cell in Cell::ALL {
        let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].cell() == cell.index()).collect();
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            assign[i] = j % folds;
        }
    }
    assign
}

/// Keeps a seeded random subset of each cell, all of the smallest cell's size.
pub fn balance_cells(pool: &[Example], seed: u64) -> Vec<Example> {
    let mut rng = SeedRng::seed_from_u64(seed);
    let by_cell: Vec<Vec<&Example>> =
        Cell::ALL.iter().map(|c| pool.iter().filter(|e| e.cell() == c.index()).collect()).collect();
    let n = by_cell.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(4 * n);
    for mut members in by_cell {
        members.shuffle(&mut rng);
        out.extend(members.into_iter().take(n).cloned());
    }
    out
}

fn group_auprc(scored: &[ScoredExample], y_c: u8) -> Result<f64> {
    let group: Vec<ScoredExample> = scored.iter().filter(|s| s.y_c == y_c).cloned().collect();
    auprc(&group)
}

/// Trains one model per (repeat, fold) and compares the per-gender test
/// AUPRCs. Fold `f` is the test fold, fold `f + 1` (cyclically) selects
/// the checkpoint, the rest is training data.
pub fn cv_group_gap(pool: &[Example], cfg: &CvConfig) -> Result<GroupGap> {
    cfg.validate()?;
    for (yp, yc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        if !pool.iter().any(|e| e.y_p == yp && e.y_c == yc) {
            return Err(Error::Data(format!("pool has no example with y_p = {yp}, y_c = {yc}")));
        }
    }
    let pool = if cfg.balanced { balance_cells(pool, derive_seed(cfg.seed, 0x4241)) } else { pool.to_vec() };
    let assignments: Vec<Vec<usize>> =
        (0..cfg.repeats).map(|r| stratified_folds(&pool, cfg.folds, derive_seed(cfg.seed, 0x4356 + r as u64))).collect();

    let jobs = cfg.repeats * cfg.folds;
    type Slot = Option<Result<(f64, f64)>>;
    let results: Mutex<Vec<Slot>> = Mutex::new((0..jobs).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_job = |job: usize| -> Result<(f64, f64)> {
        let (r, f) = (job / cfg.folds, job % cfg.folds);
        let fold_of = &assignments[r];
        let pick = |k: usize| -> Vec<Example> {
            pool.iter().zip(fold_of).filter(|(_, &g)| g == k).map(|(e, _)| e.clone()).collect()
        };
        let valid_fold = (f + 1) % cfg.folds;
        let test = pick(f);
        let valid = pick(valid_fold);
        let train_set: Vec<Example> = pool
            .iter()
            .zip(fold_of)
            .filter(|(_, &g)| g != f && g != valid_fold)
            .map(|(e, _)| e.clone())
            .collect();
        let seed = derive_seed(cfg.seed, 0x4600 + job as u64);
        let init = EncoderModel::new(cfg.model.clone(), seed)?;
        let (model, _) = train(&init, &train_set, &valid, &TrainConfig { seed, ..cfg.train.clone() }, None)?;
        let scored = score_examples(&model, &test, cfg.train.max_seq_len)?;
        Ok((group_auprc(&scored, 1)?, group_auprc(&scored, 0)?))
    };
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(jobs) {
            scope.spawn(|| loop {
                let job = next.fetch_add(1, Ordering::SeqCst);
                if job >= jobs {
                    break;
                }
                let out = run_job(job);
                results.lock().expect("no panics while held")[job] = Some(out);
            });
        }
    });

    let mut female = Vec::with_capacity(jobs);
    let mut male = Vec::with_capacity(jobs);
    for out in results.into_inner().expect("no panics while held") {
        let (f, m) = out.expect("every job ran")?;
        female.push(f);
        male.push(m);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = mann_whitney_u(&female, &male)?;
    Ok(GroupGap { gap: (mean(&female) - mean(&male)).abs(), p_value: test.p_two_sided, test, auprc_female: female, auprc_male: male })
}
