//! Confounding-shift sampling.
//!
//! The joint distribution of the primary label `y_p` and the confounder
//! `y_c` is pinned by the two marginals and the ratio
//! `α = P(y_p=1 | y_c=1) / P(y_p=1 | y_c=0)`. Splits are drawn with exact
//! per-cell counts (largest-remainder rounding of `n·P(y_p, y_c)`), then
//! uniformly within each cell.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::SeedRng;

/// One labeled text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<u32>,
    /// Primary label (1 = positive / dementia).
    pub y_p: u8,
    /// Confounder label (1 = female).
    pub y_c: u8,
    pub source_id: String,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        if self.y_p > 1 || self.y_c > 1 {
            return Err(Error::Validation(format!("{}: labels must be binary", self.source_id)));
        }
        if self.token_ids.is_empty() {
            return Err(Error::Validation(format!("{}: empty token sequence", self.source_id)));
        }
        Ok(())
    }

    /// Cell index `2·y_p + y_c`.
    pub fn cell(&self) -> usize {
        Cell::new(self.y_p, self.y_c).index()
    }
}

/// A `(y_p, y_c)` cell of the joint label table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub y_p: u8,
    pub y_c: u8,
}

impl Cell {
    /// Cells in canonical order: (0,0), (0,1), (1,0), (1,1).
    pub const ALL: [Cell; 4] =
        [Cell { y_p: 0, y_c: 0 }, Cell { y_p: 0, y_c: 1 }, Cell { y_p: 1, y_c: 0 }, Cell { y_p: 1, y_c: 1 }];

    pub fn new(y_p: u8, y_c: u8) -> Self {
        Self { y_p, y_c }
    }

    pub fn index(self) -> usize {
        2 * self.y_p as usize + self.y_c as usize
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(y_p={}, y_c={})", self.y_p, self.y_c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    pub alpha_train: f64,
    /// Defaults to `1 / alpha_train` when absent.
    pub alpha_test: Option<f64>,
    pub p_yc: f64,
    pub p_yp: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
    pub sample_with_replacement: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            alpha_train: 1.0,
            alpha_test: None,
            p_yc: 0.5,
            p_yp: 0.5,
            n_train: 480,
            n_valid: 120,
            n_test: 150,
            seed: 0,
            sample_with_replacement: true,
        }
    }
}

impl ShiftConfig {
    pub fn with_alpha(alpha_train: f64, seed: u64) -> Self {
        Self { alpha_train, seed, ..Default::default() }
    }

    pub fn alpha_test(&self) -> f64 {
        self.alpha_test.unwrap_or(1.0 / self.alpha_train)
    }

    pub fn validate(&self) -> Result<()> {
        conditionals_from_alpha(self.alpha_train, self.p_yp, self.p_yc)?;
        conditionals_from_alpha(self.alpha_test(), self.p_yp, self.p_yc)?;
        Ok(())
    }
}

/// Solves `p1 = α·p0` and `p_yc·p1 + (1 − p_yc)·p0 = p_yp`, returning
/// `(P(y_p=1 | y_c=1), P(y_p=1 | y_c=0))`.
pub fn conditionals_from_alpha(alpha: f64, p_yp: f64, p_yc: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be positive and finite, got {alpha}")));
    }
    for (name, p) in [("P(Y_p=1)", p_yp), ("P(Y_c=1)", p_yc)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("{name} = {p} must lie in (0, 1)")));
        }
    }
    let p0 = p_yp / (p_yc * alpha + 1.0 - p_yc);
    let p1 = alpha * p0;
    if !(p1 > 0.0 && p1 < 1.0) {
        return Err(Error::Domain(format!(
            "alpha = {alpha} infeasible: P(Y_p=1|Y_c=1) = {p1} outside (0, 1)"
        )));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Domain(format!(
            "alpha = {alpha} infeasible: P(Y_p=1|Y_c=0) = {p0} outside (0, 1)"
        )));
    }
    Ok((p1, p0))
}

/// Joint cell probabilities in [`Cell::ALL`] order.
pub fn cell_probabilities(alpha: f64, p_yp: f64, p_yc: f64) -> Result<[f64; 4]> {
    let (p1, p0) = conditionals_from_alpha(alpha, p_yp, p_yc)?;
    Ok([(1.0 - p_yc) * (1.0 - p0), p_yc * (1.0 - p1), (1.0 - p_yc) * p0, p_yc * p1])
}

/// Largest-remainder apportionment of `n` over `probs`; ties in the
/// remainder go to the earlier cell.
pub fn largest_remainder(n: usize, probs: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let rem = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Exact target cell counts for a split of size `n` under `alpha`.
pub fn target_counts(n: usize, alpha: f64, p_yp: f64, p_yc: f64) -> Result<[usize; 4]> {
    let probs = cell_probabilities(alpha, p_yp, p_yc)?;
    let c = largest_remainder(n, &probs);
    Ok([c[0], c[1], c[2], c[3]])
}

/// A sampled split together with the pool indices it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub alpha: f64,
    pub examples: Vec<Example>,
    pub pool_indices: Vec<usize>,
}

impl Split {
    pub fn cell_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for e in &self.examples {
            c[e.cell()] += 1;
        }
        c
    }

    /// JSON-lines manifest: one record per draw.
    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.examples
            .iter()
            .zip(&self.pool_indices)
            .enumerate()
            .map(|(draw_index, (e, &pool_index))| ManifestRecord {
                source_id: e.source_id.clone(),
                y_p: e.y_p,
                y_c: e.y_c,
                split: self.name.clone(),
                draw_index,
                pool_index,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub y_p: u8,
    pub y_c: u8,
    pub split: String,
    pub draw_index: usize,
    pub pool_index: usize,
}

/// Draws `n` examples from `pool` with exact cell counts for `alpha`
/// (marginals taken from `cfg`).
pub fn sample_split(pool: &[Example], n: usize, alpha: f64, cfg: &ShiftConfig, seed: u64) -> Result<Split> {
    let targets = target_counts(n, alpha, cfg.p_yp, cfg.p_yc)?;
    let mut by_cell: [Vec<usize>; 4] = Default::default();
    for (i, e) in pool.iter().enumerate() {
        e.validate()?;
        by_cell[e.cell()].push(i);
    }
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut drawn = Vec::with_capacity(n);
    for (cell, &count) in Cell::ALL.iter().zip(&targets) {
        let members = &by_cell[cell.index()];
        if count == 0 {
            continue;
        }
        if members.is_empty() {
            return Err(Error::Data(format!("pool has no examples in cell {cell}")));
        }
        if cfg.sample_with_replacement {
            drawn.extend((0..count).map(|_| members[rng.random_range(0..members.len())]));
        } else {
            if members.len() < count {
                return Err(Error::Data(format!(
                    "cell {cell} holds {} examples, {count} needed without replacement",
                    members.len()
                )));
            }
            let mut m = members.clone();
            m.shuffle(&mut rng);
            drawn.extend_from_slice(&m[..count]);
        }
    }
    drawn.shuffle(&mut rng);
    Ok(Split {
        name: String::new(),
        alpha,
        examples: drawn.iter().map(|&i| pool[i].clone()).collect(),
        pool_indices: drawn,
    })
}

/// Train, validation and test splits plus the balanced (α = 1) set used for
/// statistical parity.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    pub balanced: Split,
}

impl Benchmark {
    /// SHA-256 over the concatenated JSON-lines manifests of all splits.
    pub fn manifest_hash(&self) -> String {
        let mut bytes = Vec::new();
        for s in [&self.train, &self.valid, &self.test, &self.balanced] {
            write_manifest(&mut bytes, s).expect("in-memory write");
        }
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn splits(&self) -> [&Split; 4] {
        [&self.train, &self.valid, &self.test, &self.balanced]
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train and validation under `alpha_train`, test under `alpha_test`, and a
/// balanced set under α = 1 with the test size.
pub fn make_benchmark(pool: &[Example], cfg: &ShiftConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let draw = |name: &str, n: usize, alpha: f64, stream: u64| -> Result<Split> {
        let mut s = sample_split(pool, n, alpha, cfg, derive_seed(cfg.seed, stream))?;
        s.name = name.to_string();
        Ok(s)
    };
    Ok(Benchmark {
        train: draw("train", cfg.n_train, cfg.alpha_train, 1)?,
        valid: draw("valid", cfg.n_valid, cfg.alpha_train, 2)?,
        test: draw("test", cfg.n_test, cfg.alpha_test(), 3)?,
        balanced: draw("balanced", cfg.n_test, 1.0, 4)?,
    })
}

/// Examples with `y_p = 0`.
pub fn healthy_only(examples: &[Example]) -> Vec<Example> {
    examples.iter().filter(|e| e.y_p == 0).cloned().collect()
}

pub fn write_manifest<W: Write>(w: &mut W, split: &Split) -> Result<()> {
    for rec in split.manifest() {
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes examples as JSON lines (`token_ids`, `y_p`, `y_c`, `source_id`).
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("{}:{}: {err}", path.display(), i + 1)))?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}
