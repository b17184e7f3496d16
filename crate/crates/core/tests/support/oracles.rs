//! Brute-force reference implementations for the evaluation metrics and
//! random instance generators shared by the oracle tests and the
//! acceptance run.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use deconf_core::delta::ImportanceMap;
use deconf_core::metrics::{auprc, fpr_gap, jaccard_entanglement, mann_whitney_u, sp_gap, ScoredExample};
use deconf_core::model::{MatrixKind, TrackedMatrixId};
use deconf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EXACT: f64 = 1e-12;

/// Precision-recall area by explicit threshold enumeration: for every
/// distinct score `t` (high to low) classify `score ≥ t` as positive and add
/// the rectangle `(R_t − R_prev) · P_t`.
pub fn auprc_oracle(s: &[ScoredExample]) -> f64 {
    let positives = s.iter().filter(|e| e.y_p == 1).count() as f64;
    let mut thresholds: Vec<f64> = s.iter().map(|e| e.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let predicted: Vec<&ScoredExample> = s.iter().filter(|e| e.score >= t).collect();
        let tp = predicted.iter().filter(|e| e.y_p == 1).count() as f64;
        let recall = tp / positives;
        area += (recall - prev_recall) * (tp / predicted.len() as f64);
        prev_recall = recall;
    }
    area
}

/// `(female, male)` false-positive rates by direct counting.
pub fn fpr_oracle(s: &[ScoredExample], thr: f64) -> (f64, f64) {
    let rate = |g: u8| {
        let neg: Vec<_> = s.iter().filter(|e| e.y_p == 0 && e.y_c == g).collect();
        neg.iter().filter(|e| e.score > thr).count() as f64 / neg.len() as f64
    };
    (rate(1), rate(0))
}

/// `(female, male)` positive-prediction rates by direct counting.
pub fn sp_oracle(s: &[ScoredExample], thr: f64) -> (f64, f64) {
    let rate = |g: u8| {
        let all: Vec<_> = s.iter().filter(|e| e.y_c == g).collect();
        all.iter().filter(|e| e.score > thr).count() as f64 / all.len() as f64
    };
    (rate(1), rate(0))
}

/// Entries strictly above the nearest-rank percentile value, built as an
/// explicit set. `None` when a tie sits on the cut, where the definition
/// alone does not pin the support down.
pub fn support_oracle(values: &[f64], pct: f64) -> Option<BTreeSet<usize>> {
    let n = values.len();
    let rank = (pct * n as f64 / 100.0).ceil() as usize;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let set: BTreeSet<usize> = if rank == 0 {
        (0..n).collect()
    } else {
        (0..n).filter(|&i| values[i] > sorted[rank - 1]).collect()
    };
    (set.len() == n - rank).then_some(set)
}

pub fn jaccard_oracle(p: &[f64], c: &[f64], pct: f64) -> Option<f64> {
    let (sp, sc) = (support_oracle(p, pct)?, support_oracle(c, pct)?);
    let union = sp.union(&sc).count();
    if union == 0 {
        return None;
    }
    Some(sp.intersection(&sc).count() as f64 / union as f64)
}

/// `U` by pair counting and the two-sided p-value from every permutation
/// of the pooled sample.
pub fn mwu_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pair_u = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .map(|x| b.iter().map(|y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }).sum::<f64>())
            .sum()
    };
    let u = pair_u(a, b);
    let mean = (a.len() * b.len()) as f64 / 2.0;
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (mut extreme, mut total) = (0u64, 0u64);
    permute(&mut pooled, 0, &mut |perm| {
        total += 1;
        if (pair_u(&perm[..a.len()], &perm[a.len()..]) - mean).abs() >= (u - mean).abs() {
            extreme += 1;
        }
    });
    (u, extreme as f64 / total as f64)
}

fn permute(v: &mut [f64], k: usize, visit: &mut impl FnMut(&[f64])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// Scores on a coarse grid so ties and exact threshold hits are common.
pub fn random_scored(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredExample> {
    loop {
        let s: Vec<ScoredExample> = (0..n)
            .map(|_| {
                let score = rng.random_range(0..=10) as f64 / 10.0;
                ScoredExample::new(score, rng.random_range(0..=1), rng.random_range(0..=1))
            })
            .collect();
        let has = |yp: u8, yc: u8| s.iter().any(|e| e.y_p == yp && e.y_c == yc);
        if has(0, 0) && has(0, 1) && has(1, 0) && has(1, 1) {
            return s;
        }
    }
}

fn map_of(values: &[f64], rows: usize) -> ImportanceMap {
    let id = TrackedMatrixId::layer(1, MatrixKind::Wq).unwrap();
    let t = Tensor::new(vec![rows, values.len() / rows], values.to_vec()).unwrap();
    BTreeMap::from([(id, t)])
}

fn close(name: &str, i: usize, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= EXACT {
        Ok(())
    } else {
        Err(format!("{name} instance {i}: got {got}, oracle {want}"))
    }
}

pub fn check_auprc(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..instances {
        let n = rng.random_range(4..30);
        let s = random_scored(&mut rng, n);
        close("auprc", i, auprc(&s).map_err(|e| e.to_string())?, auprc_oracle(&s))?;
    }
    Ok(())
}

pub fn check_fpr(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for i in 0..instances {
        let n = rng.random_range(4..30);
        let s = random_scored(&mut rng, n);
        let thr = [0.5, 0.3, 0.7][i % 3];
        let got = fpr_gap(&s, thr).map_err(|e| e.to_string())?;
        let (f, m) = fpr_oracle(&s, thr);
        close("fpr female", i, got.female, f)?;
        close("fpr male", i, got.male, m)?;
        close("delta fpr", i, got.delta, (f - m).abs())?;
    }
    Ok(())
}

pub fn check_sp(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for i in 0..instances {
        let n = rng.random_range(4..30);
        let s = random_scored(&mut rng, n);
        let got = sp_gap(&s, 0.5).map_err(|e| e.to_string())?;
        let (f, m) = sp_oracle(&s, 0.5);
        close("sp female", i, got.rates.female, f)?;
        close("sp male", i, got.rates.male, m)?;
        close("delta sp", i, got.rates.delta, (f - m).abs())?;
    }
    Ok(())
}

/// Runs until `instances` non-degenerate cases have been compared.
pub fn check_jaccard(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut compared = 0;
    let mut i = 0;
    while compared < instances {
        i += 1;
        let rows = rng.random_range(1..4);
        let n = rows * rng.random_range(2..8);
        let levels = if i % 2 == 0 { 1000 } else { 6 };
        let mut draw = || (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect::<Vec<f64>>();
        let (p, c) = (draw(), draw());
        let pct = [85.0, 50.0, 0.0, 100.0, 33.0][i % 5];
        let got = jaccard_entanglement(&map_of(&p, rows), &map_of(&c, rows), pct).map_err(|e| e.to_string())?;
        match jaccard_oracle(&p, &c, pct) {
            Some(want) => {
                if got[0].degenerate {
                    return Err(format!("jaccard instance {i}: flagged degenerate without a tie on the cut"));
                }
                close("jaccard", i, got[0].jaccard, want)?;
                compared += 1;
            }
            None => {
                if !got[0].degenerate {
                    return Err(format!("jaccard instance {i}: tie on the cut not flagged"));
                }
            }
        }
    }
    Ok(())
}

pub fn check_mann_whitney(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for i in 0..instances {
        let na = rng.random_range(1..=5);
        let nb = rng.random_range(1..=(9 - na).min(5));
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(0..6) as f64 * 0.25).collect::<Vec<f64>>();
        let (a, b) = (draw(na), draw(nb));
        let got = mann_whitney_u(&a, &b).map_err(|e| e.to_string())?;
        let (u, p) = mwu_oracle(&a, &b);
        if !got.exact {
            return Err(format!("mwu instance {i}: small samples not enumerated exactly"));
        }
        close("mwu U", i, got.u, u)?;
        close("mwu p", i, got.p_two_sided, p)?;
    }
    Ok(())
}

type Check = fn(usize) -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("AUPRC", check_auprc),
    ("FPR", check_fpr),
    ("SP", check_sp),
    ("Jaccard", check_jaccard),
    ("Mann-Whitney U", check_mann_whitney),
];
