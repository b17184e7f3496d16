//! Sampled cell counts against an independent largest-remainder reference.

#![allow(dead_code)]

use deconf_core::corpus::{generate_pool, CorpusSpec};
use deconf_core::sampler::{conditionals_from_alpha, sample_split, ShiftConfig};

pub const ALPHAS: [f64; 5] = [0.2, 1.0 / 3.0, 1.0, 3.0, 5.0];
pub const SIZES: [usize; 2] = [150, 480];

/// Cell targets in `(y_p, y_c)` order (0,0), (0,1), (1,0), (1,1), derived
/// from the joint distribution written out cell by cell and apportioned by
/// repeated award of the largest outstanding remainder.
pub fn target_oracle(n: usize, alpha: f64, p_yp: f64, p_yc: f64) -> [usize; 4] {
    let p0 = p_yp / (p_yc * alpha + (1.0 - p_yc));
    let p1 = alpha * p0;
    let joint = [(1.0 - p0) * (1.0 - p_yc), (1.0 - p1) * p_yc, p0 * (1.0 - p_yc), p1 * p_yc];
    let quota: Vec<f64> = joint.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; 4];
    for (c, q) in counts.iter_mut().zip(&quota) {
        *c = (q + 1e-9).floor() as usize;
    }
    while counts.iter().sum::<usize>() < n {
        let mut best = 0;
        for i in 1..4 {
            if quota[i] - counts[i] as f64 > quota[best] - counts[best] as f64 + 1e-12 {
                best = i;
            }
        }
        counts[best] += 1;
    }
    counts
}

pub fn check_sampler(seeds: &[u64]) -> Result<(), String> {
    let pool = generate_pool(&CorpusSpec { pool_size_per_cell: 200, ..Default::default() }).map_err(|e| e.to_string())?;
    for &alpha in &ALPHAS {
        let (p1, p0) = conditionals_from_alpha(alpha, 0.5, 0.5).map_err(|e| e.to_string())?;
        let back = p1 / p0;
        if (back - alpha).abs() > 1e-12 {
            return Err(format!("alpha {alpha}: conditionals give back {back}"));
        }
        for &n in &SIZES {
            for &seed in seeds {
                let cfg = ShiftConfig { p_yp: 0.5, p_yc: 0.5, ..ShiftConfig::with_alpha(alpha, seed) };
                let split = sample_split(&pool, n, alpha, &cfg, seed).map_err(|e| e.to_string())?;
                let want = target_oracle(n, alpha, 0.5, 0.5);
                if split.cell_counts() != want {
                    return Err(format!("alpha {alpha}, n {n}, seed {seed}: counts {:?}, targets {want:?}", split.cell_counts()));
                }
            }
        }
    }
    Ok(())
}
