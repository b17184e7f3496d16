//! Randomized checks of the mask algebra against explicit set arithmetic.

#![allow(dead_code)]

use std::collections::BTreeSet;

use deconf_core::delta::ImportanceMap;
use deconf_core::mask::{threshold_mask_per_matrix, topk_set, Coord, DualFilter, WeightMask};
use deconf_core::model::{MatrixKind, TrackedMatrixId};
use deconf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pool_of_ids() -> Vec<TrackedMatrixId> {
    let mut ids = vec![TrackedMatrixId::emb()];
    for layer in 1..=2 {
        ids.extend(MatrixKind::LAYER_KINDS.iter().map(|&k| TrackedMatrixId::layer(layer, k).unwrap()));
    }
    ids
}

/// Random matrix set and shapes; half the draws use a coarse value grid so
/// ties are frequent.
pub fn random_shapes(rng: &mut ChaCha8Rng) -> Vec<(TrackedMatrixId, [usize; 2])> {
    let ids = pool_of_ids();
    let n = rng.random_range(1..=4);
    let mut chosen: BTreeSet<TrackedMatrixId> = BTreeSet::new();
    while chosen.len() < n {
        chosen.insert(ids[rng.random_range(0..ids.len())]);
    }
    chosen.into_iter().map(|id| (id, [rng.random_range(1..7), rng.random_range(1..7)])).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, shapes: &[(TrackedMatrixId, [usize; 2])]) -> ImportanceMap {
    let coarse = rng.random_bool(0.5);
    shapes
        .iter()
        .map(|&(id, [r, c])| {
            let data = (0..r * c)
                .map(|_| if coarse { rng.random_range(0..5) as f64 / 4.0 } else { rng.random::<f64>() })
                .collect();
            (id, Tensor::new(vec![r, c], data).unwrap())
        })
        .collect()
}

/// Top `⌊k·U/100⌋` coordinates by an independent full sort: value
/// descending, then coordinate ascending.
pub fn topk_oracle(pi: &ImportanceMap, k: f64) -> BTreeSet<Coord> {
    let mut all: Vec<(f64, Coord)> = pi
        .iter()
        .flat_map(|(&matrix, t)| t.data().iter().enumerate().map(move |(index, &v)| (v, Coord { matrix, index })))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let count = (k * all.len() as f64 / 100.0 + 1e-9).floor() as usize;
    all.into_iter().take(count).map(|(_, c)| c).collect()
}

fn set(m: &WeightMask) -> BTreeSet<Coord> {
    m.coords().iter().copied().collect()
}

fn scaled(pi: &ImportanceMap, c: f64) -> ImportanceMap {
    pi.iter()
        .map(|(id, t)| (*id, Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap()))
        .collect()
}

/// Partition identity, disjointness, nesting in `k`, the per-matrix
/// threshold count, and invariance under positive rescaling.
pub fn check_mask_algebra(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    for i in 0..instances {
        let shapes = random_shapes(&mut rng);
        let (dp, dc) = (random_map(&mut rng, &shapes), random_map(&mut rng, &shapes));
        let fail = |what: &str| Err(format!("instance {i}: {what}"));
        let df = DualFilter::new(&dp, &dc).map_err(|e| e.to_string())?;
        let k = rng.random_range(0..=100) as f64;
        let m = df.masks(k).map_err(|e| e.to_string())?;
        let (tp, tc) = (topk_oracle(&dp, k), topk_oracle(&dc, k));
        let (mi, md, mu) = (set(&m.intersection), set(&m.difference), set(&m.union));
        if mu != tc || set(&topk_set(&dc, k).unwrap()) != tc {
            return fail("M_I ∪ M_D differs from topk(Δ_c)");
        }
        if mi.union(&md).copied().collect::<BTreeSet<_>>() != mu {
            return fail("M_I ∪ M_D differs from the union mask");
        }
        if !mi.is_disjoint(&md) {
            return fail("M_I and M_D overlap");
        }
        if mi != tp.intersection(&tc).copied().collect() || md != tc.difference(&tp).copied().collect() {
            return fail("M_I or M_D differs from explicit set arithmetic");
        }

        let k2 = rng.random_range(k as usize..=100) as f64;
        if !set(&topk_set(&dc, k).unwrap()).is_subset(&set(&topk_set(&dc, k2).unwrap())) {
            return fail("topk not nested in k");
        }

        let pct = rng.random_range(0.0..=100.0);
        let ids: Vec<TrackedMatrixId> = dp.keys().copied().collect();
        let tm = threshold_mask_per_matrix(&dp, &ids, pct).map_err(|e| e.to_string())?;
        for (id, t) in &dp {
            let target = pct * t.len() as f64 / 100.0;
            let got = tm.count_in(*id);
            if (got as f64 - target).abs() > 1.0 {
                return fail(&format!("{id}: {got} masked, target {target}"));
            }
            let masked: BTreeSet<usize> =
                tm.coords().iter().filter(|c| c.matrix == *id).map(|c| c.index).collect();
            let lo = masked.iter().map(|&j| t.data()[j]).fold(f64::INFINITY, f64::min);
            let hi = (0..t.len()).filter(|j| !masked.contains(j)).map(|j| t.data()[j]).fold(f64::NEG_INFINITY, f64::max);
            if lo < hi {
                return fail(&format!("{id}: an unmasked entry outranks a masked one"));
            }
        }

        let c = [rng.random_range(0.01..100.0), 0.5, 1024.0][i % 3];
        let df_s = DualFilter::new(&scaled(&dp, c), &scaled(&dc, c)).map_err(|e| e.to_string())?;
        if df_s.masks(k).map_err(|e| e.to_string())? != m {
            return fail("dual masks change under positive rescaling");
        }
        if threshold_mask_per_matrix(&scaled(&dp, c), &ids, pct).unwrap() != tm {
            return fail("threshold mask changes under positive rescaling");
        }
    }
    Ok(())
}

/// `|M_D| = 0` at `k = 0` and `k = 100`; `|M_I ∪ M_D| = ⌊k·U/100⌋` at every
/// integer `k`.
pub fn check_mask_sizes(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..instances {
        let shapes = random_shapes(&mut rng);
        let (dp, dc) = (random_map(&mut rng, &shapes), random_map(&mut rng, &shapes));
        let df = DualFilter::new(&dp, &dc).map_err(|e| e.to_string())?;
        let u = df.universe_size();
        for k in 0..=100usize {
            let m = df.masks(k as f64).map_err(|e| e.to_string())?;
            if m.union.len() != k * u / 100 {
                return Err(format!("instance {i}, k={k}: |union| = {}, want {}", m.union.len(), k * u / 100));
            }
            if (k == 0 || k == 100) && !m.difference.is_empty() {
                return Err(format!("instance {i}, k={k}: |M_D| = {}", m.difference.len()));
            }
        }
    }
    Ok(())
}

