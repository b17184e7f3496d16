//! Evaluation metrics: AUPRC, group false-positive-rate gap, statistical
//! parity gap, the Mann-Whitney U test and Jaccard entanglement of
//! importance maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::delta::ImportanceMap;
use crate::error::{Error, Result};
use crate::mask::descending_order;
use crate::model::TrackedMatrixId;

/// Default decision threshold; a score counts as a positive prediction when
/// it is strictly greater.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Default binarization percentile for entanglement.
pub const DEFAULT_JACCARD_PERCENTILE: f64 = 85.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    /// Positive-class probability.
    pub score: f64,
    pub y_p: u8,
    pub y_c: u8,
}

impl ScoredExample {
    pub fn new(score: f64, y_p: u8, y_c: u8) -> Self {
        Self { score, y_p, y_c }
    }
}

fn check_scores(scored: &[ScoredExample]) -> Result<()> {
    for s in scored {
        if !s.score.is_finite() || !(0.0..=1.0).contains(&s.score) {
            return Err(Error::Domain(format!("score {} outside [0, 1]", s.score)));
        }
        if s.y_p > 1 || s.y_c > 1 {
            return Err(Error::Domain("labels must be binary".into()));
        }
    }
    Ok(())
}

/// Step-wise area under the precision-recall curve. Examples are swept in
/// descending score order; each group of tied scores forms one step whose
/// precision multiplies the recall it adds.
pub fn auprc(scored: &[ScoredExample]) -> Result<f64> {
    check_scores(scored)?;
    let positives = scored.iter().filter(|s| s.y_p == 1).count();
    if positives == 0 || positives == scored.len() {
        return Err(Error::UndefinedMetric(format!(
            "AUPRC needs both classes ({positives} positives of {})",
            scored.len()
        )));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score));
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let score = scored[order[i]].score;
        let mut group_tp = 0;
        while i < order.len() && scored[order[i]].score == score {
            group_tp += scored[order[i]].y_p as usize;
            seen += 1;
            i += 1;
        }
        tp += group_tp;
        area += (tp as f64 / seen as f64) * (group_tp as f64 / positives as f64);
    }
    Ok(area)
}

/// Per-group rates; `female` is `y_c = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub female: f64,
    pub male: f64,
    pub delta: f64,
}

impl GroupRates {
    fn new(female: f64, male: f64) -> Self {
        Self { female, male, delta: (female - male).abs() }
    }
}

fn positive_rate<'a>(examples: impl Iterator<Item = &'a ScoredExample>, threshold: f64) -> (f64, usize) {
    let (mut pos, mut n) = (0usize, 0usize);
    for e in examples {
        n += 1;
        pos += (e.score > threshold) as usize;
    }
    (if n == 0 { f64::NAN } else { pos as f64 / n as f64 }, n)
}

fn group_name(y_c: u8) -> &'static str {
    if y_c == 1 {
        "female (y_c=1)"
    } else {
        "male (y_c=0)"
    }
}

/// False-positive rate per group among `y_p = 0` examples.
pub fn fpr_gap(scored: &[ScoredExample], threshold: f64) -> Result<GroupRates> {
    check_scores(scored)?;
    let rate = |y_c: u8| -> Result<f64> {
        let (r, n) = positive_rate(scored.iter().filter(|e| e.y_p == 0 && e.y_c == y_c), threshold);
        if n == 0 {
            return Err(Error::UndefinedMetric(format!("no true negatives in group {}", group_name(y_c))));
        }
        Ok(r)
    };
    Ok(GroupRates::new(rate(1)?, rate(0)?))
}

/// Statistical parity gap together with a warning when the set is not
/// balanced in the way an α = 1 sample of equal marginals is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpGap {
    pub rates: GroupRates,
    pub warning: Option<String>,
}

/// Cell counts in `(y_p, y_c)` order (0,0), (0,1), (1,0), (1,1).
pub fn cell_counts(scored: &[ScoredExample]) -> [usize; 4] {
    let mut c = [0; 4];
    for e in scored {
        c[2 * e.y_p as usize + e.y_c as usize] += 1;
    }
    c
}

/// Positive-prediction rate gap between groups. Intended for a balanced
/// set; imbalance beyond one example per cell is reported, not rejected.
pub fn sp_gap(scored: &[ScoredExample], threshold: f64) -> Result<SpGap> {
    check_scores(scored)?;
    let rate = |y_c: u8| -> Result<f64> {
        let (r, n) = positive_rate(scored.iter().filter(|e| e.y_c == y_c), threshold);
        if n == 0 {
            return Err(Error::UndefinedMetric(format!("no examples in group {}", group_name(y_c))));
        }
        Ok(r)
    };
    let rates = GroupRates::new(rate(1)?, rate(0)?);
    let c = cell_counts(scored);
    let spread = c.iter().max().unwrap() - c.iter().min().unwrap();
    let warning = (spread > 1).then(|| format!("statistical parity measured on an unbalanced set: cell counts {c:?}"));
    Ok(SpGap { rates, warning })
}

/// AUPRC within one group, or `None` when that group lacks a class.
fn group_auprc(scored: &[ScoredExample], y_c: u8) -> Option<f64> {
    let g: Vec<ScoredExample> = scored.iter().filter(|e| e.y_c == y_c).copied().collect();
    auprc(&g).ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAuprc {
    pub female: Option<f64>,
    pub male: Option<f64>,
}

/// Everything reported for one evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auprc: f64,
    pub auprc_by_group: GroupAuprc,
    pub fpr_by_group: GroupRates,
    pub delta_fpr: f64,
    pub sp_by_group: GroupRates,
    pub delta_sp: f64,
    /// Test-set cell counts, (0,0), (0,1), (1,0), (1,1).
    pub n_by_cell: [usize; 4],
    pub threshold: f64,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// AUPRC and FPR on the (shifted) test set, statistical parity on the
    /// balanced set.
    pub fn evaluate(test: &[ScoredExample], balanced: &[ScoredExample], threshold: f64) -> Result<Self> {
        let fpr = fpr_gap(test, threshold)?;
        let sp = sp_gap(balanced, threshold)?;
        Ok(Self {
            auprc: auprc(test)?,
            auprc_by_group: GroupAuprc { female: group_auprc(test, 1), male: group_auprc(test, 0) },
            fpr_by_group: fpr,
            delta_fpr: fpr.delta,
            sp_by_group: sp.rates,
            delta_sp: sp.rates.delta,
            n_by_cell: cell_counts(test),
            threshold,
            warnings: sp.warning.into_iter().collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned two-column text.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ("auprc", format!("{:.4}", self.auprc)),
            ("auprc_female", opt(self.auprc_by_group.female)),
            ("auprc_male", opt(self.auprc_by_group.male)),
            ("fpr_female", format!("{:.4}", self.fpr_by_group.female)),
            ("fpr_male", format!("{:.4}", self.fpr_by_group.male)),
            ("delta_fpr", format!("{:.4}", self.delta_fpr)),
            ("sp_female", format!("{:.4}", self.sp_by_group.female)),
            ("sp_male", format!("{:.4}", self.sp_by_group.male)),
            ("delta_sp", format!("{:.4}", self.delta_sp)),
            ("threshold", format!("{}", self.threshold)),
            ("n_by_cell", format!("{:?}", self.n_by_cell)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<14}{v:>12}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Fraction of examples whose thresholded score matches `label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Validation(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| (s > threshold) == (y == 1)).count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of the first sample.
    pub u: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

/// Largest per-sample size for which the null distribution is enumerated.
pub const MWU_EXACT_MAX: usize = 8;

/// Midranks (1-based) of `values`.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Mann-Whitney U test. `U = R_a − n_a(n_a+1)/2` with midranks.
/// When both samples have at most [`MWU_EXACT_MAX`] values the p-value comes
/// from enumerating every split of the pooled ranks; otherwise from the
/// normal approximation with tie-corrected variance and continuity
/// correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("Mann-Whitney samples must be finite".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let shift = (na * (na + 1)) as f64 / 2.0;
    let u = ranks[..na].iter().sum::<f64>() - shift;
    let mean = (na * nb) as f64 / 2.0;
    let observed = (u - mean).abs();

    if na <= MWU_EXACT_MAX && nb <= MWU_EXACT_MAX {
        let n = na + nb;
        let (mut extreme, mut total) = (0u64, 0u64);
        for bits in 0u32..(1 << n) {
            if bits.count_ones() as usize != na {
                continue;
            }
            let r: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| ranks[i]).sum();
            total += 1;
            if (r - shift - mean).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        return Ok(MannWhitney { u, p_two_sided: extreme as f64 / total as f64, exact: true });
    }

    let n = (na + nb) as f64;
    let mut tie_term = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        tie_term += (j * j * j - j) as f64;
        i += j;
    }
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((observed - 0.5).max(0.0)) / var.sqrt();
        statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(MannWhitney { u, p_two_sided: p, exact: false })
}

/// Jaccard index of the high-change supports of two importance maps for one
/// matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardEntry {
    pub matrix: TrackedMatrixId,
    pub jaccard: f64,
    /// True when ties straddle the percentile cut in either map (the support
    /// then depends on the index tie-break) or both supports are empty.
    pub degenerate: bool,
}

/// Indices above the nearest-rank `percentile` of `values`: the
/// `n − ⌈percentile·n/100⌉` largest entries, ties to the lower index.
/// Also reports whether a tie straddles the cut.
pub fn percentile_support(values: &[f64], percentile: f64) -> (Vec<usize>, bool) {
    let n = values.len();
    let keep = n - crate::mask::ceil_count(percentile, n);
    let order = descending_order(values);
    let straddles = keep > 0 && keep < n && values[order[keep - 1]] == values[order[keep]];
    let mut support = order[..keep].to_vec();
    support.sort_unstable();
    (support, straddles)
}

/// Per-matrix Jaccard index of the two maps' supports above their own
/// `percentile`-th percentile, over the matrices both maps share.
pub fn jaccard_entanglement(pi_p: &ImportanceMap, pi_c: &ImportanceMap, percentile: f64) -> Result<Vec<JaccardEntry>> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Domain(format!("percentile {percentile} outside [0, 100]")));
    }
    if pi_p.keys().ne(pi_c.keys()) {
        return Err(Error::Validation("importance maps cover different matrices".into()));
    }
    let mut out = Vec::with_capacity(pi_p.len());
    for (id, tp) in pi_p {
        let tc = &pi_c[id];
        if tp.shape() != tc.shape() {
            return Err(Error::Validation(format!("{id}: shapes {:?} and {:?} differ", tp.shape(), tc.shape())));
        }
        let (sp, dp) = percentile_support(tp.data(), percentile);
        let (sc, dc) = percentile_support(tc.data(), percentile);
        let inter = sorted_intersection_len(&sp, &sc);
        let union = sp.len() + sc.len() - inter;
        let (jaccard, empty) = if union == 0 { (1.0, true) } else { (inter as f64 / union as f64, false) };
        out.push(JaccardEntry { matrix: *id, jaccard, degenerate: dp || dc || empty });
    }
    Ok(out)
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Jaccard values keyed by matrix, convenient for lookups.
pub fn jaccard_by_matrix(entries: &[JaccardEntry]) -> BTreeMap<TrackedMatrixId, f64> {
    entries.iter().map(|e| (e.matrix, e.jaccard)).collect()
}
