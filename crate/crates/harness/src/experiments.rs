//! The four experiment families and their CSV tables.
//!
//! Each family turns one grid point `(α, seed)` into a block of rows. Every
//! row carries the seed, both α values, the split-manifest hash, the
//! primary-checkpoint hash and, where a mask is involved, the mask digest,
//! which together with the plan pin the row down exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use deconf_core::mask::{threshold_mask_per_matrix, MaskType, WeightMask};
use deconf_core::metrics::{jaccard_entanglement, MetricsReport};
use deconf_core::model::{Block, TrackedMatrixId};
use deconf_core::sampler::{read_examples, Example};

use crate::error::{Error, Result};
use crate::lab::{ecf_prefixes, fmt_f64, prefix_label, GridPoint, Provenance};
use crate::plan::ExperimentPlan;
use crate::pool::run_ordered;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Experiment {
    EcfProbe,
    DualFilter,
    Tradeoff,
    Entanglement,
}

impl Experiment {
    pub const ALL: [Experiment; 4] =
        [Experiment::EcfProbe, Experiment::DualFilter, Experiment::Tradeoff, Experiment::Entanglement];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::EcfProbe => "ecf_probe",
            Experiment::DualFilter => "df_sweep",
            Experiment::Tradeoff => "tradeoff",
            Experiment::Entanglement => "entanglement",
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            Experiment::EcfProbe => ECF_HEADER,
            Experiment::DualFilter => DF_HEADER,
            Experiment::Tradeoff => TRADEOFF_HEADER,
            Experiment::Entanglement => ENTANGLEMENT_HEADER,
        }
    }

    /// Columns that identify a row within its grid point.
    pub fn key_columns(self) -> &'static [&'static str] {
        match self {
            Experiment::EcfProbe => &["method", "prefix", "mask_pct"],
            Experiment::DualFilter => &["mask_type", "k"],
            Experiment::Tradeoff => &["method", "param"],
            Experiment::Entanglement => &["layer", "matrix"],
        }
    }

    /// α values this family runs at.
    pub fn alphas(self, plan: &ExperimentPlan) -> Vec<f64> {
        match self {
            Experiment::Tradeoff => vec![plan.tradeoff_alpha],
            _ => plan.alphas.clone(),
        }
    }

    pub fn rows(self, gp: &mut GridPoint<'_>) -> Result<Vec<Vec<String>>> {
        match self {
            Experiment::EcfProbe => ecf_rows(gp),
            Experiment::DualFilter => df_rows(gp),
            Experiment::Tradeoff => tradeoff_rows(gp),
            Experiment::Entanglement => entanglement_rows(gp),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

pub const ECF_HEADER: &[&str] = &[
    "alpha_train", "alpha_test", "seed", "method", "prefix", "mask_pct", "mask_size", "ablation_ratio", "auprc",
    "delta_fpr", "delta_sp", "fpr_female", "fpr_male", "manifest_hash", "checkpoint_hash", "mask_hash",
];

pub const DF_HEADER: &[&str] = &[
    "alpha_train", "alpha_test", "seed", "mask_type", "k", "mask_size", "universe_size", "ablation_ratio", "auprc",
    "delta_fpr", "delta_sp", "fpr_female", "fpr_male", "manifest_hash", "checkpoint_hash", "mask_hash",
];

pub const TRADEOFF_HEADER: &[&str] = &[
    "alpha_train", "alpha_test", "seed", "method", "param", "ablation_ratio", "auprc", "delta_fpr", "pareto",
    "manifest_hash", "checkpoint_hash", "mask_hash",
];

pub const ENTANGLEMENT_HEADER: &[&str] = &[
    "alpha_train", "alpha_test", "seed", "layer", "matrix", "jaccard", "degenerate", "manifest_hash",
    "checkpoint_hash",
];

fn head(p: &Provenance) -> Vec<String> {
    vec![p.alpha_train.clone(), p.alpha_test.clone(), p.seed.to_string()]
}

fn metric_cols(r: &MetricsReport) -> Vec<String> {
    [r.auprc, r.delta_fpr, r.delta_sp, r.fpr_by_group.female, r.fpr_by_group.male].map(fmt_f64).to_vec()
}

fn mask_source(p: &Provenance, what: &str) -> String {
    format!("{what};alpha_train={};seed={};checkpoint={}", p.alpha_train, p.seed, p.checkpoint_hash)
}

/// One ECF or CF measurement.
struct EcfPoint {
    method: &'static str,
    prefix: String,
    mask_pct: f64,
    mask: WeightMask,
    report: MetricsReport,
    mask_hash: String,
}

fn ecf_points(gp: &mut GridPoint<'_>) -> Result<Vec<EcfPoint>> {
    let p = gp.provenance();
    let universe = gp.primary.tracked_universe_size(true);
    let intact_mask = WeightMask::empty(universe);
    let mut out = vec![EcfPoint {
        method: "intact",
        prefix: "none".into(),
        mask_pct: 0.0,
        mask_hash: intact_mask.digest(&mask_source(&p, "intact"))?,
        report: gp.evaluate(&gp.primary)?,
        mask: intact_mask,
    }];
    for (i, blocks) in ecf_prefixes(gp.plan.model.n_layers).iter().enumerate() {
        let matrices: Vec<TrackedMatrixId> =
            gp.primary.tracked_ids().into_iter().filter(|id| blocks.contains(&id.block())).collect();
        let label = prefix_label(blocks);
        let pcts = gp.plan.ecf_mask_pcts.clone();
        for pct in pcts {
            let pi = gp.ecf_importance(i)?;
            let mask = threshold_mask_per_matrix(pi, &matrices, pct)?.with_universe(universe)?;
            let method = if blocks == &[Block::Cls] { "CF" } else { "ECF" };
            let mask_hash = mask.digest(&mask_source(&p, &format!("{method};{label};{}", fmt_f64(pct))))?;
            out.push(EcfPoint {
                method,
                prefix: label.clone(),
                mask_pct: pct,
                report: gp.evaluate_masked(&mask)?,
                mask,
                mask_hash,
            });
        }
    }
    Ok(out)
}

fn ecf_rows(gp: &mut GridPoint<'_>) -> Result<Vec<Vec<String>>> {
    let p = gp.provenance();
    Ok(ecf_points(gp)?
        .into_iter()
        .map(|e| {
            let mut row = head(&p);
            row.extend([
                e.method.to_string(),
                e.prefix,
                fmt_f64(e.mask_pct),
                e.mask.len().to_string(),
                fmt_f64(e.mask.ablation_ratio()),
            ]);
            row.extend(metric_cols(&e.report));
            row.extend([p.manifest_hash.clone(), p.checkpoint_hash.clone(), e.mask_hash]);
            row
        })
        .collect())
}

struct DfPoint {
    mask_type: MaskType,
    k: f64,
    mask: WeightMask,
    report: MetricsReport,
    mask_hash: String,
}

fn df_points(gp: &mut GridPoint<'_>) -> Result<Vec<DfPoint>> {
    let p = gp.provenance();
    let df = gp.dual_filter()?;
    let mut out = Vec::new();
    for &k in &gp.plan.df_k_grid {
        let masks = df.masks(k)?;
        for &t in &gp.plan.mask_types {
            let mask = masks.get(t).clone();
            let mask_hash = mask.digest(&mask_source(&p, &format!("DF;{t};{}", fmt_f64(k))))?;
            out.push(DfPoint { mask_type: t, k, report: gp.evaluate_masked(&mask)?, mask, mask_hash });
        }
    }
    Ok(out)
}

fn df_rows(gp: &mut GridPoint<'_>) -> Result<Vec<Vec<String>>> {
    let p = gp.provenance();
    Ok(df_points(gp)?
        .into_iter()
        .map(|d| {
            let mut row = head(&p);
            row.extend([
                d.mask_type.to_string(),
                fmt_f64(d.k),
                d.mask.len().to_string(),
                d.mask.universe_size().to_string(),
                fmt_f64(d.mask.ablation_ratio()),
            ]);
            row.extend(metric_cols(&d.report));
            row.extend([p.manifest_hash.clone(), p.checkpoint_hash.clone(), d.mask_hash]);
            row
        })
        .collect())
}

/// Indices of points not dominated by any other: no point has AUPRC at
/// least as high and ΔFPR at least as low with one of the two strict.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(auprc, fpr)| {
            !points.iter().any(|&(a, f)| a >= auprc && f <= fpr && (a > auprc || f < fpr))
        })
        .collect()
}

fn tradeoff_rows(gp: &mut GridPoint<'_>) -> Result<Vec<Vec<String>>> {
    let p = gp.provenance();
    // (method, param, ablation_ratio, report, mask_hash)
    let mut pts: Vec<(String, String, f64, MetricsReport, String)> = Vec::new();
    for e in ecf_points(gp)? {
        let param = match e.method {
            "intact" => "none".to_string(),
            "CF" => format!("pct={}", fmt_f64(e.mask_pct)),
            _ => format!("{}@pct={}", e.prefix, fmt_f64(e.mask_pct)),
        };
        pts.push((e.method.to_string(), param, e.mask.ablation_ratio(), e.report, e.mask_hash));
    }
    for d in df_points(gp)? {
        pts.push((
            format!("DF-{}", d.mask_type),
            format!("k={}", fmt_f64(d.k)),
            d.mask.ablation_ratio(),
            d.report,
            d.mask_hash,
        ));
    }
    let front = pareto_front(&pts.iter().map(|t| (t.3.auprc, t.3.delta_fpr)).collect::<Vec<_>>());
    Ok(pts
        .into_iter()
        .zip(front)
        .map(|((method, param, ratio, r, hash), pareto)| {
            let mut row = head(&p);
            row.extend([method, param, fmt_f64(ratio), fmt_f64(r.auprc), fmt_f64(r.delta_fpr), pareto.to_string()]);
            row.extend([p.manifest_hash.clone(), p.checkpoint_hash.clone(), hash]);
            row
        })
        .collect())
}

fn entanglement_rows(gp: &mut GridPoint<'_>) -> Result<Vec<Vec<String>>> {
    let p = gp.provenance();
    let dp = gp.delta_p.clone();
    let dc = gp.delta_c()?.clone();
    let entries = jaccard_entanglement(&dp, &dc, gp.plan.jaccard_percentile)?;
    Ok(entries
        .into_iter()
        .filter_map(|e| match e.matrix.block() {
            Block::Layer(l) => Some((l, e)),
            _ => None,
        })
        .map(|(layer, e)| {
            let mut row = head(&p);
            row.extend([
                layer.to_string(),
                e.matrix.kind().name().to_string(),
                fmt_f64(e.jaccard),
                e.degenerate.to_string(),
                p.manifest_hash.clone(),
                p.checkpoint_hash.clone(),
            ]);
            row
        })
        .collect())
}

/// The pool named by the plan, or a freshly generated one.
pub fn load_pool(plan: &ExperimentPlan) -> Result<Vec<Example>> {
    match &plan.pool_path {
        Some(path) => {
            let pool = read_examples(path).map_err(|e| match e {
                deconf_core::Error::Io(io) => deconf_core::Error::Data(format!("{}: {io}", path.display())),
                other => other,
            })?;
            if pool.is_empty() {
                return Err(deconf_core::Error::Data(format!("{}: empty pool", path.display())).into());
            }
            Ok(pool)
        }
        None => Ok(deconf_core::corpus::generate_pool(&plan.corpus)?),
    }
}

/// Grid points of one family in output order: α major, seed minor.
pub fn grid(plan: &ExperimentPlan, experiment: Experiment) -> Vec<(f64, u64)> {
    experiment.alphas(plan).into_iter().flat_map(|a| plan.seeds.iter().map(move |&s| (a, s))).collect()
}

/// Runs one family over its grid, handing each grid point's rows to `sink`
/// in grid order.
pub fn run_experiment(
    plan: &ExperimentPlan,
    pool: &[Example],
    experiment: Experiment,
    mut sink: impl FnMut(&[Vec<String>]) -> Result<()>,
) -> Result<()> {
    plan.validate()?;
    let jobs = grid(plan, experiment);
    run_ordered(
        &jobs,
        plan.workers,
        |&(alpha, seed)| {
            let mut gp = GridPoint::prepare(plan, pool, alpha, seed)?;
            experiment.rows(&mut gp)
        },
        |_, rows| sink(&rows),
    )
}

/// Appends rows to a CSV file, flushing after every row.
pub struct CsvAppender {
    writer: csv::Writer<std::fs::File>,
}

impl CsvAppender {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(header)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, row: &[String]) -> Result<()> {
        self.writer.write_record(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Runs a family and writes `<output_dir>/<name>.csv` plus a JSON sidecar
/// holding the plan. Returns the CSV path.
pub fn run_to_csv(plan: &ExperimentPlan, pool: &[Example], experiment: Experiment) -> Result<std::path::PathBuf> {
    let path = plan.output_dir.join(format!("{}.csv", experiment.name()));
    let mut out = CsvAppender::create(&path, experiment.header())?;
    run_experiment(plan, pool, experiment, |rows| rows.iter().try_for_each(|r| out.append(r)))?;
    let sidecar = serde_json::json!({ "experiment": experiment.name(), "plan": plan });
    std::fs::write(
        plan.output_dir.join(format!("{}.provenance.json", experiment.name())),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(path)
}

/// Serializes one row exactly as [`CsvAppender`] writes it.
pub fn csv_line(row: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(row)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

/// Recomputes the row identified by `recorded` (a data row of the family's
/// CSV, as written) from its provenance fields, and returns the
/// regenerated CSV line. Fails with [`Error::Mismatch`] when the bytes
/// differ.
pub fn regenerate_row(plan: &ExperimentPlan, pool: &[Example], experiment: Experiment, recorded: &str) -> Result<String> {
    let header = experiment.header();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(recorded.as_bytes());
    let record = reader
        .records()
        .next()
        .ok_or_else(|| Error::Config("empty row".into()))??;
    if record.len() != header.len() {
        return Err(Error::Config(format!("row has {} fields, {} expected", record.len(), header.len())));
    }
    let field = |name: &str| -> &str { &record[header.iter().position(|h| *h == name).expect("known column")] };
    let alpha: f64 = field("alpha_train").parse().map_err(|_| Error::Config("bad alpha_train".into()))?;
    let seed: u64 = field("seed").parse().map_err(|_| Error::Config("bad seed".into()))?;
    let key: Vec<&str> = experiment.key_columns().iter().map(|c| field(c)).collect();

    let mut gp = GridPoint::prepare(plan, pool, alpha, seed)?;
    let prov = gp.provenance();
    if prov.manifest_hash != field("manifest_hash") || prov.checkpoint_hash != field("checkpoint_hash") {
        return Err(Error::Mismatch {
            recorded: format!("manifest {} checkpoint {}", field("manifest_hash"), field("checkpoint_hash")),
            regenerated: format!("manifest {} checkpoint {}", prov.manifest_hash, prov.checkpoint_hash),
        });
    }
    let key_idx: Vec<usize> =
        experiment.key_columns().iter().map(|c| header.iter().position(|h| h == c).expect("key column")).collect();
    let row = experiment
        .rows(&mut gp)?
        .into_iter()
        .find(|r| key_idx.iter().map(|&i| r[i].as_str()).eq(key.iter().copied()))
        .ok_or_else(|| Error::Config(format!("no row with key {key:?} in the regenerated grid point")))?;
    let line = csv_line(&row)?;
    let recorded_line = if recorded.ends_with('\n') { recorded.to_string() } else { format!("{recorded}\n") };
    if line != recorded_line {
        return Err(Error::Mismatch { recorded: recorded_line.trim_end().into(), regenerated: line.trim_end().into() });
    }
    Ok(line)
}
