//! One grid point `(α, seed)`: its benchmark, the shared initialization,
//! the fine-tuned primary model with its tracked updates, and lazily the
//! confounder-side runs.

use std::collections::BTreeMap;

use deconf_core::delta::{DeltaRecord, ImportanceMap};
use deconf_core::mask::{without_head, DualFilter, WeightMask};
use deconf_core::metrics::MetricsReport;
use deconf_core::model::{Block, EncoderModel};
use deconf_core::sampler::{healthy_only, make_benchmark, Benchmark, Example};
use deconf_core::training::{score_examples, train, train_confounder_phase, History};

use crate::error::Result;
use crate::plan::ExperimentPlan;

/// Provenance shared by every row produced from one grid point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub alpha_train: String,
    pub alpha_test: String,
    pub manifest_hash: String,
    pub checkpoint_hash: String,
}

pub struct GridPoint<'p> {
    pub plan: &'p ExperimentPlan,
    pub alpha: f64,
    pub seed: u64,
    pub bench: Benchmark,
    pub init: EncoderModel,
    pub primary: EncoderModel,
    pub primary_history: History,
    /// π of the primary fine-tuning run, every tracked matrix.
    pub delta_p: ImportanceMap,
    confounder: Option<ImportanceMap>,
    ecf: BTreeMap<usize, ImportanceMap>,
}

impl<'p> GridPoint<'p> {
    /// Samples the benchmark and fine-tunes the primary model.
    pub fn prepare(plan: &'p ExperimentPlan, pool: &[Example], alpha: f64, seed: u64) -> Result<Self> {
        let bench = make_benchmark(pool, &plan.shift_for(alpha, seed))?;
        let init = EncoderModel::new(plan.model.clone(), seed)?;
        let mut record = DeltaRecord::new(plan.normalization);
        let (primary, primary_history) =
            train(&init, &bench.train.examples, &bench.valid.examples, &plan.train_for(seed), Some(&mut record))?;
        Ok(Self {
            plan,
            alpha,
            seed,
            bench,
            init,
            primary,
            primary_history,
            delta_p: record.finalize()?,
            confounder: None,
            ecf: BTreeMap::new(),
        })
    }

    pub fn alpha_test(&self) -> f64 {
        self.bench.test.alpha
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            alpha_train: fmt_f64(self.alpha),
            alpha_test: fmt_f64(self.alpha_test()),
            manifest_hash: self.bench.manifest_hash(),
            checkpoint_hash: self.primary.fingerprint(),
        }
    }

    fn healthy(&self) -> (Vec<Example>, Vec<Example>) {
        (healthy_only(&self.bench.train.examples), healthy_only(&self.bench.valid.examples))
    }

    /// π of a model trained from the shared initialization toward `y_c` on
    /// healthy examples, every block trainable.
    pub fn delta_c(&mut self) -> Result<&ImportanceMap> {
        if self.confounder.is_none() {
            let (train, valid) = self.healthy();
            let blocks = deconf_core::model::all_blocks(self.plan.model.n_layers);
            let phase = train_confounder_phase(
                &self.init,
                &train,
                &valid,
                &self.plan.train_for(self.seed),
                &blocks,
                DeltaRecord::new(self.plan.normalization),
            )?;
            self.confounder = Some(phase.record.finalize()?);
        }
        Ok(self.confounder.as_ref().expect("just computed"))
    }

    pub fn dual_filter(&mut self) -> Result<DualFilter> {
        let dp = without_head(&self.delta_p);
        let dc = without_head(self.delta_c()?);
        Ok(DualFilter::new(&dp, &dc)?)
    }

    /// π of the confounder phase on the fine-tuned primary model with the
    /// given unfreezing prefix.
    pub fn ecf_importance(&mut self, prefix_index: usize) -> Result<&ImportanceMap> {
        if !self.ecf.contains_key(&prefix_index) {
            let blocks = ecf_prefixes(self.plan.model.n_layers)[prefix_index].clone();
            let (train, valid) = self.healthy();
            let phase = train_confounder_phase(
                &self.primary,
                &train,
                &valid,
                &self.plan.train_for(self.seed),
                &blocks,
                DeltaRecord::new(self.plan.normalization),
            )?;
            self.ecf.insert(prefix_index, phase.record.finalize()?);
        }
        Ok(&self.ecf[&prefix_index])
    }

    /// AUPRC and ΔFPR on the shifted test split, ΔSP on the balanced split.
    pub fn evaluate(&self, model: &EncoderModel) -> Result<MetricsReport> {
        let len = self.plan.train.max_seq_len;
        let test = score_examples(model, &self.bench.test.examples, len)?;
        let balanced = score_examples(model, &self.bench.balanced.examples, len)?;
        Ok(MetricsReport::evaluate(&test, &balanced, self.plan.threshold)?)
    }

    /// Evaluates the primary model with `mask` applied to a copy.
    pub fn evaluate_masked(&self, mask: &WeightMask) -> Result<MetricsReport> {
        self.evaluate(&self.primary.apply_mask(mask)?)
    }
}

/// Unfreezing prefixes, top down: `{cls}`, `{cls, layerN}`, …, all layers,
/// and finally everything including the embedding.
pub fn ecf_prefixes(n_layers: usize) -> Vec<Vec<Block>> {
    let mut out = vec![vec![Block::Cls]];
    for top in (1..=n_layers).rev() {
        let mut blocks = vec![Block::Cls];
        blocks.extend((top..=n_layers).map(Block::Layer));
        out.push(blocks);
    }
    let mut all = out.last().expect("non-empty").clone();
    all.push(Block::Emb);
    out.push(all);
    out
}

/// `cls+layer4+layer3` style label.
pub fn prefix_label(blocks: &[Block]) -> String {
    let mut sorted = blocks.to_vec();
    sorted.sort_by_key(|b| match b {
        Block::Cls => (0, 0),
        Block::Layer(l) => (1, usize::MAX - l),
        Block::Emb => (2, 0),
    });
    sorted.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("+")
}

/// Shortest round-trip decimal form; stable across runs and platforms.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
