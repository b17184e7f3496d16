//! Fine-tuning loop: AdamW with linear warmup and decay, per-epoch seeded
//! shuffling, early stopping, and an optional per-batch [`DeltaSink`].

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::delta::{DeltaRecord, DeltaSink};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auprc, ScoredExample, DEFAULT_THRESHOLD};
use crate::model::{Block, EncoderModel, SeedRng};
use crate::sampler::{derive_seed, Example};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub early_stop_patience: usize,
    /// Peak learning rate. Zero is accepted and leaves every weight fixed.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Longer sequences are truncated.
    pub max_seq_len: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            early_stop_patience: 5,
            learning_rate: 1e-3,
            warmup_steps: 50,
            batch_size: 16,
            max_seq_len: 64,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.epochs == 0 || self.batch_size == 0 || self.max_seq_len == 0 {
            return bad("epochs, batch_size and max_seq_len must be positive".into());
        }
        if self.early_stop_patience >= self.epochs {
            return bad(format!("patience {} must be below epochs {}", self.early_stop_patience, self.epochs));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("weight_decay must be non-negative and grad_clip positive".into());
        }
        Ok(())
    }

    /// Learning rate for 0-based optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if total <= self.warmup_steps {
            return self.learning_rate;
        }
        let left = total.saturating_sub(step) as f64 / (total - self.warmup_steps) as f64;
        self.learning_rate * left.clamp(0.0, 1.0)
    }
}

/// Which label the loop fits and how epochs are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `y_p`, selected on validation AUPRC.
    Primary,
    /// `y_c`, selected on validation accuracy.
    Confounder,
}

impl Objective {
    fn label(self, e: &Example) -> u8 {
        match self {
            Objective::Primary => e.y_p,
            Objective::Confounder => e.y_c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation AUPRC for the primary objective, accuracy otherwise.
    pub valid_metric: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub steps: usize,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,valid_auprc,lr,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.valid_metric, r.lr, r.wall_ms);
        }
        out
    }
}

/// Patience-based early stopping on a metric where larger is better. Only a
/// strict improvement resets the counter, so ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

/// Verdict for one observed epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            Verdict { improved: true, stop: false }
        } else {
            self.stale += 1;
            Verdict { improved: false, stop: self.stale >= self.patience }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Per-parameter AdamW moments; frozen parameters get none.
struct AdamW {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: i32,
}

impl AdamW {
    fn new(model: &EncoderModel) -> Self {
        let slots = |_: ()| -> Vec<Option<Vec<f64>>> {
            model
                .params()
                .iter()
                .map(|p| model.is_trainable(p.block).then(|| vec![0.0; p.value.len()]))
                .collect()
        };
        Self { m: slots(()), v: slots(()), t: 0 }
    }

    fn step(&mut self, model: &mut EncoderModel, grads: &[Option<Vec<f64>>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let (Some(g), Some(m), Some(v)) = (&grads[i], &mut self.m[i], &mut self.v[i]) else { continue };
            // Decay applies to matrices only, not to biases or layer-norm vectors.
            let decay = if p.value.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps) + decay * *w;
                *w -= lr * update;
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], clip: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v = *v * clip / norm));
    }
    norm
}

fn truncated<'a>(examples: &'a [Example], idx: &[usize], max_len: usize) -> Vec<&'a [u32]> {
    idx.iter()
        .map(|&i| {
            let t = &examples[i].token_ids;
            &t[..t.len().min(max_len)]
        })
        .collect()
}

/// Positive-class scores for `examples`, truncated to `max_len`.
pub fn predict(model: &EncoderModel, examples: &[Example], max_len: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..examples.len()).collect();
    let max_len = max_len.min(model.config().max_seq_len);
    model.predict_proba(&truncated(examples, &idx, max_len))
}

/// Scores paired with labels, ready for the metric functions.
pub fn score_examples(model: &EncoderModel, examples: &[Example], max_len: usize) -> Result<Vec<ScoredExample>> {
    let scores = predict(model, examples, max_len)?;
    Ok(scores.iter().zip(examples).map(|(&s, e)| ScoredExample::new(s, e.y_p, e.y_c)).collect())
}

fn validation_metric(model: &EncoderModel, valid: &[Example], objective: Objective, cfg: &TrainConfig) -> Result<f64> {
    match objective {
        Objective::Primary => auprc(&score_examples(model, valid, cfg.max_seq_len)?),
        Objective::Confounder => {
            let scores = predict(model, valid, cfg.max_seq_len)?;
            let labels: Vec<u8> = valid.iter().map(|e| e.y_c).collect();
            accuracy(&scores, &labels, DEFAULT_THRESHOLD)
        }
    }
}

fn check_dataset(data: &[Example], what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation(format!("{what} set is empty")));
    }
    data.iter().try_for_each(Example::validate)
}

/// Generic loop behind [`train`] and [`train_confounder_phase`]. Trains a
/// copy of `model`; returns the best epoch's weights and the history.
pub fn fit(
    model: &EncoderModel,
    train: &[Example],
    valid: &[Example],
    objective: Objective,
    cfg: &TrainConfig,
    mut tracker: Option<&mut dyn DeltaSink>,
) -> Result<(EncoderModel, History)> {
    cfg.validate()?;
    check_dataset(train, "training")?;
    check_dataset(valid, "validation")?;
    let max_len = cfg.max_seq_len.min(model.config().max_seq_len);

    let mut model = model.clone();
    let mut opt = AdamW::new(&model);
    let mut shuffle_rng = SeedRng::seed_from_u64(derive_seed(cfg.seed, 0x5348));
    let mut dropout_rng = SeedRng::seed_from_u64(derive_seed(cfg.seed, 0x4452));
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let tracked: Vec<(usize, crate::model::TrackedMatrixId)> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| model.is_trainable(p.block))
        .filter_map(|(i, p)| p.tracked.map(|id| (i, id)))
        .collect();

    let mut history = History::default();
    let mut best: Option<EncoderModel> = None;
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seqs = truncated(train, batch, max_len);
            let labels: Vec<usize> = batch.iter().map(|&i| objective.label(&train[i]) as usize).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
                other => other,
            };
            let mut graph = Graph::new();
            let (logits, vars) = model.build(&mut graph, &seqs, Some(&mut dropout_rng)).map_err(diverged)?;
            let loss = graph.cross_entropy(logits, &labels).map_err(diverged)?;
            let loss_value = graph.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged { step, loss: loss_value });
            }
            graph.backward(loss)?;
            let mut grads: Vec<Option<Vec<f64>>> = model
                .params()
                .iter()
                .zip(&vars)
                .map(|(p, &v)| model.is_trainable(p.block).then(|| graph.grad(v).into_data()))
                .collect();
            drop(graph);
            if let Some(clip) = cfg.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            let before: Vec<Tensor> = match tracker {
                Some(_) => tracked.iter().map(|&(i, _)| model.params()[i].value.clone()).collect(),
                None => Vec::new(),
            };
            lr = cfg.lr_at(step, total_steps);
            opt.step(&mut model, &grads, lr, cfg);
            if !tracked.iter().all(|&(i, _)| model.params()[i].value.is_finite()) {
                return Err(Error::Diverged { step, loss: loss_value });
            }
            if let Some(sink) = tracker.as_deref_mut() {
                for (&(i, id), b) in tracked.iter().zip(&before) {
                    sink.accumulate(id, b, &model.params()[i].value)?;
                }
                sink.end_batch();
            }
            loss_sum += loss_value;
            step += 1;
        }

        let metric = validation_metric(&model, valid, objective, cfg)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            valid_metric: metric,
            lr,
            wall_ms: started.elapsed().as_millis(),
        });
        let verdict = stopper.observe(epoch, metric);
        if verdict.improved {
            best = Some(model.clone());
        }
        if verdict.stop {
            break;
        }
    }
    history.steps = step;
    history.best_epoch = stopper.best_epoch();
    history.best_metric = stopper.best();
    Ok((best.expect("at least one epoch runs"), history))
}

/// Fine-tunes `model` toward `y_p`, keeping the epoch with the highest
/// validation AUPRC.
pub fn train(
    model: &EncoderModel,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    tracker: Option<&mut dyn DeltaSink>,
) -> Result<(EncoderModel, History)> {
    fit(model, train, valid, Objective::Primary, cfg, tracker)
}

/// Outcome of confounder training on a copy of a fine-tuned model.
#[derive(Clone, Debug)]
pub struct ConfounderPhase {
    pub record: DeltaRecord,
    pub model: EncoderModel,
    pub history: History,
}

/// Trains a copy of `model` toward `y_c` with only `trainable` unfrozen,
/// accumulating every batch's updates into `record`. Both sets must be
/// restricted to `y_p = 0` by the caller.
pub fn train_confounder_phase(
    model: &EncoderModel,
    data: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    trainable: &[Block],
    mut record: DeltaRecord,
) -> Result<ConfounderPhase> {
    for (set, what) in [(data, "training"), (valid, "validation")] {
        if let Some(e) = set.iter().find(|e| e.y_p != 0) {
            return Err(Error::Validation(format!(
                "confounder {what} data must be healthy-only; '{}' has y_p = 1",
                e.source_id
            )));
        }
    }
    let mut copy = model.clone();
    copy.set_trainable(trainable)?;
    let (trained, history) = fit(&copy, data, valid, Objective::Confounder, cfg, Some(&mut record))?;
    Ok(ConfounderPhase { record, model: trained, history })
}
