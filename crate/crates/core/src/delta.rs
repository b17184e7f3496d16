//! Per-batch weight-update tracking.
//!
//! A [`DeltaRecord`] sums normalized absolute updates `|after - before|` of
//! each tracked matrix after every optimizer step and divides by the number
//! of batches on [`DeltaRecord::finalize`], yielding the importance map that
//! masks are ranked on.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrackedMatrixId;
use crate::tensor::Tensor;

/// Finalized importance scores, one tensor per tracked matrix.
pub type ImportanceMap = BTreeMap<TrackedMatrixId, Tensor>;

/// Guard for the mean-abs and Frobenius denominators.
pub const NORM_EPS: f64 = 1e-12;

/// How each batch's `|Δ|` is scaled before summation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide by the mean absolute update of the matrix in that batch.
    #[default]
    PerBatchMeanAbs,
    /// Divide by the Frobenius norm of the matrix's update in that batch.
    PerBatchFrobenius,
    None,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-batch-mean-abs" => Ok(Self::PerBatchMeanAbs),
            "per-batch-frobenius" => Ok(Self::PerBatchFrobenius),
            "none" => Ok(Self::None),
            _ => Err(Error::Validation(format!("unknown normalization '{s}'"))),
        }
    }
}

/// Receiver of per-batch weight updates from a training loop.
pub trait DeltaSink {
    fn accumulate(&mut self, id: TrackedMatrixId, before: &Tensor, after: &Tensor) -> Result<()>;
    fn end_batch(&mut self);
}

#[derive(Clone, Debug)]
pub struct DeltaRecord {
    normalization: Normalization,
    sums: BTreeMap<TrackedMatrixId, Tensor>,
    batch_count: usize,
}

impl DeltaRecord {
    pub fn new(normalization: Normalization) -> Self {
        Self { normalization, sums: BTreeMap::new(), batch_count: 0 }
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn batch_count(&self) -> usize {
        self.batch_count
    }

    pub fn matrices(&self) -> impl Iterator<Item = &TrackedMatrixId> {
        self.sums.keys()
    }

    /// Running sum (not yet divided by the batch count).
    pub fn sum_for(&self, id: TrackedMatrixId) -> Option<&Tensor> {
        self.sums.get(&id)
    }

    /// `π = Σ / b` per matrix. Consumes the record.
    pub fn finalize(self) -> Result<ImportanceMap> {
        if self.batch_count == 0 {
            return Err(Error::EmptyRecord);
        }
        let inv = 1.0 / self.batch_count as f64;
        Ok(self
            .sums
            .into_iter()
            .map(|(id, mut t)| {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
                (id, t)
            })
            .collect())
    }
}

impl DeltaSink for DeltaRecord {
    fn accumulate(&mut self, id: TrackedMatrixId, before: &Tensor, after: &Tensor) -> Result<()> {
        if before.shape() != after.shape() {
            return Err(Error::Validation(format!(
                "{id}: before {:?} and after {:?} shapes differ",
                before.shape(),
                after.shape()
            )));
        }
        let slot = self.sums.entry(id).or_insert_with(|| Tensor::zeros(before.shape()));
        if slot.shape() != before.shape() {
            return Err(Error::Validation(format!(
                "{id}: update shape {:?} differs from accumulator {:?}",
                before.shape(),
                slot.shape()
            )));
        }
        let abs: Vec<f64> = after.data().iter().zip(before.data()).map(|(a, b)| (a - b).abs()).collect();
        let denom = match self.normalization {
            Normalization::None => 1.0,
            Normalization::PerBatchMeanAbs => {
                let mean = abs.iter().sum::<f64>() / abs.len() as f64;
                mean.max(NORM_EPS)
            }
            Normalization::PerBatchFrobenius => {
                let norm = abs.iter().map(|v| v * v).sum::<f64>().sqrt();
                norm.max(NORM_EPS)
            }
        };
        slot.data_mut().iter_mut().zip(&abs).for_each(|(s, a)| *s += a / denom);
        Ok(())
    }

    fn end_batch(&mut self) {
        self.batch_count += 1;
    }
}

const SIDECAR_FORMAT: &str = "deconf-importance";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    matrices: Vec<SidecarMatrix>,
}

#[derive(Serialize, Deserialize)]
struct SidecarMatrix {
    id: TrackedMatrixId,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Writes a finalized map as a JSON sidecar.
pub fn save_importance(map: &ImportanceMap, path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        format: SIDECAR_FORMAT.into(),
        version: 1,
        matrices: map
            .iter()
            .map(|(id, t)| SidecarMatrix { id: *id, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect(),
    };
    std::fs::write(path, serde_json::to_vec(&sidecar)?)?;
    Ok(())
}

pub fn load_importance(path: &Path) -> Result<ImportanceMap> {
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(path)?)?;
    if sidecar.format != SIDECAR_FORMAT {
        return Err(Error::Format(format!("not an importance sidecar: '{}'", sidecar.format)));
    }
    sidecar.matrices.into_iter().map(|m| Ok((m.id, Tensor::new(m.shape, m.data)?))).collect()
}
