//! Trainable models: the residual convolutional backbone with its four
//! heads, the training loop, the ridge baseline on PCA features and the
//! checkpoint container.

mod checkpoint;
mod network;
mod ridge;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_container, write_container, Checkpoint, RidgeModel, Stamp, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    cross_entropy, gaussian_nll, gaussian_nll_value, mse_loss, ordinal_bce, pool_input, BackboneConfig, Forward, HeadVars, Mode,
    Network, RunningStats,
};
pub use ridge::{ridge_fit, ridge_predict, Ridge};
pub use train::{train, EpochLog, PlateauScheduler, Prediction, RawOutput, TrainConfig, TrainLog, TrainedNetwork};

use crate::error::{Error, Result};
use crate::signal::{PatientMeta, ProcessedEcg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One output trained with squared error.
    Direct,
    /// Mean and log variance trained with the Gaussian likelihood.
    Gaussian,
    /// `k` logits trained with cross entropy.
    Classification,
    /// `k - 1` rank logits trained with binary cross entropy.
    Ordinal,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Gaussian => "gaussian",
            Self::Classification => "classification",
            Self::Ordinal => "ordinal",
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Self::Classification | Self::Ordinal)
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "gaussian" => Ok(Self::Gaussian),
            "classification" => Ok(Self::Classification),
            "ordinal" => Ok(Self::Ordinal),
            _ => Err(Error::InvalidArgument(format!("unknown head {s:?}"))),
        }
    }
}

/// Network inputs (already pooled) with raw-unit targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    /// Values per record.
    pub record_len: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub meta: Vec<PatientMeta>,
}

impl Dataset {
    pub fn new(record_len: usize) -> Self {
        Self {
            record_len,
            ..Self::default()
        }
    }

    pub fn push(&mut self, input: &[f64], target: f64, meta: PatientMeta) -> Result<()> {
        if input.len() != self.record_len {
            return Err(Error::Shape {
                expected: self.record_len.to_string(),
                got: input.len().to_string(),
            });
        }
        self.inputs.extend_from_slice(input);
        self.targets.push(target);
        self.meta.push(meta);
        Ok(())
    }

    /// Pools processed records by `pool` and pairs them with `targets`.
    pub fn from_ecgs(ecgs: &[ProcessedEcg], targets: &[f64], pool: usize) -> Result<Self> {
        if ecgs.len() != targets.len() {
            return Err(Error::Shape {
                expected: format!("{} targets", ecgs.len()),
                got: targets.len().to_string(),
            });
        }
        let mut ds = Self::new(ProcessedEcg::LEN / pool.max(1));
        for (e, &y) in ecgs.iter().zip(targets) {
            ds.push(&pool_input(e.as_flat(), pool), y, e.meta.clone())?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.record_len..(i + 1) * self.record_len]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self::new(self.record_len);
        for &i in idx {
            out.inputs.extend_from_slice(self.input(i));
            out.targets.push(self.targets[i]);
            out.meta.push(self.meta[i].clone());
        }
        out
    }
}
