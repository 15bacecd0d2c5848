//! Synthetic datasets, Dirichlet label partitioning and reference trainers.

mod nn;
mod partition;
mod synth;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nn::{
    evaluate, finite_difference_grad, init_params, loss_and_grad, train, Arch, Batch, TrainConfig,
};
pub use partition::{dirichlet_partition, label_distribution, tv_heterogeneity, PartitionSpec};
pub use synth::{make_blobs, make_blobs_with_centers, make_regression};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("alpha must be a positive finite number, got {0}")]
    InvalidAlpha(f64),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{n_clients} clients cannot each receive a sample from {n_samples} samples")]
    TooFewSamples { n_samples: usize, n_clients: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// Class ids in `[0, classes)`.
    Classes { ids: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_ids(&self) -> Option<(&[usize], usize)> {
        match self {
            Labels::Classes { ids, classes } => Some((ids, *classes)),
            Labels::Values(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Labels,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Labels) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(DataError::ShapeMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Labels::Classes { ids, classes } = &labels {
            if let Some(bad) = ids.iter().find(|&&c| c >= *classes) {
                return Err(DataError::InvalidArgument(format!(
                    "class id {bad} outside [0, {classes})"
                )));
            }
        }
        Ok(LabeledDataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> Option<usize> {
        self.labels.class_ids().map(|(_, k)| k)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let features = self.features.select(Axis(0), indices);
        let labels = match &self.labels {
            Labels::Classes { ids, classes } => Labels::Classes {
                ids: indices.iter().map(|&i| ids[i]).collect(),
                classes: *classes,
            },
            Labels::Values(v) => Labels::Values(indices.iter().map(|&i| v[i]).collect()),
        };
        LabeledDataset { features, labels }
    }

    /// First `n_train` rows and the rest.
    pub fn split(&self, n_train: usize) -> (LabeledDataset, LabeledDataset) {
        let n_train = n_train.min(self.len());
        let head: Vec<usize> = (0..n_train).collect();
        let tail: Vec<usize> = (n_train..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}
