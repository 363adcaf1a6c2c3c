//! Datasets, label-noise simulation, splitting and batching.

mod batches;
mod io;
mod manifest;
mod noise;
mod split;
mod synth;

pub use batches::{mixed_batch_iterator, shuffled_batches, MixedBatches, StepIndices};
pub use io::{load_csv, load_dataset, load_idx, write_csv, DataSource};
pub use manifest::DataManifest;
pub use noise::{inject_noise, FlipMask, NoiseModel, NoiseSpec};
pub use split::split;
pub use synth::make_blobs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::scalar::Scalar;

/// Role of a sample in the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    CleanTrain,
    NoisyTrain,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean_train" | "clean" => Ok(Split::CleanTrain),
            "noisy_train" | "noisy" => Ok(Split::NoisyTrain),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!(
                "unknown split {other:?}; expected clean_train, noisy_train or test"
            ))),
        }
    }
}

/// Labeled feature matrix with per-sample split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    features: Matrix<S>,
    labels: Vec<usize>,
    tags: Vec<Split>,
    true_labels: Option<Vec<usize>>,
    num_classes: usize,
    provenance: String,
}

impl<S: Scalar> Dataset<S> {
    /// Builds a dataset with every sample tagged `noisy_train`.
    pub fn new(
        features: Matrix<S>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        check_labels(&labels, num_classes)?;
        let n = labels.len();
        Ok(Self {
            features,
            labels,
            tags: vec![Split::NoisyTrain; n],
            true_labels: None,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn with_true_labels(mut self, true_labels: Vec<usize>) -> Result<Self> {
        if true_labels.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} true labels for {} samples",
                true_labels.len(),
                self.labels.len()
            )));
        }
        check_labels(&true_labels, self.num_classes)?;
        self.true_labels = Some(true_labels);
        Ok(self)
    }

    pub fn with_tags(mut self, tags: Vec<Split>) -> Result<Self> {
        if tags.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} tags for {} samples",
                tags.len(),
                self.labels.len()
            )));
        }
        self.tags = tags;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix<S> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    /// True label when known, otherwise the given label.
    pub fn reference_label(&self, i: usize) -> usize {
        self.true_labels.as_ref().map_or(self.labels[i], |t| t[i])
    }

    pub fn tags(&self) -> &[Split] {
        &self.tags
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Ascending indices carrying `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Ascending indices of all training samples (clean and noisy).
    pub fn train_indices(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != Split::Test)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row-wise one-hot encoding of the given labels of `indices`.
    pub fn one_hot_labels(&self, indices: &[usize]) -> Matrix<S> {
        let mut m = Matrix::zeros(indices.len(), self.num_classes);
        for (r, &i) in indices.iter().enumerate() {
            m.set(r, self.labels[i], S::one());
        }
        m
    }

    pub(crate) fn labels_mut(&mut self) -> &mut Vec<usize> {
        &mut self.labels
    }

    pub(crate) fn ensure_true_labels(&mut self) {
        if self.true_labels.is_none() {
            self.true_labels = Some(self.labels.clone());
        }
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
        return Err(Error::Data {
            row: Some(i),
            message: format!("label {} outside [0, {num_classes})", labels[i]),
        });
    }
    Ok(())
}
