use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FlipMask, NoiseSpec, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Split and corruption record sufficient to replay an experiment's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub seed: u64,
    pub provenance: String,
    pub clean_fraction: f64,
    pub test_fraction: f64,
    pub noise: Option<NoiseSpec>,
    pub tags: Vec<Split>,
    pub flip_indices: Vec<usize>,
}

impl DataManifest {
    pub fn describe<S: Scalar>(
        dataset: &Dataset<S>,
        seed: u64,
        clean_fraction: f64,
        test_fraction: f64,
        noise: Option<NoiseSpec>,
    ) -> Self {
        Self {
            seed,
            provenance: dataset.provenance().to_owned(),
            clean_fraction,
            test_fraction,
            noise,
            tags: dataset.tags().to_vec(),
            flip_indices: FlipMask::from_dataset(dataset).flip_indices(),
        }
    }

    /// Re-applies the recorded tags, checking the recorded corruptions.
    pub fn apply<S: Scalar>(&self, dataset: &Dataset<S>) -> Result<Dataset<S>> {
        if dataset.true_labels().is_some() {
            let flips = FlipMask::from_dataset(dataset).flip_indices();
            if flips != self.flip_indices {
                return Err(Error::Consistency(format!(
                    "dataset has {} corrupted labels, manifest records {}",
                    flips.len(),
                    self.flip_indices.len()
                )));
            }
        }
        dataset.clone().with_tags(self.tags.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
