//! JSON checkpoint format for [`ModelParams`].
//!
//! Floats are written in shortest round-trip form, so save -> load -> save
//! reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use super::params::{Activation, Layer, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc<S> {
    format_version: u32,
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<Vec<S>>>,
    biases: Vec<Vec<S>>,
    rng_seed: u64,
}

impl<S: Scalar> ModelParams<S> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: self.layer_dims(),
            activation: self.activation(),
            weights: self.layers().iter().map(|l| l.weights().to_rows()).collect(),
            biases: self.layers().iter().map(|l| l.bias().to_vec()).collect(),
            rng_seed: self.seed(),
        };
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("checkpoint serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: CheckpointDoc<S> = serde_json::from_slice(bytes)?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint format_version {}",
                doc.format_version
            )));
        }
        let n = doc.layer_dims.len();
        if n < 2 || doc.weights.len() != n - 1 || doc.biases.len() != n - 1 {
            return Err(Error::Shape(format!(
                "checkpoint lists {n} dims but {} weight and {} bias blocks",
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for (k, (w, b)) in doc.weights.iter().zip(doc.biases).enumerate() {
            let weights = Matrix::from_rows(w)?;
            let (want_in, want_out) = (doc.layer_dims[k], doc.layer_dims[k + 1]);
            if weights.rows() != want_out || (want_out > 0 && weights.cols() != want_in) {
                return Err(Error::Shape(format!(
                    "layer {k} weights are {}x{}, layer_dims say {want_out}x{want_in}",
                    weights.rows(),
                    weights.cols()
                )));
            }
            layers.push(Layer::new(weights, b)?);
        }
        ModelParams::from_layers(layers, doc.activation, doc.rng_seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.to_checkpoint_bytes())
    }
}

pub(crate) fn fingerprint_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
