//! Shuffled mini-batch index streams.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

/// Shuffles `indices` for `epoch` and chunks them into batches; the final
/// batch may be short.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order = indices.to_vec();
    order.shuffle(&mut rng_for(seed, &[stream::TRAIN_ORDER, epoch]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Indices for one multi-task optimization step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepIndices {
    pub noisy: Vec<usize>,
    pub clean: Vec<usize>,
}

/// One epoch of paired noisy/clean batches.
///
/// The epoch is a single pass over the noisy subset. The clean subset is
/// cycled, reshuffled on every wrap, so every clean batch has full size.
#[derive(Debug, Clone)]
pub struct MixedBatches {
    noisy_order: Vec<usize>,
    noisy_pos: usize,
    clean_pool: Vec<usize>,
    clean_order: Vec<usize>,
    clean_pos: usize,
    wraps: u64,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

pub fn mixed_batch_iterator<S: Scalar>(
    dataset: &Dataset<S>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<MixedBatches> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let noisy = dataset.indices(Split::NoisyTrain);
    let clean = dataset.indices(Split::CleanTrain);
    if noisy.is_empty() || clean.is_empty() {
        return Err(Error::Configuration(format!(
            "paired batches need both subsets (noisy: {}, clean: {}); use a single-set iterator for baselines",
            noisy.len(),
            clean.len()
        )));
    }
    let mut noisy_order = noisy;
    noisy_order.shuffle(&mut rng_for(seed, &[stream::NOISY_ORDER, epoch]));
    let mut it = MixedBatches {
        noisy_order,
        noisy_pos: 0,
        clean_order: Vec::new(),
        clean_pool: clean,
        clean_pos: 0,
        wraps: 0,
        batch_size,
        seed,
        epoch,
    };
    it.reshuffle_clean();
    Ok(it)
}

impl MixedBatches {
    fn clean_rng(&self) -> ChaCha8Rng {
        rng_for(self.seed, &[stream::CLEAN_ORDER, self.epoch, self.wraps])
    }

    fn reshuffle_clean(&mut self) {
        let mut order = self.clean_pool.clone();
        order.shuffle(&mut self.clean_rng());
        self.clean_order = order;
        self.clean_pos = 0;
    }

    pub fn steps(&self) -> usize {
        self.noisy_order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for MixedBatches {
    type Item = StepIndices;

    fn next(&mut self) -> Option<StepIndices> {
        if self.noisy_pos >= self.noisy_order.len() {
            return None;
        }
        let end = (self.noisy_pos + self.batch_size).min(self.noisy_order.len());
        let noisy = self.noisy_order[self.noisy_pos..end].to_vec();
        self.noisy_pos = end;
        let mut clean = Vec::with_capacity(self.batch_size);
        while clean.len() < self.batch_size {
            if self.clean_pos == self.clean_order.len() {
                self.wraps += 1;
                self.reshuffle_clean();
            }
            clean.push(self.clean_order[self.clean_pos]);
            self.clean_pos += 1;
        }
        Some(StepIndices { noisy, clean })
    }
}
