//! Synthetic label corruption.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Corrupt to a uniformly chosen different class.
    Symmetric,
    /// Corrupt to one designated partner class.
    PairFlip,
}

impl std::str::FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(NoiseModel::Symmetric),
            "pair_flip" | "pair-flip" => Ok(NoiseModel::PairFlip),
            other => Err(Error::Parameter(format!(
                "unknown noise model {other:?}; expected symmetric or pair_flip"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub rate: f64,
    pub seed: u64,
    /// Partner class for every class; defaults to `c -> (c + 1) mod C`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_map: Option<Vec<usize>>,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Self {
        Self {
            model: NoiseModel::Symmetric,
            rate,
            seed,
            pair_map: None,
        }
    }

    pub fn pair_flip(rate: f64, seed: u64, pair_map: Option<Vec<usize>>) -> Self {
        Self {
            model: NoiseModel::PairFlip,
            rate,
            seed,
            pair_map,
        }
    }

    fn resolved_pair_map(&self, num_classes: usize) -> Result<Vec<usize>> {
        let map = self
            .pair_map
            .clone()
            .unwrap_or_else(|| (0..num_classes).map(|c| (c + 1) % num_classes).collect());
        if map.len() != num_classes {
            return Err(Error::Parameter(format!(
                "pair map has {} entries for {num_classes} classes",
                map.len()
            )));
        }
        for (c, &m) in map.iter().enumerate() {
            if m >= num_classes || m == c {
                return Err(Error::Parameter(format!(
                    "pair map sends class {c} to {m}; partners must be other valid classes"
                )));
            }
        }
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Parameter(format!(
                "noise rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// `corrupted[i]` is true iff the given label differs from the true label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipMask {
    pub corrupted: Vec<bool>,
}

impl FlipMask {
    pub fn from_dataset<S: Scalar>(dataset: &Dataset<S>) -> Self {
        let corrupted = match dataset.true_labels() {
            Some(t) => dataset.labels().iter().zip(t).map(|(a, b)| a != b).collect(),
            None => vec![false; dataset.len()],
        };
        Self { corrupted }
    }

    pub fn flip_indices(&self) -> Vec<usize> {
        self.corrupted
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }
}

/// Relabels `noisy_train` samples starting from their true labels.
///
/// Each eligible sample is corrupted independently with probability `rate`.
/// Samples tagged `clean_train` or `test` are left as they are.
pub fn inject_noise<S: Scalar>(dataset: &Dataset<S>, spec: &NoiseSpec) -> Result<(Dataset<S>, FlipMask)> {
    spec.validate()?;
    let c = dataset.num_classes();
    let pair_map = match spec.model {
        NoiseModel::PairFlip => Some(spec.resolved_pair_map(c)?),
        NoiseModel::Symmetric => None,
    };
    let mut out = dataset.clone();
    out.ensure_true_labels();
    let truth = out.true_labels().expect("just ensured").to_vec();
    let mut rng = rng_for(spec.seed, &[stream::NOISE]);
    for (i, &t) in truth.iter().enumerate() {
        if out.tags()[i] != Split::NoisyTrain {
            continue;
        }
        let flip = rng.random::<f64>() < spec.rate;
        let label = match (&pair_map, flip) {
            (_, false) => t,
            (None, true) => (t + rng.random_range(1..c)) % c,
            (Some(map), true) => map[t],
        };
        out.labels_mut()[i] = label;
    }
    let mask = FlipMask::from_dataset(&out);
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;

    fn uniform_dataset(n: usize, c: usize) -> Dataset<f64> {
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        Dataset::new(Matrix::zeros(n, 1), labels, c, "test").unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = uniform_dataset(500, 4);
        let (out, mask) = inject_noise(&ds, &NoiseSpec::symmetric(0.0, 1)).unwrap();
        assert_eq!(out.labels(), ds.labels());
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn symmetric_rate_is_close() {
        let ds = uniform_dataset(10_000, 10);
        let (out, mask) = inject_noise(&ds, &NoiseSpec::symmetric(0.4, 7)).unwrap();
        let rate = mask.count() as f64 / 10_000.0;
        assert!((0.39..=0.41).contains(&rate), "{rate}");
        for i in 0..out.len() {
            assert_eq!(mask.corrupted[i], out.labels()[i] != out.true_labels().unwrap()[i]);
        }
    }

    #[test]
    fn pair_flip_rates() {
        let ds = uniform_dataset(100_000, 2);
        let spec = NoiseSpec::pair_flip(1.0, 3, Some(vec![1, 0]));
        assert!(matches!(inject_noise(&ds, &spec), Err(Error::Parameter(_))));
        let spec = NoiseSpec::pair_flip(0.999, 3, Some(vec![1, 0]));
        let (out, mask) = inject_noise(&ds, &spec).unwrap();
        let rate = mask.count() as f64 / 100_000.0;
        assert!((rate - 0.999).abs() <= 0.005);
        for i in mask.flip_indices() {
            assert_eq!(out.labels()[i], 1 - out.true_labels().unwrap()[i]);
        }
    }

    #[test]
    fn invalid_pair_maps() {
        let ds = uniform_dataset(10, 3);
        for map in [vec![0, 2, 1], vec![1, 2], vec![1, 2, 5]] {
            let spec = NoiseSpec::pair_flip(0.2, 1, Some(map));
            assert!(matches!(inject_noise(&ds, &spec), Err(Error::Parameter(_))));
        }
        assert!(inject_noise(&ds, &NoiseSpec::symmetric(-0.1, 1)).is_err());
    }

    #[test]
    fn only_noisy_train_samples_change() {
        let ds = uniform_dataset(1000, 5);
        let tags: Vec<Split> = (0..1000)
            .map(|i| if i % 2 == 0 { Split::Test } else { Split::NoisyTrain })
            .collect();
        let ds = ds.with_tags(tags).unwrap();
        let (_, mask) = inject_noise(&ds, &NoiseSpec::symmetric(0.9, 2)).unwrap();
        assert!(mask.flip_indices().iter().all(|i| i % 2 == 1));
    }

    #[test]
    fn same_seed_same_labels() {
        let ds = uniform_dataset(2000, 6);
        let a = inject_noise(&ds, &NoiseSpec::symmetric(0.3, 11)).unwrap();
        let b = inject_noise(&ds, &NoiseSpec::symmetric(0.3, 11)).unwrap();
        assert_eq!(a.0, b.0);
    }
}
