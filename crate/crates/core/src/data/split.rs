use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

/// Stratified clean / test / noisy partition.
///
/// Per class, `round(n * fraction)` samples go to each of the clean and test
/// splits (at least one when the fraction is positive) and the rest become
/// `noisy_train`. Clean and test samples are reset to their true labels when
/// those are known.
pub fn split<S: Scalar>(
    dataset: &Dataset<S>,
    clean_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    for (name, f) in [("clean_fraction", clean_fraction), ("test_fraction", test_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {f}")));
        }
    }
    if clean_fraction + test_fraction >= 1.0 {
        return Err(Error::Parameter(format!(
            "clean_fraction + test_fraction = {} leaves no noisy training data",
            clean_fraction + test_fraction
        )));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        by_class.entry(dataset.reference_label(i)).or_default().push(i);
    }

    let needed = 1 + usize::from(clean_fraction > 0.0) + usize::from(test_fraction > 0.0);
    let mut tags = vec![Split::NoisyTrain; dataset.len()];
    let mut rng = rng_for(seed, &[stream::SPLIT]);
    for (class, mut members) in by_class {
        let n = members.len();
        if n < needed {
            return Err(Error::Data {
                row: None,
                message: format!("class {class} has {n} samples but the split needs {needed}"),
            });
        }
        let share = |f: f64| {
            if f > 0.0 {
                ((n as f64 * f).round() as usize).max(1)
            } else {
                0
            }
        };
        let n_test = share(test_fraction);
        let n_clean = share(clean_fraction).min(n - n_test - 1);
        members.shuffle(&mut rng);
        for &i in &members[..n_test] {
            tags[i] = Split::Test;
        }
        for &i in &members[n_test..n_test + n_clean] {
            tags[i] = Split::CleanTrain;
        }
    }

    let mut out = dataset.clone().with_tags(tags)?;
    if let Some(truth) = dataset.true_labels() {
        let truth = truth.to_vec();
        for (i, &t) in truth.iter().enumerate() {
            if out.tags()[i] != Split::NoisyTrain {
                out.labels_mut()[i] = t;
            }
        }
    }
    Ok(out)
}
