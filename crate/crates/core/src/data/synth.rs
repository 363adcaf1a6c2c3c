use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

const MIN_CENTER_DISTANCE: f64 = 1.0;
const DRAWS_PER_CENTER: usize = 1000;

/// Isotropic Gaussian clusters around seeded centers.
///
/// Centers are drawn uniformly from a cube (half-width 1, widened if needed)
/// with pairwise distance at least 1. Samples are laid out class by class and
/// `true_labels` equals `labels`.
pub fn make_blobs<S: Scalar>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if num_classes < 2 || dim < 2 {
        return Err(Error::Parameter(format!(
            "blobs need at least 2 classes and 2 dims, got C={num_classes}, d={dim}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let centers = draw_centers(num_classes, dim, seed);
    let mut rng = rng_for(seed, &[stream::BLOB_SAMPLES]);
    let n = num_classes * per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &m in center {
                let z: f64 = rng.sample(StandardNormal);
                values.push(S::lit(m + sigma * z));
            }
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(n, dim, values)?;
    let provenance = format!("blobs:C={num_classes},per_class={per_class},d={dim},sigma={sigma},seed={seed}");
    Dataset::new(features, labels.clone(), num_classes, provenance)?.with_true_labels(labels)
}

fn draw_centers(num_classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, &[stream::BLOB_CENTERS]);
    let mut half_width = 1.0;
    'restart: loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        while centers.len() < num_classes {
            let accepted = (0..DRAWS_PER_CENTER).find_map(|_| {
                let cand: Vec<f64> = (0..dim)
                    .map(|_| rng.random_range(-half_width..=half_width))
                    .collect();
                centers
                    .iter()
                    .all(|c| distance(c, &cand) >= MIN_CENTER_DISTANCE)
                    .then_some(cand)
            });
            match accepted {
                Some(c) => centers.push(c),
                None => {
                    half_width *= 1.1;
                    continue 'restart;
                }
            }
        }
        return centers;
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
