//! Analytic gradients of the batch losses used for teacher and student training.

use super::loss::{cross_entropy_slice, kl_div_slice, softmax_t_into};
use super::matrix::Matrix;
use super::params::{Layer, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::{Scalar, PROB_FLOOR};

/// The objective to differentiate. Targets are row-wise distributions.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a, S> {
    /// Mean cross-entropy of `softmax(logits)` against `targets`.
    CrossEntropy { targets: &'a Matrix<S> },
    /// Mean `KL(targets || softmax(logits / T))`.
    KlDiv {
        targets: &'a Matrix<S>,
        temperature: S,
    },
    /// `alpha * T^2 * KL` on the main batch plus cross-entropy on a paired clean batch.
    Total {
        guidance: &'a Matrix<S>,
        clean_inputs: &'a Matrix<S>,
        clean_targets: &'a Matrix<S>,
        alpha: S,
        temperature: S,
    },
}

/// Loss values of one batch. For single-branch specs the unused term is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<S> {
    pub total: S,
    pub guidance: S,
    pub clean: S,
}

/// Gradient set laid out like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        Self {
            layers: params
                .layers()
                .iter()
                .map(|l| Layer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    /// Values in the same flat order as [`ModelParams::param_mut`].
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights().as_slice());
            out.extend_from_slice(l.bias());
        }
        out
    }

    pub fn matches(&self, params: &ModelParams<S>) -> bool {
        self.layers.len() == params.layers().len()
            && self.layers.iter().zip(params.layers()).all(|(g, p)| {
                g.in_dim() == p.in_dim() && g.out_dim() == p.out_dim()
            })
    }

    fn add_scaled(&mut self, other: &Gradients<S>, scale: S) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights_mut().iter_mut().zip(b.weights().as_slice()) {
                *x += scale * *y;
            }
            for (x, y) in a.bias_mut().iter_mut().zip(b.bias()) {
                *x += scale * *y;
            }
        }
    }
}

fn check_temperature<S: Scalar>(t: S) -> Result<()> {
    if !(t > S::zero()) || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn check_targets<S: Scalar>(logits: &Matrix<S>, targets: &Matrix<S>, what: &str) -> Result<()> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(Error::Shape(format!(
            "{what} targets are {}x{} but the network produced {}x{}",
            targets.rows(),
            targets.cols(),
            logits.rows(),
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean softmax-divergence loss over a batch plus its gradient w.r.t. the logits.
///
/// With `kl == false` this is cross-entropy at `t`; otherwise KL divergence. Both
/// share the gradient `(sum_i w_i q_j - w_j) / T` where `w` are the target
/// weights of entries whose probability is above the log clamp.
fn softmax_loss_grad<S: Scalar>(
    logits: &Matrix<S>,
    targets: &Matrix<S>,
    t: S,
    kl: bool,
) -> (S, Matrix<S>) {
    let rows = logits.rows();
    let n = S::lit(rows.max(1) as f64);
    let floor = S::lit(PROB_FLOOR);
    let mut grad = Matrix::zeros(rows, logits.cols());
    let mut q = vec![S::zero(); logits.cols()];
    let mut loss = S::zero();
    for b in 0..rows {
        softmax_t_into(logits.row(b), t, &mut q);
        let target = targets.row(b);
        loss += if kl {
            kl_div_slice(target, &q)
        } else {
            cross_entropy_slice(&q, target)
        };
        let active = |i: usize| target[i] != S::zero() && q[i] >= floor;
        let weight_sum: S = (0..q.len()).filter(|&i| active(i)).map(|i| target[i]).sum();
        for (j, g) in grad.row_mut(b).iter_mut().enumerate() {
            let w = if active(j) { target[j] } else { S::zero() };
            *g = (q[j] * weight_sum - w) / (t * n);
        }
    }
    (loss / n, grad)
}

fn backprop<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Matrix<S>,
    dlogits: Matrix<S>,
) -> Result<Gradients<S>> {
    let trace = params.forward_trace(batch)?;
    let mut grads = Gradients::zeros_like(params);
    let mut delta = dlogits;
    for k in (0..params.layers().len()).rev() {
        let layer = &params.layers()[k];
        let input = &trace.activations[k];
        let g = &mut grads.layers[k];
        let in_dim = layer.in_dim();
        for b in 0..delta.rows() {
            let d = delta.row(b);
            let x = input.row(b);
            for (o, &dz) in d.iter().enumerate() {
                if dz == S::zero() {
                    continue;
                }
                let row = &mut g.weights_mut()[o * in_dim..(o + 1) * in_dim];
                for (w, &xi) in row.iter_mut().zip(x) {
                    *w += dz * xi;
                }
                g.bias_mut()[o] += dz;
            }
        }
        if k == 0 {
            break;
        }
        let pre = &trace.pre_activations[k - 1];
        let mut prev = Matrix::zeros(delta.rows(), in_dim);
        for b in 0..delta.rows() {
            let d = delta.row(b);
            let out = prev.row_mut(b);
            for (o, &dz) in d.iter().enumerate() {
                if dz == S::zero() {
                    continue;
                }
                for (p, &w) in out.iter_mut().zip(layer.weights().row(o)) {
                    *p += dz * w;
                }
            }
            for (p, &z) in out.iter_mut().zip(pre.row(b)) {
                *p *= params.activation().derivative(z);
            }
        }
        delta = prev;
    }
    Ok(grads)
}

/// Mean batch loss only, without gradients.
pub fn loss_value<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Matrix<S>,
    spec: &LossSpec<'_, S>,
) -> Result<LossTerms<S>> {
    evaluate(params, batch, spec, false).map(|(terms, _)| terms)
}

/// Exact gradients of the mean batch loss with respect to every weight and bias.
///
/// For [`LossSpec::Total`], `batch` holds the noisy inputs paired with `guidance`.
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Matrix<S>,
    spec: &LossSpec<'_, S>,
) -> Result<(LossTerms<S>, Gradients<S>)> {
    evaluate(params, batch, spec, true).map(|(terms, g)| (terms, g.expect("requested")))
}

fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Matrix<S>,
    spec: &LossSpec<'_, S>,
    want_grad: bool,
) -> Result<(LossTerms<S>, Option<Gradients<S>>)> {
    match *spec {
        LossSpec::CrossEntropy { targets } => {
            let logits = params.forward(batch)?;
            check_targets(&logits, targets, "cross-entropy")?;
            let (loss, dz) = softmax_loss_grad(&logits, targets, S::one(), false);
            let grads = want_grad.then(|| backprop(params, batch, dz)).transpose()?;
            let terms = LossTerms {
                total: loss,
                guidance: S::zero(),
                clean: loss,
            };
            Ok((terms, grads))
        }
        LossSpec::KlDiv {
            targets,
            temperature,
        } => {
            check_temperature(temperature)?;
            let logits = params.forward(batch)?;
            check_targets(&logits, targets, "guidance")?;
            let (loss, dz) = softmax_loss_grad(&logits, targets, temperature, true);
            let grads = want_grad.then(|| backprop(params, batch, dz)).transpose()?;
            let terms = LossTerms {
                total: loss,
                guidance: loss,
                clean: S::zero(),
            };
            Ok((terms, grads))
        }
        LossSpec::Total {
            guidance,
            clean_inputs,
            clean_targets,
            alpha,
            temperature,
        } => {
            check_temperature(temperature)?;
            if !(alpha >= S::zero()) || !alpha.is_finite() {
                return Err(Error::Parameter(format!(
                    "alpha must be nonnegative, got {alpha}"
                )));
            }
            let noisy_logits = params.forward(batch)?;
            check_targets(&noisy_logits, guidance, "guidance")?;
            let clean_logits = params.forward(clean_inputs)?;
            check_targets(&clean_logits, clean_targets, "clean")?;
            let (lg, dz_g) = softmax_loss_grad(&noisy_logits, guidance, temperature, true);
            let (lc, dz_c) = softmax_loss_grad(&clean_logits, clean_targets, S::one(), false);
            let weight = alpha * temperature * temperature;
            let grads = if want_grad {
                let mut g = backprop(params, clean_inputs, dz_c)?;
                // A zero-weight branch must not touch the clean gradient at all.
                if alpha != S::zero() {
                    g.add_scaled(&backprop(params, batch, dz_g)?, weight);
                }
                Some(g)
            } else {
                None
            };
            let total = if alpha == S::zero() { lc } else { weight * lg + lc };
            let terms = LossTerms {
                total,
                guidance: lg,
                clean: lc,
            };
            Ok((terms, grads))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> ModelParams<f64> {
        let mut p = ModelParams::init(dims, rng.random()).unwrap();
        for i in 0..p.param_count() {
            *p.param_mut(i) += rng.random_range(-0.3..0.3);
        }
        p
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn random_dist_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        let mut m = Matrix::zeros(r, c);
        for b in 0..r {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = v.iter().sum();
            for (j, x) in v.iter().enumerate() {
                m.set(b, j, x / s);
            }
        }
        m
    }

    fn max_fd_error(params: &ModelParams<f64>, batch: &Matrix<f64>, spec: &LossSpec<'_, f64>) -> f64 {
        let (_, grads) = backward(params, batch, spec).unwrap();
        let analytic = grads.flatten();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            *plus.param_mut(i) += h;
            let mut minus = params.clone();
            *minus.param_mut(i) -= h;
            let lp = loss_value(&plus, batch, spec).unwrap().total;
            let lm = loss_value(&minus, batch, spec).unwrap().total;
            let numeric = (lp - lm) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        // Zero network predicts uniform; targets equal to the prediction.
        let p = ModelParams::<f64>::zeros(&[3, 4, 2]).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.1, 0.8], [1.0, 2.0, 3.0]]).unwrap();
        let y = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let (_, g) = backward(&p, &x, &LossSpec::CrossEntropy { targets: &y }).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_net(&mut rng, &[3, 5, 3]);
        let x = random_matrix(&mut rng, 2, 3);
        let y = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let err = max_fd_error(&p, &x, &LossSpec::CrossEntropy { targets: &y });
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_net(&mut rng, &[4, 6, 3]);
        let x = random_matrix(&mut rng, 3, 4);
        let g = random_dist_rows(&mut rng, 3, 3);
        let spec = LossSpec::KlDiv {
            targets: &g,
            temperature: 5.0,
        };
        let err = max_fd_error(&p, &x, &spec);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_net(&mut rng, &[3, 4, 4, 3]);
        let xn = random_matrix(&mut rng, 2, 3);
        let xc = random_matrix(&mut rng, 3, 3);
        let g = random_dist_rows(&mut rng, 2, 3);
        let y = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let spec = LossSpec::Total {
            guidance: &g,
            clean_inputs: &xc,
            clean_targets: &y,
            alpha: 0.1,
            temperature: 5.0,
        };
        let err = max_fd_error(&p, &xn, &spec);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let p = ModelParams::<f64>::zeros(&[2, 2]).unwrap();
        let x = Matrix::zeros(1, 2);
        let t = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let bad_t = LossSpec::KlDiv {
            targets: &t,
            temperature: 0.0,
        };
        assert!(matches!(backward(&p, &x, &bad_t), Err(Error::Parameter(_))));
        let bad_alpha = LossSpec::Total {
            guidance: &t,
            clean_inputs: &x,
            clean_targets: &t,
            alpha: -1.0,
            temperature: 1.0,
        };
        assert!(matches!(backward(&p, &x, &bad_alpha), Err(Error::Parameter(_))));
        let wide = Matrix::from_rows(&[[0.2, 0.3, 0.5]]).unwrap();
        assert!(matches!(
            backward(&p, &x, &LossSpec::CrossEntropy { targets: &wide }),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_alpha_total_equals_clean_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = random_net(&mut rng, &[3, 4, 3]);
        let xn = random_matrix(&mut rng, 2, 3);
        let xc = random_matrix(&mut rng, 2, 3);
        let g = random_dist_rows(&mut rng, 2, 3);
        let y = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let total = LossSpec::Total {
            guidance: &g,
            clean_inputs: &xc,
            clean_targets: &y,
            alpha: 0.0,
            temperature: 5.0,
        };
        let (lt, gt) = backward(&p, &xn, &total).unwrap();
        let (lc, gc) = backward(&p, &xc, &LossSpec::CrossEntropy { targets: &y }).unwrap();
        assert_eq!(lt.total.to_bits(), lc.total.to_bits());
        assert_eq!(gt, gc);
    }
}
