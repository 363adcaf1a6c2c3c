//! Probability vectors, temperature softmax, cross-entropy and KL divergence.
//!
//! All logarithms see probabilities clamped to at least [`PROB_FLOOR`].

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::{Scalar, PROB_FLOOR};

/// A finite, nonnegative vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<S>(Vec<S>);

impl<S: Scalar> ProbVector<S> {
    pub fn new(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("probability vector is empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < S::zero()) {
            return Err(Error::Input(format!(
                "entry {i} = {} is not a probability",
                probs[i]
            )));
        }
        let sum: S = probs.iter().copied().sum();
        if (sum.as_f64() - 1.0).abs() > S::PROB_TOLERANCE {
            return Err(Error::Input(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::Input(format!(
                "class {class} outside [0, {num_classes})"
            )));
        }
        let mut v = vec![S::zero(); num_classes];
        v[class] = S::one();
        Ok(Self(v))
    }

    pub fn uniform(num_classes: usize) -> Self {
        let p = S::one() / S::lit(num_classes as f64);
        Self(vec![p; num_classes])
    }

    /// Wraps values already known to form a distribution.
    pub(crate) fn from_vec_unchecked(probs: Vec<S>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// The hot class if this is exactly a one-hot vector.
    pub fn hot_class(&self) -> Option<usize> {
        let mut hot = None;
        for (i, &p) in self.0.iter().enumerate() {
            if p == S::one() && hot.is_none() {
                hot = Some(i);
            } else if p != S::zero() {
                return None;
            }
        }
        hot
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax written into `out`, with max subtraction.
pub(crate) fn softmax_t_into<S: Scalar>(logits: &[S], t: S, out: &mut [S]) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / t).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[inline]
fn floor<S: Scalar>(p: S) -> S {
    p.max(S::lit(PROB_FLOOR))
}

pub(crate) fn cross_entropy_slice<S: Scalar>(pred: &[S], target: &[S]) -> S {
    let mut acc = S::zero();
    for (&p, &t) in pred.iter().zip(target) {
        if t != S::zero() {
            acc -= t * floor(p).ln();
        }
    }
    acc
}

pub(crate) fn kl_div_slice<S: Scalar>(g: &[S], q: &[S]) -> S {
    let mut acc = S::zero();
    for (&gi, &qi) in g.iter().zip(q) {
        if gi > S::zero() {
            acc += gi * (gi / floor(qi)).ln();
        }
    }
    acc
}

fn check_temperature<S: Scalar>(t: S) -> Result<()> {
    if !(t > S::zero()) || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `exp(z_i / T) / sum_j exp(z_j / T)`.
pub fn softmax_t<S: Scalar>(logits: &[S], t: S) -> Result<ProbVector<S>> {
    check_temperature(t)?;
    if logits.is_empty() {
        return Err(Error::Input("no logits".into()));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::Input(format!("logit {i} is not finite")));
    }
    let mut out = vec![S::zero(); logits.len()];
    softmax_t_into(logits, t, &mut out);
    Ok(ProbVector(out))
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Result<ProbVector<S>> {
    softmax_t(logits, S::one())
}

/// `-sum_i target_i log pred_i`.
pub fn cross_entropy<S: Scalar>(pred: &ProbVector<S>, target: &ProbVector<S>) -> Result<S> {
    check_same_len(pred.len(), target.len())?;
    Ok(cross_entropy_slice(&pred.0, &target.0))
}

/// `sum_i g_i log(g_i / q_i)`; zero-probability target entries contribute nothing.
pub fn kl_div<S: Scalar>(target_g: &ProbVector<S>, student_q: &ProbVector<S>) -> Result<S> {
    check_same_len(target_g.len(), student_q.len())?;
    Ok(kl_div_slice(&target_g.0, &student_q.0))
}

pub fn entropy<S: Scalar>(p: &ProbVector<S>) -> S {
    -p.0.iter()
        .filter(|&&v| v > S::zero())
        .map(|&v| v * v.ln())
        .sum::<S>()
}

/// Row-wise temperature softmax of a logits matrix.
pub fn softmax_t_rows<S: Scalar>(logits: &Matrix<S>, t: S) -> Result<Matrix<S>> {
    check_temperature(t)?;
    if !logits.is_finite() {
        return Err(Error::Input("non-finite logits".into()));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for b in 0..logits.rows() {
        softmax_t_into(logits.row(b), t, out.row_mut(b));
    }
    Ok(out)
}

fn check_same_shape<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the rows of a batch.
pub fn mean_cross_entropy<S: Scalar>(pred: &Matrix<S>, target: &Matrix<S>) -> Result<S> {
    check_same_shape(pred, target)?;
    let n = S::lit(pred.rows().max(1) as f64);
    Ok(pred
        .iter_rows()
        .zip(target.iter_rows())
        .map(|(p, t)| cross_entropy_slice(p, t))
        .sum::<S>()
        / n)
}

/// Mean KL divergence over the rows of a batch.
pub fn mean_kl_div<S: Scalar>(g: &Matrix<S>, q: &Matrix<S>) -> Result<S> {
    check_same_shape(g, q)?;
    let n = S::lit(g.rows().max(1) as f64);
    Ok(g.iter_rows()
        .zip(q.iter_rows())
        .map(|(a, b)| kl_div_slice(a, b))
        .sum::<S>()
        / n)
}
