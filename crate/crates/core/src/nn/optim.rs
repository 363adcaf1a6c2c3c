//! SGD with momentum and L2 weight decay.

use super::backward::Gradients;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Velocity buffers and bookkeeping for [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<S> {
    velocity: Gradients<S>,
    step: u64,
    lr: S,
}

impl<S: Scalar> OptState<S> {
    pub fn new(params: &ModelParams<S>, lr: S) -> Self {
        Self {
            velocity: Gradients::zeros_like(params),
            step: 0,
            lr,
        }
    }

    pub fn velocity(&self) -> &Gradients<S> {
        &self.velocity
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> S {
        self.lr
    }
}

/// One update:
///
/// ```text
/// v <- momentum * v + (grad + weight_decay * param)
/// param <- param - lr * v
/// ```
///
/// A zero momentum or zero decay drops the corresponding term entirely, so
/// `momentum = 0, weight_decay = 0` is bit-for-bit plain gradient descent.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &Gradients<S>,
    state: &mut OptState<S>,
    lr: S,
    momentum: S,
    weight_decay: S,
) -> Result<()> {
    if !grads.matches(params) || !state.velocity.matches(params) {
        return Err(Error::Shape(
            "gradient or velocity shape differs from parameters".into(),
        ));
    }
    state.lr = lr;
    for (k, g) in grads.layers.iter().enumerate() {
        let v = &mut state.velocity.layers[k];
        let layer = params.layer_mut(k);
        update(layer.weights_mut(), g.weights().as_slice(), v.weights_mut(), lr, momentum, weight_decay);
        update(layer.bias_mut(), g.bias(), v.bias_mut(), lr, momentum, weight_decay);
    }
    state.step += 1;
    Ok(())
}

#[inline]
fn update<S: Scalar>(p: &mut [S], g: &[S], v: &mut [S], lr: S, momentum: S, wd: S) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let mut d = g;
        if wd != S::zero() {
            d += wd * *p;
        }
        *v = if momentum != S::zero() { momentum * *v + d } else { d };
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, Matrix};

    fn scalar_net(p: f64) -> ModelParams<f64> {
        let layer = Layer::new(Matrix::from_vec(1, 1, vec![p]).unwrap(), vec![0.0]).unwrap();
        ModelParams::from_layers(vec![layer], Activation::Relu, 0).unwrap()
    }

    fn scalar_grad(g: f64) -> Gradients<f64> {
        Gradients {
            layers: vec![Layer::new(Matrix::from_vec(1, 1, vec![g]).unwrap(), vec![0.0]).unwrap()],
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = ModelParams::<f64>::init(&[3, 4, 2], 5).unwrap();
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut st = OptState::new(&p, 0.1);
        for _ in 0..3 {
            sgd_step(&mut p, &g, &mut st, 0.1, 0.9, 0.0).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step(), 3);
    }

    #[test]
    fn one_momentum_step() {
        let mut p = scalar_net(1.0);
        let mut st = OptState::new(&p, 0.1);
        sgd_step(&mut p, &scalar_grad(1.0), &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((p.layers()[0].weights().get(0, 0) - 0.9).abs() < 1e-15);
        assert_eq!(st.velocity().layers[0].weights().get(0, 0), 1.0);
    }

    #[test]
    fn three_step_trajectory_matches_hand_recurrence() {
        // Exact rational stepping of v <- 0.9 v + g + 1e-3 p, p <- p - 0.1 v
        // with gradients 1, 1/2, -1/4 starting from p = 1, v = 0.
        let expected = [(0.8999, 1.001), (0.75972001, 1.4017999), (0.658482046999, 1.01237963001)];
        let mut p = scalar_net(1.0);
        let mut st = OptState::new(&p, 0.1);
        for (g, (pe, ve)) in [1.0, 0.5, -0.25].into_iter().zip(expected) {
            sgd_step(&mut p, &scalar_grad(g), &mut st, 0.1, 0.9, 1e-3).unwrap();
            assert!((p.layers()[0].weights().get(0, 0) - pe).abs() < 1e-12);
            assert!((st.velocity().layers[0].weights().get(0, 0) - ve).abs() < 1e-12);
        }
    }

    #[test]
    fn plain_gradient_descent_when_momentum_and_decay_are_zero() {
        let mut p = ModelParams::<f64>::init(&[2, 3, 2], 8).unwrap();
        let mut g = Gradients::zeros_like(&p);
        for (i, v) in g.layers[0].weights_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut expected = p.clone();
        for i in 0..6 {
            *expected.param_mut(i) -= 0.05 * g.flatten()[i];
        }
        let mut st = OptState::new(&p, 0.05);
        sgd_step(&mut p, &g, &mut st, 0.05, 0.0, 0.0).unwrap();
        assert_eq!(p, expected);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = ModelParams::<f64>::init(&[2, 3], 1).unwrap();
        let other = ModelParams::<f64>::init(&[2, 4], 1).unwrap();
        let g = Gradients::zeros_like(&other);
        let mut st = OptState::new(&p, 0.1);
        assert!(matches!(
            sgd_step(&mut p, &g, &mut st, 0.1, 0.9, 0.0),
            Err(Error::Shape(_))
        ));
    }
}
