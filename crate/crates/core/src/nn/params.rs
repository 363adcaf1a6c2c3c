//! Fully connected ReLU network parameters and the forward pass.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hidden-layer nonlinearity. Only ReLU networks are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn derivative<S: Scalar>(self, pre: S) -> S {
        match self {
            Activation::Relu => {
                if pre > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

/// One affine layer: `weights` is `out x in`, `bias` has length `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    weights: Matrix<S>,
    bias: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn new(weights: Matrix<S>, bias: Vec<S>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![S::zero(); out_dim],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix<S> {
        &self.weights
    }

    pub fn bias(&self) -> &[S] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [S] {
        self.weights.as_mut_slice()
    }

    pub fn bias_mut(&mut self) -> &mut [S] {
        &mut self.bias
    }

    fn same_shape(&self, other: &Layer<S>) -> bool {
        self.in_dim() == other.in_dim() && self.out_dim() == other.out_dim()
    }

    /// `out[o] = sum_k W[o,k] x[k] + b[o]`
    #[inline]
    fn affine(&self, x: &[S], out: &mut [S]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let w = self.weights.row(o);
            let mut acc = self.bias[o];
            for (wk, xk) in w.iter().zip(x) {
                acc += *wk * *xk;
            }
            *slot = acc;
        }
    }
}

/// Parameters of a feed-forward classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    layers: Vec<Layer<S>>,
    activation: Activation,
    seed: u64,
}

/// Intermediate values kept for backpropagation.
pub(crate) struct ForwardTrace<S> {
    /// `inputs[l]` is the input of layer `l`; the last entry is the logits.
    pub activations: Vec<Matrix<S>>,
    /// Pre-activation values of each hidden layer.
    pub pre_activations: Vec<Matrix<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Glorot-uniform initialization with zero biases.
    ///
    /// `dims` lists the input width, the hidden widths and finally the class count.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = S::lit((6.0 / (fan_in + fan_out) as f64).sqrt());
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![S::zero(); fan_out],
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation: Activation::Relu,
            seed,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            activation: Activation::Relu,
            seed: 0,
        })
    }

    pub fn from_layers(layers: Vec<Layer<S>>, activation: Activation, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (k, layer) in layers.iter().enumerate() {
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Input(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(Self {
            layers,
            activation,
            seed,
        })
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut Layer<S> {
        &mut self.layers[k]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Input width followed by every layer's output width.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Mutable access to the `i`-th parameter in flat order
    /// (layer by layer, weights row-major then bias).
    pub fn param_mut(&mut self, mut i: usize) -> &mut S {
        for layer in &mut self.layers {
            let nw = layer.weights.as_slice().len();
            if i < nw {
                return &mut layer.weights.as_mut_slice()[i];
            }
            i -= nw;
            if i < layer.bias.len() {
                return &mut layer.bias[i];
            }
            i -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// True when `other` has exactly the same layer shapes.
    pub fn same_shape(&self, other: &ModelParams<S>) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// Evaluates the network on a `B x d` batch and returns `B x C` logits.
    pub fn forward(&self, batch: &Matrix<S>) -> Result<Matrix<S>> {
        self.check_input(batch)?;
        let mut current = batch.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = Matrix::zeros(current.rows(), layer.out_dim());
            for b in 0..current.rows() {
                layer.affine(current.row(b), next.row_mut(b));
                if k != last {
                    for v in next.row_mut(b) {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            current = next;
        }
        Ok(current)
    }

    pub(crate) fn forward_trace(&self, batch: &Matrix<S>) -> Result<ForwardTrace<S>> {
        self.check_input(batch)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(last);
        activations.push(batch.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = &activations[k];
            let mut z = Matrix::zeros(input.rows(), layer.out_dim());
            for b in 0..input.rows() {
                layer.affine(input.row(b), z.row_mut(b));
            }
            if k == last {
                activations.push(z);
            } else {
                let mut a = z.clone();
                for v in a.as_mut_slice() {
                    *v = self.activation.apply(*v);
                }
                pre_activations.push(z);
                activations.push(a);
            }
        }
        Ok(ForwardTrace {
            activations,
            pre_activations,
        })
    }

    fn check_input(&self, batch: &Matrix<S>) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "layer 0 expects {} input features, batch has {}",
                self.input_dim(),
                batch.cols()
            )));
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Shape(
            "layer dims need at least an input and an output width".into(),
        ));
    }
    if let Some(k) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("layer dim {k} is zero")));
    }
    Ok(())
}
