//! Learned 1x1-convolution parameters and plain SGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight `[Cout,Cin]` and bias `[Cout]` of one per-pixel affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct OpParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> OpParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        ensure!(
            weight.rank() == 2,
            "op_params",
            "weight must be [Cout,Cin], got {:?}",
            weight.shape()
        );
        ensure!(
            bias.shape() == [weight.dim(0)],
            "op_params",
            "bias shape {:?} does not match Cout={}",
            bias.shape(),
            weight.dim(0)
        );
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            weight: Tensor::zeros([out_channels, in_channels]),
            bias: Tensor::zeros([out_channels]),
        }
    }

    /// Uniform fan-in initialisation in `[-1/sqrt(Cin), 1/sqrt(Cin)]`.
    pub fn fan_in<R: Rng + ?Sized>(out_channels: usize, in_channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_channels as f64).sqrt();
        Self {
            weight: Tensor::uniform([out_channels, in_channels], bound, rng),
            bias: Tensor::uniform([out_channels], bound, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn num_values(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }

    pub fn cast<U: Scalar>(&self) -> OpParams<U> {
        OpParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn sgd(&mut self, bound: &Bound, grads: &Gradients<T>, lr: T) {
        if let Some(gw) = grads.get(bound.weight) {
            for (w, &d) in self.weight.data_mut().iter_mut().zip(gw.data()) {
                *w -= lr * d;
            }
        }
        if let Some(gb) = grads.get(bound.bias) {
            for (b, &d) in self.bias.data_mut().iter_mut().zip(gb.data()) {
                *b -= lr * d;
            }
        }
    }
}

/// Graph handles of an [`OpParams`].
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub weight: Var,
    pub bias: Var,
}

impl Bound {
    pub fn conv(&self, g: &mut Graph<impl Scalar>, input: Var) -> Result<Var> {
        g.conv1x1(input, self.weight, self.bias)
    }
}

/// A fixed, ordered collection of layers.
pub trait ParamSet<T: Scalar> {
    fn layers(&self) -> Vec<&OpParams<T>>;
    fn layers_mut(&mut self) -> Vec<&mut OpParams<T>>;

    fn bind_all(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Bound> {
        self.layers().into_iter().map(|p| p.bind(g, trainable)).collect()
    }

    /// One SGD step using bindings produced by [`ParamSet::bind_all`].
    fn sgd_step(&mut self, bound: &[Bound], grads: &Gradients<T>, lr: T) {
        let layers = self.layers_mut();
        assert_eq!(layers.len(), bound.len(), "binding does not match layer list");
        for (p, b) in layers.into_iter().zip(bound) {
            p.sgd(b, grads, lr);
        }
    }

    fn num_values(&self) -> usize {
        self.layers().iter().map(|p| p.num_values()).sum()
    }

    fn is_finite(&self) -> bool {
        self.layers().iter().all(|p| p.is_finite())
    }
}

/// Serializable snapshot of a layer (always `f64`).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerRecord {
    pub shape: [usize; 2],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl<T: Scalar> From<&OpParams<T>> for LayerRecord {
    fn from(p: &OpParams<T>) -> Self {
        Self {
            shape: [p.out_channels(), p.in_channels()],
            weight: p.weight.data().iter().map(|v| v.to_f64_lossy()).collect(),
            bias: p.bias.data().iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }
}

impl LayerRecord {
    pub fn to_params<T: Scalar>(&self) -> Result<OpParams<T>> {
        OpParams::new(
            Tensor::new(self.shape.to_vec(), self.weight.iter().map(|&v| T::lit(v)).collect())?,
            Tensor::new([self.shape[0]], self.bias.iter().map(|&v| T::lit(v)).collect())?,
        )
    }
}
