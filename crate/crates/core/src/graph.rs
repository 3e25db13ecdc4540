//! Reverse-mode differentiation over tensors.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! stores its output, and records which inputs it read. [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products from
//! the kernels in [`crate::ops`]. Only nodes that (transitively) depend on a
//! trainable leaf receive gradients.
//!
//! ```
//! use vistrack::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use crate::error::{ensure, Error, Result};
use crate::geometry::BBox;
use crate::ops::{self, RoiAlignPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
    Conv1x1 { input: Var, weight: Var, bias: Var },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Xcorr { template: Var, search: Var, pad: bool },
    RoiAlign { input: Var, plan: Box<RoiAlignPlan> },
    MatMul(Var, Var),
    Permute { input: Var, axes: Vec<usize> },
    Stack(Vec<Var>),
    Index0(Var, usize),
    TileSpatial(Var),
    MeanSpatial(Var),
    Upsample { input: Var, factor: usize },
    BceWithLogits { logits: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Evaluation tape. Single-threaded; independent graphs may live on different threads.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is trainable when `trainable` is set.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).scale(k);
        self.record(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.record(v, Op::AddScalar(a), &[a])
    }

    /// Sum of an arbitrary number of equally shaped tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        ensure!(!vars.is_empty(), "add_all", "no operands");
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.record(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = ops::sigmoid(self.value(a));
        self.record(v, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a), &[a]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.record(v, Op::Mean(a), &[a])
    }

    /// Element at a flat index, as a rank-0 tensor.
    pub fn pick(&mut self, a: Var, flat: usize) -> Result<Var> {
        let t = self.value(a);
        ensure!(flat < t.numel(), "pick", "index {} out of range for {:?}", flat, t.shape());
        let v = Tensor::scalar(t.data()[flat]);
        Ok(self.record(v, Op::Pick(a, flat), &[a]))
    }

    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = ops::conv1x1(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.record(v, Op::Conv1x1 { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax_axis(self.value(input), axis)?;
        Ok(self.record(v, Op::Softmax { input, axis }, &[input]))
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let v = ops::log_softmax_axis(self.value(input), axis)?;
        Ok(self.record(v, Op::LogSoftmax { input, axis }, &[input]))
    }

    pub fn depthwise_xcorr(&mut self, template: Var, search: Var, pad: bool) -> Result<Var> {
        let v = ops::depthwise_xcorr(self.value(template), self.value(search), pad)?;
        Ok(self.record(v, Op::Xcorr { template, search, pad }, &[template, search]))
    }

    pub fn roi_align(
        &mut self,
        input: Var,
        bbox: &BBox,
        out_h: usize,
        out_w: usize,
        samples_per_bin: usize,
    ) -> Result<Var> {
        let s = self.value(input).shape().to_vec();
        ensure!(s.len() == 3, "roi_align", "features must have rank 3, got {:?}", s);
        ensure!(s[1] > 0 && s[2] > 0, "roi_align", "empty feature map {:?}", s);
        let plan = RoiAlignPlan::new(s[1], s[2], bbox, out_h, out_w, samples_per_bin)?;
        let v = plan.apply(self.value(input));
        Ok(self.record(
            v,
            Op::RoiAlign {
                input,
                plan: Box::new(plan),
            },
            &[input],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let v = ops::permute(self.value(input), axes)?;
        Ok(self.record(
            v,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            &[input],
        ))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        self.permute(input, &[1, 0])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::stack(&tensors)?;
        Ok(self.record(v, Op::Stack(parts.to_vec()), parts))
    }

    pub fn index0(&mut self, input: Var, index: usize) -> Result<Var> {
        let v = self.value(input).index_axis0(index)?;
        Ok(self.record(v, Op::Index0(input, index), &[input]))
    }

    pub fn tile_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let v = ops::tile_spatial(self.value(input), h, w)?;
        Ok(self.record(v, Op::TileSpatial(input), &[input]))
    }

    pub fn mean_spatial(&mut self, input: Var) -> Result<Var> {
        let v = ops::mean_spatial(self.value(input))?;
        Ok(self.record(v, Op::MeanSpatial(input), &[input]))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let v = ops::upsample_nearest(self.value(input), factor)?;
        Ok(self.record(v, Op::Upsample { input, factor }, &[input]))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target` in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let l = self.value(logits);
        let t = self.value(target);
        ensure!(
            l.shape() == t.shape(),
            "bce_with_logits",
            "shape mismatch {:?} vs {:?}",
            l.shape(),
            t.shape()
        );
        let n = T::lit(l.numel() as f64);
        let total: T = l
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        Ok(self.record(
            Tensor::scalar(total / n),
            Op::BceWithLogits { logits, target },
            &[logits, target],
        ))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.accumulate(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), "mul", |x, y| x * y).unwrap());
                send(*b, g.zip_map(val(*a), "mul", |x, y| x * y).unwrap());
            }
            Op::Scale(a, k) => send(*a, g.scale(*k)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Relu(a) => send(*a, ops::relu_backward(val(*a), g)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                send(*a, y.zip_map(g, "sigmoid", |s, gg| gg * s * (T::one() - s)).unwrap());
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(val(*a).shape().to_vec()).unwrap()),
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0])),
            Op::Mean(a) => {
                let x = val(*a);
                let k = g.data()[0] / T::lit(x.numel() as f64);
                send(*a, Tensor::full(x.shape().to_vec(), k));
            }
            Op::Pick(a, flat) => {
                let mut t = Tensor::zeros(val(*a).shape().to_vec());
                t.data_mut()[*flat] = g.data()[0];
                send(*a, t);
            }
            Op::Conv1x1 { input, weight, bias } => {
                let (gi, gw, gb) = ops::conv1x1_backward(val(*input), val(*weight), g);
                send(*input, gi);
                send(*weight, gw);
                send(*bias, gb);
            }
            Op::Softmax { input, axis } => send(*input, ops::softmax_backward(&node.value, g, *axis)),
            Op::LogSoftmax { input, axis } => {
                send(*input, ops::log_softmax_backward(&node.value, g, *axis))
            }
            Op::Xcorr {
                template,
                search,
                pad,
            } => {
                let (gt, gs) = ops::depthwise_xcorr_backward(val(*template), val(*search), *pad, g);
                send(*template, gt);
                send(*search, gs);
            }
            Op::RoiAlign { input, plan } => send(*input, plan.apply_backward(g)),
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(val(*a), val(*b), g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Permute { input, axes } => send(*input, ops::permute_backward(g, axes)),
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    send(p, g.index_axis0(i).unwrap());
                }
            }
            Op::Index0(a, index) => {
                let x = val(*a);
                let mut t = Tensor::zeros(x.shape().to_vec());
                let inner = g.numel();
                t.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                send(*a, t);
            }
            Op::TileSpatial(a) => send(*a, ops::tile_spatial_backward(g)),
            Op::MeanSpatial(a) => send(*a, ops::mean_spatial_backward(val(*a).shape(), g)),
            Op::Upsample { input, factor } => {
                send(*input, ops::upsample_nearest_backward(val(*input).shape(), *factor, g))
            }
            Op::BceWithLogits { logits, target } => {
                let l = val(*logits);
                let t = val(*target);
                let k = g.data()[0] / T::lit(l.numel() as f64);
                send(
                    *logits,
                    l.zip_map(t, "bce", |x, y| k * (ops::sigmoid_scalar(x) - y)).unwrap(),
                );
                send(*target, l.map(|x| -k * x));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `shape_of` when `v` got none.
    pub fn wrt_or_zeros(&self, v: Var, shape_of: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape_of.shape().to_vec()))
    }

    /// Gradient of `v`; panics if `v` did not receive one.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("no gradient recorded for this var")
    }
}
