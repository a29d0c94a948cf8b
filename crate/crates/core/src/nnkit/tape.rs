//! Reverse-mode differentiation over a linear record of op applications.
//!
//! Every op evaluates eagerly and appends a node holding its value and the inputs it needs for
//! the backward sweep. Nodes are only ever appended, so a node's inputs always precede it and a
//! single reverse pass over the record visits everything in dependency order.

use crate::error::{Error, Result};
use crate::nnkit::ops;
use crate::nnkit::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// An op implemented outside the kit. `backward` returns one gradient per input, in order.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, dout: &Tensor<T>)
        -> Vec<Tensor<T>>;
}

enum Op<T: Real> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    ReluMaxNorm {
        x: Var,
        arg: Vec<Option<usize>>,
        eps: T,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Upsample(Var),
    PadCrop(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, T),
    Reshape(Var),
    RoiPool {
        x: Var,
        arg: Vec<usize>,
    },
    /// Scalar `sum(x * weights)`.
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
    /// Scalar sum of scalar inputs.
    SumScalars(Vec<Var>),
    BceLogits {
        x: Var,
        entries: Vec<(usize, T)>,
        norm: T,
    },
    SoftmaxCe {
        x: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
        norm: T,
    },
    SmoothL1 {
        x: Var,
        entries: Vec<(usize, T)>,
        beta: T,
        norm: T,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Leaves with `requires_grad` receive gradients; others are constants.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`'s value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            &ins,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu_max_norm(&mut self, x: Var, eps: T) -> Var {
        let (out, arg) = ops::relu_max_norm(self.value(x), eps);
        self.push(out, Op::ReluMaxNorm { x, arg, eps }, &[x])
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Var {
        let (out, arg) = ops::maxpool2x2(self.value(x));
        self.push(out, Op::MaxPool { x, arg }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = ops::bilinear_upsample2x(self.value(x));
        self.push(out, Op::Upsample(x), &[x])
    }

    /// Zero-pads or crops trailing rows/columns to reach `h x w`.
    pub fn pad_or_crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        if self.value(x).hw() == (h, w) {
            return x;
        }
        let out = ops::pad_or_crop(self.value(x), h, w);
        self.push(out, Op::PadCrop(x), &[x])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let out = ops::mul(self.value(a), self.value(b));
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() - v);
        self.push(out, Op::OneMinus(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn roi_pool(&mut self, x: Var, rois: &[[f64; 4]], stride: f64, out: usize) -> Result<Var> {
        let (pooled, arg) = ops::roi_pool(self.value(x), rois, stride, out)?;
        Ok(self.push(pooled, Op::RoiPool { x, arg }, &[x]))
    }

    /// Scalar `sum(x * weights)`; used to reduce a map to a loss for gradient checks.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(Error::contract("dot weights must match the input shape"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(scalar(s), Op::Dot { x, weights }, &[x]))
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let s = xs.iter().map(|&v| self.value(v).data()[0]).sum();
        self.push(scalar(s), Op::SumScalars(xs.to_vec()), xs)
    }

    /// Binary cross-entropy on logits at the flat indices in `entries` (index, target in {0,1}),
    /// summed and divided by `norm`.
    pub fn bce_logits(&mut self, x: Var, entries: Vec<(usize, T)>, norm: T) -> Var {
        let xs = self.value(x).data();
        let mut s = T::zero();
        for &(i, t) in &entries {
            let z = xs[i];
            // log(1 + e^z) - t z, stable for either sign of z
            s += z.max(T::zero()) - t * z + (T::one() + (-z.abs()).exp()).ln();
        }
        self.push(scalar(s / norm), Op::BceLogits { x, entries, norm }, &[x])
    }

    /// Softmax cross-entropy over rows of `x` (rows = batch axis, classes = remaining axes).
    pub fn softmax_ce(&mut self, x: Var, labels: Vec<usize>, norm: T) -> Result<Var> {
        let v = self.value(x);
        let rows = v.batch();
        if labels.len() != rows {
            return Err(Error::contract("softmax_ce needs one label per row"));
        }
        let k = v.len() / rows.max(1);
        let probs = softmax_rows(v);
        let mut s = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::contract(format!("label {l} out of range {k}")));
            }
            s -= probs.data()[r * k + l].max(T::min_positive_value()).ln();
        }
        Ok(self.push(
            scalar(s / norm),
            Op::SoftmaxCe {
                x,
                labels,
                probs,
                norm,
            },
            &[x],
        ))
    }

    /// Smooth-L1 (Huber with transition `beta`) between `x` at flat indices and targets.
    pub fn smooth_l1(&mut self, x: Var, entries: Vec<(usize, T)>, beta: T, norm: T) -> Var {
        let xs = self.value(x).data();
        let half = T::lit(0.5);
        let mut s = T::zero();
        for &(i, t) in &entries {
            let d = (xs[i] - t).abs();
            s += if d < beta { half * d * d / beta } else { d - half * beta };
        }
        self.push(
            scalar(s / norm),
            Op::SmoothL1 {
                x,
                entries,
                beta,
                norm,
            },
            &[x],
        )
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward needs a scalar output"));
        }
        self.backward_with(loss, Tensor::full(self.value(loss).shape(), T::one()))
    }

    /// Back-propagates an arbitrary output gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g)?;
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    if let Some(b) = b {
                        let db = db.reshape(self.value(*b).shape())?;
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    let db = db.reshape(self.value(*b).shape())?;
                    acc(*b, db, &mut grads);
                }
                Op::Relu(x) => {
                    let d = self
                        .value(*x)
                        .zip_map(&g, |v, d| if v > T::zero() { d } else { T::zero() });
                    acc(*x, d, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let d = node.value.zip_map(&g, |s, d| d * s * (T::one() - s));
                    acc(*x, d, &mut grads);
                }
                Op::ReluMaxNorm { x, arg, eps } => {
                    let d = ops::relu_max_norm_backward(self.value(*x), &node.value, arg, *eps, &g);
                    acc(*x, d, &mut grads);
                }
                Op::MaxPool { x, arg } => {
                    let d = ops::scatter_argmax(self.value(*x).shape(), arg, &g);
                    acc(*x, d, &mut grads);
                }
                Op::Upsample(x) => {
                    let d = ops::bilinear_upsample2x_backward(self.value(*x).shape(), &g);
                    acc(*x, d, &mut grads);
                }
                Op::PadCrop(x) => {
                    let (h, w) = self.value(*x).hw();
                    acc(*x, ops::pad_or_crop(&g, h, w), &mut grads);
                }
                Op::Concat(a, b) => {
                    let (da, db) = ops::split_channels(&g, self.value(*a).channels());
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.map(|v| -v), &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, ops::mul(&g, self.value(*b)), &mut grads);
                    acc(*b, ops::mul(&g, self.value(*a)), &mut grads);
                }
                Op::OneMinus(x) => acc(*x, g.map(|v| -v), &mut grads),
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(*x, g.map(|v| v * s), &mut grads);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape();
                    acc(*x, g.reshape(shape)?, &mut grads);
                }
                Op::RoiPool { x, arg } => {
                    let d = ops::scatter_argmax(self.value(*x).shape(), arg, &g);
                    acc(*x, d, &mut grads);
                }
                Op::Dot { x, weights } => {
                    let s = g.data()[0];
                    acc(*x, weights.map(|w| w * s), &mut grads);
                }
                Op::SumScalars(xs) => {
                    for &x in xs {
                        acc(x, g.clone(), &mut grads);
                    }
                }
                Op::BceLogits { x, entries, norm } => {
                    let s = g.data()[0] / *norm;
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.shape());
                    for &(i, t) in entries {
                        d.data_mut()[i] += (ops::sigmoid_scalar(xv.data()[i]) - t) * s;
                    }
                    acc(*x, d, &mut grads);
                }
                Op::SoftmaxCe {
                    x,
                    labels,
                    probs,
                    norm,
                } => {
                    let s = g.data()[0] / *norm;
                    let k = probs.len() / labels.len().max(1);
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d.data_mut()[r * k + l] -= T::one();
                    }
                    d.scale(s);
                    acc(*x, d, &mut grads);
                }
                Op::SmoothL1 {
                    x,
                    entries,
                    beta,
                    norm,
                } => {
                    let s = g.data()[0] / *norm;
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.shape());
                    for &(i, t) in entries {
                        let diff = xv.data()[i] - t;
                        let gi = if diff.abs() < *beta {
                            diff / *beta
                        } else {
                            diff.signum()
                        };
                        d.data_mut()[i] += gi * s;
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let ds = op.backward(&vals, &node.value, &g);
                    debug_assert_eq!(ds.len(), inputs.len(), "{}", op.name());
                    for (&v, d) in inputs.iter().zip(ds) {
                        acc(v, d, &mut grads);
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn scalar<T: Real>(v: T) -> Tensor<T> {
    Tensor::full([1, 1, 1, 1], v)
}

/// Row-wise softmax with rows along the batch axis.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let rows = x.batch();
    let k = x.len() / rows.max(1);
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}
