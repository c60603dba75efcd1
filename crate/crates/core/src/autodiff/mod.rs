//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every intermediate value produced during one forward pass.
//! Ops append nodes and return [`Var`] handles; [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a reverse topological order
//! because a node can only reference nodes created before it.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport};

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use kernels::ConvGeom;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("max pooling needs even spatial dims, got {0:?}")]
    OddSpatialDim(Vec<usize>),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail: detail.into() }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(vec![1], value)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for [`Tape::custom`]: receives the input values, the output
/// value and the output gradient, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Conv3d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    UpConv { input: Var, kernel: Var, c_in: usize, c_out: usize, dims: [usize; 3] },
    Concat { a: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { input: Var, scale: f64 },
    Sum(Var),
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, [usize; 3]), AutodiffError> {
    match *shape {
        [c, x, y, z] if x > 0 && y > 0 && z > 0 => Ok((c, [x, y, z])),
        _ => Err(mismatch(op, format!("expected [c, x, y, z], got {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kink_margin: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor.shape, tensor.data, rg, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.shape, tensor.data, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: n.requires_grad, grad: n.grad.clone() }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Smallest distance of any relu input from 0 or of any pooling max from
    /// the runner-up in its block. Finite differences with a step well below
    /// this value do not cross a kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Same-padded cubic convolution. `kernel` is `[c_out, c_in, k, k, k]`
    /// with odd `k`; `bias` is `[c_out]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (c_in, dims) = spatial(self.shape(input), "conv3d")?;
        let kshape = self.shape(kernel).to_vec();
        let (c_out, k) = match kshape[..] {
            [co, ci, a, b, c] if ci == c_in && a == b && b == c && a % 2 == 1 && co > 0 => (co, a),
            _ => return Err(mismatch("conv3d", format!("kernel {kshape:?} incompatible with input channels {c_in}"))),
        };
        if self.shape(bias) != [c_out] {
            return Err(mismatch("conv3d", format!("bias {:?} should be [{c_out}]", self.shape(bias))));
        }
        let geom = ConvGeom { c_in, c_out, dims, k };
        let out = kernels::conv3d_forward(self.value(input), self.value(kernel), self.value(bias), &geom);
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(vec![c_out, dims[0], dims[1], dims[2]], out, rg, Op::Conv3d { input, kernel, bias, geom }))
    }

    /// Non-overlapping 2x2x2 max pooling.
    pub fn maxpool3d(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let (c, dims) = spatial(self.shape(input), "maxpool3d")?;
        if dims.iter().any(|d| d % 2 != 0) {
            return Err(AutodiffError::OddSpatialDim(dims.to_vec()));
        }
        let (out, argmax, margin) = kernels::maxpool_forward(self.value(input), c, dims);
        self.kink_margin = self.kink_margin.min(margin);
        let rg = self.rg(input);
        Ok(self.push(vec![c, dims[0] / 2, dims[1] / 2, dims[2] / 2], out, rg, Op::MaxPool { input, argmax }))
    }

    /// Transposed convolution, kernel 2 and stride 2. `kernel` is
    /// `[c_in, c_out, 2, 2, 2]`.
    pub fn upconv3d(&mut self, input: Var, kernel: Var) -> Result<Var, AutodiffError> {
        let (c_in, dims) = spatial(self.shape(input), "upconv3d")?;
        let kshape = self.shape(kernel).to_vec();
        let c_out = match kshape[..] {
            [ci, co, 2, 2, 2] if ci == c_in && co > 0 => co,
            _ => {
                return Err(mismatch("upconv3d", format!("kernel {kshape:?} incompatible with input channels {c_in}")))
            }
        };
        let out = kernels::upconv_forward(self.value(input), self.value(kernel), c_in, c_out, dims);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![c_out, 2 * dims[0], 2 * dims[1], 2 * dims[2]],
            out,
            rg,
            Op::UpConv { input, kernel, c_in, c_out, dims },
        ))
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[1..] != sb[1..] {
            return Err(mismatch("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let mut value = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        value.extend_from_slice(self.value(a));
        value.extend_from_slice(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![sa[0] + sb[0], sa[1], sa[2], sa[3]], value, rg, Op::Concat { a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let margin = self.value(x).iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.kink_margin = self.kink_margin.min(margin);
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Sigmoid(x))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Affine { input: x, scale })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: CustomBackward,
    ) -> Result<Var, AutodiffError> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(mismatch("custom", "value length does not match shape"));
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, value, rg, Op::Custom { inputs: inputs.to_vec(), backward }))
    }

    /// Adds d(loss)/d(node) into the gradient of every node that requires
    /// one. Calling it again without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, bias, geom } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let mut gi = self.rg(*input).then(|| vec![0.0; x.len()]);
                let mut gk = self.rg(*kernel).then(|| vec![0.0; k.len()]);
                let mut gb = self.rg(*bias).then(|| vec![0.0; geom.c_out]);
                kernels::conv3d_backward(x, k, g, geom, gi.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
                for (v, d) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                    if let Some(d) = d {
                        acc(v, &mut |buf| add_into(buf, &d));
                    }
                }
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |buf| {
                for (&i, &d) in argmax.iter().zip(g) {
                    buf[i] += d;
                }
            }),
            Op::UpConv { input, kernel, c_in, c_out, dims } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let mut gi = self.rg(*input).then(|| vec![0.0; x.len()]);
                let mut gk = self.rg(*kernel).then(|| vec![0.0; k.len()]);
                kernels::upconv_backward(x, k, g, *c_in, *c_out, *dims, gi.as_deref_mut(), gk.as_deref_mut());
                for (v, d) in [(*input, gi), (*kernel, gk)] {
                    if let Some(d) = d {
                        acc(v, &mut |buf| add_into(buf, &d));
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                acc(*a, &mut |buf| add_into(buf, &g[..na]));
                acc(*b, &mut |buf| add_into(buf, &g[na..]));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |buf| {
                    for ((b, &d), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *b += d;
                        }
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |buf| {
                for ((b, &d), &s) in buf.iter_mut().zip(g).zip(&node.value) {
                    *b += d * s * (1.0 - s);
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &d), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += d / y;
                    }
                });
                acc(*b, &mut |buf| {
                    for (((o, &d), &x), &y) in buf.iter_mut().zip(g).zip(av).zip(bv) {
                        *o -= d * x / (y * y);
                    }
                });
            }
            Op::Affine { input, scale } => acc(*input, &mut |buf| {
                for (o, &d) in buf.iter_mut().zip(g) {
                    *o += scale * d;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Custom { inputs, backward } => {
                let values: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = backward(&values, &node.value, g);
                for (&v, d) in inputs.iter().zip(ds) {
                    acc(v, &mut |buf| add_into(buf, &d));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

/// Tape handles of a [`ParamSet`] bound for one forward pass.
pub type ParamVars = BTreeMap<String, Var>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; returns the previous tensor under that name.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Option<Tensor> {
        tensor.requires_grad = true;
        self.params.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| {
                let leaf = Tensor { shape: t.shape.clone(), data: t.data.clone(), requires_grad: true, grad: None };
                (name.clone(), tape.leaf(leaf))
            })
            .collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| {
                (name.clone(), tape.constant(Tensor::new(t.shape.clone(), t.data.clone()).expect("shape")))
            })
            .collect()
    }

    /// Adds tape gradients into each parameter's `grad` buffer. Parameters
    /// the loss does not reach receive zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ParamVars) {
        for (name, t) in &mut self.params {
            let Some(&v) = vars.get(name) else { continue };
            let buf = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
            if let Some(g) = tape.grad(v) {
                add_into(buf, g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0).with_grad());
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.mul(w, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0]);
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn relu_of_negated_positive_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap().with_grad());
        let neg = tape.affine(x, -1.0, 0.0);
        let r = tape.relu(neg);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s)[1], 0.5);
        assert!(sigmoid(100.0) <= 1.0 && sigmoid(-100.0) > 0.0);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap().with_grad());
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![2, 3], 0.7).with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).with_grad());
        assert_eq!(tape.backward(x), Err(AutodiffError::NotScalar(vec![2])));
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::new();
        let input: Vec<f64> = (0..64).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(Tensor::new(vec![1, 4, 4, 4], input.clone()).unwrap());
        let mut k = Tensor::zeros(vec![1, 1, 3, 3, 3]);
        k.data_mut()[13] = 1.0;
        let k = tape.constant(k);
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv3d(x, k, b).unwrap();
        assert_eq!(tape.value(y), &input[..]);
    }

    #[test]
    fn ones_kernel_counts_in_bounds_taps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![1, 5, 5, 5], 1.0));
        let k = tape.constant(Tensor::filled(vec![1, 1, 3, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv3d(x, k, b).unwrap();
        let at = |x: usize, y_: usize, z: usize| tape.value(y)[(x * 5 + y_) * 5 + z];
        assert_eq!(at(2, 2, 2), 27.0);
        assert_eq!(at(1, 3, 2), 27.0);
        // face centre: one axis at the boundary
        assert_eq!(at(0, 2, 2), 18.0);
        assert_eq!(at(2, 2, 4), 18.0);
        // edge and corner
        assert_eq!(at(0, 0, 2), 12.0);
        assert_eq!(at(0, 0, 0), 8.0);
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 3, 3]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv3d(x, k, b), Err(AutodiffError::ShapeMismatch { .. })));
        let k2 = tape.constant(Tensor::zeros(vec![1, 2, 2, 2, 2]));
        assert!(tape.conv3d(x, k2, b).is_err());
    }

    #[test]
    fn maxpool_block_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap().with_grad());
        let y = tape.maxpool3d(x).unwrap();
        assert_eq!(tape.value(y), &[7.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![1, 4, 2, 2], 3.0).with_grad());
        let y = tape.maxpool3d(x).unwrap();
        assert_eq!(tape.value(y), &[3.0, 3.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        // first voxel of each 2x2x2 block, in row-major order
        let mut expected = [0.0; 16];
        expected[0] = 1.0;
        expected[8] = 1.0;
        assert_eq!(g, &expected[..]);
        assert_eq!(tape.kink_margin(), 0.0);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 2, 2]));
        assert!(matches!(tape.maxpool3d(x), Err(AutodiffError::OddSpatialDim(_))));
    }

    #[test]
    fn upconv_single_voxel_expands() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![1, 1, 1, 1], 2.5));
        let k = tape.constant(Tensor::filled(vec![1, 1, 2, 2, 2], 1.0));
        let y = tape.upconv3d(x, k).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert_eq!(tape.value(y), &[2.5; 8]);

        let kz = tape.constant(Tensor::zeros(vec![1, 1, 2, 2, 2]));
        let x2 = tape.constant(Tensor::filled(vec![1, 2, 2, 2], 1.0));
        let y2 = tape.upconv3d(x2, kz).unwrap();
        assert!(tape.value(y2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upconv_places_taps() {
        // Kernel tap (a,b,c) = 1 + a*4 + b*2 + c; one input voxel at (1,0,0).
        let mut tape = Tape::new();
        let mut input = Tensor::zeros(vec![1, 2, 1, 1]);
        input.data_mut()[1] = 1.0;
        let x = tape.constant(input);
        let k = tape.constant(Tensor::new(vec![1, 1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap());
        let y = tape.upconv3d(x, k).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 2, 2]);
        let v = tape.value(y);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    assert_eq!(v[((2 + a) * 2 + b) * 2 + c], (1 + a * 4 + b * 2 + c) as f64);
                    assert_eq!(v[(a * 2 + b) * 2 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn concat_shapes_and_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(vec![1, 2, 2, 2], 1.0).with_grad());
        let b = tape.leaf(Tensor::filled(vec![3, 2, 2, 2], 2.0).with_grad());
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[4, 2, 2, 2]);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 8]);

        let e = tape.constant(Tensor::zeros(vec![0, 2, 2, 2]));
        let d = tape.concat_channels(a, e).unwrap();
        assert_eq!(tape.shape(d), &[1, 2, 2, 2]);
        assert_eq!(tape.value(d), tape.value(a));

        let bad = tape.constant(Tensor::zeros(vec![1, 2, 2, 3]));
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn param_set_is_name_ordered() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::zeros(vec![1]));
        p.insert("a", Tensor::zeros(vec![2]));
        let names: Vec<_> = p.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(p.count(), 3);
        assert!(p.get("a").unwrap().requires_grad);
    }
}
