//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value created during a forward pass. Operations are
//! appended in execution order, so operands always precede their results and
//! the backward sweep is a single reverse walk. Nodes that do not depend on
//! any `requires_grad` leaf carry no derivative bookkeeping.
//!
//! ```
//! use gradistill::autodiff::Tape;
//! use gradistill::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, -2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let root = tape.sum(sq);
//! tape.backward(root).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

pub mod kernels;

use std::str::FromStr;

use crate::tensor::{Tensor, TensorError};
use kernels::ConvGeometry;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives, with their static attributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Conv2d { stride: usize, padding: usize },
    Dense,
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Add,
    Scale(f64),
    LogSoftmax,
}

impl FromStr for OpKind {
    type Err = TensorError;

    /// Parses an op name with default attributes (unit stride, no padding,
    /// 2x2 pooling, unit scale).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "conv2d" => OpKind::Conv2d {
                stride: 1,
                padding: 0,
            },
            "dense" => OpKind::Dense,
            "relu" => OpKind::Relu,
            "max_pool2d" => OpKind::MaxPool2d {
                kernel: 2,
                stride: 2,
            },
            "global_avg_pool" => OpKind::GlobalAvgPool,
            "add" => OpKind::Add,
            "scale" => OpKind::Scale(1.0),
            "log_softmax" => OpKind::LogSoftmax,
            other => return Err(TensorError::UnsupportedOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    LogSoftmax {
        input: Var,
        cols: usize,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0)?.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes.get_mut(v.0)?.grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Node, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Applies `kind` to `inputs`, validating arity.
    ///
    /// `conv2d` and `dense` take `[input, weight]` or `[input, weight, bias]`;
    /// `add` takes two operands; every other kind takes one.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let arity = |lo: usize, hi: usize| {
            if inputs.len() < lo || inputs.len() > hi {
                Err(TensorError::shape(
                    "apply",
                    format!("{kind:?} takes {lo}..={hi} operands, got {}", inputs.len()),
                ))
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Conv2d { stride, padding } => {
                arity(2, 3)?;
                self.conv2d(
                    inputs[0],
                    inputs[1],
                    inputs.get(2).copied(),
                    stride,
                    padding,
                )
            }
            OpKind::Dense => {
                arity(2, 3)?;
                self.dense(inputs[0], inputs[1], inputs.get(2).copied())
            }
            OpKind::Relu => {
                arity(1, 1)?;
                self.relu(inputs[0])
            }
            OpKind::MaxPool2d { kernel, stride } => {
                arity(1, 1)?;
                self.max_pool2d(inputs[0], kernel, stride)
            }
            OpKind::GlobalAvgPool => {
                arity(1, 1)?;
                self.global_avg_pool(inputs[0])
            }
            OpKind::Add => {
                arity(2, 2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Scale(f) => {
                arity(1, 1)?;
                self.scale(inputs[0], f)
            }
            OpKind::LogSoftmax => {
                arity(1, 1)?;
                self.log_softmax(inputs[0])
            }
        }
    }

    /// NCHW input, OIHW kernel, optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.check(input)?.value.shape().to_vec();
        let ws = self.check(weight)?.value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input must be NCHW, got {xs:?}"),
            ));
        }
        if ws.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel must be OIHW, got {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "input channels {} != kernel input channels {}",
                    xs[1], ws[1]
                ),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be at least 1"));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    ws[2],
                    ws[3],
                    xs[2] + 2 * padding,
                    xs[3] + 2 * padding
                ),
            ));
        }
        if let Some(b) = bias {
            let bs = self.check(b)?.value.shape();
            if bs != [ws[0]] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias shape {bs:?} != [{}]", ws[0]),
                ));
            }
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(
            vec![
                geom.batch,
                geom.out_channels,
                geom.out_height(),
                geom.out_width(),
            ],
            data,
        )?;
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.needs(&operands);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let xs = self.check(input)?.value.shape().to_vec();
        let ws = self.check(weight)?.value.shape().to_vec();
        let (batch, in_features) = match xs.as_slice() {
            [n, f] => (*n, *f),
            [f] => (1, *f),
            _ => {
                return Err(TensorError::shape(
                    "dense",
                    format!("input must be [N, in], got {xs:?}"),
                ))
            }
        };
        if ws.len() != 2 || ws[1] != in_features {
            return Err(TensorError::shape(
                "dense",
                format!("weight {ws:?} incompatible with {in_features} input features"),
            ));
        }
        if let Some(b) = bias {
            let bs = self.check(b)?.value.shape();
            if bs != [ws[0]] {
                return Err(TensorError::shape(
                    "dense",
                    format!("bias shape {bs:?} != [{}]", ws[0]),
                ));
            }
        }
        let data = kernels::dense_forward(
            batch,
            in_features,
            ws[0],
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = if xs.len() == 1 {
            vec![ws[0]]
        } else {
            vec![batch, ws[0]]
        };
        let value = Tensor::new(shape, data)?;
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.needs(&operands);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let value = self.check(input)?.value.map(|v| v.max(0.0));
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Relu { input }, rg))
    }

    /// Unpadded max pooling over NCHW input.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.check(input)?.value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape(
                "max_pool2d",
                format!("input must be NCHW, got {xs:?}"),
            ));
        }
        if kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(TensorError::shape(
                "max_pool2d",
                format!(
                    "window {kernel} stride {stride} invalid for {}x{}",
                    xs[2], xs[3]
                ),
            ));
        }
        let (data, argmax) = kernels::max_pool2d_forward(
            xs[0] * xs[1],
            xs[2],
            xs[3],
            kernel,
            stride,
            self.value(input).data(),
        );
        let shape = vec![
            xs[0],
            xs[1],
            (xs[2] - kernel) / stride + 1,
            (xs[3] - kernel) / stride + 1,
        ];
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let xs = self.check(input)?.value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape(
                "global_avg_pool",
                format!("input must be NCHW, got {xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let data = self
            .value(input)
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input, plane }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var, TensorError> {
        let value = self.check(input)?.value.map(|v| v * factor);
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Scale { input, factor }, rg))
    }

    /// Max-shifted log-softmax along the last axis.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var, TensorError> {
        let xs = self.check(input)?.value.shape().to_vec();
        let cols = *xs
            .last()
            .ok_or_else(|| TensorError::shape("log_softmax", "scalar input"))?;
        let data = kernels::log_softmax_rows(self.value(input).data(), cols);
        let value = Tensor::new(xs, data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::LogSoftmax { input, cols }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    /// Branch decisions of the piecewise-linear ops: one entry per ReLU input
    /// (1 when positive) and per pooling window (index of the winner).
    ///
    /// Two forward passes with equal patterns lie in the same linear region,
    /// which is what makes a finite-difference stencil a valid oracle.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => pattern.extend(
                    self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > 0.0)),
                ),
                Op::MaxPool2d { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Back-propagates from a scalar root into every `requires_grad` leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        let node = self.check(root)?;
        if !node.value.is_scalar() {
            return Err(TensorError::NonScalarRoot(node.value.shape().to_vec()));
        }
        self.backward_with_seed(root, &Tensor::full(node.value.shape().to_vec(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (congruent with `output`) backwards.
    pub fn backward_with_seed(&mut self, output: Var, seed: &Tensor) -> Result<(), TensorError> {
        let node = self.check(output)?;
        if node.value.shape() != seed.shape() {
            return Err(TensorError::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                accumulate(&mut self.nodes[idx].grad, g);
                continue;
            }
            let op = &self.nodes[idx].op;
            let mut emit = |v: Var, d: Vec<f64>| accumulate(&mut grads[v.0], d);
            match op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let r = kernels::conv2d_backward(
                        geom,
                        self.nodes[input.0].value.data(),
                        self.nodes[weight.0].value.data(),
                        &g,
                        self.nodes[input.0].requires_grad,
                        self.nodes[weight.0].requires_grad,
                        bias.is_some_and(|b| self.nodes[b.0].requires_grad),
                    );
                    if let Some(d) = r.input {
                        emit(*input, d);
                    }
                    if let Some(d) = r.weight {
                        emit(*weight, d);
                    }
                    if let (Some(b), Some(d)) = (bias, r.bias) {
                        emit(*b, d);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
                    let r = kernels::dense_backward(
                        x.len() / in_f,
                        in_f,
                        out_f,
                        x.data(),
                        w.data(),
                        &g,
                        self.nodes[input.0].requires_grad,
                        self.nodes[weight.0].requires_grad,
                        bias.is_some_and(|b| self.nodes[b.0].requires_grad),
                    );
                    if let Some(d) = r.input {
                        emit(*input, d);
                    }
                    if let Some(d) = r.weight {
                        emit(*weight, d);
                    }
                    if let (Some(b), Some(d)) = (bias, r.bias) {
                        emit(*b, d);
                    }
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    emit(*input, d);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut d = vec![0.0; self.nodes[input.0].value.len()];
                    for (&src, &gi) in argmax.iter().zip(&g) {
                        d[src] += gi;
                    }
                    emit(*input, d);
                }
                Op::GlobalAvgPool { input, plane } => {
                    let inv = 1.0 / *plane as f64;
                    let d = g
                        .iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi * inv, *plane))
                        .collect();
                    emit(*input, d);
                }
                Op::Add { a, b } => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let da = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    emit(*a, da);
                    emit(*b, db);
                }
                Op::Scale { input, factor } => {
                    emit(*input, g.iter().map(|v| v * factor).collect());
                }
                Op::LogSoftmax { input, cols } => {
                    let y = self.nodes[idx].value.data();
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks_exact(*cols).zip(y.chunks_exact(*cols)) {
                        let total: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(yr).map(|(gi, yi)| gi - yi.exp() * total));
                    }
                    emit(*input, d);
                }
                Op::Sum { input } => {
                    let n = self.nodes[input.0].value.len();
                    emit(*input, vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Central-difference gradient `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<E>(
    mut f: impl FnMut(&Tensor) -> Result<f64, E>,
    x: &Tensor,
    epsilon: f64,
) -> Result<Tensor, E> {
    let coords: Vec<usize> = (0..x.len()).collect();
    let partials = finite_difference_at(&mut f, x, epsilon, &coords)?;
    Ok(Tensor::new(x.shape().to_vec(), partials).expect("shape preserved"))
}

/// Central differences at selected flat coordinates only.
pub fn finite_difference_at<E>(
    mut f: impl FnMut(&Tensor) -> Result<f64, E>,
    x: &Tensor,
    epsilon: f64,
    coords: &[usize],
) -> Result<Vec<f64>, E> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((hi - lo) / (2.0 * epsilon));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
