//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op pushes a node whose
//! parents are already in the arena, so arena order is a topological order and
//! `backward` simply walks it in reverse.
//!
//! Gradients persist on the graph between `backward` calls and accumulate;
//! call [`Graph::zero_grads`] to reset them.

pub mod check;
pub(crate) mod kernels;
mod ops;

pub use ops::BinaryOp;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{broadcast_strides, for_each_broadcast, inverse_permutation, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `scale * x + shift`; only the scale matters for the gradient.
    Affine {
        x: Var,
        scale: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Permute {
        x: Var,
        order: Vec<usize>,
    },
    Reshape(Var),
    Sum {
        x: Var,
        kept: Vec<usize>,
    },
    PadFront {
        x: Var,
        count: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    Acf {
        x: Var,
        centered: Vec<T>,
        denoms: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Sum { .. } => "sum",
            Op::PadFront { .. } => "pad_front",
            Op::SliceLast { .. } => "slice_last",
            Op::Acf { .. } => "acf",
            Op::MaxPool { .. } => "max_pool",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

/// One value in the graph with the recipe that produced it.
#[derive(Debug)]
pub struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) label: Option<String>,
}

impl<T: Real> Node<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }
}

/// Computation graph with persistent, accumulating gradients.
#[derive(Debug)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Pushes an op node that requires grad iff any parent does.
    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable leaf carrying a name for diagnostics.
    pub fn param_named(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.param(value);
        self.nodes[v.0].label = Some(name.to_string());
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, if any backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Describes the earliest node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.label {
                Some(l) => format!("node {i} ({}, `{l}`)", n.op.name()),
                None => format!("node {i} ({})", n.op.name()),
            })
        })
    }

    /// Accumulates `∂loss/∂v` into every grad-requiring node `v` reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.wants(*a) {
                    accumulate(adj, *a, g.sum_to_shape(self.shape(*a)));
                }
                if self.wants(*b) {
                    let gb = g.sum_to_shape(self.shape(*b));
                    accumulate(adj, *b, if sign < T::zero() { gb.map(|v| -v) } else { gb });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = broadcast_strides(av.shape(), out_shape);
                let sb = broadcast_strides(bv.shape(), out_shape);
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut ga = self.wants(*a).then(|| vec![T::zero(); av.len()]);
                let mut gb = self.wants(*b).then(|| vec![T::zero(); bv.len()]);
                for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                    let go = gd[o];
                    if is_div {
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += go / bd[ib];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] -= go * ad[ia] / (bd[ib] * bd[ib]);
                        }
                    } else {
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += go * bd[ib];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] += go * ad[ia];
                        }
                    }
                });
                if let Some(ga) = ga {
                    accumulate(adj, *a, Tensor::from_raw(av.shape().to_vec(), ga));
                }
                if let Some(gb) = gb {
                    accumulate(adj, *b, Tensor::from_raw(bv.shape().to_vec(), gb));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                accumulate(adj, *x, g.map(|v| v * s));
            }
            Op::MatMul { a, b } => self.matmul_backward(*a, *b, g, adj),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
                let half = T::lit(0.5);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                accumulate(adj, *x, Tensor::from_raw(xv.shape().to_vec(), data));
            }
            Op::Relu(x) | Op::Abs(x) | Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::lit(2.0);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| match node.op {
                        Op::Relu(_) => {
                            if x > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        Op::Abs(_) => {
                            if x > T::zero() {
                                gv
                            } else if x < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        }
                        _ => gv * two * x,
                    })
                    .collect();
                accumulate(adj, *x, Tensor::from_raw(xv.shape().to_vec(), data));
            }
            Op::Permute { x, order } => {
                let inv = inverse_permutation(order);
                accumulate(adj, *x, g.permute(&inv).expect("inverse permutation is valid"));
            }
            Op::Reshape(x) => {
                accumulate(adj, *x, g.reshape(self.shape(*x)).expect("same element count"));
            }
            Op::Sum { x, kept } => {
                let gk = g.reshape(kept).expect("kept shape has output element count");
                accumulate(adj, *x, gk.broadcast_to(self.shape(*x)));
            }
            Op::PadFront { x, count } => {
                let xs = self.shape(*x);
                let len = *xs.last().expect("rank >= 1");
                let padded = len + count;
                let mut out = Vec::with_capacity(self.value(*x).len());
                for row in g.data().chunks(padded) {
                    out.extend_from_slice(&row[*count..]);
                }
                accumulate(adj, *x, Tensor::from_raw(xs.to_vec(), out));
            }
            Op::SliceLast { x, start } => {
                let xs = self.shape(*x);
                let len = *xs.last().expect("rank >= 1");
                let kept = *out_shape.last().expect("rank >= 1");
                let mut out = vec![T::zero(); self.value(*x).len()];
                for (dst, src) in out.chunks_mut(len).zip(g.data().chunks(kept)) {
                    dst[*start..*start + kept].copy_from_slice(src);
                }
                accumulate(adj, *x, Tensor::from_raw(xs.to_vec(), out));
            }
            Op::Acf { x, centered, denoms } => {
                let xs = self.shape(*x);
                let len = *xs.last().expect("rank >= 1");
                let mut dz = vec![T::zero(); self.value(*x).len()];
                for (r, dzr) in dz.chunks_mut(len).enumerate() {
                    kernels::acf_row_backward(
                        &centered[r * len..(r + 1) * len],
                        denoms[r],
                        &node.value.data()[r * (len - 1)..(r + 1) * (len - 1)],
                        &g.data()[r * (len - 1)..(r + 1) * (len - 1)],
                        dzr,
                    );
                }
                accumulate(adj, *x, Tensor::from_raw(xs.to_vec(), dz));
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                accumulate(adj, *x, Tensor::from_raw(self.shape(*x).to_vec(), gx));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let shape = self.shape(*logits);
                let (n, classes) = (shape[0], shape[1]);
                let scale = g.data()[0] / T::lit(n as f64);
                let mut gx = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    gx[row * classes + label] -= T::one();
                }
                for v in &mut gx {
                    *v *= scale;
                }
                accumulate(adj, *logits, Tensor::from_raw(shape.to_vec(), gx));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let ash = av.shape();
        let bsh = bv.shape();
        let (m, n) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let q = bsh[bsh.len() - 1];
        let shared = bsh.len() == 2;
        let batches = if shared { 1 } else { av.len() / (m * n) };
        let rows = if shared { av.len() / n } else { m };
        if self.wants(a) {
            let mut ga = vec![T::zero(); av.len()];
            for bi in 0..batches {
                kernels::matmul_bt_acc(
                    &g.data()[bi * rows * q..(bi + 1) * rows * q],
                    &bv.data()[bi * n * q..(bi + 1) * n * q],
                    rows,
                    n,
                    q,
                    &mut ga[bi * rows * n..(bi + 1) * rows * n],
                );
            }
            accumulate(adj, a, Tensor::from_raw(ash.to_vec(), ga));
        }
        if self.wants(b) {
            let mut gb = vec![T::zero(); bv.len()];
            for bi in 0..batches {
                let dst = if shared {
                    &mut gb[..]
                } else {
                    &mut gb[bi * n * q..(bi + 1) * n * q]
                };
                kernels::matmul_at_acc(
                    &av.data()[bi * rows * n..(bi + 1) * rows * n],
                    &g.data()[bi * rows * q..(bi + 1) * rows * q],
                    rows,
                    n,
                    q,
                    dst,
                );
            }
            accumulate(adj, b, Tensor::from_raw(bsh.to_vec(), gb));
        }
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape matches node"),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests;
