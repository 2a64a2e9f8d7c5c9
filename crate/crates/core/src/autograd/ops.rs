use rand::Rng;

use super::kernels;
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{broadcast_shape, broadcast_strides, check_permutation, for_each_broadcast, Tensor};

/// Elementwise binary operators with numpy-style broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(op.name(), av.shape(), bv.shape()))?;
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = if av.shape() == bv.shape() {
            ad.iter().zip(bd).map(|(&x, &y)| apply(op, x, y)).collect()
        } else {
            let sa = broadcast_strides(av.shape(), &out_shape);
            let sb = broadcast_strides(bv.shape(), &out_shape);
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| {
                out.push(apply(op, ad[ia], bd[ib]))
            });
            out
        };
        let node = match op {
            BinaryOp::Add => Op::Add(a, b),
            BinaryOp::Sub => Op::Sub(a, b),
            BinaryOp::Mul => Op::Mul(a, b),
            BinaryOp::Div => Op::Div(a, b),
        };
        Ok(self.push_op(Tensor::from_raw(out_shape, data), node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Div, a, b)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push_op(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.affine(x, c, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.affine(x, T::one(), c)
    }

    /// Batched matrix product `a[.., m, n] · b[.., n, q]`.
    ///
    /// `b` is either a plain matrix shared across all leading axes of `a`, or
    /// has exactly the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        let err = || Error::shape("matmul", ash, bsh);
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(err());
        }
        let (m, n) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bn, q) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if n != bn {
            return Err(err());
        }
        let shared = bsh.len() == 2;
        if !shared && (bsh.len() != ash.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2]) {
            return Err(err());
        }
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().expect("rank >= 2") = q;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        if shared {
            let rows = av.len() / n.max(1);
            if n > 0 {
                kernels::matmul_acc(av.data(), bv.data(), rows, n, q, &mut out);
            }
        } else {
            let batches = av.len() / (m * n).max(1);
            for bi in 0..batches {
                kernels::matmul_acc(
                    &av.data()[bi * m * n..(bi + 1) * m * n],
                    &bv.data()[bi * n * q..(bi + 1) * n * q],
                    m,
                    n,
                    q,
                    &mut out[bi * m * q..(bi + 1) * m * q],
                );
            }
        }
        Ok(self.push_op(Tensor::from_raw(out_shape, out), Op::MatMul { a, b }, &[a, b]))
    }

    /// Exact GELU, `x · Φ(x)` with the erf form of the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let value = self
            .value(x)
            .map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.push_op(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push_op(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push_op(value, Op::Square(x), &[x])
    }

    /// Output axis `i` is input axis `order[i]`.
    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        check_permutation(order, self.value(x).rank())?;
        if order.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(x);
        }
        let value = self.value(x).permute(order)?;
        Ok(self.push_op(
            value,
            Op::Permute {
                x,
                order: order.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    /// Sums over `axes`; reduced axes are dropped unless `keepdim`.
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let mut kept = shape.clone();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::arg(format!("axis {a} out of range for shape {shape:?}")));
            }
            kept[a] = 1;
        }
        let mut out = vec![T::zero(); kept.iter().product()];
        let sk = broadcast_strides(&kept, &shape);
        let zero = vec![0; shape.len()];
        let data = xv.data();
        for_each_broadcast(&shape, &sk, &zero, |o, k, _| out[k] += data[o]);
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        Ok(self.push_op(Tensor::from_raw(out_shape, out), Op::Sum { x, kept }, &[x]))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x);
        let mut count = 1usize;
        for &a in axes {
            count *= shape.get(a).copied().unwrap_or(1);
        }
        let s = self.sum(x, axes, keepdim)?;
        Ok(self.scale(s, T::one() / T::lit(count.max(1) as f64)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum(x, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n.max(1) as f64))
    }

    /// Prepends `count` zeros along the last axis.
    pub fn pad_front(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::arg("pad_front needs rank >= 1"))?;
        *shape.last_mut().expect("rank >= 1") = len + count;
        let mut out = Vec::with_capacity(shape.iter().product());
        if len > 0 {
            for row in xv.data().chunks(len) {
                out.extend(std::iter::repeat_n(T::zero(), count));
                out.extend_from_slice(row);
            }
        }
        Ok(self.push_op(Tensor::from_raw(shape, out), Op::PadFront { x, count }, &[x]))
    }

    /// Keeps positions `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let full = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::arg("slice_last needs rank >= 1"))?;
        if start + len > full {
            return Err(Error::arg(format!(
                "slice {start}..{} out of range for axis of length {full}",
                start + len
            )));
        }
        if start == 0 && len == full {
            return Ok(x);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let mut out = Vec::with_capacity(shape.iter().product());
        if full > 0 {
            for row in xv.data().chunks(full) {
                out.extend_from_slice(&row[start..start + len]);
            }
        }
        Ok(self.push_op(Tensor::from_raw(shape, out), Op::SliceLast { x, start }, &[x]))
    }

    /// Autocorrelation coefficients at lags `1..L` along the last axis.
    ///
    /// Output shape is the input shape with the last axis shortened to `L - 1`.
    /// Rows with zero variance produce zeros and pass no gradient.
    pub fn acf(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let len = *xv.shape().last().unwrap_or(&0);
        if len < 2 {
            return Err(Error::arg(format!(
                "autocorrelation needs at least 2 time steps, got shape {:?}",
                xv.shape()
            )));
        }
        let rows = xv.len() / len;
        let mut centered = vec![T::zero(); xv.len()];
        let mut denoms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * (len - 1)];
        for r in 0..rows {
            denoms.push(kernels::acf_row(
                &xv.data()[r * len..(r + 1) * len],
                &mut centered[r * len..(r + 1) * len],
                &mut out[r * (len - 1)..(r + 1) * (len - 1)],
            ));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len - 1;
        Ok(self.push_op(
            Tensor::from_raw(shape, out),
            Op::Acf { x, centered, denoms },
            &[x],
        ))
    }

    /// Non-overlapping max pooling along the last axis with window `window`.
    ///
    /// Windows are aligned to the end of the series, so when the length is
    /// not divisible the first window is the short one (the same front
    /// alignment that temporal patching uses).
    pub fn max_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(Error::arg("pooling window must be >= 1"));
        }
        let xv = self.value(x);
        let len = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::arg("max_pool needs rank >= 1"))?;
        let pooled = len.div_ceil(window);
        let pad = pooled * window - len;
        let rows = xv.len().checked_div(len).unwrap_or(0);
        let mut out = Vec::with_capacity(rows * pooled);
        let mut argmax = Vec::with_capacity(rows * pooled);
        for r in 0..rows {
            let row = &xv.data()[r * len..(r + 1) * len];
            for w in 0..pooled {
                let lo = (w * window).saturating_sub(pad);
                let hi = (w + 1) * window - pad;
                let mut best = lo;
                for t in lo + 1..hi {
                    if row[t] > row[best] {
                        best = t;
                    }
                }
                out.push(row[best]);
                argmax.push(r * len + best);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = pooled;
        Ok(self.push_op(Tensor::from_raw(shape, out), Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits[N, M]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", shape, &[labels.len()]));
        }
        let (n, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for (row, &label) in lv.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            loss += denom.ln() + max - row[label];
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let value = Tensor::scalar(loss / T::lit(n.max(1) as f64));
        Ok(self.push_op(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Stochastic depth on a residual branch.
    ///
    /// In training mode each sample (index along axis 0) is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// In eval mode, or with `rate == 0`, this is the identity.
    pub fn drop_path<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg(format!(
                "drop-path rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let batch = *shape.first().unwrap_or(&1);
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..batch)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut mshape = vec![1; shape.len().max(1)];
        mshape[0] = batch;
        let m = self.constant(Tensor::from_raw(mshape, mask));
        self.mul(x, m)
    }
}

#[inline]
fn apply<T: Real>(op: BinaryOp, x: T, y: T) -> T {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}
