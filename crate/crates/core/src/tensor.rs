//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::real::Real;

/// A dense, row-major, n-dimensional array.
///
/// `shape.iter().product() == data.len()` always holds. A rank-0 tensor
/// (empty shape) holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `src` (right-aligned, broadcastable) while walking `out`.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every position of `out_shape`, yielding the flat output index and
/// the flat offsets into two broadcast operands.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..total / inner {
        for j in 0..inner {
            f(o, base_a + j * ia, base_b + j * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base_a -= sa[d] * idx[d];
            base_b -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::arg(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor data at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs; finiteness is checked by the
    /// trainer rather than on every intermediate.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_raw(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::arg(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let flat: usize = index
            .iter()
            .zip(strides(&self.shape))
            .zip(&self.shape)
            .map(|((&i, s), &n)| {
                assert!(i < n, "index {i} out of bounds for axis of length {n}");
                i * s
            })
            .sum();
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_raw(shape.to_vec(), self.data))
    }

    /// Materializes the axis permutation `order` (output axis `i` is input axis `order[i]`).
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.rank())?;
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let zero = vec![0; out_shape.len()];
        for_each_broadcast(&out_shape, &src_strides, &zero, |_, src, _| {
            out.push(self.data[src])
        });
        Ok(Self::from_raw(out_shape, out))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sums `self` down to `target`, undoing a broadcast from `target` to `self.shape`.
    pub(crate) fn sum_to_shape(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        let mut out = vec![T::zero(); numel(target)];
        let st = broadcast_strides(target, &self.shape);
        let zero = vec![0; self.shape.len()];
        for_each_broadcast(&self.shape, &st, &zero, |o, t, _| out[t] += self.data[o]);
        Self::from_raw(target.to_vec(), out)
    }

    /// Expands `self` to `target` under broadcasting rules.
    pub(crate) fn broadcast_to(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        let st = broadcast_strides(&self.shape, target);
        let zero = vec![0; target.len()];
        let mut out = Vec::with_capacity(numel(target));
        for_each_broadcast(target, &st, &zero, |_, s, _| out.push(self.data[s]));
        Self::from_raw(target.to_vec(), out)
    }
}

pub(crate) fn check_permutation(order: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if order.len() != rank {
        return Err(Error::arg(format!(
            "axis order {order:?} is not a permutation of 0..{rank}"
        )));
    }
    for &a in order {
        if a >= rank || seen[a] {
            return Err(Error::arg(format!(
                "axis order {order:?} is not a permutation of 0..{rank}"
            )));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
