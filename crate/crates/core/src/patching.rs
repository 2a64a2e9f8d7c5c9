//! Multi-scale temporal patching.
//!
//! A `C × L` series is front-padded with zeros to a multiple of the patch
//! size `p`, then cut left to right into `L' = ⌈L/p⌉` non-overlapping patches,
//! giving `C × L' × p`. Unpatching concatenates the patches and drops the
//! padded prefix.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A `channels × time` series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTensor<T = f64> {
    values: Tensor<T>,
}

impl<T: Real> SeriesTensor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::arg(format!(
                "series must be channels × time with both >= 1, got shape {s:?}"
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("series values".into()));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let c = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::arg("ragged channel rows"));
        }
        Self::new(Tensor::new(vec![c, l], rows.concat())?)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let l = self.len();
        &self.values.data()[c * l..(c + 1) * l]
    }
}

/// A `channels × patches × patch_size` array plus the length it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor<T = f64> {
    values: Tensor<T>,
    original_len: usize,
}

impl<T: Real> PatchTensor<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn num_patches(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn patch_size(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    /// Zeros prepended during patching: `L'·p − L`.
    pub fn pad_count(&self) -> usize {
        self.num_patches() * self.patch_size() - self.original_len
    }

    /// Wraps raw `C × L' × p` values (e.g. decoder output) for unpatching.
    pub fn from_values(values: Tensor<T>, original_len: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(Error::arg(format!("patch tensor must be rank 3, got {s:?}")));
        }
        check_lengths(s[1], s[2], original_len)?;
        Ok(Self { values, original_len })
    }
}

/// `⌈L / p⌉`
pub fn num_patches(len: usize, patch_size: usize) -> usize {
    len.div_ceil(patch_size)
}

fn check_patch_size(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::arg("patch size must be >= 1"));
    }
    Ok(())
}

fn check_lengths(patches: usize, p: usize, len: usize) -> Result<()> {
    let padded = patches * p;
    if p == 0 || padded < len || padded - len >= p {
        return Err(Error::arg(format!(
            "{patches} patches of size {p} cannot hold a series of length {len}"
        )));
    }
    Ok(())
}

pub fn patch<T: Real>(x: &SeriesTensor<T>, p: usize) -> Result<PatchTensor<T>> {
    check_patch_size(p)?;
    let (c, l) = (x.channels(), x.len());
    let n = num_patches(l, p);
    let pad = n * p - l;
    let mut out = Vec::with_capacity(c * n * p);
    for ch in 0..c {
        out.extend(std::iter::repeat_n(T::zero(), pad));
        out.extend_from_slice(x.channel(ch));
    }
    Ok(PatchTensor {
        values: Tensor::new(vec![c, n, p], out)?,
        original_len: l,
    })
}

pub fn unpatch<T: Real>(x: &PatchTensor<T>, original_len: usize) -> Result<SeriesTensor<T>> {
    let s = x.values.shape();
    let (c, n, p) = (s[0], s[1], s[2]);
    check_lengths(n, p, original_len)?;
    let pad = n * p - original_len;
    let mut out = Vec::with_capacity(c * original_len);
    for row in x.values.data().chunks(n * p) {
        out.extend_from_slice(&row[pad..]);
    }
    SeriesTensor::new(Tensor::new(vec![c, original_len], out)?)
}

/// Graph form of [`patch`] over the last axis: `[.., L] → [.., ⌈L/p⌉, p]`.
pub fn patch_var<T: Real>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    check_patch_size(p)?;
    let shape = g.shape(x).to_vec();
    let l = *shape
        .last()
        .ok_or_else(|| Error::arg("patching needs rank >= 1"))?;
    let n = num_patches(l, p);
    let padded = g.pad_front(x, n * p - l)?;
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.extend([n, p]);
    g.reshape(padded, &out_shape)
}

/// Graph form of [`unpatch`]: `[.., L', p] → [.., L]`.
pub fn unpatch_var<T: Real>(g: &mut Graph<T>, x: Var, original_len: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::arg(format!("unpatching needs rank >= 2, got {shape:?}")));
    }
    let (n, p) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    check_lengths(n, p, original_len)?;
    let mut flat = shape[..shape.len() - 2].to_vec();
    flat.push(n * p);
    let joined = g.reshape(x, &flat)?;
    g.slice_last(joined, n * p - original_len, original_len)
}

/// Matrix `M[src, dst]` such that `x · M` linearly interpolates a length-`src`
/// signal to length `dst` (half-pixel centers, edge values clamped).
pub fn interpolation_matrix<T: Real>(src: usize, dst: usize) -> Result<Tensor<T>> {
    if src == 0 || dst == 0 {
        return Err(Error::arg("interpolation lengths must be >= 1"));
    }
    let mut m = vec![T::zero(); src * dst];
    let ratio = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let w = pos - lo as f64;
        m[lo * dst + i] += T::lit(1.0 - w);
        m[hi * dst + i] += T::lit(w);
    }
    Tensor::new(vec![src, dst], m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(c: usize, data: Vec<f64>) -> SeriesTensor<f64> {
        let l = data.len() / c;
        SeriesTensor::new(Tensor::new(vec![c, l], data).unwrap()).unwrap()
    }

    #[test]
    fn pads_at_the_front() {
        let x = series(1, (1..=10).map(f64::from).collect());
        let p = patch(&x, 4).unwrap();
        assert_eq!(p.values().shape(), &[1, 3, 4]);
        assert_eq!(
            p.values().data(),
            &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]
        );
        assert_eq!(p.pad_count(), 2);
    }

    #[test]
    fn degenerate_patch_sizes() {
        let x = series(2, (0..8).map(f64::from).collect());
        let p1 = patch(&x, 1).unwrap();
        assert_eq!(p1.values().shape(), &[2, 4, 1]);
        assert_eq!(p1.values().data(), x.values().data());
        let pl = patch(&x, 4).unwrap();
        assert_eq!(pl.values().shape(), &[2, 1, 4]);
        assert_eq!(pl.pad_count(), 0);
        assert!(patch(&x, 0).is_err());
    }

    #[test]
    fn unpatch_drops_exactly_the_pad() {
        let x = series(1, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = patch(&x, 3).unwrap();
        assert_eq!(p.pad_count(), 1);
        assert_eq!(p.values().data()[0], 0.0);
        // decoder-style output with junk in the padded slot
        let mut junk = p.values().clone();
        junk.data_mut()[0] = 99.0;
        let back = unpatch(&PatchTensor::from_values(junk, 5).unwrap(), 5).unwrap();
        assert_eq!(back, x);
        assert!(unpatch(&p, 7).is_err());
        assert!(unpatch(&p, 3).is_err());
    }

    #[test]
    fn graph_patching_matches_plain_and_routes_gradients() {
        let x = series(2, (0..14).map(|v| v as f64 * 0.5 - 1.0).collect());
        let mut g = Graph::new();
        let v = g.param(x.values().clone());
        let pv = patch_var(&mut g, v, 3).unwrap();
        assert_eq!(g.value(pv), patch(&x, 3).unwrap().values());
        let back = unpatch_var(&mut g, pv, 7).unwrap();
        assert_eq!(g.value(back), x.values());
        let s = g.sum_all(back);
        g.backward(s).unwrap();
        assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn interpolation_rows_are_convex_weights() {
        let m = interpolation_matrix::<f64>(4, 10).unwrap();
        for i in 0..10 {
            let col: f64 = (0..4).map(|s| m.get(&[s, i])).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        let id = interpolation_matrix::<f64>(5, 5).unwrap();
        for s in 0..5 {
            for d in 0..5 {
                assert_eq!(id.get(&[s, d]), if s == d { 1.0 } else { 0.0 });
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(c in 1usize..5, l in 1usize..40, extra in 0usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..c * l).map(|_| rng.random_range(-10.0..10.0)).collect();
            let x = series(c, data);
            for p in 1..=l + extra {
                let pt = patch(&x, p).unwrap();
                prop_assert_eq!(pt.num_patches(), l.div_ceil(p));
                prop_assert!(pt.values().data()[..pt.pad_count()].iter().all(|&v| v == 0.0));
                prop_assert_eq!(unpatch(&pt, l).unwrap(), x.clone());
            }
        }
    }
}
