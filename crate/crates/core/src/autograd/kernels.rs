//! Slice-level kernels shared by graph ops and plain-data helpers.

use crate::real::Real;

/// `out[m,q] += a[m,n] · b[n,q]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, n: usize, q: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * q..(k + 1) * q];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m,n] += g[m,q] · b[n,q]ᵀ`
pub(crate) fn matmul_bt_acc<T: Real>(g: &[T], b: &[T], m: usize, n: usize, q: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * q..(i + 1) * q];
        for k in 0..n {
            let brow = &b[k * q..(k + 1) * q];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * n + k] += acc;
        }
    }
}

/// `out[n,q] += a[m,n]ᵀ · g[m,q]`
pub(crate) fn matmul_at_acc<T: Real>(a: &[T], g: &[T], m: usize, n: usize, q: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * q..(i + 1) * q];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[k * q..(k + 1) * q];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

/// Autocorrelation of one series at lags `1..len`.
///
/// Writes the centered series into `centered` and the coefficients into
/// `out` (length `len - 1`); returns the denominator `Σ (z_t - z̄)²`.
/// A zero denominator yields all-zero coefficients.
pub(crate) fn acf_row<T: Real>(z: &[T], centered: &mut [T], out: &mut [T]) -> T {
    let len = z.len();
    let mean = z.iter().copied().sum::<T>() / T::lit(len as f64);
    for (c, &v) in centered.iter_mut().zip(z) {
        *c = v - mean;
    }
    let denom: T = centered.iter().map(|&c| c * c).sum();
    for lag in 1..len {
        out[lag - 1] = if denom > T::zero() {
            let num: T = (lag..len).map(|t| centered[t] * centered[t - lag]).sum();
            num / denom
        } else {
            T::zero()
        };
    }
    denom
}

/// Vector-Jacobian product of [`acf_row`] for upstream gradient `g` over lags `1..len`.
pub(crate) fn acf_row_backward<T: Real>(centered: &[T], denom: T, coeffs: &[T], g: &[T], dz: &mut [T]) {
    let len = centered.len();
    if denom <= T::zero() {
        return;
    }
    let ga: T = g.iter().zip(coeffs).map(|(&gv, &a)| gv * a).sum();
    let two = T::lit(2.0);
    let mut dc = vec![T::zero(); len];
    for (t, d) in dc.iter_mut().enumerate() {
        let mut acc = T::zero();
        for lag in 1..len {
            let gl = g[lag - 1];
            if t >= lag {
                acc += gl * centered[t - lag];
            }
            if t + lag < len {
                acc += gl * centered[t + lag];
            }
        }
        *d = acc / denom - two * centered[t] * ga / denom;
    }
    let mean_dc = dc.iter().copied().sum::<T>() / T::lit(len as f64);
    for (o, d) in dz.iter_mut().zip(dc) {
        *o += d - mean_dc;
    }
}
