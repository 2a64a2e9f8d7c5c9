//! Autocorrelation, the residual loss, and task losses.

use std::io::Write;
use std::path::Path;

use crate::autograd::{kernels, Graph, Var};
use crate::config::ResidualLossMode;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Autocorrelation coefficients along the last axis at lags `1..L`.
#[derive(Clone, Debug, PartialEq)]
pub struct AcfMatrix {
    /// Input shape with the last axis replaced by `L - 1`; entry `j` is lag `j + 1`.
    pub values: Tensor<f64>,
    /// Mean of each row, in row-major order over the leading axes.
    pub means: Vec<f64>,
    /// Rows with zero variance, whose coefficients are defined as 0.
    pub degenerate: Vec<bool>,
}

impl AcfMatrix {
    pub fn lags(&self) -> usize {
        *self.values.shape().last().expect("rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.lags();
        &self.values.data()[r * n..(r + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes `lag,channel,value` rows; leading axes are flattened into the channel index.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "lag,channel,value").expect("write to vec");
        let n = self.lags();
        for lag in 0..n {
            for r in 0..self.degenerate.len() {
                writeln!(buf, "{},{},{:?}", lag + 1, r, self.values.data()[r * n + lag])
                    .expect("write to vec");
            }
        }
        crate::io::write_atomic(path, &buf)
    }
}

/// Autocorrelation of each row of `z` (last axis = time, length ≥ 2).
pub fn acf<T: Real>(z: &Tensor<T>) -> Result<AcfMatrix> {
    let len = *z.shape().last().unwrap_or(&0);
    if len < 2 {
        return Err(Error::arg(format!(
            "autocorrelation needs at least 2 time steps, got shape {:?}",
            z.shape()
        )));
    }
    let x: Vec<f64> = z.to_f64_vec();
    let rows = x.len() / len;
    let mut centered = vec![0.0; len];
    let mut out = vec![0.0; rows * (len - 1)];
    let mut means = Vec::with_capacity(rows);
    let mut degenerate = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let denom = kernels::acf_row(row, &mut centered, &mut out[r * (len - 1)..(r + 1) * (len - 1)]);
        means.push(row.iter().sum::<f64>() / len as f64);
        degenerate.push(denom <= 0.0);
    }
    let mut shape = z.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = len - 1;
    Ok(AcfMatrix {
        values: Tensor::new(shape, out)?,
        means,
        degenerate,
    })
}

/// Largest |coefficient| per row (0 for degenerate rows).
pub fn max_abs_acf_per_row<T: Real>(z: &Tensor<T>) -> Result<Vec<f64>> {
    let a = acf(z)?;
    Ok((0..a.degenerate.len())
        .map(|r| a.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect())
}

/// The two terms of the residual loss, kept apart for reporting.
#[derive(Clone, Copy, Debug)]
pub struct ResidualTerms {
    /// Mean squared out-of-band autocorrelation (a constant zero node in mse-only mode).
    pub acf: Var,
    pub mse: Var,
    pub total: Var,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Residual loss on `z` (last axis = time), broken into its terms.
///
/// Full mode: `mean(ReLU(|a| - α/√L)²) + mean(z²)`, where `a` are the lag
/// 1..L-1 autocorrelations of every row. Means run over every leading axis,
/// which for a batch is the average of the per-sample losses.
pub fn residual_terms<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    alpha: f64,
    mode: ResidualLossMode,
) -> Result<ResidualTerms> {
    check_alpha(alpha)?;
    let sq = g.square(z);
    let mse = g.mean_all(sq);
    let acf = match mode {
        ResidualLossMode::Full => {
            let len = *g.shape(z).last().unwrap_or(&0);
            let a = g.acf(z)?;
            let a = g.abs(a);
            let band = T::lit(alpha / (len as f64).sqrt());
            let over = g.add_scalar(a, -band);
            let over = g.relu(over);
            let over = g.square(over);
            g.mean_all(over)
        }
        ResidualLossMode::MseOnly => g.constant(Tensor::scalar(T::zero())),
    };
    let total = g.add(acf, mse)?;
    Ok(ResidualTerms { acf, mse, total })
}

pub fn residual_loss<T: Real>(g: &mut Graph<T>, z: Var, alpha: f64, mode: ResidualLossMode) -> Result<Var> {
    Ok(residual_terms(g, z, alpha, mode)?.total)
}

/// `L_t + λ·L_r`
pub fn total_loss<T: Real>(g: &mut Graph<T>, task: Var, residual: Var, lambda: f64) -> Result<Var> {
    if g.value(task).len() != 1 || g.value(residual).len() != 1 {
        return Err(Error::shape("total_loss", g.shape(task), g.shape(residual)));
    }
    let weighted = g.scale(residual, T::lit(lambda));
    g.add(task, weighted)
}

pub fn mse_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("mse_loss", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// Mean squared error over positions where `mask` is 1.
pub fn masked_mse_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mask: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("masked_mse_loss", g.shape(pred), g.shape(target)));
    }
    if mask.shape() != g.shape(pred) {
        return Err(Error::shape("masked_mse_loss", g.shape(pred), mask.shape()));
    }
    let count = mask.data().iter().filter(|&&m| m != T::zero()).count();
    if count == 0 {
        return Err(Error::arg("mask selects no positions"));
    }
    let d = g.sub(pred, target)?;
    let m = g.constant(mask.clone());
    let d = g.mul(d, m)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scale(s, T::lit(1.0 / count as f64)))
}

pub fn cross_entropy_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}
