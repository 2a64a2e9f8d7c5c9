//! Adam optimizer.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must be in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T = f64> {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like every parameter in `params`.
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = params
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
///
/// Parameters without an entry in `grads` are left untouched, and so are
/// their moments. The step counter advances by exactly one per call.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        let m = state
            .first
            .get(name)
            .ok_or_else(|| Error::arg(format!("no optimizer state for `{name}`")))?;
        if p.shape() != g.shape() || m.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let bias1 = T::lit(1.0 - c.beta1.powi(t));
    let bias2 = T::lit(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.first.get_mut(name).expect("checked above");
        let v = state.second.get_mut(name).expect("moments are created together");
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![w]).unwrap());
        s
    }

    fn grads(g: f64) -> IndexMap<String, Tensor<f64>> {
        IndexMap::from([("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_store(0.7);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam_step(&mut p, &grads(0.0), &mut st).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after one step with g = 1, so Δ = lr / (1 + eps).
        let mut p = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        adam_step(&mut p, &grads(1.0), &mut st).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        for _ in 0..100 {
            let w = p.get("w").unwrap().data()[0];
            adam_step(&mut p, &grads(2.0 * w), &mut st).unwrap();
        }
        let w = p.get("w").unwrap().data()[0];
        assert!(w.abs() < 0.05, "w = {w}");
    }

    #[test]
    fn shape_mismatch_is_rejected_without_stepping() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let bad = IndexMap::from([("w".to_string(), Tensor::<f64>::zeros(&[2]))]);
        assert!(adam_step(&mut p, &bad, &mut st).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
