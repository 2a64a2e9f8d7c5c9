//! Named parameter storage and its JSON checkpoint encoding.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Format tag written into every parameter file.
pub const PARAMS_FORMAT: &str = "msd-mixer-params/1";

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f64> {
    params: IndexMap<String, Tensor<T>>,
}

/// Graph leaves created for a [`ParamStore`], keyed by parameter name.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(format!("parameter `{name}` is not bound")))
    }

    /// Binds names to leaves that already exist in a graph.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ParamFile {
    format: String,
    params: Vec<ParamRecord>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Adds every parameter to `g` as a leaf; trainable leaves receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let v = if trainable {
                    g.param_named(name, value.clone())
                } else {
                    g.constant(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Collects accumulated gradients for bound parameters (zeros where none reached).
    pub fn gradients(&self, g: &Graph<T>, bindings: &Bindings) -> IndexMap<String, Tensor<T>> {
        bindings
            .iter()
            .map(|(name, v)| {
                let grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (name.to_string(), grad)
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub(crate) fn to_file(&self) -> ParamFile {
        ParamFile {
            format: PARAMS_FORMAT.to_string(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_file(file: ParamFile) -> Result<Self> {
        if file.format != PARAMS_FORMAT {
            return Err(Error::arg(format!(
                "unsupported parameter format `{}` (expected `{PARAMS_FORMAT}`)",
                file.format
            )));
        }
        let mut store = Self::new();
        for rec in file.params {
            let t = Tensor::<f64>::new(rec.shape, rec.values)
                .map_err(|e| Error::arg(format!("parameter `{}`: {e}", rec.name)))?;
            store.insert(rec.name, t.cast());
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
