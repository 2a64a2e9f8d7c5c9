//! Model and task configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variant; everything except `Standard` is an ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Standard,
    /// Patch sizes arranged in ascending order.
    Inverted,
    /// Max pooling on the way in and linear interpolation on the way out instead of patching.
    NoPatching,
    /// Every layer uses patch size `round(√L)`.
    UniformPatch,
    /// Trained with the residual loss weight forced to zero.
    NoResidualLoss,
}

/// How the residual loss treats the final residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualLossMode {
    /// Autocorrelation hinge plus mean square.
    Full,
    /// Mean square only (inputs with masked positions have no meaningful autocorrelation).
    MseOnly,
}

/// Scaling term of MASE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaseDenominator {
    /// Mean seasonal difference over the forecast horizon itself.
    #[default]
    InHorizon,
    /// Mean seasonal difference over the look-back window (M4 convention).
    TrainingSeries,
}

/// Which positions an imputation mask hides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Independent (channel, time) positions.
    #[default]
    PerPosition,
    /// Whole time steps across all channels.
    PerTimestep,
}

/// Reference scores of the Naive2 baseline for OWA.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Naive2Reference {
    pub smape: f64,
    pub mase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskDescriptor {
    LongForecast {
        horizon: usize,
    },
    ShortForecast {
        horizon: usize,
        seasonality: usize,
        #[serde(default)]
        mase_denominator: MaseDenominator,
        /// When absent, a seasonal-naive forecast over the same samples is used.
        #[serde(default)]
        naive2: Option<Naive2Reference>,
    },
    Imputation {
        mask_ratio: f64,
        #[serde(default)]
        mask_mode: MaskMode,
    },
    /// Reconstruction-based anomaly detection; `anomaly_ratio` sets the score quantile.
    Anomaly {
        anomaly_ratio: f64,
    },
    Classification {
        num_classes: usize,
    },
}

impl TaskDescriptor {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TaskDescriptor::LongForecast { .. } => "long-forecast",
            TaskDescriptor::ShortForecast { .. } => "short-forecast",
            TaskDescriptor::Imputation { .. } => "imputation",
            TaskDescriptor::Anomaly { .. } => "anomaly",
            TaskDescriptor::Classification { .. } => "classification",
        }
    }

    pub fn residual_mode(&self) -> ResidualLossMode {
        match self {
            TaskDescriptor::Imputation { .. } => ResidualLossMode::MseOnly,
            _ => ResidualLossMode::Full,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskDescriptor::Classification { .. })
    }

    pub fn is_forecast(&self) -> bool {
        matches!(
            self,
            TaskDescriptor::LongForecast { .. } | TaskDescriptor::ShortForecast { .. }
        )
    }

    /// Length of the per-channel head output (or class count).
    pub fn output_len(&self, input_len: usize) -> usize {
        match *self {
            TaskDescriptor::LongForecast { horizon } | TaskDescriptor::ShortForecast { horizon, .. } => {
                horizon
            }
            TaskDescriptor::Imputation { .. } | TaskDescriptor::Anomaly { .. } => input_len,
            TaskDescriptor::Classification { num_classes } => num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskDescriptor::LongForecast { horizon } => {
                if horizon == 0 {
                    return Err(Error::config("task.horizon", "must be >= 1"));
                }
            }
            TaskDescriptor::ShortForecast {
                horizon,
                seasonality,
                mase_denominator,
                naive2,
            } => {
                if horizon == 0 {
                    return Err(Error::config("task.horizon", "must be >= 1"));
                }
                if seasonality == 0 {
                    return Err(Error::config("task.seasonality", "must be >= 1"));
                }
                if mase_denominator == MaseDenominator::InHorizon && horizon <= seasonality {
                    return Err(Error::config(
                        "task.seasonality",
                        "horizon-based MASE needs horizon > seasonality",
                    ));
                }
                if let Some(n) = naive2 {
                    if !(n.smape > 0.0 && n.mase > 0.0) {
                        return Err(Error::config("task.naive2", "reference scores must be > 0"));
                    }
                }
            }
            TaskDescriptor::Imputation { mask_ratio, .. } => {
                if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
                    return Err(Error::config("task.mask_ratio", "must be in (0, 1)"));
                }
            }
            TaskDescriptor::Anomaly { anomaly_ratio } => {
                if !(anomaly_ratio > 0.0 && anomaly_ratio < 1.0) {
                    return Err(Error::config("task.anomaly_ratio", "must be in (0, 1)"));
                }
            }
            TaskDescriptor::Classification { num_classes } => {
                if num_classes < 2 {
                    return Err(Error::config("task.num_classes", "must be >= 2"));
                }
            }
        }
        Ok(())
    }
}

fn default_embed_dim() -> usize {
    64
}

fn default_hidden_multiplier() -> f64 {
    2.0
}

fn default_alpha() -> f64 {
    2.0
}

fn default_lambda() -> f64 {
    1.0
}

/// Everything needed to build a model. The layer count is `patch_sizes.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_len: usize,
    pub channels: usize,
    /// One patch size per layer, applied in this order.
    pub patch_sizes: Vec<usize>,
    /// Width of the per-patch representation.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Hidden width of each MLP block as a multiple of its mixing-axis length.
    #[serde(default = "default_hidden_multiplier")]
    pub hidden_multiplier: f64,
    #[serde(default)]
    pub droppath: f64,
    /// Autocorrelation tolerance: coefficients inside `±alpha/√L` are not penalized.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the residual loss in the training objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub task: TaskDescriptor,
    #[serde(default)]
    pub variant: Variant,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub seed: u64,
    /// Per-sample, per-channel standardization of the look-back window.
    #[serde(default)]
    pub instance_norm: bool,
}

impl ModelConfig {
    /// A standard-variant config with default hyperparameters.
    pub fn new(channels: usize, input_len: usize, patch_sizes: Vec<usize>, task: TaskDescriptor) -> Self {
        Self {
            input_len,
            channels,
            patch_sizes,
            embed_dim: default_embed_dim(),
            hidden_multiplier: default_hidden_multiplier(),
            droppath: 0.0,
            alpha: default_alpha(),
            lambda: default_lambda(),
            task,
            variant: Variant::Standard,
            seed: 0,
            instance_norm: false,
        }
    }

    pub fn layers(&self) -> usize {
        self.patch_sizes.len()
    }

    /// `round(√L)`, the shared patch size of the uniform-patch variant.
    pub fn uniform_patch_size(&self) -> usize {
        ((self.input_len as f64).sqrt().round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 {
            return Err(Error::config("input_len", "must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::config("patch_sizes", "need at least one layer"));
        }
        if self.patch_sizes.contains(&0) {
            return Err(Error::config("patch_sizes", "every patch size must be >= 1"));
        }
        if self.variant == Variant::Standard && self.patch_sizes.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config(
                "patch_sizes",
                "must be in descending order for the standard variant",
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be >= 1"));
        }
        if !(self.hidden_multiplier > 0.0 && self.hidden_multiplier.is_finite()) {
            return Err(Error::config("hidden_multiplier", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.droppath) {
            return Err(Error::config("droppath", "must be in [0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be >= 0"));
        }
        if self.task.residual_mode() == ResidualLossMode::Full && self.input_len < 2 {
            return Err(Error::config(
                "input_len",
                "autocorrelation needs >= 2 time steps",
            ));
        }
        self.task.validate()
    }

    /// Applies the variant's rewrites (layer order, patch sizes, λ). Idempotent.
    pub fn resolved(&self) -> Result<ModelConfig> {
        self.validate()?;
        let mut c = self.clone();
        match c.variant {
            Variant::Inverted => c.patch_sizes.sort_unstable(),
            Variant::UniformPatch => {
                let p = c.uniform_patch_size();
                c.patch_sizes.iter_mut().for_each(|s| *s = p);
            }
            Variant::NoResidualLoss => c.lambda = 0.0,
            Variant::Standard | Variant::NoPatching => {}
        }
        Ok(c)
    }

    /// Hidden width for a block mixing an axis of length `width`.
    pub fn hidden_width(&self, width: usize) -> usize {
        ((self.hidden_multiplier * width as f64).round() as usize).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        serde_json::from_str(
            r#"{"input_len":96,"channels":7,"patch_sizes":[24,12,4,2,1],
                "task":{"kind":"long-forecast","horizon":96}}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = base();
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.alpha, 2.0);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.droppath, 0.0);
        assert_eq!(c.variant, Variant::Standard);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(
            r#"{"input_len":96,"channels":7,"patch_sizes":[1],"bogus":1,
                "task":{"kind":"long-forecast","horizon":96}}"#,
        );
        assert!(r.is_err());
        let r: std::result::Result<TaskDescriptor, _> =
            serde_json::from_str(r#"{"kind":"long-forecast","horizon":9,"extra":true}"#);
        assert!(r.is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = base();
        c.patch_sizes = vec![1, 2];
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "patch_sizes"),
            other => panic!("{other:?}"),
        }
        let mut c = base();
        c.alpha = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "alpha"));
        let mut c = base();
        c.task = TaskDescriptor::Imputation {
            mask_ratio: 1.0,
            mask_mode: MaskMode::PerPosition,
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "task.mask_ratio"));
    }

    #[test]
    fn variants_resolve() {
        let mut c = base();
        c.variant = Variant::Inverted;
        assert_eq!(c.resolved().unwrap().patch_sizes, vec![1, 2, 4, 12, 24]);
        c.variant = Variant::UniformPatch;
        assert_eq!(c.resolved().unwrap().patch_sizes, vec![10; 5]);
        c.variant = Variant::NoResidualLoss;
        let r = c.resolved().unwrap();
        assert_eq!(r.lambda, 0.0);
        assert_eq!(r.resolved().unwrap(), r);
    }

    #[test]
    fn imputation_forces_mse_only() {
        let t = TaskDescriptor::Imputation {
            mask_ratio: 0.25,
            mask_mode: MaskMode::PerPosition,
        };
        assert_eq!(t.residual_mode(), ResidualLossMode::MseOnly);
        assert_eq!(
            TaskDescriptor::Anomaly { anomaly_ratio: 0.01 }.residual_mode(),
            ResidualLossMode::Full
        );
    }
}
