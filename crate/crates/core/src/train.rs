//! Minibatch training with Adam on `L_t + λ·L_r`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::TaskDescriptor;
use crate::data::{stack, Dataset, Label};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_loss, masked_mse_loss, mse_loss, residual_terms, total_loss};
use crate::mixer::Mode;
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::Bindings;
use crate::real::Real;
use crate::tasks::make_imputation_sample;
use crate::tensor::Tensor;

fn default_batch_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Seeds shuffling, imputation masks and drop-path.
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("training.patience", "must be >= 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    /// `L_r`, always computed even when its weight is zero.
    pub residual_loss: f64,
    pub residual_acf: f64,
    pub residual_mse: f64,
    pub total_loss: f64,
    pub val_task_loss: Option<f64>,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// The record without its timing, for reproducibility comparisons.
    pub fn losses(&self) -> [Option<f64>; 6] {
        [
            Some(self.task_loss),
            Some(self.residual_loss),
            Some(self.residual_acf),
            Some(self.residual_mse),
            Some(self.total_loss),
            self.val_task_loss,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation task loss).
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<[Option<f64>; 6]> {
        self.epochs.iter().map(EpochRecord::losses).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Stacked inputs and targets for one step.
#[derive(Clone, Debug)]
pub struct Batch<T = f64> {
    pub x: Tensor<T>,
    pub target: BatchTarget<T>,
    /// Nonzero where the input is observed (imputation only).
    pub observed: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub enum BatchTarget<T = f64> {
    Series(Tensor<T>),
    /// Full series target plus the masked positions the loss is taken over.
    Masked {
        target: Tensor<T>,
        mask: Tensor<T>,
    },
    Classes(Vec<usize>),
}

/// Assembles samples `indices` of `data` for `task`. Imputation masks are drawn from `rng`.
pub fn make_batch<T: Real>(
    data: &Dataset,
    indices: &[usize],
    task: &TaskDescriptor,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<T>> {
    let x = data.stack_inputs(indices)?;
    let samples = indices.iter().map(|&i| &data.samples[i]);
    let batch = match *task {
        TaskDescriptor::LongForecast { .. } | TaskDescriptor::ShortForecast { .. } => {
            let ys: Vec<&Tensor<f64>> = samples
                .map(|s| match &s.y {
                    Label::Forecast(y) => Ok(y),
                    _ => Err(Error::config("task", "forecasting needs forecast labels")),
                })
                .collect::<Result<_>>()?;
            Batch {
                x: x.cast(),
                target: BatchTarget::Series(stack(ys.into_iter())?.cast()),
                observed: None,
            }
        }
        TaskDescriptor::Anomaly { .. } => Batch {
            target: BatchTarget::Series(x.cast()),
            x: x.cast(),
            observed: None,
        },
        TaskDescriptor::Imputation {
            mask_ratio,
            mask_mode,
        } => {
            let mut masked = Vec::with_capacity(indices.len());
            let mut masks = Vec::with_capacity(indices.len());
            for s in samples {
                let m = make_imputation_sample(&s.x, mask_ratio, mask_mode, rng)?;
                masked.push(m.masked);
                masks.push(m.mask);
            }
            let mask = stack(masks.iter())?;
            let observed = mask.map(|m| 1.0 - m);
            Batch {
                x: stack(masked.iter())?.cast(),
                target: BatchTarget::Masked {
                    target: x.cast(),
                    mask: mask.cast(),
                },
                observed: Some(observed.cast()),
            }
        }
        TaskDescriptor::Classification { .. } => {
            let labels = samples
                .map(|s| match s.y {
                    Label::Class(c) => Ok(c),
                    _ => Err(Error::config("task", "classification needs class labels")),
                })
                .collect::<Result<_>>()?;
            Batch {
                x: x.cast(),
                target: BatchTarget::Classes(labels),
                observed: None,
            }
        }
    };
    Ok(batch)
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub task: Var,
    pub residual: Var,
    pub residual_acf: Var,
    pub residual_mse: Var,
    pub total: Var,
}

/// Builds the forward pass and the full objective for `batch`.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bind: &Bindings,
    batch: &Batch<T>,
    mode: &mut Mode<'_>,
) -> Result<LossNodes> {
    let cfg = model.config();
    let x = g.constant(batch.x.clone());
    let f = model.forward(g, bind, x, batch.observed.as_ref(), mode)?;
    let task = match &batch.target {
        BatchTarget::Series(y) => {
            let y = g.constant(y.clone());
            mse_loss(g, f.prediction, y)?
        }
        BatchTarget::Masked { target, mask } => {
            let y = g.constant(target.clone());
            masked_mse_loss(g, f.prediction, y, mask)?
        }
        BatchTarget::Classes(labels) => cross_entropy_loss(g, f.prediction, labels)?,
    };
    let r = residual_terms(g, f.residual, cfg.alpha, cfg.task.residual_mode())?;
    let total = total_loss(g, task, r.total, cfg.lambda)?;
    Ok(LossNodes {
        task,
        residual: r.total,
        residual_acf: r.acf,
        residual_mse: r.mse,
        total,
    })
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> Result<f64> {
    Ok(g.value(v).item()?.to_f64_lossy())
}

fn non_finite<T: Real>(g: &Graph<T>, what: &str) -> Error {
    let culprit = g
        .first_non_finite()
        .unwrap_or_else(|| "an intermediate value".to_string());
    Error::NonFinite(format!("{what}; first non-finite tensor: {culprit}"))
}

/// Mean task loss over `data` in eval mode, with masks drawn from `seed`.
pub fn eval_task_loss<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = make_batch::<T>(data, chunk, &model.config().task, &mut rng)?;
        let mut g = Graph::new();
        let bind = model.params().bind(&mut g, false);
        let l = batch_loss(model, &mut g, &bind, &batch, &mut Mode::Eval)?;
        let v = scalar(&g, l.task)?;
        if !v.is_finite() {
            return Err(non_finite(&g, "validation loss is not finite"));
        }
        sum += v * chunk.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

/// Trains `model` in place. With a validation set, the parameters of the
/// epoch with the lowest validation task loss are restored at the end.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let m = model.config();
    train.check_task(&m.task, m.channels, m.input_len)?;
    let val = val.filter(|v| !v.is_empty());
    if let Some(v) = val {
        v.check_task(&m.task, m.channels, m.input_len)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.optimizer, model.params());
    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, crate::params::ParamStore<T>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_seed = cfg.seed ^ 0x5_eed0_f7a1;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        for chunk in order.chunks(cfg.batch_size) {
            let task = model.config().task.clone();
            let batch = make_batch::<T>(train, chunk, &task, &mut rng)?;
            let mut g = Graph::new();
            let bind = model.params().bind(&mut g, true);
            let l = batch_loss(model, &mut g, &bind, &batch, &mut Mode::Train(&mut rng))?;
            let values: Vec<f64> = [l.task, l.residual, l.residual_acf, l.residual_mse, l.total]
                .iter()
                .map(|&v| scalar(&g, v))
                .collect::<Result<_>>()?;
            let total = values[4];
            if !total.is_finite() {
                return Err(non_finite(&g, &format!("loss became {total} in epoch {epoch}")));
            }
            g.backward(l.total)?;
            let grads = model.params().gradients(&g, &bind);
            if grads.values().any(|t| !t.is_finite()) {
                return Err(non_finite(
                    &g,
                    &format!("gradient became non-finite in epoch {epoch}"),
                ));
            }
            adam_step(model.params_mut(), &grads, &mut adam)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * chunk.len() as f64;
            }
        }
        let n = train.len() as f64;
        let val_task_loss = match val {
            Some(v) => Some(eval_task_loss(model, v, cfg.batch_size, val_seed)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            task_loss: sums[0] / n,
            residual_loss: sums[1] / n,
            residual_acf: sums[2] / n,
            residual_mse: sums[3] / n,
            total_loss: sums[4] / n,
            val_task_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: task {:.6} residual {:.6} total {:.6} val {:?}",
            rec.task_loss,
            rec.residual_loss,
            rec.total_loss,
            rec.val_task_loss
        );
        report.epochs.push(rec);

        if let Some(v) = val_task_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.params().clone()));
            }
            if let (Some(p), Some((_, be, _))) = (cfg.patience, &best) {
                if epoch - be >= p {
                    log::info!("no validation improvement for {p} epochs; stopping");
                    break;
                }
            }
        }
    }
    report.steps = adam.step_count();
    if let Some((_, epoch, params)) = best {
        model.set_params(params)?;
        report.best_epoch = Some(epoch);
    }
    Ok(report)
}
