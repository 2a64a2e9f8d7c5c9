//! Task adapters: imputation masks, anomaly scores and thresholds, and
//! per-task evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{MaseDenominator, MaskMode, TaskDescriptor};
use crate::data::{stack, Dataset, Label};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImputationSample {
    /// Input with masked positions set to 0.
    pub masked: Tensor<f64>,
    /// 1 where a value was hidden, 0 elsewhere.
    pub mask: Tensor<f64>,
    pub target: Tensor<f64>,
}

/// Hides exactly `round(r·C·L)` positions of `x: [C, L]` chosen uniformly at
/// random (or `round(r·L)` whole time steps in per-timestep mode).
pub fn make_imputation_sample(
    x: &Tensor<f64>,
    ratio: f64,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> Result<ImputationSample> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::arg(format!("expected [C, L], got {s:?}")));
    }
    let (c, l) = (s[0], s[1]);
    let mut mask = vec![0.0; c * l];
    match mode {
        MaskMode::PerPosition => {
            let count = (ratio * (c * l) as f64).round() as usize;
            for i in sample(rng, c * l, count) {
                mask[i] = 1.0;
            }
        }
        MaskMode::PerTimestep => {
            let count = (ratio * l as f64).round() as usize;
            for t in sample(rng, l, count) {
                for ch in 0..c {
                    mask[ch * l + t] = 1.0;
                }
            }
        }
    }
    let masked = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m == 1.0 { 0.0 } else { v })
        .collect();
    Ok(ImputationSample {
        masked: Tensor::new(s.to_vec(), masked)?,
        mask: Tensor::new(s.to_vec(), mask)?,
        target: x.clone(),
    })
}

/// Task outputs for every sample, in order, as `f64`.
pub fn predict_dataset<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
    observed: Option<&[Tensor<f64>]>,
) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x: Tensor<T> = data.stack_inputs(chunk)?.cast();
        let obs = observed
            .map(|o| stack(chunk.iter().map(|&i| &o[i])).map(|t| t.cast::<T>()))
            .transpose()?;
        let y = model.predict(&x, obs.as_ref())?;
        let per = y.len() / chunk.len();
        let shape = y.shape()[1..].to_vec();
        for row in y.to_f64_vec().chunks(per) {
            out.push(Tensor::new(shape.clone(), row.to_vec())?);
        }
    }
    Ok(out)
}

/// Per time step, the squared reconstruction error averaged over channels.
/// `x` is `[C, L]` or `[B, C, L]`; the result is flattened in sample order.
pub fn anomaly_score<T: Real>(model: &Model<T>, x: &Tensor<f64>) -> Result<Vec<f64>> {
    let recon = model.predict(&x.cast::<T>(), None)?.to_f64_vec();
    let s = x.shape();
    let (c, l) = (s[s.len() - 2], s[s.len() - 1]);
    if recon.len() != x.len() {
        return Err(Error::shape("anomaly_score", x.shape(), &[recon.len()]));
    }
    let mut scores = Vec::with_capacity(x.len() / c);
    for (xs, rs) in x.data().chunks(c * l).zip(recon.chunks(c * l)) {
        for t in 0..l {
            let e: f64 = (0..c).map(|ch| (xs[ch * l + t] - rs[ch * l + t]).powi(2)).sum();
            scores.push(e / c as f64);
        }
    }
    Ok(scores)
}

fn dataset_scores<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        scores.extend(anomaly_score(model, &data.stack_inputs(chunk)?)?);
    }
    Ok(scores)
}

/// The `(1 - ratio)` quantile of `scores`, linearly interpolated between order statistics.
pub fn select_threshold(scores: &[f64], ratio: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::arg("no scores to threshold"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!(
            "anomaly ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (1.0 - ratio) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub batch_size: usize,
    /// Seeds imputation masks.
    pub seed: u64,
    /// Extra windows whose scores join the test scores for threshold selection.
    pub threshold_reference: Option<&'a Dataset>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            batch_size: 64,
            seed: 0,
            threshold_reference: None,
        }
    }
}

/// Masks drawn for evaluation, one per sample.
pub fn eval_masks(data: &Dataset, ratio: f64, mode: MaskMode, seed: u64) -> Result<Vec<ImputationSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.samples
        .iter()
        .map(|s| make_imputation_sample(&s.x, ratio, mode, &mut rng))
        .collect()
}

/// Fills each masked value with the mean of the observed values of its
/// channel in the same window.
pub fn mean_imputation(sample: &ImputationSample) -> Tensor<f64> {
    let s = sample.masked.shape();
    let (c, l) = (s[0], s[1]);
    let mut out = sample.masked.clone();
    for ch in 0..c {
        let row = ch * l..(ch + 1) * l;
        let (sum, n) = sample.masked.data()[row.clone()]
            .iter()
            .zip(&sample.mask.data()[row.clone()])
            .filter(|(_, &m)| m == 0.0)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        for i in row {
            if sample.mask.data()[i] == 1.0 {
                out.data_mut()[i] = mean;
            }
        }
    }
    out
}

/// Forecast kinds are interchangeable, as are the two reconstruction kinds.
fn compatible_kind(a: &TaskDescriptor, b: &TaskDescriptor) -> bool {
    use TaskDescriptor::*;
    let family = |t: &TaskDescriptor| match t {
        LongForecast { .. } | ShortForecast { .. } => 0,
        Imputation { .. } | Anomaly { .. } => 1,
        Classification { .. } => 2,
    };
    family(a) == family(b)
}

/// Metrics of `model` on `test` for `task`.
pub fn evaluate_task<T: Real>(
    model: &Model<T>,
    test: &Dataset,
    task: &TaskDescriptor,
    opts: &EvalOptions<'_>,
) -> Result<MetricReport> {
    task.validate()?;
    let cfg = model.config();
    let l = cfg.input_len;
    if !compatible_kind(task, &cfg.task) || task.output_len(l) != cfg.task.output_len(l) {
        return Err(Error::config(
            "task",
            format!(
                "model was built for {} but evaluation asked for {}",
                cfg.task.kind_name(),
                task.kind_name()
            ),
        ));
    }
    if test.is_empty() {
        return Err(Error::arg("test set is empty"));
    }
    test.check_task(task, cfg.channels, l)?;
    let mut report = MetricReport::new();
    report.insert("samples", test.len() as f64);
    match *task {
        TaskDescriptor::LongForecast { .. } | TaskDescriptor::ShortForecast { .. } => {
            let preds = predict_dataset(model, test, opts.batch_size, None)?;
            let mut p = Vec::new();
            let mut y = Vec::new();
            for (pred, s) in preds.iter().zip(&test.samples) {
                let Label::Forecast(t) = &s.y else {
                    unreachable!("checked")
                };
                p.extend_from_slice(pred.data());
                y.extend_from_slice(t.data());
            }
            report.insert("mse", metrics::mse(&p, &y, None)?);
            report.insert("mae", metrics::mae(&p, &y, None)?);
            if let TaskDescriptor::ShortForecast {
                horizon,
                seasonality,
                mase_denominator,
                naive2,
            } = *task
            {
                short_forecast_metrics(
                    &mut report,
                    test,
                    &preds,
                    horizon,
                    seasonality,
                    mase_denominator,
                    naive2,
                )?;
            }
        }
        TaskDescriptor::Imputation {
            mask_ratio,
            mask_mode,
        } => {
            let masks = eval_masks(test, mask_ratio, mask_mode, opts.seed)?;
            let masked = Dataset::new(
                test.samples
                    .iter()
                    .zip(&masks)
                    .map(|(s, m)| crate::data::Sample {
                        x: m.masked.clone(),
                        y: s.y.clone(),
                        start: s.start,
                    })
                    .collect(),
                test.meta.clone(),
            )?;
            let observed: Vec<Tensor<f64>> = masks.iter().map(|m| m.mask.map(|v| 1.0 - v)).collect();
            let preds = predict_dataset(model, &masked, opts.batch_size, Some(&observed))?;
            let (mut p, mut y, mut keep, mut base) = (vec![], vec![], vec![], vec![]);
            for (pred, m) in preds.iter().zip(&masks) {
                p.extend_from_slice(pred.data());
                y.extend_from_slice(m.target.data());
                keep.extend(m.mask.data().iter().map(|&v| v == 1.0));
                base.extend(mean_imputation(m).into_data());
            }
            report.insert("mse", metrics::mse(&p, &y, Some(&keep))?);
            report.insert("mae", metrics::mae(&p, &y, Some(&keep))?);
            report.insert("baseline_mse", metrics::mse(&base, &y, Some(&keep))?);
            report.insert("masked_positions", keep.iter().filter(|&&k| k).count() as f64);
        }
        TaskDescriptor::Anomaly { anomaly_ratio } => {
            let labels: Vec<bool> = test
                .samples
                .iter()
                .map(|s| match &s.y {
                    Label::Anomaly(f) => Ok(f.clone()),
                    _ => Err(Error::config("data", "anomaly evaluation needs per-step labels")),
                })
                .collect::<Result<Vec<_>>>()?
                .concat();
            let scores = dataset_scores(model, test, opts.batch_size)?;
            let mut pool = scores.clone();
            if let Some(r) = opts.threshold_reference {
                pool.extend(dataset_scores(model, r, opts.batch_size)?);
            }
            let threshold = select_threshold(&pool, anomaly_ratio)?;
            let f1 = metrics::anomaly_f1(&scores, &labels, threshold)?;
            report.values.extend(f1.values);
            report.insert("threshold", threshold);
            report.insert("mse", scores.iter().sum::<f64>() / scores.len() as f64);
        }
        TaskDescriptor::Classification { num_classes } => {
            let preds = predict_dataset(model, test, opts.batch_size, None)?;
            let logits: Vec<f64> = preds.iter().flat_map(|p| p.data().to_vec()).collect();
            let labels: Vec<usize> = test
                .samples
                .iter()
                .map(|s| match s.y {
                    Label::Class(c) => c,
                    _ => unreachable!("checked"),
                })
                .collect();
            report.insert("accuracy", metrics::accuracy(&logits, num_classes, &labels)?);
        }
    }
    if !report.is_finite() {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(report)
}

/// SMAPE/MASE averaged over (sample, channel) series, and OWA against Naive2
/// (given reference scores, or a seasonal-naive forecast of the same windows).
fn short_forecast_metrics(
    report: &mut MetricReport,
    test: &Dataset,
    preds: &[Tensor<f64>],
    horizon: usize,
    m: usize,
    denominator: MaseDenominator,
    naive2: Option<crate::config::Naive2Reference>,
) -> Result<()> {
    let (mut smape, mut mase, mut n_smape, mut n_mase, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (pred, s) in preds.iter().zip(&test.samples) {
        let Label::Forecast(y) = &s.y else {
            unreachable!("checked")
        };
        let l = s.x.shape()[1];
        for c in 0..y.shape()[0] {
            let yt = &y.data()[c * horizon..(c + 1) * horizon];
            let yp = &pred.data()[c * horizon..(c + 1) * horizon];
            let hist = &s.x.data()[c * l..(c + 1) * l];
            smape += metrics::smape(yt, yp)?;
            mase += metrics::mase(yt, yp, m, denominator, Some(hist))?;
            if naive2.is_none() {
                let naive = metrics::seasonal_naive(hist, m, horizon)?;
                n_smape += metrics::smape(yt, &naive)?;
                n_mase += metrics::mase(yt, &naive, m, denominator, Some(hist))?;
            }
            count += 1;
        }
    }
    let k = count as f64;
    let (smape, mase) = (smape / k, mase / k);
    let (ref_smape, ref_mase) = match naive2 {
        Some(r) => (r.smape, r.mase),
        None => (n_smape / k, n_mase / k),
    };
    report.insert("smape", smape);
    report.insert("mase", mase);
    report.insert("owa", metrics::owa(smape, mase, ref_smape, ref_mase)?);
    Ok(())
}

/// `sample,channel,time` rows for every masked position.
pub fn write_mask_csv(path: &Path, masks: &[ImputationSample]) -> Result<()> {
    let mut buf = b"sample,channel,time\n".to_vec();
    for (i, m) in masks.iter().enumerate() {
        let l = m.mask.shape()[1];
        for (j, _) in m.mask.data().iter().enumerate().filter(|(_, &v)| v == 1.0) {
            writeln!(buf, "{i},{},{}", j / l, j % l).expect("write to vec");
        }
    }
    crate::io::write_atomic(path, &buf)
}

/// `index,score,label` rows.
pub fn write_anomaly_csv(path: &Path, scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "write_anomaly_csv",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    let mut buf = b"index,score,label\n".to_vec();
    for (i, (s, &l)) in scores.iter().zip(labels).enumerate() {
        writeln!(buf, "{i},{s:?},{}", u8::from(l)).expect("write to vec");
    }
    crate::io::write_atomic(path, &buf)
}
