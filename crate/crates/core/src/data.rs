//! Datasets, windowing, CSV ingestion, synthetic series and standardization.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TaskDescriptor;
use crate::error::{Error, Result};
use crate::patching::SeriesTensor;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Future values, `[C, H]`.
    Forecast(Tensor<f64>),
    /// The target is the input itself.
    Reconstruct,
    /// Reconstruction target plus a ground-truth anomaly flag per time step.
    Anomaly(Vec<bool>),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, L]`
    pub x: Tensor<f64>,
    pub y: Label,
    /// Index of the first input step in the source series.
    pub start: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channel_names: Vec<String>,
    pub sampling_interval: Option<String>,
    pub seasonality: Option<usize>,
    pub split: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Checks that every input has the same `[C, L]`.
    pub fn new(samples: Vec<Sample>, meta: DatasetMeta) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.x.shape().to_vec();
            if shape.len() != 2 {
                return Err(Error::arg(format!("sample inputs must be [C, L], got {shape:?}")));
            }
            for s in &samples {
                if s.x.shape() != shape.as_slice() {
                    return Err(Error::shape("dataset", &shape, s.x.shape()));
                }
            }
        }
        Ok(Self { samples, meta })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.shape()[0])
    }

    pub fn input_len(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.shape()[1])
    }

    /// Confirms the inputs and labels fit a model with this task and input shape.
    pub fn check_task(&self, task: &TaskDescriptor, channels: usize, input_len: usize) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.shape() != [channels, input_len] {
                return Err(Error::shape("dataset input", s.x.shape(), &[channels, input_len]));
            }
            let ok = match (task, &s.y) {
                (t, Label::Forecast(y)) if t.is_forecast() => {
                    y.shape() == [channels, t.output_len(input_len)]
                }
                (TaskDescriptor::Imputation { .. }, Label::Reconstruct | Label::Anomaly(_)) => true,
                (TaskDescriptor::Anomaly { .. }, Label::Reconstruct) => true,
                (TaskDescriptor::Anomaly { .. }, Label::Anomaly(f)) => f.len() == input_len,
                (TaskDescriptor::Classification { num_classes }, Label::Class(c)) => c < num_classes,
                _ => false,
            };
            if !ok {
                return Err(Error::config(
                    "task",
                    format!(
                        "sample {i} has a label that does not fit a {} task",
                        task.kind_name()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Stacks the inputs of `indices` into `[B, C, L]`.
    pub fn stack_inputs(&self, indices: &[usize]) -> Result<Tensor<f64>> {
        stack(indices.iter().map(|&i| &self.samples[i].x))
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<'a>(items: impl Iterator<Item = &'a Tensor<f64>>) -> Result<Tensor<f64>> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => return Err(Error::shape("stack", s, t.shape())),
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::arg("nothing to stack"))?);
    Tensor::new(full, data)
}

fn window(series: &SeriesTensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let c = series.channels();
    let mut out = Vec::with_capacity(c * len);
    for ch in 0..c {
        out.extend_from_slice(&series.channel(ch)[start..start + len]);
    }
    Tensor::new(vec![c, len], out).expect("window of a finite series")
}

/// Number of windows of `span` steps that fit in `total` steps at this stride.
pub fn window_count(total: usize, span: usize, stride: usize) -> usize {
    if total < span || stride == 0 {
        0
    } else {
        (total - span) / stride + 1
    }
}

/// `X = [t, t+L)`, `Y = [t+L, t+L+H)` for `t = 0, stride, …`.
pub fn sliding_window(series: &SeriesTensor<f64>, l: usize, h: usize, stride: usize) -> Result<Dataset> {
    windows_in(series, 0, series.len(), l, h, stride)
}

fn windows_in(
    series: &SeriesTensor<f64>,
    lo: usize,
    hi: usize,
    l: usize,
    h: usize,
    stride: usize,
) -> Result<Dataset> {
    if l == 0 || h == 0 || stride == 0 {
        return Err(Error::arg("window length, horizon and stride must be >= 1"));
    }
    if hi - lo < l + h {
        return Err(Error::arg(format!(
            "series segment of {} steps is shorter than L + H = {}",
            hi - lo,
            l + h
        )));
    }
    let samples = (0..window_count(hi - lo, l + h, stride))
        .map(|i| {
            let t = lo + i * stride;
            Sample {
                x: window(series, t, l),
                y: Label::Forecast(window(series, t + l, h)),
                start: t,
            }
        })
        .collect();
    Dataset::new(samples, DatasetMeta::default())
}

/// Windows of `l` steps inside `[lo, hi)` whose target is the window itself.
fn reconstruction_in(
    series: &SeriesTensor<f64>,
    labels: Option<&[bool]>,
    lo: usize,
    hi: usize,
    l: usize,
    stride: usize,
) -> Result<Dataset> {
    if l == 0 || stride == 0 {
        return Err(Error::arg("window length and stride must be >= 1"));
    }
    if hi - lo < l {
        return Err(Error::arg(format!(
            "series segment of {} steps is shorter than L = {l}",
            hi - lo
        )));
    }
    let samples = (0..window_count(hi - lo, l, stride))
        .map(|i| {
            let t = lo + i * stride;
            Sample {
                x: window(series, t, l),
                y: match labels {
                    Some(f) => Label::Anomaly(f[t..t + l].to_vec()),
                    None => Label::Reconstruct,
                },
                start: t,
            }
        })
        .collect();
    Dataset::new(samples, DatasetMeta::default())
}

pub fn reconstruction_windows(
    series: &SeriesTensor<f64>,
    labels: Option<&[bool]>,
    l: usize,
    stride: usize,
) -> Result<Dataset> {
    if let Some(f) = labels {
        if f.len() != series.len() {
            return Err(Error::shape("labels", &[f.len()], &[series.len()]));
        }
    }
    reconstruction_in(series, labels, 0, series.len(), l, stride)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// `[train_end, val_end]`: train gets `⌊0.7N⌋`, test `⌊0.2N⌋`, val the rest.
    pub fn bounds(&self, total: usize) -> Result<[usize; 2]> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "fractions must be in [0, 1] and sum to 1"));
        }
        let train = (total as f64 * self.train).floor() as usize;
        let test = (total as f64 * self.test).floor() as usize;
        Ok([train, total - test])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    fn tagged(mut self, meta: &DatasetMeta) -> Self {
        for (d, tag) in [
            (&mut self.train, "train"),
            (&mut self.val, "val"),
            (&mut self.test, "test"),
        ] {
            d.meta = DatasetMeta {
                split: Some(tag.to_string()),
                ..meta.clone()
            };
        }
        self
    }
}

/// Chronological forecasting splits.
///
/// Targets of each split lie inside its own segment; validation and test
/// inputs may reach back into the preceding segment, so no test target is
/// ever part of a training input.
pub fn forecast_splits(
    series: &SeriesTensor<f64>,
    l: usize,
    h: usize,
    stride: usize,
    fractions: SplitFractions,
) -> Result<Splits> {
    let n = series.len();
    let [a, b] = fractions.bounds(n)?;
    let train = windows_in(series, 0, a, l, h, stride)?;
    let val = if b > a {
        windows_in(series, a.saturating_sub(l), b, l, h, stride)?
    } else {
        Dataset::default()
    };
    let test = windows_in(series, b.saturating_sub(l), n, l, h, stride)?;
    Ok(Splits { train, val, test })
}

/// Chronological splits of reconstruction windows, each inside its own segment.
/// Validation and test windows do not overlap (stride `l`).
pub fn reconstruction_splits(
    series: &SeriesTensor<f64>,
    labels: Option<&[bool]>,
    l: usize,
    stride: usize,
    fractions: SplitFractions,
) -> Result<Splits> {
    let n = series.len();
    if let Some(f) = labels {
        if f.len() != n {
            return Err(Error::shape("labels", &[f.len()], &[n]));
        }
    }
    let [a, b] = fractions.bounds(n)?;
    let train = reconstruction_in(series, labels, 0, a, l, stride)?;
    let val = if b - a >= l {
        reconstruction_in(series, labels, a, b, l, l)?
    } else {
        Dataset::default()
    };
    let test = reconstruction_in(series, labels, b, n, l, l)?;
    Ok(Splits { train, val, test })
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over the first `until` steps (the training segment).
    /// Zero-variance channels get `σ = 1`.
    pub fn fit(x: &SeriesTensor<f64>, until: usize) -> Result<Self> {
        if until == 0 || until > x.len() {
            return Err(Error::arg(format!(
                "cannot fit statistics on {until} of {} steps",
                x.len()
            )));
        }
        let mut mean = Vec::with_capacity(x.channels());
        let mut std = Vec::with_capacity(x.channels());
        for c in 0..x.channels() {
            let v = &x.channel(c)[..until];
            let mu = v.iter().sum::<f64>() / until as f64;
            let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / until as f64;
            let sd = if var > 0.0 {
                var.sqrt()
            } else {
                log::warn!("channel {c} has zero variance; using std 1");
                1.0
            };
            mean.push(mu);
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    fn check(&self, x: &SeriesTensor<f64>) -> Result<()> {
        if x.channels() != self.mean.len() {
            return Err(Error::shape("standardizer", &[x.channels()], &[self.mean.len()]));
        }
        Ok(())
    }

    pub fn apply(&self, x: &SeriesTensor<f64>) -> Result<SeriesTensor<f64>> {
        self.check(x)?;
        self.map(x, |v, mu, sd| (v - mu) / sd)
    }

    pub fn invert(&self, x: &SeriesTensor<f64>) -> Result<SeriesTensor<f64>> {
        self.check(x)?;
        self.map(x, |v, mu, sd| v * sd + mu)
    }

    fn map(&self, x: &SeriesTensor<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Result<SeriesTensor<f64>> {
        let l = x.len();
        let data = x
            .values()
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i / l], self.std[i / l]))
            .collect();
        SeriesTensor::new(Tensor::new(vec![x.channels(), l], data)?)
    }
}

/// Standardizes `x` with `stats`, or with statistics fitted on all of `x`.
pub fn standardize(
    x: &SeriesTensor<f64>,
    stats: Option<&Standardizer>,
) -> Result<(SeriesTensor<f64>, Standardizer)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => Standardizer::fit(x, x.len())?,
    };
    Ok((stats.apply(x)?, stats))
}

pub fn destandardize(x: &SeriesTensor<f64>, stats: &Standardizer) -> Result<SeriesTensor<f64>> {
    stats.invert(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ComponentSpec {
    /// `A·sin(2πt/T + φ)`
    Sine {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `slope·t + intercept`
    Trend {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// iid Gaussian noise, independent per channel.
    Noise { std: f64 },
    /// Point anomalies: `round(ratio·N)` time steps get `±magnitude` on every channel.
    Spikes { ratio: f64, magnitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    /// Total number of time steps.
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    pub components: Vec<ComponentSpec>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if self.length == 0 {
            return Err(Error::config("length", "must be >= 1"));
        }
        for (i, c) in self.components.iter().enumerate() {
            let bad = |reason: &str| Err(Error::config(format!("components[{i}]"), reason));
            match *c {
                ComponentSpec::Sine {
                    amplitude,
                    period,
                    phase,
                } => {
                    if period.is_nan() || period < 2.0 || !amplitude.is_finite() || !phase.is_finite() {
                        return bad("period must be >= 2 and values finite");
                    }
                }
                ComponentSpec::Trend { slope, intercept } => {
                    if !slope.is_finite() || !intercept.is_finite() {
                        return bad("values must be finite");
                    }
                }
                ComponentSpec::Noise { std } => {
                    if !(std >= 0.0 && std.is_finite()) {
                        return bad("std must be >= 0");
                    }
                }
                ComponentSpec::Spikes { ratio, magnitude } => {
                    if !(0.0..1.0).contains(&ratio) || !magnitude.is_finite() {
                        return bad("ratio must be in [0, 1) and magnitude finite");
                    }
                }
            }
        }
        Ok(())
    }
}

/// A generated series with its deterministic parts kept separately.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSeries {
    pub series: SeriesTensor<f64>,
    /// Named `[C, N]` deterministic components (`sine0`, `trend0`, …).
    pub components: Vec<(String, Tensor<f64>)>,
    /// Sum of all noise components, `[C, N]`.
    pub noise: Tensor<f64>,
    /// Per-step flags when the spec contains spikes.
    pub anomaly_labels: Option<Vec<bool>>,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let (c, n) = (spec.channels, spec.length);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut components = Vec::new();
    let mut noise = vec![0.0; c * n];
    let mut labels: Option<Vec<bool>> = None;
    let mut counts = std::collections::HashMap::new();
    let tau = 2.0 * std::f64::consts::PI;
    for comp in &spec.components {
        let mut name = |kind: &str| {
            let k = counts.entry(kind.to_string()).or_insert(0);
            *k += 1;
            format!("{kind}{}", *k - 1)
        };
        let row: Vec<f64> = match *comp {
            ComponentSpec::Sine {
                amplitude,
                period,
                phase,
            } => (0..n)
                .map(|t| amplitude * (tau * t as f64 / period + phase).sin())
                .collect(),
            ComponentSpec::Trend { slope, intercept } => {
                (0..n).map(|t| slope * t as f64 + intercept).collect()
            }
            ComponentSpec::Noise { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::config("noise.std", e.to_string()))?;
                for v in noise.iter_mut() {
                    *v += dist.sample(&mut rng);
                }
                continue;
            }
            ComponentSpec::Spikes { ratio, magnitude } => {
                let count = (ratio * n as f64).round() as usize;
                let mut row = vec![0.0; n];
                let flags = labels.get_or_insert_with(|| vec![false; n]);
                for t in sample(&mut rng, n, count) {
                    row[t] = if rng.random::<bool>() {
                        magnitude
                    } else {
                        -magnitude
                    };
                    flags[t] = true;
                }
                components.push((name("spikes"), Tensor::new(vec![c, n], row.repeat(c))?));
                continue;
            }
        };
        let kind = match comp {
            ComponentSpec::Sine { .. } => "sine",
            _ => "trend",
        };
        components.push((name(kind), Tensor::new(vec![c, n], row.repeat(c))?));
    }
    let mut total = noise.clone();
    for (_, t) in &components {
        for (a, v) in total.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    Ok(SyntheticSeries {
        series: SeriesTensor::new(Tensor::new(vec![c, n], total)?)?,
        components,
        noise: Tensor::new(vec![c, n], noise)?,
        anomaly_labels: labels,
    })
}

impl SyntheticSeries {
    /// Writes the series to `path` and each ground-truth part next to it as
    /// `<stem>_<name>.csv` (plus `<stem>_noise.csv` and, with spikes,
    /// `<stem>_labels.csv`). Returns every path written.
    pub fn save(&self, path: &Path) -> Result<Vec<PathBuf>> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::arg(format!("bad output path {}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let sibling = |name: &str| dir.join(format!("{stem}_{name}.csv"));
        let mut written = vec![path.to_path_buf()];
        save_csv(path, &self.series, None)?;
        for (name, t) in self
            .components
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain([("noise", &self.noise)])
        {
            let p = sibling(name);
            save_csv(&p, &SeriesTensor::new(t.clone())?, None)?;
            written.push(p);
        }
        if let Some(flags) = &self.anomaly_labels {
            let p = sibling("labels");
            let mut buf = b"label\n".to_vec();
            for &f in flags {
                writeln!(buf, "{}", u8::from(f)).expect("write to vec");
            }
            crate::io::write_atomic(&p, &buf)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// How to read a CSV file; unset fields are detected from the first rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub has_header: Option<bool>,
    /// Whether the first column is a timestamp (kept as text, not modeled).
    #[serde(default)]
    pub timestamp_column: Option<bool>,
    /// Channel columns by header name; all remaining columns when absent.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    /// Numeric label column (anomaly flag or class index), excluded from channels.
    #[serde(default)]
    pub label_column: Option<String>,
    /// Sample-id column grouping rows into classification samples.
    #[serde(default)]
    pub sample_column: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedCsv {
    pub series: SeriesTensor<f64>,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    pub labels: Option<Vec<f64>>,
    pub sample_ids: Option<Vec<String>>,
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<(usize, csv::StringRecord)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(rows.len() + 1, |p| p.line() as usize);
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        rows.push((line, rec));
    }
    let Some((_, first)) = rows.first() else {
        return Err(Error::Parse {
            row: 1,
            reason: format!("{} is empty", path.display()),
        });
    };
    let has_header = schema
        .has_header
        .unwrap_or_else(|| first.iter().any(|c| parse_cell(c).is_none()));
    let width = first.len();
    let header: Vec<String> = if has_header {
        first.iter().map(|c| c.trim().to_string()).collect()
    } else {
        (0..width).map(|i| format!("c{i}")).collect()
    };
    let data = &rows[usize::from(has_header)..];
    let Some((_, probe)) = data.first() else {
        return Err(Error::Parse {
            row: rows[0].0 + 1,
            reason: "no data rows after the header".into(),
        });
    };
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config("schema", format!("column `{name}` not found")))
    };
    let timestamp = schema
        .timestamp_column
        .unwrap_or_else(|| probe.get(0).is_some_and(|c| parse_cell(c).is_none()));
    let label_idx = schema.label_column.as_deref().map(find).transpose()?;
    let sample_idx = schema.sample_column.as_deref().map(find).transpose()?;
    let channel_idx: Vec<usize> = match &schema.columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (usize::from(timestamp)..width)
            .filter(|i| Some(*i) != label_idx && Some(*i) != sample_idx)
            .collect(),
    };
    if channel_idx.is_empty() {
        return Err(Error::config("schema", "no channel columns"));
    }

    let c = channel_idx.len();
    let n = data.len();
    let mut values = vec![0.0; c * n];
    let mut stamps = timestamp.then(Vec::new);
    let mut labels = label_idx.map(|_| Vec::with_capacity(n));
    let mut ids = sample_idx.map(|_| Vec::with_capacity(n));
    for (t, (line, rec)) in data.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::Parse {
                row: *line,
                reason: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let num = |i: usize| {
            parse_cell(&rec[i])
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row: *line,
                    reason: format!("non-numeric value `{}` in column `{}`", &rec[i], header[i]),
                })
        };
        for (ch, &i) in channel_idx.iter().enumerate() {
            values[ch * n + t] = num(i)?;
        }
        if let Some(s) = stamps.as_mut() {
            s.push(rec[0].to_string());
        }
        if let (Some(l), Some(i)) = (labels.as_mut(), label_idx) {
            l.push(num(i)?);
        }
        if let (Some(v), Some(i)) = (ids.as_mut(), sample_idx) {
            v.push(rec[i].trim().to_string());
        }
    }
    Ok(LoadedCsv {
        series: SeriesTensor::new(Tensor::new(vec![c, n], values)?)?,
        channel_names: channel_idx.iter().map(|&i| header[i].clone()).collect(),
        timestamps: stamps,
        labels,
        sample_ids: ids,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        },
    }
}

/// Writes one row per time step with a header of channel names (`c0, c1, …`
/// by default). Values use the shortest representation that reads back to
/// the same `f64`.
pub fn save_csv(path: &Path, series: &SeriesTensor<f64>, names: Option<&[String]>) -> Result<()> {
    let c = series.channels();
    let header: Vec<String> = match names {
        Some(n) if n.len() == c => n.to_vec(),
        Some(n) => return Err(Error::shape("save_csv names", &[n.len()], &[c])),
        None => (0..c).map(|i| format!("c{i}")).collect(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::arg(format!("csv write: {e}"));
    w.write_record(&header).map_err(io_err)?;
    for t in 0..series.len() {
        w.write_record((0..c).map(|ch| format!("{:?}", series.channel(ch)[t])))
            .map_err(io_err)?;
    }
    let buf = w
        .into_inner()
        .map_err(|e| Error::arg(format!("csv write: {e}")))?;
    crate::io::write_atomic(path, &buf)
}

fn default_stride() -> usize {
    1
}

/// Where a dataset lives and how to cut it up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// CSV path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Standardize channels with statistics from the training segment.
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub seasonality: Option<usize>,
    #[serde(default)]
    pub sampling_interval: Option<String>,
    /// Separate 0/1 anomaly-flag CSV (one column, one row per time step), such
    /// as the `_labels.csv` the synthetic generator writes. Used when the
    /// schema has no label column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

/// Train/val/test datasets built from a manifest.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub splits: Splits,
    pub standardizer: Option<Standardizer>,
}

impl DatasetManifest {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            schema: CsvSchema::default(),
            split: SplitFractions::default(),
            stride: 1,
            standardize: false,
            seasonality: None,
            sampling_interval: None,
            labels: None,
        }
    }

    /// Reads a manifest and makes its data path absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            for p in std::iter::once(&mut m.path).chain(m.labels.as_mut()) {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn prepare(&self, task: &TaskDescriptor, input_len: usize) -> Result<PreparedData> {
        if self.stride == 0 {
            return Err(Error::config("stride", "must be >= 1"));
        }
        let loaded = load_csv(&self.path, &self.schema)?;
        let meta = DatasetMeta {
            channel_names: loaded.channel_names.clone(),
            sampling_interval: self.sampling_interval.clone(),
            seasonality: self.seasonality,
            split: None,
        };
        if let TaskDescriptor::Classification { num_classes } = *task {
            let splits = classification_splits(&loaded, input_len, num_classes, self.split)?;
            return Ok(PreparedData {
                splits: splits.tagged(&meta),
                standardizer: None,
            });
        }
        let [train_end, _] = self.split.bounds(loaded.series.len())?;
        let (series, standardizer) = if self.standardize {
            let st = Standardizer::fit(&loaded.series, train_end)?;
            (st.apply(&loaded.series)?, Some(st))
        } else {
            (loaded.series.clone(), None)
        };
        let splits = match *task {
            TaskDescriptor::LongForecast { horizon } | TaskDescriptor::ShortForecast { horizon, .. } => {
                forecast_splits(&series, input_len, horizon, self.stride, self.split)?
            }
            TaskDescriptor::Anomaly { .. } => {
                let flags: Option<Vec<bool>> = match (&loaded.labels, &self.labels) {
                    (None, Some(p)) => Some(load_flags(p)?),
                    (l, _) => l.as_ref().map(|l| l.iter().map(|&v| v != 0.0).collect()),
                };
                reconstruction_splits(&series, flags.as_deref(), input_len, self.stride, self.split)?
            }
            TaskDescriptor::Imputation { .. } => {
                reconstruction_splits(&series, None, input_len, self.stride, self.split)?
            }
            TaskDescriptor::Classification { .. } => unreachable!("handled above"),
        };
        Ok(PreparedData {
            splits: splits.tagged(&meta),
            standardizer,
        })
    }
}

fn load_flags(path: &Path) -> Result<Vec<bool>> {
    let loaded = load_csv(path, &CsvSchema::default())?;
    if loaded.series.channels() != 1 {
        return Err(Error::config(
            "labels",
            format!("{} must have exactly one column", path.display()),
        ));
    }
    Ok(loaded.series.channel(0).iter().map(|&v| v != 0.0).collect())
}

/// Groups consecutive rows with the same sample id into `[C, L]` samples and
/// splits them in file order.
fn classification_splits(
    loaded: &LoadedCsv,
    input_len: usize,
    num_classes: usize,
    fractions: SplitFractions,
) -> Result<Splits> {
    let ids = loaded
        .sample_ids
        .as_ref()
        .ok_or_else(|| Error::config("schema.sample_column", "required for classification"))?;
    let labels = loaded
        .labels
        .as_ref()
        .ok_or_else(|| Error::config("schema.label_column", "required for classification"))?;
    let mut samples = Vec::new();
    let mut start = 0;
    while start < ids.len() {
        let mut end = start + 1;
        while end < ids.len() && ids[end] == ids[start] {
            end += 1;
        }
        if end - start != input_len {
            return Err(Error::arg(format!(
                "sample `{}` has {} rows, expected {input_len}",
                ids[start],
                end - start
            )));
        }
        let class = labels[start];
        if class < 0.0 || class.fract() != 0.0 || class as usize >= num_classes {
            return Err(Error::arg(format!(
                "sample `{}` has invalid class {class}",
                ids[start]
            )));
        }
        samples.push(Sample {
            x: window(&loaded.series, start, input_len),
            y: Label::Class(class as usize),
            start,
        });
        start = end;
    }
    let [a, b] = fractions.bounds(samples.len())?;
    let test = samples.split_off(b);
    let val = samples.split_off(a);
    Ok(Splits {
        train: Dataset::new(samples, DatasetMeta::default())?,
        val: Dataset::new(val, DatasetMeta::default())?,
        test: Dataset::new(test, DatasetMeta::default())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, n: usize) -> SeriesTensor<f64> {
        let data = (0..c * n).map(|i| i as f64).collect();
        SeriesTensor::new(Tensor::new(vec![c, n], data).unwrap()).unwrap()
    }

    #[test]
    fn window_count_example() {
        let d = sliding_window(&ramp(1, 10), 4, 2, 1).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.samples[1].x.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            d.samples[1].y,
            Label::Forecast(Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap())
        );
        assert_eq!(sliding_window(&ramp(1, 10), 4, 2, 9).unwrap().len(), 1);
        assert!(sliding_window(&ramp(1, 5), 4, 2, 1).is_err());
    }

    #[test]
    fn standardize_roundtrip() {
        let x = SeriesTensor::from_rows(&[vec![1.0, 5.0, -3.0, 2.0], vec![7.0, 7.0, 7.0, 7.0]]).unwrap();
        let (z, st) = standardize(&x, None).unwrap();
        assert_eq!(st.std[1], 1.0);
        assert!(z.channel(0).iter().sum::<f64>().abs() < 1e-10);
        let back = destandardize(&z, &st).unwrap();
        assert!(back.values().max_abs_diff(x.values()).unwrap() < 1e-12);
    }

    #[test]
    fn stats_come_from_the_training_segment_only() {
        let x = ramp(2, 100);
        let st = Standardizer::fit(&x, 70).unwrap();
        let again = Standardizer::fit(
            &SeriesTensor::from_rows(&[x.channel(0)[..70].to_vec(), x.channel(1)[..70].to_vec()]).unwrap(),
            70,
        )
        .unwrap();
        assert_eq!(st, again);
    }

    #[test]
    fn synthetic_examples() {
        let spec: SyntheticSpec = serde_json::from_str(
            r#"{"channels":1,"length":200,"seed":4,"components":[
                {"type":"sine","amplitude":2.0,"period":24,"phase":0.5}]}"#,
        )
        .unwrap();
        let s = gen_synthetic(&spec).unwrap();
        for (t, v) in s.series.channel(0).iter().enumerate() {
            let want = 2.0 * (2.0 * std::f64::consts::PI * t as f64 / 24.0 + 0.5).sin();
            assert_eq!(*v, want);
        }
        let bad: SyntheticSpec = serde_json::from_str(
            r#"{"channels":1,"length":20,"components":[{"type":"sine","amplitude":1,"period":1}]}"#,
        )
        .unwrap();
        assert!(gen_synthetic(&bad).is_err());
    }

    #[test]
    fn synthetic_acf_peaks_at_the_periods() {
        let spec = SyntheticSpec {
            channels: 1,
            length: 960,
            seed: 0,
            components: vec![
                ComponentSpec::Sine {
                    amplitude: 1.0,
                    period: 24.0,
                    phase: 0.0,
                },
                ComponentSpec::Sine {
                    amplitude: 1.0,
                    period: 6.0,
                    phase: 0.0,
                },
            ],
        };
        let s = gen_synthetic(&spec).unwrap();
        let a = crate::losses::acf(s.series.values()).unwrap();
        let r = a.row(0);
        // lag j is at index j-1; both periods are local maxima
        for lag in [6usize, 24] {
            assert!(r[lag - 1] > r[lag - 2] && r[lag - 1] > r[lag], "lag {lag}");
        }
        assert!(r[23] > 0.9);
    }

    #[test]
    fn spikes_are_labelled() {
        let spec = SyntheticSpec {
            channels: 2,
            length: 500,
            seed: 9,
            components: vec![ComponentSpec::Spikes {
                ratio: 0.01,
                magnitude: 4.0,
            }],
        };
        let s = gen_synthetic(&spec).unwrap();
        let flags = s.anomaly_labels.unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 5);
        for (t, &f) in flags.iter().enumerate() {
            assert_eq!(s.series.channel(1)[t].abs() == 4.0, f);
        }
    }

    #[test]
    fn manifest_reads_separate_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            channels: 1,
            length: 400,
            seed: 3,
            components: vec![ComponentSpec::Spikes {
                ratio: 0.02,
                magnitude: 3.0,
            }],
        };
        let s = gen_synthetic(&spec).unwrap();
        s.save(&dir.path().join("s.csv")).unwrap();
        let mut m = DatasetManifest::new("s.csv");
        m.labels = Some("s_labels.csv".into());
        m.save(&dir.path().join("m.json")).unwrap();

        let task = TaskDescriptor::Anomaly { anomaly_ratio: 0.02 };
        let data = DatasetManifest::load(&dir.path().join("m.json"))
            .unwrap()
            .prepare(&task, 20)
            .unwrap();
        let flags = s.anomaly_labels.unwrap();
        let mut seen = 0;
        for sample in &data.splits.test.samples {
            let Label::Anomaly(f) = &sample.y else {
                panic!("expected anomaly labels")
            };
            assert_eq!(f[..], flags[sample.start..sample.start + 20]);
            seen += f.iter().filter(|&&v| v).count();
        }
        assert!(seen > 0);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let x = SeriesTensor::from_rows(&[vec![0.1, 1.0 / 3.0, -2.5e-9], vec![1e300, 7.0, -0.0]]).unwrap();
        save_csv(&p, &x, None).unwrap();
        let back = load_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(back.series, x);
        assert_eq!(back.channel_names, ["c0", "c1"]);

        std::fs::write(&p, "date,a,b,c\n2020-01-01,1,2,3\n2020-01-02,4,5,6\n").unwrap();
        let l = load_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(l.series.channels(), 3);
        assert_eq!(l.timestamps.unwrap()[1], "2020-01-02");

        std::fs::write(&p, "a,b\n").unwrap();
        assert!(matches!(
            load_csv(&p, &CsvSchema::default()),
            Err(Error::Parse { .. })
        ));
        std::fs::write(&p, "a,b\n1,2\n3\n").unwrap();
        assert!(matches!(
            load_csv(&p, &CsvSchema::default()),
            Err(Error::Parse { row: 3, .. })
        ));
        std::fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
        assert!(matches!(
            load_csv(&p, &CsvSchema::default()),
            Err(Error::Parse { row: 3, .. })
        ));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), &CsvSchema::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn headerless_and_timestamped_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "1,2,3\n4,5,6\n7,8,9\n1,1,1\n2,2,2\n").unwrap();
        assert_eq!(
            load_csv(&p, &CsvSchema::default())
                .unwrap()
                .series
                .values()
                .shape(),
            &[3, 5]
        );
        let schema = CsvSchema {
            timestamp_column: Some(true),
            ..Default::default()
        };
        assert_eq!(load_csv(&p, &schema).unwrap().series.values().shape(), &[2, 5]);
    }

    #[test]
    fn split_bounds() {
        assert_eq!(SplitFractions::default().bounds(100).unwrap(), [70, 80]);
        let bad = SplitFractions {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(bad.bounds(100).is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_formula(total in 2usize..200, l in 1usize..30, h in 1usize..10, stride in 1usize..12) {
            prop_assume!(total >= l + h);
            let d = sliding_window(&ramp(1, total), l, h, stride).unwrap();
            prop_assert_eq!(d.len(), (total - l - h) / stride + 1);
        }

        #[test]
        fn test_targets_never_feed_training_inputs(total in 200usize..600, l in 4usize..40, h in 1usize..20, stride in 1usize..5) {
            let s = ramp(1, total);
            let sp = forecast_splits(&s, l, h, stride, SplitFractions::default()).unwrap();
            let train_max = sp.train.samples.iter().map(|x| x.start + l).max().unwrap();
            let test_min = sp.test.samples.iter().map(|x| x.start + l).min().unwrap();
            prop_assert!(test_min >= train_max);
            let val_min = sp.val.samples.iter().map(|x| x.start + l).min();
            if let Some(v) = val_min {
                prop_assert!(v >= train_max);
            }
        }

        #[test]
        fn components_sum_to_series_minus_noise(seed in any::<u64>(), c in 1usize..4) {
            let spec = SyntheticSpec {
                channels: c,
                length: 64,
                seed,
                components: vec![
                    ComponentSpec::Sine { amplitude: 1.5, period: 12.0, phase: 0.3 },
                    ComponentSpec::Trend { slope: 0.01, intercept: 2.0 },
                    ComponentSpec::Noise { std: 0.1 },
                    ComponentSpec::Spikes { ratio: 0.05, magnitude: 3.0 },
                ],
            };
            let s = gen_synthetic(&spec).unwrap();
            let again = gen_synthetic(&spec).unwrap();
            prop_assert_eq!(&s, &again);
            for i in 0..c * 64 {
                let mut acc = s.noise.data()[i];
                for (_, t) in &s.components {
                    acc += t.data()[i];
                }
                prop_assert_eq!(acc, s.series.values().data()[i]);
            }
        }
    }
}
