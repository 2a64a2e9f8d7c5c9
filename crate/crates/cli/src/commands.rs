use std::collections::BTreeMap;
use std::path::Path;

use msd_mixer::config::TaskDescriptor;
use msd_mixer::data::{gen_synthetic, load_csv, CsvSchema, Dataset, DatasetManifest, SyntheticSpec};
use msd_mixer::io::write_atomic;
use msd_mixer::model::{build_model, Model};
use msd_mixer::patching::SeriesTensor;
use msd_mixer::report::decomposition_report;
use msd_mixer::tasks::{evaluate_task, EvalOptions};
use msd_mixer::train::{fit, TrainReport};
use msd_mixer::{Real, Tensor};
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::CliError;

#[derive(Serialize)]
struct OutputManifest<'a> {
    command: &'a str,
    files: BTreeMap<String, &'a str>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(msd_mixer::Error::from)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, files: &[(String, &str)]) -> Result<(), CliError> {
    let manifest = OutputManifest {
        command,
        files: files.iter().cloned().collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn nonempty<'a>(d: &'a Dataset, what: &str) -> Result<&'a Dataset, CliError> {
    if d.is_empty() {
        return Err(CliError::Input(format!(
            "{what} split has no windows; the series is too short for this input length"
        )));
    }
    Ok(d)
}

fn train_as<T: Real>(
    cfg: &RunConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<(TrainReport, String), CliError> {
    let mut model = build_model::<T>(&cfg.model)?;
    let report = fit(&mut model, train, val, &cfg.training)?;
    Ok((report, model.to_checkpoint_json()?))
}

pub fn train(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let manifest = DatasetManifest::load(&cfg.data)?;
    let data = manifest.prepare(&cfg.model.task, cfg.model.input_len)?;
    let train = nonempty(&data.splits.train, "train")?;
    let val = (!data.splits.val.is_empty()).then_some(&data.splits.val);
    log::info!(
        "training {} layers on {} windows ({} validation)",
        cfg.model.layers(),
        train.len(),
        val.map_or(0, Dataset::len)
    );
    let (report, checkpoint) = match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, train, val)?,
        Precision::F64 => train_as::<f64>(&cfg, train, val)?,
    };

    let out = &cfg.output_dir;
    write_atomic(&out.join("checkpoint.json"), checkpoint.as_bytes())?;
    write_json(&out.join("train_report.json"), &report)?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    write_manifest(
        out,
        "train",
        &[
            ("checkpoint.json".into(), "model config and parameters"),
            ("train_report.json".into(), "per-epoch losses"),
            (
                "resolved_config.json".into(),
                "run config after variant rewrites and seed overrides",
            ),
        ],
    )?;
    if let Some(last) = report.last() {
        println!(
            "trained {} epochs, best epoch {}, final total loss {:.6}",
            report.epochs.len(),
            report.best_epoch.map_or("-".into(), |e| e.to_string()),
            last.total_loss
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_task(arg: &str) -> Result<TaskDescriptor, CliError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| CliError::Input(format!("--task {arg}: {e}")))?
    };
    let task: TaskDescriptor =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("--task: {e}")))?;
    task.validate()?;
    Ok(task)
}

pub fn eval(
    checkpoint: &Path,
    manifest: &Path,
    task: Option<&str>,
    out: Option<&Path>,
    seed: u64,
) -> Result<(), CliError> {
    let model = Model::<f64>::load_checkpoint(checkpoint)?;
    let cfg = model.config();
    let task = match task {
        Some(t) => parse_task(t)?,
        None => cfg.task.clone(),
    };
    let own = &cfg.task;
    if task.is_classification() != own.is_classification()
        || task.output_len(cfg.input_len) != own.output_len(cfg.input_len)
    {
        return Err(CliError::Input(format!(
            "task `{}` with output length {} does not fit a checkpoint trained for `{}` with output length {}",
            task.kind_name(),
            task.output_len(cfg.input_len),
            own.kind_name(),
            own.output_len(cfg.input_len)
        )));
    }
    let data = DatasetManifest::load(manifest)?.prepare(&task, cfg.input_len)?;
    let test = nonempty(&data.splits.test, "test")?;
    test.check_task(&task, cfg.channels, cfg.input_len)?;
    let opts = EvalOptions {
        seed,
        threshold_reference: matches!(task, TaskDescriptor::Anomaly { .. }).then_some(&data.splits.train),
        ..EvalOptions::default()
    };
    let report = evaluate_task(&model, test, &task, &opts)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("metrics.json"),
    };
    report.save(&path)?;
    print!("{}", report.to_table());
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn decompose(
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
    start: Option<usize>,
) -> Result<(), CliError> {
    let model = Model::<f64>::load_checkpoint(checkpoint)?;
    let cfg = model.config();
    let loaded = load_csv(input, &CsvSchema::default())?;
    let series = &loaded.series;
    if series.channels() != cfg.channels {
        return Err(CliError::Input(format!(
            "{} has {} channels, the model expects {}",
            input.display(),
            series.channels(),
            cfg.channels
        )));
    }
    let l = cfg.input_len;
    let window = match start {
        None if series.len() == l => series.clone(),
        None => {
            return Err(CliError::Input(format!(
                "{} has {} rows, the model expects {l} (use --start to pick a window)",
                input.display(),
                series.len()
            )))
        }
        Some(s) if s + l <= series.len() => {
            let mut v = Vec::with_capacity(cfg.channels * l);
            for c in 0..series.channels() {
                v.extend_from_slice(&series.channel(c)[s..s + l]);
            }
            SeriesTensor::new(Tensor::new(vec![cfg.channels, l], v)?)?
        }
        Some(s) => {
            return Err(CliError::Input(format!(
                "window [{s}, {}) runs past the {} rows of {}",
                s + l,
                series.len(),
                input.display()
            )))
        }
    };

    let report = decomposition_report(&model, &window)?;
    let written = report.write(out_dir, Some(&loaded.channel_names))?;
    let summary = report.summary(cfg.alpha);
    write_json(&out_dir.join("summary.json"), &summary)?;
    let mut files: Vec<(String, &str)> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .map(|name| {
            let what = match (name.starts_with("acf_"), name.ends_with(".svg")) {
                (true, true) => "autocorrelation chart",
                (true, false) => "autocorrelation by lag and channel",
                (false, true) => "line chart",
                (false, false) => "series, one column per channel",
            };
            (name, what)
        })
        .collect();
    files.push((
        "summary.json".into(),
        "max |ACF| of input and residual against the band",
    ));
    write_manifest(out_dir, "decompose", &files)?;

    println!("layers                 {}", summary.layers);
    println!("input max |ACF|        {:.6}", summary.input_max_abs_acf);
    println!("residual max |ACF|     {:.6}", summary.residual_max_abs_acf);
    println!(
        "band alpha/sqrt(L)     {:.6}  (alpha = {})",
        summary.band, summary.alpha
    );
    println!(
        "residual within band   {}",
        if summary.residual_within_band { "yes" } else { "no" }
    );
    log::info!("wrote {} files to {}", files.len() + 1, out_dir.display());
    Ok(())
}

pub fn synth(spec: &Path, out: &Path) -> Result<(), CliError> {
    let text =
        std::fs::read_to_string(spec).map_err(|e| CliError::Input(format!("{}: {e}", spec.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", spec.display())))?;
    let series = gen_synthetic(&spec)?;
    for p in series.save(out)? {
        println!("{}", p.display());
    }
    Ok(())
}
