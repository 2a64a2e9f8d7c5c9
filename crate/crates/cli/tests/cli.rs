use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_msd-mixer"));
    c.env("MSD_MIXER_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn msd-mixer")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const SPEC: &str = r#"{"channels": 1, "length": 400, "seed": 5, "components": [
    {"type": "sine", "amplitude": 1.0, "period": 24},
    {"type": "sine", "amplitude": 0.5, "period": 6},
    {"type": "noise", "std": 0.1}]}"#;

/// Synthesizes a series and writes a dataset manifest for it; returns the manifest path.
fn dataset(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("spec.json"), SPEC).unwrap();
    ok(&run(&[
        "synth",
        s(&dir.join("spec.json")),
        s(&dir.join("series.csv")),
    ]));
    let m = dir.join("data.json");
    std::fs::write(&m, r#"{"path": "series.csv"}"#).unwrap();
    m
}

fn run_config(dir: &Path, name: &str, model_extra: &str, patches: &str) -> PathBuf {
    let body = format!(
        r#"{{"model": {{"input_len": 48, "channels": 1, "patch_sizes": {patches}, "embed_dim": 8,
            "task": {{"kind": "long-forecast", "horizon": 12}}{model_extra}}},
          "data": "data.json", "training": {{"epochs": 2, "batch_size": 16}},
          "output_dir": "{name}", "seed": 3}}"#
    );
    let p = dir.join(format!("{name}.json"));
    std::fs::write(&p, body).unwrap();
    p
}

fn strip_wall_time(mut v: Value) -> Value {
    for e in v["epochs"].as_array_mut().unwrap() {
        e.as_object_mut().unwrap().remove("wall_time_s");
    }
    v
}

#[test]
fn synth_writes_series_and_ground_truth_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SPEC).unwrap();
    let out = ok(&run(&["synth", s(&spec), s(&dir.path().join("a.csv"))]));
    assert_eq!(out.lines().count(), 4, "{out}");
    ok(&run(&["synth", s(&spec), s(&dir.path().join("b.csv"))]));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));

    let series = read_csv(&dir.path().join("a.csv"));
    let parts: Vec<_> = ["a_sine0.csv", "a_sine1.csv", "a_noise.csv"]
        .iter()
        .map(|n| read_csv(&dir.path().join(n)))
        .collect();
    for (t, row) in series.iter().enumerate() {
        let sum: f64 = parts.iter().map(|p| p[t][0]).sum();
        assert!((row[0] - sum).abs() < 1e-12);
    }
}

#[test]
fn synth_rejects_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"channels": 1, "length": 10, "seed": 1, "components": [{"type": "sine", "amplitude": 1, "period": 0.5}]}"#).unwrap();
    let out = run(&["synth", s(&spec), s(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_and_decompose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = dataset(d);
    let cfg = run_config(d, "run", "", "[24, 12, 6, 2, 1]");
    ok(&run(&["train", s(&cfg)]));
    let out = d.join("run");
    for f in [
        "checkpoint.json",
        "train_report.json",
        "resolved_config.json",
        "manifest.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    // determinism: same config and seed, same report
    let again = run_config(d, "run2", "", "[24, 12, 6, 2, 1]");
    ok(&run(&["train", s(&again)]));
    let report = |p: PathBuf| strip_wall_time(serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap());
    assert_eq!(
        report(out.join("train_report.json")),
        report(d.join("run2/train_report.json"))
    );
    assert_eq!(
        std::fs::read(out.join("checkpoint.json")).unwrap(),
        std::fs::read(d.join("run2/checkpoint.json")).unwrap()
    );

    // eval: long forecast, then the same checkpoint scored as a short forecast
    let ckpt = out.join("checkpoint.json");
    let table = ok(&run(&["eval", s(&ckpt), s(&manifest)]));
    let metrics: Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["mse"].is_f64() && metrics["mae"].is_f64());
    assert!(table.contains("mse"));
    let short = r#"{"kind": "short-forecast", "horizon": 12, "seasonality": 6}"#;
    let m4 = d.join("m4.json");
    ok(&run(&[
        "eval",
        s(&ckpt),
        s(&manifest),
        "--task",
        short,
        "--out",
        s(&m4),
    ]));
    let metrics: Value = serde_json::from_slice(&std::fs::read(&m4).unwrap()).unwrap();
    for k in ["smape", "mase", "owa", "mse", "mae"] {
        assert!(metrics[k].is_f64(), "missing {k}");
    }
    let wrong = run(&[
        "eval",
        s(&ckpt),
        s(&manifest),
        "--task",
        r#"{"kind": "long-forecast", "horizon": 5}"#,
    ]);
    assert_eq!(wrong.status.code(), Some(2));

    // decompose the first window of the training CSV
    let dec = d.join("dec");
    let printed = ok(&run(&[
        "decompose",
        s(&ckpt),
        s(&d.join("series.csv")),
        s(&dec),
        "--start",
        "0",
    ]));
    assert!(
        printed.contains("residual max |ACF|") && printed.contains("band"),
        "{printed}"
    );
    let count = |ext: &str| {
        std::fs::read_dir(&dec)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
            .count()
    };
    assert_eq!(count("csv"), 5 + 1 + 2);
    assert_eq!(count("svg"), 5 + 1 + 2);
    let input = read_csv(&d.join("series.csv"));
    let comps: Vec<_> = (1..=5)
        .map(|i| read_csv(&dec.join(format!("component_{i}.csv"))))
        .collect();
    let residual = read_csv(&dec.join("residual.csv"));
    assert_eq!(residual.len(), 48);
    for t in 0..48 {
        let sum: f64 = comps.iter().map(|c| c[t][0]).sum::<f64>() + residual[t][0];
        assert!(
            (sum - input[t][0]).abs() < 1e-4,
            "t={t}: {sum} vs {}",
            input[t][0]
        );
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(dec.join("summary.json")).unwrap()).unwrap();
    assert!((summary["band"].as_f64().unwrap() - 2.0 / 48f64.sqrt()).abs() < 1e-12);

    // the full CSV without --start is a length mismatch
    let mismatch = run(&[
        "decompose",
        s(&ckpt),
        s(&d.join("series.csv")),
        s(&d.join("dec2")),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("expects 48"));
}

#[test]
fn no_residual_loss_variant_resolves_lambda_zero() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let cfg = run_config(dir.path(), "abl", r#", "variant": "no-residual-loss""#, "[12, 1]");
    ok(&run(&["train", s(&cfg)]));
    let resolved: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("abl/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["lambda"].as_f64(), Some(0.0));
}

#[test]
fn missing_checkpoint_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let missing = dir.path().join("nope/checkpoint.json");
    let out = run(&["eval", s(&missing), s(&manifest)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn invalid_config_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let cfg = run_config(dir.path(), "bad", r#", "droppath": 1.5"#, "[12, 1]");
    let out = run(&["train", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("droppath"));

    let cfg = run_config(dir.path(), "bad2", r#", "colour": 1"#, "[12, 1]");
    let out = run(&["train", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rows: String = (0..200)
        .map(|t| format!("{}\n", 1e30 * (1.0 + (t as f64 * 0.3).sin())))
        .collect();
    std::fs::write(d.join("series.csv"), format!("x\n{rows}")).unwrap();
    std::fs::write(d.join("data.json"), r#"{"path": "series.csv"}"#).unwrap();
    let cfg = run_config(d, "nan", "", "[12, 1]");
    let out = run(&["train", s(&cfg)]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
