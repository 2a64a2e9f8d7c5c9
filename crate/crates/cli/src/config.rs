use std::path::{Path, PathBuf};

use msd_mixer::config::ModelConfig;
use msd_mixer::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything `train` needs. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Dataset manifest JSON.
    pub data: PathBuf,
    pub training: TrainConfig,
    pub output_dir: PathBuf,
    /// When set, replaces both `model.seed` and `training.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub precision: Precision,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(seed) = cfg.seed {
            cfg.model.seed = seed;
            cfg.training.seed = seed;
        }
        cfg.model = cfg.model.resolved()?;
        cfg.training.validate()?;
        if !cfg.data.is_file() {
            return Err(CliError::Input(format!(
                "data: manifest {} does not exist",
                cfg.data.display()
            )));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        std::fs::write(dir.join("m.json"), r#"{"path": "x.csv"}"#).unwrap();
        let p = dir.join("run.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    const BASE: &str = r#""model": {"input_len": 8, "channels": 1, "patch_sizes": [2, 1],
        "task": {"kind": "long-forecast", "horizon": 2}, "variant": "no-residual-loss"},
        "data": "m.json", "training": {"epochs": 1}, "output_dir": "out""#;

    #[test]
    fn resolves_paths_seed_and_variant() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("{{{BASE}, \"seed\": 9}}"));
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!((cfg.model.seed, cfg.training.seed), (9, 9));
        assert_eq!(cfg.model.lambda, 0.0);
        assert_eq!(cfg.precision, Precision::F32);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("{{{BASE}, \"extra\": 1}}"));
        let msg = RunConfig::load(&p).unwrap_err().to_string();
        assert!(msg.contains("extra"), "{msg}");

        let p = write(
            dir.path(),
            &format!("{{{}}}", BASE.replace("\"epochs\": 1", "\"epochs\": 0")),
        );
        let msg = RunConfig::load(&p).unwrap_err().to_string();
        assert!(msg.contains("training.epochs"), "{msg}");
    }
}
