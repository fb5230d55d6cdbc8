//! Resolved run configuration: defaults < config file < flags.

use std::path::Path;

use gapl::experiments::{AblationConfig, HeteroConfig};
use gapl::pipeline::{role, RunConfig};
use gapl::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub run: RunConfig,
    pub hetero: HeteroConfig,
    pub ablation: AblationConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Provenance written next to every artifact set.
#[derive(Debug, Serialize)]
pub struct RunInfo<'a> {
    pub schema: u32,
    pub version: &'a str,
    pub subcommand: &'a str,
    pub seed: u64,
    pub derived_seeds: DerivedSeeds,
}

#[derive(Debug, Serialize)]
pub struct DerivedSeeds {
    pub train_corpus: u64,
    pub prototype_set: u64,
    pub eval_corpus: u64,
    pub pretrain_images: u64,
    pub encoder_init: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub random_prototypes: u64,
}

impl DerivedSeeds {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            train_corpus: cfg.derive(role::TRAIN_CORPUS),
            prototype_set: cfg.derive(role::PROTOTYPE_SET),
            eval_corpus: cfg.derive(role::EVAL_CORPUS),
            pretrain_images: cfg.derive(role::PRETRAIN_IMAGES),
            encoder_init: cfg.derive(role::ENCODER_INIT),
            stage1: cfg.derive(role::STAGE1),
            stage2: cfg.derive(role::STAGE2),
            random_prototypes: cfg.derive(role::RANDOM_PROTOTYPES),
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"run": {"seed": 9, "corpus": {"n_per_class": 4}}, "hetero": {"ks": [1, 2]}}"#).unwrap();
        let c = CliConfig::load(Some(&p)).unwrap();
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.run.corpus.n_per_class, 4);
        assert_eq!(c.run.corpus.families, RunConfig::default().corpus.families);
        assert_eq!(c.hetero.ks, vec![1, 2]);
        assert_eq!(c.ablation, AblationConfig::default());
    }

    #[test]
    fn unknown_top_level_key_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"runn": {}}"#).unwrap();
        assert!(matches!(CliConfig::load(Some(&p)), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = CliConfig::default();
        c.write(&p).unwrap();
        assert_eq!(CliConfig::load(Some(&p)).unwrap(), c);
    }
}
