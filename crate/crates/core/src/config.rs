//! Run configuration: a TOML file with `[paths]`, `[data]`, `[model]`,
//! `[model.backbone]` and `[train]` sections. Every key is required and
//! unknown keys are rejected. Environment variables named
//! `MCEN_<SECTION>__<KEY>` (nested sections joined by `__`) override values
//! from the file, e.g. `MCEN_TRAIN__LEARNING_RATE=3e-4` or
//! `MCEN_MODEL__BACKBONE__FREEZE=true`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{docs_from_raw, read_raw_corpus, resolve_image_root, Caps, Dataset, Vocab};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::DType;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "MCEN_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// JSON-lines training corpus.
    pub corpus: PathBuf,
    /// Image root; empty for the corpus file's directory.
    pub images: PathBuf,
    /// Separate validation corpus; empty to split `corpus`.
    pub val_corpus: PathBuf,
    /// Run directory for checkpoints (`best/`, `last/`).
    pub checkpoints: PathBuf,
    /// Directory for logs and reports.
    pub outputs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub min_count: usize,
    /// Share of `corpus` held out for validation when no `val_corpus` is set.
    pub val_fraction: f64,
    pub split_seed: u64,
    pub precision: DType,
    pub caps: Caps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// The desk-scale preset on a synthetic corpus in `synth/`.
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig {
                corpus: "synth/corpus.jsonl".into(),
                images: PathBuf::new(),
                val_corpus: PathBuf::new(),
                checkpoints: "runs/desk".into(),
                outputs: "runs/desk".into(),
            },
            data: DataConfig {
                min_count: 2,
                val_fraction: 0.1,
                split_seed: 0,
                precision: DType::F32,
                caps: Caps::default(),
            },
            model: ModelConfig::desk(),
            train: TrainConfig {
                learning_rate: 1e-3,
                mean_mining_steps: 1000,
                max_epochs: 30,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!(
                "data.val_fraction must lie in [0, 1), got {}",
                self.data.val_fraction
            )));
        }
        if self.paths.val_corpus.as_os_str().is_empty() && self.data.val_fraction == 0.0 {
            return Err(Error::Config(
                "data.val_fraction is 0 and paths.val_corpus is empty".into(),
            ));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse TOML text, then apply `overrides` as `(KEY, value)` pairs in the
    /// environment-variable form described at module level.
    pub fn parse_with<I>(text: &str, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            if let Some(rest) = key.strip_prefix(ENV_PREFIX) {
                apply_override(&mut table, rest, &value)?;
            }
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, std::iter::empty())
    }

    /// Read a config file and apply `MCEN_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with(&text, std::env::vars()).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn image_root(&self) -> PathBuf {
        let images =
            (!self.paths.images.as_os_str().is_empty()).then_some(self.paths.images.as_path());
        resolve_image_root(&self.paths.corpus, images)
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(str::to_ascii_lowercase).collect();
    if path.len() < 2 || path.iter().any(String::is_empty) {
        return Err(Error::Config(format!(
            "malformed override {ENV_PREFIX}{key}"
        )));
    }
    let mut node = table;
    for section in &path[..path.len() - 1] {
        node = node
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!(
                    "override {ENV_PREFIX}{key}: {section} is not a section"
                ))
            })?;
    }
    node.insert(path[path.len() - 1].clone(), parse_value(raw));
    Ok(())
}

/// A TOML literal when the text parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Training and validation sets plus the vocabulary built on the training text.
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub vocab: Vocab,
}

pub fn load_run_data(config: &RunConfig) -> Result<RunData> {
    let raws = read_raw_corpus(&config.paths.corpus)?;
    let (train_raw, val_raw) = if config.paths.val_corpus.as_os_str().is_empty() {
        let mut idx: Vec<usize> = (0..raws.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.data.split_seed));
        let n_val = ((raws.len() as f64 * config.data.val_fraction).round() as usize).max(1);
        if n_val >= raws.len() {
            return Err(Error::InvalidArgument(format!(
                "{} recipes cannot be split into training and validation",
                raws.len()
            )));
        }
        let (val_idx, train_idx) = idx.split_at(n_val);
        let pick = |ix: &[usize]| {
            let mut ix = ix.to_vec();
            ix.sort_unstable();
            ix.into_iter().map(|i| raws[i].clone()).collect::<Vec<_>>()
        };
        (pick(train_idx), pick(val_idx))
    } else {
        (raws, read_raw_corpus(&config.paths.val_corpus)?)
    };
    let caps = &config.data.caps;
    let train_docs = docs_from_raw(&train_raw, None, config.data.min_count, caps)?;
    let val_docs = docs_from_raw(
        &val_raw,
        Some(&train_docs.vocab),
        config.data.min_count,
        caps,
    )?;
    let root = config.image_root();
    let size = config.model.backbone.input_size;
    Ok(RunData {
        train: Dataset::load_images(train_docs.docs, &root, size)?,
        val: Dataset::load_images(val_docs.docs, &root, size)?,
        vocab: train_docs.vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_identity() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn missing_key_is_named() {
        let text = RunConfig::default().to_toml().unwrap();
        let cut: String = text
            .lines()
            .filter(|l| !l.starts_with("learning_rate"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = RunConfig::parse(&cut).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = RunConfig::default()
            .to_toml()
            .unwrap()
            .replace("[train]", "[train]\nlearnin_rate = 1.0");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("learnin_rate"), "{err}");
    }

    #[test]
    fn env_overrides_apply() {
        let text = RunConfig::default().to_toml().unwrap();
        let vars = [
            ("MCEN_TRAIN__LEARNING_RATE", "0.25"),
            ("MCEN_MODEL__VARIANT", "image"),
            ("MCEN_MODEL__BACKBONE__FREEZE", "true"),
            ("MCEN_PATHS__CORPUS", "/data/x.jsonl"),
            ("OTHER_THING", "ignored"),
        ]
        .map(|(k, v)| (k.to_string(), v.to_string()));
        let c = RunConfig::parse_with(&text, vars).unwrap();
        assert_eq!(c.train.learning_rate, 0.25);
        assert_eq!(c.model.variant, crate::model::Variant::Image);
        assert!(c.model.backbone.freeze);
        assert_eq!(c.paths.corpus, PathBuf::from("/data/x.jsonl"));
        let bad = [("MCEN_TRAIN__NOPE".to_string(), "1".to_string())];
        assert!(RunConfig::parse_with(&text, bad).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let text = RunConfig::default().to_toml().unwrap();
        let e = RunConfig::parse_with(&text, [("MCEN_TRAIN__BATCH_SIZE".into(), "1".into())])
            .unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        use crate::corpus::{generate_synthetic, SynthOptions};
        let dir = tempfile::tempdir().unwrap();
        let mut opts = SynthOptions::new(4, 20, 1);
        opts.image_size = 16;
        generate_synthetic(&opts)
            .unwrap()
            .write(dir.path(), &opts)
            .unwrap();
        let mut c = RunConfig::default();
        c.paths.corpus = dir.path().join("corpus.jsonl");
        c.model.backbone.input_size = 16;
        c.data.val_fraction = 0.25;
        let a = load_run_data(&c).unwrap();
        assert_eq!((a.train.len(), a.val.len()), (15, 5));
        let ids = |d: &Dataset| d.docs.iter().map(|x| x.id.clone()).collect::<Vec<_>>();
        assert!(ids(&a.val).iter().all(|i| !ids(&a.train).contains(i)));
        let b = load_run_data(&c).unwrap();
        assert_eq!(ids(&a.val), ids(&b.val));
    }
}
