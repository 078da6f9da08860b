//! JSON run configurations.

use std::path::{Path, PathBuf};

use afsm_core::datakit::{gen_synthetic_dataset, class_names, load_dataset, Dataset, SyntheticSpec};
use afsm_core::sweep::SweepConfig;
use afsm_core::traincore::{DetectorConfig, TrainConfig};
use afsm_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// A dataset file, or a synthetic set generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    /// Relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetSource::Path(p) => load_dataset(base.join(p)),
            DatasetSource::Synthetic(spec) => {
                let (images, _) = gen_synthetic_dataset(spec)?;
                Ok(Dataset {
                    classes: class_names(spec.num_classes),
                    images,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub version: u32,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: DetectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRunConfig {
    pub version: u32,
    pub train_dataset: DatasetSource,
    pub test_dataset: DatasetSource,
    #[serde(default)]
    pub model: DetectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

pub trait Versioned {
    fn version(&self) -> u32;
}

impl Versioned for TrainRunConfig {
    fn version(&self) -> u32 {
        self.version
    }
}

impl Versioned for SweepRunConfig {
    fn version(&self) -> u32 {
        self.version
    }
}

pub fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            context: if path == "." { what.to_string() } else { format!("{what} field `{path}`") },
            message: e.into_inner().to_string(),
        }
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read, parse and version-check a config; returns it with the directory relative paths resolve against.
pub fn load_config<T: DeserializeOwned + Versioned>(path: &Path) -> Result<(T, PathBuf)> {
    let text = read_text(path)?;
    let cfg: T = parse_json(&text, &path.display().to_string())?;
    if cfg.version() != CONFIG_VERSION {
        return Err(Error::Version {
            expected: CONFIG_VERSION,
            found: cfg.version(),
        });
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

pub fn load_synthetic_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    match path {
        None => Ok(SyntheticSpec::default()),
        Some(p) => parse_json(&read_text(p)?, &p.display().to_string()),
    }
}
