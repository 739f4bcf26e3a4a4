//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar10, load_mnist, Dataset, Split};
use crate::net::{NetKind, NetworkSpec, TrainConfig};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the dataset files; the CLI falls back to `PNNH_DATA`.
    pub root: Option<PathBuf>,
    /// MNIST split the train/val subsets are drawn from.
    pub source_split: Split,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            root: None,
            source_split: Split::Train,
            train_size: 8000,
            val_size: 2000,
        }
    }
}

impl DataConfig {
    /// Loads the dataset and draws disjoint train/val subsets with `seed`.
    pub fn load(&self, root: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
        let pool = match self.dataset {
            DatasetKind::Mnist => load_mnist(root, self.source_split)?,
            DatasetKind::Cifar10 => load_cifar10(root)?.0,
        };
        pool.random_split(self.train_size, self.val_size, &mut Rng::new(seed))
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::mnist(NetKind::Pnnh, 4)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Full document with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
