//! JSON sidecar files exchanged between subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ivsgen::{Feature, FeatureVector};

/// File name of the latent vectors stored next to generated surfaces.
pub const LATENTS_FILE: &str = "latents.json";

/// Row-aligned feature values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub features: Vec<Feature>,
    pub values: Vec<Vec<f64>>,
}

impl LabelFile {
    pub fn from_vectors(features: &[Feature], labels: &[FeatureVector]) -> Result<Self> {
        let values = labels
            .iter()
            .map(|l| l.select(features).map(|s| s.values().to_vec()))
            .collect::<ivsgen::Result<_>>()?;
        Ok(Self {
            features: features.to_vec(),
            values,
        })
    }

    pub fn to_vectors(&self) -> Result<Vec<FeatureVector>> {
        self.values
            .iter()
            .map(|v| Ok(FeatureVector::new(self.features.clone(), v.clone())?))
            .collect()
    }
}

/// Latent vectors aligned with a surface set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFile {
    pub z: Vec<Vec<f64>>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let body = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

/// Ensures a JSON document contains no non-finite numbers before it is written.
pub fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        bail!("{what} contains a non-finite value");
    }
    Ok(())
}
