//! `.ivsd` dataset files: a directory holding `manifest.json` and `data.bin`.
//!
//! The blob is little-endian f64: all surfaces back to back in the
//! normative flatten order, followed by the label block (`count × d_y`)
//! when labels are present.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GridSpec, IVSurface};
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureVector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
pub const FORMAT_VERSION: u32 = 1;
const FLOAT_FORMAT: &str = "f64le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    grid: GridSpec,
    count: usize,
    feature_names: Vec<String>,
    has_labels: bool,
    float_format: String,
}

/// Surfaces plus optional aligned labels, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub grid: Arc<GridSpec>,
    pub surfaces: Vec<IVSurface>,
    pub labels: Option<Vec<FeatureVector>>,
}

/// Writes surfaces (all on one grid) and optional labels to `path`.
///
/// `grid` is needed so an empty set still records its grid.
pub fn write_surface_set(
    path: impl AsRef<Path>,
    grid: &GridSpec,
    surfaces: &[IVSurface],
    labels: Option<&[FeatureVector]>,
) -> Result<()> {
    let path = path.as_ref();
    for s in surfaces {
        if s.grid().as_ref() != grid {
            return Err(Error::InvalidInput(
                "all surfaces must share the set's grid".into(),
            ));
        }
    }
    let feature_names: Vec<Feature> = match labels {
        Some(ls) => {
            if ls.len() != surfaces.len() {
                return Err(Error::Shape {
                    what: "label count",
                    expected: surfaces.len(),
                    actual: ls.len(),
                });
            }
            let names = ls
                .first()
                .map(|l| l.features().to_vec())
                .unwrap_or_default();
            for l in ls {
                if l.features() != names.as_slice() {
                    return Err(Error::FeatureMismatch {
                        expected: names.iter().map(|f| f.name().to_string()).collect(),
                        actual: l.features().iter().map(|f| f.name().to_string()).collect(),
                    });
                }
            }
            names
        }
        None => Vec::new(),
    };

    let manifest = Manifest {
        version: FORMAT_VERSION,
        grid: grid.clone(),
        count: surfaces.len(),
        feature_names: feature_names.iter().map(|f| f.name().to_string()).collect(),
        has_labels: labels.is_some(),
        float_format: FLOAT_FORMAT.to_string(),
    };

    let d_y = feature_names.len();
    let mut blob = Vec::with_capacity(8 * surfaces.len() * (grid.len() + d_y));
    for s in surfaces {
        for v in s.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(ls) = labels {
        for l in ls {
            for v in l.values() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let manifest_path = path.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let data_path = path.join(DATA_FILE);
    fs::write(&data_path, blob).map_err(|e| Error::io(&data_path, e))?;
    Ok(())
}

/// Reads a set written by [`write_surface_set`].
pub fn read_surface_set(path: impl AsRef<Path>) -> Result<SurfaceSet> {
    let path = path.as_ref();
    let manifest_path = path.join(MANIFEST_FILE);
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                manifest.version
            ),
        ));
    }
    if manifest.float_format != FLOAT_FORMAT {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported float format {:?}", manifest.float_format),
        ));
    }
    let features = manifest
        .feature_names
        .iter()
        .map(|n| n.parse::<Feature>())
        .collect::<Result<Vec<_>>>()?;
    if !manifest.has_labels && !features.is_empty() {
        return Err(Error::format(
            &manifest_path,
            "feature names given without labels",
        ));
    }

    let grid = Arc::new(manifest.grid);
    let n = grid.len();
    let d_y = features.len();
    let data_path = path.join(DATA_FILE);
    let blob = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = 8 * manifest.count * (n + if manifest.has_labels { d_y } else { 0 });
    if blob.len() != expected {
        return Err(Error::format(
            &data_path,
            format!("expected {expected} bytes, found {}", blob.len()),
        ));
    }
    let floats: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if let Some(k) = floats.iter().position(|v| v.is_nan()) {
        return Err(Error::format(&data_path, format!("NaN at float index {k}")));
    }

    let (surface_block, label_block) = floats.split_at(manifest.count * n);
    let surfaces = surface_block
        .chunks_exact(n.max(1))
        .map(|c| IVSurface::new(Arc::clone(&grid), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let labels = if manifest.has_labels {
        let labels = if d_y == 0 {
            vec![FeatureVector::new(Vec::new(), Vec::new())?; manifest.count]
        } else {
            label_block
                .chunks_exact(d_y)
                .map(|c| FeatureVector::new(features.clone(), c.to_vec()))
                .collect::<Result<Vec<_>>>()?
        };
        Some(labels)
    } else {
        None
    };
    Ok(SurfaceSet {
        grid,
        surfaces,
        labels,
    })
}
