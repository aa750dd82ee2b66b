use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelFamily, ModelSpec, ParamVector};
use crate::error::{Error, Result};

pub const LAYOUT_VERSION: u32 = 1;

/// Sidecar describing a flat little-endian `f64` parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub family: ModelFamily,
    pub d: usize,
    pub n: usize,
    pub layout_version: u32,
    /// Number of parameter vectors stored back to back.
    pub count: usize,
    pub data_file: String,
}

pub fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn sidecar(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `stem.json` and `stem.bin` for one or more vectors of one model.
pub fn write_params(stem: &Path, params: &[ParamVector]) -> Result<()> {
    let first = params
        .first()
        .ok_or_else(|| Error::Config("nothing to write".into()))?;
    let spec = first.spec;
    let mut flat = Vec::with_capacity(params.len() * spec.n_params());
    for p in params {
        if p.spec != spec {
            return Err(Error::Config("parameter vectors of different models".into()));
        }
        flat.extend_from_slice(&p.values);
    }
    let (json, bin) = sidecar(stem);
    let manifest = ParamManifest {
        family: spec.family,
        d: spec.dim,
        n: spec.terms,
        layout_version: LAYOUT_VERSION,
        count: params.len(),
        data_file: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    write_f64_le(&bin, &flat)
}

pub fn read_params(stem: &Path) -> Result<Vec<ParamVector>> {
    let (json, _) = sidecar(stem);
    let manifest: ParamManifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if manifest.layout_version != LAYOUT_VERSION {
        return Err(Error::Config(format!(
            "unsupported layout version {}",
            manifest.layout_version
        )));
    }
    let spec = ModelSpec::new(manifest.family, manifest.d, manifest.n);
    let dir = json.parent().unwrap_or_else(|| Path::new("."));
    let flat = read_f64_le(&dir.join(&manifest.data_file))?;
    let m = spec.n_params();
    if flat.len() != m * manifest.count {
        return Err(Error::Dimension {
            what: "parameter file".into(),
            expected: m * manifest.count,
            got: flat.len(),
        });
    }
    Ok(flat
        .chunks_exact(m)
        .map(|c| ParamVector {
            spec,
            values: c.to_vec(),
        })
        .collect())
}
