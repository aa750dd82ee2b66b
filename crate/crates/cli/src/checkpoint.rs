//! Control-parameter checkpoints: a JSON manifest plus one little-endian
//! `f64` file per sub-network (gate, residual, expansion).

use std::fs;
use std::path::Path;

use paramflow::control::{ControlNet, ControlNetSpec, ControlParams};
use paramflow::rom::{read_f64_le, write_f64_le, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;
const SUBNETS: [&str; 3] = ["gate", "residual", "expansion"];

/// Version, seed and configuration hash stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Self {
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            seed,
            config_hash,
        }
    }

    /// One-line header for CSV and SVG outputs.
    pub fn header(&self) -> String {
        format!("version={} seed={} config={}", self.version, self.seed, self.config_hash)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub provenance: Provenance,
    pub model: ModelSpec,
    pub control: ControlNetSpec,
    pub iterations: usize,
    /// False when training stopped early and this is the last good state.
    pub complete: bool,
    pub subnets: Vec<SubnetEntry>,
}

pub fn write_checkpoint(
    dir: &Path,
    params: &ControlParams,
    model: ModelSpec,
    provenance: &Provenance,
    iterations: usize,
    complete: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let parts = params.subnets();
    let mut subnets = Vec::with_capacity(3);
    for (name, values) in SUBNETS.iter().zip(parts) {
        let file = format!("{name}.bin");
        write_f64_le(&dir.join(&file), values)?;
        subnets.push(SubnetEntry {
            name: name.to_string(),
            file,
            len: values.len(),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        provenance: provenance.clone(),
        model,
        control: params.spec,
        iterations,
        complete,
        subnets,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ControlParams)> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", dir.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CliError::Config(format!(
            "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
            manifest.format
        )));
    }
    manifest.control.validate()?;
    let net = ControlNet::new(manifest.control);
    let ranges = net.subnet_ranges();
    let mut values = vec![0.0; net.n_params()];
    for (name, range) in SUBNETS.iter().zip(ranges) {
        let entry = manifest
            .subnets
            .iter()
            .find(|s| s.name == *name)
            .ok_or_else(|| CliError::Config(format!("checkpoint lacks the `{name}` sub-network")))?;
        let data = read_f64_le(&dir.join(&entry.file))?;
        if data.len() != range.len() || entry.len != range.len() {
            return Err(CliError::Config(format!(
                "sub-network `{name}` has {} values, expected {}",
                data.len(),
                range.len()
            )));
        }
        values[range].copy_from_slice(&data);
    }
    Ok((
        manifest.clone(),
        ControlParams {
            spec: manifest.control,
            values,
        },
    ))
}
