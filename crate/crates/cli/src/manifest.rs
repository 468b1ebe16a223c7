use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_SUFFIX: &str = ".manifest.toml";

/// Reproducibility record written next to the artifacts of every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Arguments after the program name, as originally given.
    pub argv: Vec<String>,
    pub seed: u64,
    pub wall_time_s: f64,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| mtloc::Error::Data(format!("manifest {}: {e}", path.display())).into())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = toml::to_string(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| mtloc::Error::Io { path: path.into(), source: e }.into())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| mtloc::Error::Io { path: path.into(), source: e })?;
    Ok(sha256_hex(&bytes))
}

/// `<path>.manifest.toml`.
pub fn manifest_path_for(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

/// File-name keyed view of an input/output table.
pub fn by_file_name(table: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    table
        .iter()
        .map(|(p, h)| {
            let name = Path::new(p).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.clone());
            (name, h.clone())
        })
        .collect()
}
