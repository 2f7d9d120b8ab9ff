use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::geometry::{TriangleMesh, VoxelRadianceField};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the image shape and its values as little-endian f64.
pub fn hash_image(img: &Image) -> String {
    let mut h = Sha256::new();
    for d in [img.width(), img.height(), img.channels()] {
        h.update((d as u64).to_le_bytes());
    }
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of the field in its grid-container encoding.
pub fn hash_field(field: &VoxelRadianceField) -> Result<String> {
    let mut buf = Vec::new();
    field.write_to(&mut buf)?;
    Ok(hash_bytes(&buf))
}

pub fn hash_mesh(mesh: &TriangleMesh) -> String {
    hash_bytes(mesh.to_obj_string().as_bytes())
}

/// Writes through a temporary sibling and renames over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Everything needed to reproduce a run: the command, seeds, config
/// snapshot, input hashes, produced artifacts and metric results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Command-line arguments after the program name.
    #[serde(default)]
    pub args: Vec<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub backends: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: Vec::new(),
            status: RunStatus::Running,
            error: None,
            seed,
            seeds: BTreeMap::new(),
            config,
            backends: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| crate::Error::format("run manifest", e.to_string()))
    }
}
