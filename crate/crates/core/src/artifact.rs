//! Provenance header stamped onto every file the toolkit writes, plus the
//! manifest + binary tensor archive shared by checkpoints and gradient dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ArtifactHeader {
    /// Hashes the JSON rendering of `config` (SHA-256, hex).
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Self {
        let json = serde_json::to_vec(config).expect("config serialises");
        ArtifactHeader {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: hex::encode(Sha256::digest(&json)),
            seed,
        }
    }

    /// One comment line for CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!(
            "# tool_version={} config_hash={} seed={}",
            self.tool_version, self.config_hash, self.seed
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub header: ArtifactHeader,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and `<path stem>.bin` (little-endian f64).
pub fn write_archive(
    path: &Path,
    header: ArtifactHeader,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        header,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Input(format!("bad archive path {}", path.display())))?
            .to_string(),
        meta,
        tensors: entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(&blob)?.write_all(&bytes)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob_file)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > bytes.len() {
            return Err(Error::Input(format!(
                "tensor {} overruns blob {} ({} > {} bytes)",
                entry.name,
                blob_file.display(),
                end,
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}
