//! STBL1 checkpoints: a JSON manifest plus one raw little-endian f64 blob.
//! Round-trips are bit-exact; the sha256 over manifest and blob is the
//! frozen-base checksum.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::ParamGroup;

pub const FORMAT: &str = "STBL1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// byte offset into the blob
    offset: u64,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    frozen: bool,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    config_hash: String,
    seed: u64,
    groups: Vec<GroupEntry>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_owned();
    os.push(".bin");
    PathBuf::from(os)
}

pub fn save(path: &Path, groups: &[&ParamGroup], config_hash: &str, seed: u64) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest_groups = Vec::new();
    for g in groups {
        let mut params = Vec::new();
        for (name, p) in g.iter() {
            let offset = blob.len() as u64;
            for v in &p.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            params.push(ParamEntry {
                name: name.to_string(),
                shape: p.shape.clone(),
                offset,
                frozen: g.frozen,
            });
        }
        manifest_groups.push(GroupEntry { name: g.name.clone(), frozen: g.frozen, params });
    }
    let blob_file = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: 1,
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config_hash: config_hash.to_string(),
        seed,
        groups: manifest_groups,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    std::fs::write(&blob_file, blob).map_err(|e| Error::io(blob_file.display().to_string(), e))?;
    Ok(())
}

pub struct Loaded {
    pub groups: Vec<ParamGroup>,
    pub config_hash: String,
    pub seed: u64,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format { what: "STBL1 manifest", detail: e.to_string() })?;
    if manifest.format != FORMAT {
        return Err(Error::Format {
            what: "STBL1 manifest",
            detail: format!("unknown format '{}'", manifest.format),
        });
    }
    let blob_file = blob_path(path);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(blob_file.display().to_string(), e))?;
    let mut groups = Vec::new();
    for ge in &manifest.groups {
        let mut g = ParamGroup::new(&ge.name);
        for pe in &ge.params {
            let count: usize = pe.shape.iter().product();
            let start = pe.offset as usize;
            let end = start + count * 8;
            if end > blob.len() {
                return Err(Error::Format {
                    what: "STBL1 blob",
                    detail: format!("param {} overruns blob ({} > {})", pe.name, end, blob.len()),
                });
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            g.insert(&pe.name, &pe.shape, data);
        }
        g.frozen = ge.frozen;
        groups.push(g);
    }
    Ok(Loaded { groups, config_hash: manifest.config_hash, seed: manifest.seed })
}

/// sha256 over manifest bytes followed by blob bytes, hex-encoded.
pub fn checksum(path: &Path) -> Result<String> {
    let manifest = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let blob_file = blob_path(path);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(blob_file.display().to_string(), e))?;
    let mut h = Sha256::new();
    h.update(&manifest);
    h.update(&blob);
    Ok(hex_string(&h.finalize()))
}

/// Checksum of in-memory groups, independent of any file.
pub fn group_checksum(groups: &[&ParamGroup]) -> String {
    let mut h = Sha256::new();
    for g in groups {
        h.update(g.name.as_bytes());
        h.update([g.frozen as u8]);
        for (name, p) in g.iter() {
            h.update(name.as_bytes());
            for d in &p.shape {
                h.update(d.to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}
