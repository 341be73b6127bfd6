//! Parameter archives and their manifests.
//!
//! `params.bin` is the magic `EVSETCK1`, a little-endian `u32` record
//! count, then per record: `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims, and the data as little-endian `f32`.

use std::path::Path;

use evset_core::kmeans::Point;
use evset_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{AblationSection, ModelSection};
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"EVSETCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidCache {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub params: usize,
    pub scalars: usize,
    pub model: ModelSection,
    pub ablation: AblationSection,
    pub centroids: Option<CentroidCache>,
}

impl CentroidCache {
    pub fn points(&self) -> Vec<Point> {
        self.centroids.clone()
    }
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// `(name, tensor)` records in file order.
pub fn decode_params(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    struct Reader<'a>(&'a [u8]);
    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
            if self.0.len() < n {
                return Err("truncated archive".into());
            }
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            Ok(a)
        }
        fn u32(&mut self) -> std::result::Result<usize, String> {
            let b = self.take(4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        }
    }
    let mut r = Reader(bytes);
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or("shape overflow")?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    if !r.0.is_empty() {
        return Err("trailing bytes after the last record".into());
    }
    Ok(out)
}

/// Loads archive values into a store built for the same model; names and
/// shapes must agree exactly.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let records = decode_params(bytes).map_err(CliError::CheckpointMismatch)?;
    if records.len() != store.len() {
        return Err(CliError::CheckpointMismatch(format!(
            "archive has {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        let id = store
            .id(&name)
            .map_err(|_| CliError::CheckpointMismatch(format!("unknown parameter `{name}`")))?;
        if store.value(id).shape() != t.shape() {
            return Err(CliError::CheckpointMismatch(format!(
                "`{name}` has shape {:?} in the archive, {:?} in the model",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

pub fn write(dir: &Path, store: &ParamStore, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let p = dir.join("params.bin");
    std::fs::write(&p, encode_params(store)).map_err(|e| CliError::io(&p, e))?;
    let m = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&m, text).map_err(|e| CliError::io(&m, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format {
        what: "checkpoint manifest",
        path: p,
        msg: e.to_string(),
    })
}

pub fn read_params(dir: &Path) -> Result<Vec<u8>> {
    let p = dir.join("params.bin");
    std::fs::read(&p).map_err(|e| CliError::io(&p, e))
}
