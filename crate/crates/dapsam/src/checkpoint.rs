//! Checkpoint container: a stored (uncompressed) zip archive of raw
//! little-endian f64 arrays plus a JSON manifest.
//!
//! Layout:
//!   manifest.json          — version, trainer metadata, parameter table,
//!                            optimizer slot names
//!   params/<name>          — parameter bytes
//!   optim/m/<name>         — first-moment bytes (trainable entries only)
//!   optim/v/<name>         — second-moment bytes
//!
//! Entries are written in sorted-name order with a fixed timestamp, so two
//! identical training runs produce byte-identical archives.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::FileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Trainer-owned metadata: config echo, epoch, RNG seed, best score.
    pub meta: serde_json::Value,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub params: BTreeMap<String, Tensor>,
    pub optim: Option<AdamState>,
}

fn zip_err(context: &str, e: impl std::fmt::Display) -> Error {
    Error::CorruptCheckpoint(format!("{context}: {e}"))
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_from_bytes(name: &str, shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
    let expect: usize = shape.iter().product::<usize>() * 8;
    if bytes.len() != expect {
        return Err(Error::CorruptCheckpoint(format!(
            "array {name}: {} bytes on disk, manifest shape {:?} needs {expect}",
            bytes.len(),
            shape
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParameterStore,
    optim: Option<&AdamState>,
    meta: serde_json::Value,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        meta,
        params: store
            .iter()
            .map(|(name, e)| ParamRecord {
                name: name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: "f64".into(),
                frozen: e.frozen,
            })
            .collect(),
        optimizer: optim.map(|o| OptimizerRecord {
            step: o.step,
            names: o.m.keys().cloned().collect(),
        }),
    };

    let file = File::create(path)?;
    let mut zw = ZipWriter::new(BufWriter::new(file));
    let opts: FileOptions = FileOptions::default().compression_method(CompressionMethod::Stored);

    zw.start_file("manifest.json", opts)
        .map_err(|e| zip_err("start manifest", e))?;
    zw.write_all(&serde_json::to_vec_pretty(&manifest)?)?;

    for (name, entry) in store.iter() {
        zw.start_file(format!("params/{name}"), opts)
            .map_err(|e| zip_err("start param entry", e))?;
        zw.write_all(&tensor_bytes(&entry.tensor))?;
    }
    if let Some(o) = optim {
        for (name, t) in &o.m {
            zw.start_file(format!("optim/m/{name}"), opts)
                .map_err(|e| zip_err("start optim entry", e))?;
            zw.write_all(&tensor_bytes(t))?;
        }
        for (name, t) in &o.v {
            zw.start_file(format!("optim/v/{name}"), opts)
                .map_err(|e| zip_err("start optim entry", e))?;
            zw.write_all(&tensor_bytes(t))?;
        }
    }
    zw.finish().map_err(|e| zip_err("finish archive", e))?;
    Ok(())
}

fn read_entry(za: &mut ZipArchive<BufReader<File>>, name: &str) -> Result<Vec<u8>> {
    let mut f = za
        .by_name(name)
        .map_err(|e| Error::CorruptCheckpoint(format!("missing entry {name}: {e}")))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path)?;
    let mut za = ZipArchive::new(BufReader::new(file)).map_err(|e| zip_err("open archive", e))?;

    let manifest: Manifest = serde_json::from_slice(&read_entry(&mut za, "manifest.json")?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }

    let mut params = BTreeMap::new();
    for rec in &manifest.params {
        if rec.dtype != "f64" {
            return Err(Error::CorruptCheckpoint(format!(
                "array {}: unsupported dtype {}",
                rec.name, rec.dtype
            )));
        }
        let bytes = read_entry(&mut za, &format!("params/{}", rec.name))?;
        params.insert(rec.name.clone(), tensor_from_bytes(&rec.name, &rec.shape, &bytes)?);
    }

    let optim = match &manifest.optimizer {
        None => None,
        Some(rec) => {
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for name in &rec.names {
                let shape = params
                    .get(name)
                    .ok_or_else(|| {
                        Error::CorruptCheckpoint(format!(
                            "optimizer slot {name} has no matching parameter"
                        ))
                    })?
                    .shape()
                    .to_vec();
                let mb = read_entry(&mut za, &format!("optim/m/{name}"))?;
                let vb = read_entry(&mut za, &format!("optim/v/{name}"))?;
                m.insert(name.clone(), tensor_from_bytes(name, &shape, &mb)?);
                v.insert(name.clone(), tensor_from_bytes(name, &shape, &vb)?);
            }
            Some(AdamState {
                step: rec.step,
                m,
                v,
            })
        }
    };

    Ok(LoadedCheckpoint {
        manifest,
        params,
        optim,
    })
}

/// Copy loaded arrays into an already-shaped store. Every store entry must
/// be present in the checkpoint with an identical shape; the error names the
/// offending parameter.
pub fn apply_to_store(loaded: &LoadedCheckpoint, store: &mut ParameterStore) -> Result<()> {
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let tensor = loaded.params.get(name).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("checkpoint is missing parameter {name}"))
        })?;
        let expected = store.tensor(name)?.shape().to_vec();
        if tensor.shape() != expected {
            return Err(Error::invalid(format!(
                "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                tensor.shape(),
                expected
            )));
        }
        store.set_tensor(name, tensor.clone())?;
    }
    Ok(())
}

/// Raw `(name, array)` view into a container's params, for weight import.
pub fn read_raw_arrays(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let loaded = load_checkpoint(path)?;
    Ok(loaded.params.into_iter().collect())
}
