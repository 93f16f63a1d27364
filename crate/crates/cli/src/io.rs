//! On-disk formats.
//!
//! A tensor directory holds `meta.json` (`shape`, `dtype`, `layout` plus any
//! caller fields) and `data.bin` (little-endian values, row-major). A
//! checkpoint is a `manifest.json` naming one tensor directory per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use scaresnet_core::backbone::BackboneConfig;
use scaresnet_core::{DType, ParamStore, Scalar, Tensor};

pub const META: &str = "meta.json";
pub const DATA: &str = "data.bin";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_FORMAT: &str = "scaresnet-checkpoint";

fn layout(rank: usize) -> &'static str {
    if rank == 3 {
        "CHW-rowmajor"
    } else {
        "rowmajor"
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::DTYPE.size_of());
    for v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    out
}

pub fn decode<T: Scalar>(shape: &[usize], dtype: DType, bytes: &[u8]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    ensure!(
        bytes.len() == n * dtype.size_of(),
        "data.bin holds {} bytes, shape {shape:?} as {dtype:?} needs {}",
        bytes.len(),
        n * dtype.size_of()
    );
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Write `t` into `dir`, merging `extra` into its metadata.
pub fn write_tensor<T: Scalar>(dir: &Path, t: &Tensor<T>, extra: Map<String, Value>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut meta = extra;
    meta.insert("shape".into(), serde_json::to_value(t.shape())?);
    meta.insert("dtype".into(), serde_json::to_value(T::DTYPE)?);
    meta.insert("layout".into(), layout(t.shape().len()).into());
    fs::write(dir.join(META), serde_json::to_vec_pretty(&meta)?)?;
    fs::write(dir.join(DATA), encode(t))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TensorMeta {
    shape: Vec<usize>,
    dtype: DType,
}

/// Read a tensor directory, converting to `T`, and return its full metadata.
pub fn read_tensor<T: Scalar>(dir: &Path) -> Result<(Tensor<T>, Map<String, Value>)> {
    let raw = fs::read(dir.join(META)).with_context(|| format!("reading {}", dir.join(META).display()))?;
    let meta: Map<String, Value> = serde_json::from_slice(&raw)?;
    let head: TensorMeta = serde_json::from_value(Value::Object(meta.clone()))
        .with_context(|| format!("{} lacks shape/dtype", dir.join(META).display()))?;
    let bytes = fs::read(dir.join(DATA)).with_context(|| format!("reading {}", dir.join(DATA).display()))?;
    Ok((decode(&head.shape, head.dtype, &bytes)?, meta))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub config: BackboneConfig,
    pub seed: u64,
    pub tensors: Vec<ManifestEntry>,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &BackboneConfig,
    seed: u64,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        let rel = format!("tensors/{i:04}");
        let mut extra = Map::new();
        extra.insert("name".into(), name.into());
        write_tensor(&dir.join(&rel), t, extra)?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            path: rel,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dtype: T::DTYPE,
        config: config.clone(),
        seed,
        tensors: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Manifest, ParamStore<T>)> {
    let raw = fs::read(dir.join(MANIFEST)).with_context(|| format!("reading {}", dir.join(MANIFEST).display()))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    if manifest.format != CHECKPOINT_FORMAT {
        bail!("{} is not a checkpoint manifest", dir.display());
    }
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let (t, _) = read_tensor::<T>(&dir.join(&e.path))?;
        ensure!(
            t.shape() == e.shape,
            "{}: manifest shape {:?} but data {:?}",
            e.name,
            e.shape,
            t.shape()
        );
        store.push(e.name.clone(), t);
    }
    Ok((manifest, store))
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join("samples").join(format!("{index:04}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn([2, 3, 4], |i| i as f64 * 0.25 - 1.0);
        write_tensor(dir.path(), &t, Map::new()).unwrap();
        let (back, meta) = read_tensor::<f64>(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(meta["layout"], "CHW-rowmajor");
        assert_eq!(meta["dtype"], "f64");

        let t32 = t.cast::<f32>();
        write_tensor(dir.path(), &t32, Map::new()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(DATA)).unwrap().len(), 24 * 4);
        let (back, _) = read_tensor::<f64>(dir.path()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_tensor(dir.path(), &Tensor::<f32>::zeros([5]), Map::new()).unwrap();
        fs::write(dir.path().join(DATA), [0u8; 12]).unwrap();
        assert!(read_tensor::<f32>(dir.path()).is_err());
    }
}
