//! Named-tensor checkpoint archive: JSON manifest plus little-endian blob.
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{NnError, ParamStore};

const MAGIC: &[u8; 4] = b"O2AC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data blob, in scalars.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    config_hash: &str,
) -> Result<(), NnError> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (name, value) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
            len: value.len(),
        });
        offset += value.len();
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        dtype: S::DTYPE.to_string(),
        config_hash: config_hash.to_string(),
        master_seed: store.master_seed,
        tensors,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, value) in store.iter() {
        for x in value.iter() {
            w.write_all(&x.to_le_bytes_vec())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(ParamStore<S>, CheckpointManifest), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    if u32::from_le_bytes(v4) != VERSION {
        return Err(NnError::Checkpoint("unsupported version".into()));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let mlen = u64::from_le_bytes(l8) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&mbytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if manifest.dtype != S::DTYPE {
        return Err(NnError::Checkpoint(format!(
            "dtype mismatch: archive {} vs requested {}",
            manifest.dtype,
            S::DTYPE
        )));
    }

    let width = S::width();
    let mut store = ParamStore::<S>::new(manifest.master_seed);
    for entry in &manifest.tensors {
        let mut bytes = vec![0u8; entry.len * width];
        r.read_exact(&mut bytes)?;
        let data: Vec<S> = bytes
            .chunks_exact(width)
            .map(S::from_le_slice)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        store.add(&entry.name, arr);
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitScheme;

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new(42);
        store.init("a.w", &[3, 5], InitScheme::Normal { std: 0.3 });
        store.init("b.gamma", &[7], InitScheme::Ones);
        store.init("z.zero", &[2, 2, 2], InitScheme::Zero);
        let h_before = store.hash_params(|_| true);
        write_checkpoint(&path, &store, "cfg123").unwrap();
        let (back, manifest) = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(manifest.config_hash, "cfg123");
        assert_eq!(manifest.tensors.len(), 3);
        assert_eq!(back.hash_params(|_| true), h_before);
        for ((n1, v1), (n2, v2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new(0);
        store.init("w", &[2], InitScheme::Zero);
        write_checkpoint(&path, &store, "h").unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
    }
}
