//! Binary parameter container with a JSON sidecar.
//!
//! ```text
//! "GSCK"  u32 count
//! count x { u32 name_len, name (UTF-8), u8 dtype, u32 rank, rank x u32 dim, payload (LE) }
//! ```
//!
//! All integers are little-endian. The sidecar (`<file>.json`) carries the
//! model configuration, per-tensor flags and free-form training metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorFlags {
    pub trainable: bool,
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub flags: BTreeMap<String, TensorFlags>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes a container, converting every tensor to `T`. Flags default to
/// trainable non-buffer.
pub fn decode_params<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::format(path, format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * dtype.width())?;
        let tensor = match dtype {
            DType::F32 => Tensor::from_vec(&shape, payload.chunks(4).map(f32::read_le).collect())?.cast::<T>(),
            DType::F64 => Tensor::from_vec(&shape, payload.chunks(8).map(f64::read_le).collect())?.cast::<T>(),
        };
        store
            .insert(name, tensor, false)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(store)
}

/// Writes the container and its sidecar; returns the container's SHA-256.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    model: &ModelConfig,
    metadata: serde_json::Value,
) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_params(store);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        model: model.clone(),
        flags: store
            .iter()
            .map(|(n, p)| {
                (
                    n.to_string(),
                    TensorFlags {
                        trainable: p.trainable,
                        buffer: p.buffer,
                    },
                )
            })
            .collect(),
        metadata,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, Sidecar)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = decode_params::<T>(&bytes, path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    for (name, p) in store.iter_mut() {
        let f = sidecar
            .flags
            .get(name)
            .ok_or_else(|| Error::format(&side, format!("no flags for tensor {name}")))?;
        p.trainable = f.trainable;
        p.buffer = f.buffer;
    }
    Ok((store, sidecar))
}

/// SHA-256 of a file, hex encoded.
/// SHA-256 of the encoded tensors whose names start with `prefix`.
pub fn params_digest<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> String {
    hex::encode(Sha256::digest(encode_params(&store.subset(prefix))))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gsck");
        let model = ModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        store.set_trainable("detector.", false);
        let h1 = save_checkpoint(&path, &store, &model, serde_json::json!({"epoch": 3})).unwrap();
        assert_eq!(h1, file_hash(&path).unwrap());
        let (back, side) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(side.model, model);
        assert_eq!(side.metadata["epoch"], 3);
        let h2 = save_checkpoint(&dir.path().join("n.gsck"), &back, &model, serde_json::Value::Null).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn header_layout() {
        let mut store = ParamStore::<f64>::new();
        store.insert("ab", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), false).unwrap();
        let b = encode_params(&store);
        assert_eq!(&b[..4], b"GSCK");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..14], b"ab");
        assert_eq!(b[14], DType::F64.tag());
        assert_eq!(&b[15..19], &1u32.to_le_bytes());
        assert_eq!(&b[19..23], &2u32.to_le_bytes());
        assert_eq!(&b[23..31], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 39);
        let back: ParamStore<f32> = decode_params(&b, Path::new("x")).unwrap();
        assert_eq!(back.get("ab").data(), &[1.0, -2.0]);
    }

    #[test]
    fn truncated_and_bad_magic_are_format_errors() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[3]), false).unwrap();
        let b = encode_params(&store);
        assert!(matches!(
            decode_params::<f32>(&b[..b.len() - 1], Path::new("x")),
            Err(Error::Format { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_params::<f32>(&bad, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint::<f32>(Path::new("/nonexistent/x.gsck")),
            Err(Error::Io { .. })
        ));
    }
}
