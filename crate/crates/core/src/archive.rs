//! Flat tensor archives: a safetensors file (header = name → dtype, shape,
//! byte offsets) whose string metadata carries a content digest that is
//! re-verified on every load.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{content_digest, tensor_bytes};

pub const CONTENT_DIGEST_KEY: &str = "content_digest";

/// A loaded archive.
#[derive(Debug)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
    /// SHA-256 of the whole file.
    pub file_digest: String,
}

impl Archive {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("archive metadata lacks `{key}`")))
    }

    pub fn content_digest(&self) -> Option<&str> {
        self.metadata.get(CONTENT_DIGEST_KEY).map(String::as_str)
    }
}

/// SHA-256 of a byte buffer, hex encoded.
pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes_digest(&bytes))
}

/// Writes `bytes` next to `path` and renames into place, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn sorted(tensors: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    let mut v = tensors.to_vec();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

/// Rewrites the JSON header with sorted keys. safetensors writes metadata
/// from a `HashMap`, so its order otherwise varies between processes.
fn canonical_header(bytes: &[u8]) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n])?;
    let mut json = serde_json::to_vec(&header)?;
    // data must start 8-byte aligned; the format pads with spaces
    json.resize(json.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(8 + json.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

/// Serializes `tensors` with `metadata` plus a content digest; returns the
/// whole-file digest.
pub fn write_archive(
    path: &Path,
    tensors: &[(String, Tensor)],
    metadata: BTreeMap<String, String>,
) -> Result<String> {
    let tensors = sorted(tensors);
    let mut meta: HashMap<String, String> = metadata.into_iter().collect();
    meta.insert(CONTENT_DIGEST_KEY.to_string(), content_digest(&tensors)?);

    let raw: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let dtype = match t.dtype() {
                DType::F32 => Dtype::F32,
                DType::F64 => Dtype::F64,
                other => return Err(Error::config(format!("cannot archive dtype {other:?}"))),
            };
            Ok((name.clone(), dtype, t.dims().to_vec(), tensor_bytes(t)?))
        })
        .collect::<Result<_>>()?;
    let views = raw
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::config(format!("tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::config(format!("serialize {}: {e}", path.display())))?;
    let bytes = canonical_header(&bytes)?;
    write_atomic(path, &bytes)?;
    Ok(bytes_digest(&bytes))
}

fn load_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads an archive and verifies its content digest when one is recorded.
pub fn read_archive(path: &Path, device: &Device) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| load_err(path, e.to_string()))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| load_err(path, e.to_string()))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();

    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            other => {
                return Err(load_err(
                    path,
                    format!("tensor {name}: unsupported dtype {other:?}"),
                ))
            }
        };
        tensors.insert(name, t);
    }

    if let Some(expected) = metadata.get(CONTENT_DIGEST_KEY) {
        let list: Vec<(String, Tensor)> = tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let actual = content_digest(&list)?;
        if &actual != expected {
            return Err(Error::DigestMismatch {
                path: path.to_path_buf(),
                expected: expected.clone(),
                actual,
            });
        }
    }
    Ok(Archive {
        tensors,
        metadata,
        file_digest: bytes_digest(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        let dev = Device::Cpu;
        vec![
            (
                "b".to_string(),
                Tensor::arange(0f32, 6.0, &dev)
                    .unwrap()
                    .reshape((2, 3))
                    .unwrap(),
            ),
            ("a".to_string(), Tensor::new(&[1.5f64, -2.0], &dev).unwrap()),
        ]
    }

    #[test]
    fn write_then_read() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        let digest = write_archive(&path, &sample(), meta)?;
        let a = read_archive(&path, &Device::Cpu)?;
        assert_eq!(a.file_digest, digest);
        assert_eq!(a.meta("kind")?, "test");
        assert_eq!(a.tensors["b"].to_vec2::<f32>()?[1], vec![3.0, 4.0, 5.0]);
        assert_eq!(a.tensors["a"].to_vec1::<f64>()?, vec![1.5, -2.0]);
        Ok(())
    }

    #[test]
    fn bytes_do_not_depend_on_hash_order() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let meta: BTreeMap<String, String> = (0..16)
            .map(|i| (format!("key{i}"), format!("v{i}")))
            .collect();
        let digests: Vec<String> = (0..4)
            .map(|i| write_archive(&dir.path().join(format!("{i}")), &sample(), meta.clone()))
            .collect::<Result<_>>()?;
        assert!(digests.iter().all(|d| *d == digests[0]));
        let bytes = fs::read(dir.path().join("0")).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + n) % 8, 0);
        Ok(())
    }

    #[test]
    fn corrupted_payload_is_a_digest_mismatch() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        write_archive(&path, &sample(), BTreeMap::new())?;
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        match read_archive(&path, &Device::Cpu) {
            Err(Error::DigestMismatch { .. }) => Ok(()),
            other => panic!("expected digest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_a_load_error() {
        let r = read_archive(Path::new("/nonexistent/nowhere.safetensors"), &Device::Cpu);
        assert!(matches!(r, Err(Error::Load { .. })));
    }
}
