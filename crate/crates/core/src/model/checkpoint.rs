//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, header
//! JSON, `u32` tensor count, then per tensor a `u32` name length, the UTF-8
//! name, `u64` rows, `u64` cols and the row-major `f64` data. Integers and
//! floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout_for, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numkit::Tensor;

const MAGIC: &[u8; 8] = b"LLCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab_hash: String,
    /// Free-form state stored alongside the weights (optimizer step, task index).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab_hash: &str) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                model: model.config().clone(),
                vocab_hash: vocab_hash.to_string(),
                extra: serde_json::Value::Null,
            },
            tensors: model
                .param_names()
                .iter()
                .cloned()
                .zip(model.params().iter().cloned())
                .collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    /// Rebuilds the model, checking every parameter against the stored
    /// config and, when given, the vocabulary hash.
    pub fn restore_model(&self, vocab_hash: Option<&str>) -> Result<Model> {
        if let Some(h) = vocab_hash {
            if h != self.header.vocab_hash {
                return Err(Error::Checkpoint(format!(
                    "vocabulary hash {} does not match expected {h}",
                    self.header.vocab_hash
                )));
            }
        }
        let config = self.header.model.clone();
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored model config is invalid: {e}")))?;
        let (layout, reg) = layout_for(&config);
        let mut params = Vec::with_capacity(reg.names.len());
        for (name, &(rows, cols)) in reg.names.iter().zip(&reg.shapes) {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    (rows, cols)
                )));
            }
            params.push(t.clone());
        }
        Ok(Model {
            config,
            names: reg.names,
            params,
            layout,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Checkpoint("header version disagrees with container".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` size overflows")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(rows, cols, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::model::{DecoderKind, EncoderKind};
    use crate::rng::rng_for;

    fn model() -> Model {
        Model::new(tiny(EncoderKind::Recurrent, DecoderKind::BagOfWords), &mut rng_for(9, &[])).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let mut c = Checkpoint::from_model(&m, "abc");
        c.header.extra = serde_json::json!({"step": 7});
        c.push("adam.m.embedding", Tensor::filled(2, 2, 0.125));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.restore_model(Some("abc")).unwrap(), m);
        assert_eq!(back.with_prefix("adam.m.").count(), 1);
    }

    #[test]
    fn vocab_hash_mismatch() {
        let c = Checkpoint::from_model(&model(), "abc");
        assert!(matches!(c.restore_model(Some("xyz")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut c = Checkpoint::from_model(&model(), "abc");
        c.header.model.latent_dim += 1;
        assert!(matches!(c.restore_model(None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_bytes() {
        let bytes = Checkpoint::from_model(&model(), "abc").to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = Checkpoint::from_model(&model(), "h");
        c.write(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap(), c);
    }
}
