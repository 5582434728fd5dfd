//! Self-describing model container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (model kind, config snapshot, iteration counter, seed, tensor table), then
//! every tensor as little-endian `f64` in table order. Both `f32` and `f64`
//! values survive the round trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDGSEG01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    scalar: String,
    config: serde_json::Value,
    iteration: usize,
    seed: u64,
    tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint<T: Scalar> {
    pub kind: String,
    pub config: serde_json::Value,
    pub iteration: usize,
    pub seed: u64,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            scalar: T::NAME.to_string(),
            config: self.config.clone(),
            iteration: self.iteration,
            seed: self.seed,
            tensors: self
                .params
                .entries()
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    group: e.group,
                    trainable: e.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for e in self.params.entries() {
            for v in e.value.data() {
                out.write_all(&v.f64().to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| bad(format!("cannot open: {e}")))?
            .read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a model checkpoint".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut data = bytes[16 + header_len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let values: Vec<T> = data.by_ref().take(n).map(T::of).collect();
            if values.len() != n {
                return Err(bad(format!("tensor `{}` is truncated", t.name)));
            }
            let id = params.add(t.name.clone(), t.group, Tensor::from_vec(&t.shape, values)?);
            params.entries_mut()[id.0].trainable = t.trainable;
        }
        if data.next().is_some() {
            return Err(bad("trailing data after the last tensor".into()));
        }
        Ok(Self { kind: header.kind, config: header.config, iteration: header.iteration, seed: header.seed, params })
    }

    /// Copy values into a freshly built model store, matching by name.
    pub fn restore_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint {
                path: Default::default(),
                reason: format!("expected {} tensors, checkpoint has {}", store.len(), self.params.len()),
            });
        }
        for (dst, src) in store.entries_mut().iter_mut().zip(self.params.entries()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint {
                    path: Default::default(),
                    reason: format!(
                        "tensor `{}` {:?} does not match `{}` {:?}",
                        src.name,
                        src.value.shape(),
                        dst.name,
                        dst.value.shape()
                    ),
                });
            }
            dst.value = src.value.clone();
            dst.trainable = src.trainable;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint {
                path: Default::default(),
                reason: format!("expected a `{kind}` checkpoint, found `{}`", self.kind),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamStore::<f32>::new();
        params.add("a", ParamGroup::Agm, Tensor::from_fn(&[2, 3], |i| (i as f32).sin() / 7.0));
        let b = params.add("b", ParamGroup::ImageEncoder, Tensor::from_vec(&[1], vec![f32::MIN_POSITIVE]).unwrap());
        params.entries_mut()[b.0].trainable = false;
        let ck = ModelCheckpoint {
            kind: "agm".into(),
            config: serde_json::json!({"k": 1}),
            iteration: 7,
            seed: 3,
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = ModelCheckpoint::<f32>::load(&path).unwrap();
        assert_eq!((back.kind.as_str(), back.iteration, back.seed), ("agm", 7, 3));
        assert_eq!(back.config, ck.config);
        for (x, y) in back.params.entries().iter().zip(ck.params.entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.trainable, y.trainable);
            assert!(x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"hello world, not a model").unwrap();
        assert!(matches!(ModelCheckpoint::<f64>::load(&path), Err(Error::Checkpoint { .. })));
    }
}
