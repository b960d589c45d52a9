//! Single-file checkpoint: magic, little-endian u32 header length, JSON
//! header, then every tensor as little-endian f64 in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MidsConfig, MidsError, MidsModel};
use crate::nn::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FFAAMIDS";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: MidsConfig,
    trained: bool,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> MidsModel<T> {
    pub fn save(&self, path: &Path) -> Result<(), MidsError> {
        let store = &self.store;
        let header = Header {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config().clone(),
            trained: self.trained,
            tensors: store
                .ids()
                .map(|id| {
                    let (rows, cols) = store.get(id).shape();
                    TensorEntry {
                        name: store.name(id).to_string(),
                        rows,
                        cols,
                        trainable: store.is_trainable(id),
                    }
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut buf = Vec::with_capacity(16 + json.len() + store.num_scalars(false) * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for id in store.ids() {
            for v in store.get(id).data() {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MidsError> {
        let fail = |reason: String| MidsError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| fail("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| fail(format!("header: {e}")))?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(fail(format!(
                "schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let mut model = Self::new(header.config).map_err(|e| fail(e.to_string()))?;
        if header.tensors.len() != model.store.len() {
            return Err(fail(format!(
                "{} tensors, model has {}",
                header.tensors.len(),
                model.store.len()
            )));
        }
        let mut off = 12 + hlen;
        for t in &header.tensors {
            let id = model
                .store
                .by_name(&t.name)
                .ok_or_else(|| fail(format!("unknown tensor {}", t.name)))?;
            if model.store.get(id).shape() != (t.rows, t.cols) {
                return Err(fail(format!("shape mismatch for {}", t.name)));
            }
            let n = t.rows * t.cols;
            let raw = bytes
                .get(off..off + n * 8)
                .ok_or_else(|| fail(format!("truncated data for {}", t.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            *model.store.get_mut(id) = Matrix::from_vec(t.rows, t.cols, data);
            model.store.set_trainable(id, t.trainable);
            off += n * 8;
        }
        if off != bytes.len() {
            return Err(fail("trailing bytes".into()));
        }
        model.trained = header.trained;
        Ok(model)
    }
}
