//! Versioned tensor container: magic, version, a JSON header (kind, dtype,
//! config snapshot, history digest, tensor table) and little-endian data.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tape::ParamStore;
use crate::training::FitReport;

pub const MAGIC: &[u8; 4] = b"QSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Every tensor of a separation engine.
    Engine,
    /// Adapters and decoder only; the frozen encoder base lives in a backend
    /// checkpoint.
    Adapters,
    /// Query backend towers.
    Backend,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryDigest {
    pub epochs: usize,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_sisdri: Option<f64>,
    pub best_val_sisdri: Option<f64>,
}

impl From<&FitReport> for HistoryDigest {
    fn from(r: &FitReport) -> Self {
        HistoryDigest {
            epochs: r.history.len(),
            steps: r.steps,
            final_train_loss: r.history.last().map(|h| h.train_loss),
            final_val_sisdri: r.history.last().map(|h| h.val_sisdri),
            best_val_sisdri: r.history.iter().map(|h| h.val_sisdri).reduce(f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub dtype: DType,
    pub config: serde_json::Value,
    pub history: Option<HistoryDigest>,
    /// Tensor-name prefix of the encoder base inside the backend checkpoint
    /// an adapters-only checkpoint completes.
    pub base_prefix: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: CheckpointKind, config: serde_json::Value, params: ParamStore<T>) -> Self {
        Checkpoint {
            header: CheckpointHeader { kind, dtype: T::DTYPE, config, history: None, base_prefix: None, tensors: Vec::new() },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.dtype = T::DTYPE;
        header.tensors.clear();
        let mut data = Vec::new();
        for id in self.params.ids() {
            let v = self.params.value(id);
            header.tensors.push(TensorEntry {
                name: self.params.name(id).to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
                trainable: self.params.is_trainable(id),
                offset: data.len() as u64,
            });
            for &x in v.iter() {
                x.write_le(&mut data);
            }
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string()));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {version} (this build reads {VERSION})")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(&format!("header: {e}")))?;
        let data = &bytes[16 + hlen..];
        let size = header.dtype.size();
        let mut params = ParamStore::new();
        let mut expected = 0u64;
        for t in &header.tensors {
            if t.offset != expected {
                return Err(corrupt(&format!("tensor `{}` at offset {} (expected {expected})", t.name, t.offset)));
            }
            let n = t.rows * t.cols;
            let start = t.offset as usize;
            let chunk = data.get(start..start + n * size).ok_or_else(|| corrupt(&format!("tensor `{}` truncated", t.name)))?;
            let vals: Vec<T> = match header.dtype {
                DType::F32 => chunk.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                DType::F64 => chunk.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
            };
            let m = Array2::from_shape_vec((t.rows, t.cols), vals).map_err(|e| corrupt(&e.to_string()))?;
            params.insert(&t.name, m, t.trainable);
            expected += (n * size) as u64;
        }
        if expected as usize != data.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        if header.dtype != T::DTYPE {
            log::warn!("checkpoint stored as {:?}, converting to {:?}", header.dtype, T::DTYPE);
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::config(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        Ok(())
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::config(format!("checkpoint config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        p.normal("a.w", 3, 2, 1.0, true, &mut rng);
        p.normal("b", 1, 4, 1.0, false, &mut rng);
        let mut c = Checkpoint::new(CheckpointKind::Engine, serde_json::json!({"x": 1.5, "name": "toy"}), p);
        c.header.history = Some(HistoryDigest { epochs: 2, steps: 10, ..Default::default() });
        c
    }

    #[test]
    fn byte_stable_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params.get("a.w"), c.params.get("a.w"));
        assert!(!back.params.is_trainable(back.params.id("b").unwrap()));
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Io(_))));
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"nope nope nope nope"), Err(Error::Io(_))));
        bytes[4] = 2;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Config(_))));
        let missing = Checkpoint::<f32>::load(Path::new("/nonexistent/x.ckpt")).err().unwrap();
        assert_eq!(missing.exit_code(), 4);
    }
}
