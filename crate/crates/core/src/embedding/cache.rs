use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{l2_norm, prompt_for, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"QSEC";
const VERSION: u32 = 1;

/// One unit-norm query embedding per known class.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache<T: Scalar> {
    pub labels: Vec<String>,
    pub entries: Array2<T>,
}

#[derive(Serialize, Deserialize)]
struct CacheJson {
    version: u32,
    labels: Vec<String>,
    entries: Vec<Vec<f64>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn new(labels: Vec<String>, entries: Array2<T>) -> Result<Self> {
        if labels.len() != entries.nrows() {
            return Err(Error::domain(format!("{} labels for {} cache rows", labels.len(), entries.nrows())));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(Error::domain(format!("duplicate cache label `{l}`")));
            }
        }
        let tol = if T::DTYPE == crate::DType::F32 { 1e-5 } else { 1e-6 };
        for (l, row) in labels.iter().zip(entries.rows()) {
            let n = l2_norm(&row.to_owned()).to_f64_lossy();
            if (n - 1.0).abs() > tol {
                return Err(Error::domain(format!("cache row `{l}` has norm {n}")));
            }
        }
        Ok(EmbeddingCache { labels, entries })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn row(&self, label: &str) -> Option<Array1<T>> {
        self.labels.iter().position(|l| l == label).map(|i| self.entries.row(i).to_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.write_all(MAGIC)?;
        buf.write_u32::<LittleEndian>(VERSION)?;
        buf.write_u32::<LittleEndian>(self.len() as u32)?;
        buf.write_u32::<LittleEndian>(self.dim() as u32)?;
        for l in &self.labels {
            buf.write_u32::<LittleEndian>(l.len() as u32)?;
            buf.write_all(l.as_bytes())?;
        }
        for &v in self.entries.iter() {
            buf.write_f32::<LittleEndian>(v.to_f64_lossy() as f32)?;
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::config(format!("{} is not an embedding cache", path.display())));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::config(format!("unsupported cache version {version}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let d = r.read_u32::<LittleEndian>()? as usize;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut s = vec![0u8; len];
            r.read_exact(&mut s)?;
            labels.push(String::from_utf8(s).map_err(|_| Error::config("cache label is not UTF-8"))?);
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(T::of(r.read_f32::<LittleEndian>()? as f64));
        }
        let entries = Array2::from_shape_vec((n, d), data).expect("sized above");
        Self::new(labels, renormalize(entries))
    }

    pub fn to_json(&self) -> Result<String> {
        let j = CacheJson {
            version: VERSION,
            labels: self.labels.clone(),
            entries: self.entries.rows().into_iter().map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: CacheJson = serde_json::from_str(s)?;
        if j.version != VERSION {
            return Err(Error::config(format!("unsupported cache version {}", j.version)));
        }
        let d = j.entries.first().map_or(0, |r| r.len());
        let flat: Vec<T> = j.entries.iter().flatten().map(|&v| T::of(v)).collect();
        let entries = Array2::from_shape_vec((j.entries.len(), d), flat)
            .map_err(|_| Error::config("cache rows differ in length"))?;
        Self::new(j.labels, entries)
    }
}

/// Rows stored as f32 are renormalised on load so wider types see unit rows.
fn renormalize<T: Scalar>(mut m: Array2<T>) -> Array2<T> {
    for mut r in m.rows_mut() {
        let n = r.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            r.mapv_inplace(|v| v / n);
        }
    }
    m
}

/// Text embedding of every class prompt.
pub fn build_cache<T: Scalar>(backend: &dyn EmbeddingBackend<T>, labels: &[String]) -> Result<EmbeddingCache<T>> {
    if labels.is_empty() {
        return Err(Error::domain("cannot build a cache without classes"));
    }
    let mut entries = Array2::zeros((labels.len(), backend.dim()));
    for (i, l) in labels.iter().enumerate() {
        entries.row_mut(i).assign(&backend.text_query(&prompt_for(l))?.vector);
    }
    EmbeddingCache::new(labels.to_vec(), entries)
}
