use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::Real;
use crate::NnError;

/// Handle of one trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
}

/// Flat registry of named parameters. Layers hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

const MAGIC: &[u8; 4] = b"BPW1";

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    dtype: String,
    tensors: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        id
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| T::lit(normal.sample(rng))).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.by_name
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(_, &id)| id)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Serialize all tensors into a self-describing little-endian blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BlobHeader {
            dtype: T::DTYPE.to_string(),
            tensors: self
                .params
                .iter()
                .map(|p| BlobEntry { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + self.num_scalars() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Overwrite values from a blob produced by [`ParamStore::to_bytes`].
    /// Names, shapes and dtype must match this store exactly.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<(), NnError> {
        let bad = |msg: String| NnError::Weights(msg);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: BlobHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(bad(format!("dtype {} != {}", header.dtype, T::DTYPE)));
        }
        if header.tensors.len() != self.params.len() {
            return Err(bad(format!(
                "{} tensors in blob, model has {}",
                header.tensors.len(),
                self.params.len()
            )));
        }
        let mut pos = 12 + hlen;
        for (entry, p) in header.tensors.iter().zip(self.params.iter_mut()) {
            if entry.name != p.name || (entry.rows, entry.cols) != p.value.shape() {
                return Err(bad(format!("tensor mismatch at {}", entry.name)));
            }
            let n = entry.rows * entry.cols * T::BYTES;
            let chunk = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated data".into()))?;
            for (dst, src) in p.value.data_mut().iter_mut().zip(chunk.chunks_exact(T::BYTES)) {
                *dst = T::read_le(src);
            }
            pos += n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), NnError> {
        let bytes = std::fs::read(path)?;
        self.load_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blob_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::<f32>::new();
        a.add_uniform("l.w", 3, 4, 0.5, &mut rng);
        a.add_normal("l.b", 1, 4, 0.1, &mut rng);
        let bytes = a.to_bytes();

        let mut b = ParamStore::<f32>::new();
        b.add("l.w", Matrix::zeros(3, 4));
        b.add("l.b", Matrix::zeros(1, 4));
        b.load_bytes(&bytes).unwrap();
        for id in a.ids() {
            assert_eq!(a.get(id), b.get(id));
        }
    }

    #[test]
    fn blob_rejects_shape_mismatch() {
        let mut a = ParamStore::<f64>::new();
        a.add("w", Matrix::zeros(2, 2));
        let mut b = ParamStore::<f64>::new();
        b.add("w", Matrix::zeros(2, 3));
        assert!(b.load_bytes(&a.to_bytes()).is_err());
        assert!(b.load_bytes(&a.to_bytes()[..10]).is_err());
    }

    #[test]
    fn prefix_lookup() {
        let mut s = ParamStore::<f64>::new();
        s.add("head.grip.w", Matrix::zeros(1, 1));
        s.add("head.grip.b", Matrix::zeros(1, 1));
        s.add("head.ik.0.w", Matrix::zeros(1, 1));
        assert_eq!(s.ids_with_prefix("head.grip.").count(), 2);
    }
}
