//! Named-tensor container shared by the feature, matching and descriptor
//! weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PDLC"            magic
//! u16               version (1)
//! u32               tensor count
//! per tensor:
//!   u32 + bytes     name, UTF-8
//!   u8              rank
//!   u64 * rank      dims
//!   f64 * prod      data, row-major
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PDLC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected =
            element_count(&dims).ok_or_else(|| Error::MalformedTensorFile(format!("dims {dims:?} overflow")))?;
        if expected != data.len() {
            return Err(Error::MalformedTensorFile(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)])
            .collect();
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        if self.dims != [rows, cols] {
            return Err(Error::WeightShapeMismatch(format!(
                "expected [{rows}, {cols}], found {:?}",
                self.dims
            )));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &self.data))
    }

    pub fn to_vector(&self, len: usize) -> Result<DVector<f64>> {
        if self.dims != [len] {
            return Err(Error::WeightShapeMismatch(format!(
                "expected [{len}], found {:?}",
                self.dims
            )));
        }
        Ok(DVector::from_column_slice(&self.data))
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    entries: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends all tensors of `other`, replacing same-named ones.
    pub fn merge(&mut self, other: TensorFile) {
        for (n, t) in other.entries {
            self.insert(n, t);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::MalformedTensorFile("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::MalformedTensorFile(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut file = TensorFile::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::MalformedTensorFile(format!("tensor name: {e}")))?
                .to_string();
            if file.get(&name).is_some() {
                return Err(Error::MalformedTensorFile(format!("duplicate tensor `{name}`")));
            }
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.array()?);
                dims.push(usize::try_from(d).map_err(|_| Error::MalformedTensorFile(format!("dim {d} too large")))?);
            }
            let n = element_count(&dims)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::MalformedTensorFile(format!("tensor `{name}` dims {dims:?} overflow")))?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            file.entries.push((name, Tensor { dims, data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedTensorFile(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
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
            .ok_or_else(|| Error::MalformedTensorFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}
