use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, SaeError};

pub const MAGIC: &[u8; 8] = b"SAEACT01";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
}

/// Rows of activations stored as 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    d_model: usize,
    n_rows: usize,
    dtype: Dtype,
    data: Vec<f32>,
}

impl ActivationStore {
    pub fn new(d_model: usize, data: Vec<f32>) -> Result<Self> {
        if d_model == 0 {
            return Err(SaeError::invalid("d_model must be positive"));
        }
        if !data.len().is_multiple_of(d_model) {
            return Err(SaeError::invalid(format!(
                "payload length {} is not a multiple of d_model {d_model}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SaeError::NonFinite {
                location: format!("activation row {}", pos / d_model),
            });
        }
        Ok(Self {
            d_model,
            n_rows: data.len() / d_model,
            dtype: Dtype::F32,
            data,
        })
    }

    pub fn from_array(rows: &Array2<f64>) -> Result<Self> {
        Self::new(rows.ncols(), rows.iter().map(|&v| v as f32).collect())
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn payload(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d_model..(i + 1) * self.d_model]
    }

    /// Selected rows widened to f64, in the given order.
    pub fn gather(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.d_model));
        for (mut dst, &r) in out.outer_iter_mut().zip(rows) {
            for (d, &s) in dst.iter_mut().zip(self.row(r)) {
                *d = s as f64;
            }
        }
        out
    }

    /// Splits off the last `tail` rows: `(head, tail)`.
    pub fn split_tail(&self, tail: usize) -> Result<(ActivationStore, ActivationStore)> {
        if tail == 0 || tail >= self.n_rows {
            return Err(SaeError::InsufficientData {
                needed: tail + 1,
                got: self.n_rows,
            });
        }
        let cut = (self.n_rows - tail) * self.d_model;
        Ok((
            Self::new(self.d_model, self.data[..cut].to_vec())?,
            Self::new(self.d_model, self.data[cut..].to_vec())?,
        ))
    }

    /// The first `n` rows (or all, if fewer).
    pub fn head(&self, n: usize) -> Array2<f64> {
        let idx: Vec<usize> = (0..n.min(self.n_rows)).collect();
        self.gather(&idx)
    }
}

pub fn write_activations(store: &ActivationStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SaeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = [0u8; HEADER_LEN];
    header[..8].copy_from_slice(MAGIC);
    header[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[12..16].copy_from_slice(&(store.d_model as u32).to_le_bytes());
    header[16..24].copy_from_slice(&(store.n_rows as u64).to_le_bytes());
    header[24] = store.dtype as u8;
    let io = |e| SaeError::io(path, e);
    w.write_all(&header).map_err(io)?;
    for v in &store.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<ActivationStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SaeError::io(path, e))?;
    if bytes.len() >= 8 && &bytes[..8] != MAGIC {
        return Err(SaeError::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(SaeError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(SaeError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let d_model = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n_rows = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let dtype = bytes[24];
    if dtype != Dtype::F32 as u8 {
        return Err(SaeError::UnsupportedDtype(dtype));
    }
    if d_model == 0 {
        return Err(SaeError::invalid("header declares d_model = 0"));
    }
    let expected = n_rows
        .checked_mul(d_model as u64 * 4)
        .ok_or_else(|| SaeError::invalid("header dimensions overflow"))?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(SaeError::Truncated { expected, found });
    }
    if found > expected {
        return Err(SaeError::invalid(format!(
            "{} trailing bytes after payload in {path:?}",
            found - expected
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ActivationStore::new(d_model, data)
}
