//! The SLRT tensor container, run configuration files and JSON-lines
//! run reports.
//!
//! SLRT layout (all integers little-endian):
//!
//! | bytes      | field                               |
//! |------------|-------------------------------------|
//! | 4          | magic `b"SLRT"`                     |
//! | 2          | version, `u16` = 1                  |
//! | 1          | dtype, 0 = f32, 1 = f64             |
//! | 1          | ndim ∈ {1, 2, 3}                    |
//! | 8 · ndim   | shape, `u64` each                   |
//! | rest       | row-major payload, little-endian    |

mod config;
mod report;

use std::fs;
use std::path::Path;

pub use config::{Damping, RunConfig, SolverChoice, SvdPolicy, DEFAULT_ALT_STEPS};
pub use report::{IterRecord, RunReport, RunSummary};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"SLRT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A vector, matrix or stack of matrices held in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::InvalidShape {
                shape,
                reason: "ndim must be 1, 2 or 3",
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: "data length does not match shape",
            });
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    /// Stacks equally shaped matrices into a `count × rows × cols` tensor.
    pub fn from_stack(items: &[DenseMatrix]) -> Result<Self> {
        let (rows, cols) = items.first().map_or((0, 0), |m| m.shape());
        let mut data = Vec::with_capacity(items.len() * rows * cols);
        for m in items {
            if m.shape() != (rows, cols) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: (rows, cols),
                    rhs: m.shape(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Self {
            shape: vec![items.len(), rows, cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Matrix view; a vector becomes a single row.
    pub fn to_matrix(&self) -> Result<DenseMatrix> {
        match *self.shape.as_slice() {
            [n] => DenseMatrix::from_vec(1, n, self.data.clone()),
            [r, c] => DenseMatrix::from_vec(r, c, self.data.clone()),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a vector or matrix",
            }),
        }
    }

    /// Stack view; a matrix becomes a stack of one.
    pub fn to_stack(&self) -> Result<Vec<DenseMatrix>> {
        match *self.shape.as_slice() {
            [_, _] => Ok(vec![self.to_matrix()?]),
            [count, r, c] => Ok((0..count)
                .map(|k| {
                    DenseMatrix::from_vec(r, c, self.data[k * r * c..(k + 1) * r * c].to_vec())
                        .expect("slice length")
                })
                .collect()),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a matrix or stack",
            }),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        match *self.shape.as_slice() {
            [_] => Ok(self.data.clone()),
            [1, _] | [_, 1] => Ok(self.data.clone()),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a vector",
            }),
        }
    }
}

impl From<&DenseMatrix> for Tensor {
    fn from(m: &DenseMatrix) -> Self {
        Tensor::from_matrix(m)
    }
}

/// Serializes a tensor. Narrowing to f32 rounds to nearest-even and fails
/// on values outside the finite f32 range.
pub fn encode(tensor: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 8 * tensor.shape.len() + tensor.data.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(tensor.shape.len() as u8);
    for &d in &tensor.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => {
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for (index, &value) in tensor.data.iter().enumerate() {
                let narrow = value as f32;
                if value.is_finite() && !narrow.is_finite() {
                    return Err(Error::NarrowingOverflow { index, value });
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses an SLRT byte buffer, widening f32 payloads to f64.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    let header = |need: usize| -> Result<()> {
        if bytes.len() < need {
            return Err(Error::TruncatedPayload {
                expected: need,
                found: bytes.len(),
            });
        }
        Ok(())
    };
    header(4)?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    header(8)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(bytes[6])?;
    let ndim = bytes[7] as usize;
    if !(1..=3).contains(&ndim) {
        return Err(Error::InvalidShape {
            shape: vec![],
            reason: "ndim must be 1, 2 or 3",
        });
    }
    let payload_start = 8 + 8 * ndim;
    header(payload_start)?;
    let shape: Vec<usize> = bytes[8..payload_start]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::InvalidShape {
            shape: shape.clone(),
            reason: "element count overflows",
        })?;
    let expected = numel * dtype.size();
    let payload = &bytes[payload_start..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingBytes(payload.len() - expected));
    }
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok((Tensor { shape, data }, dtype))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_with_dtype(path).map(|(t, _)| t)
}

pub fn read_tensor_with_dtype(path: impl AsRef<Path>) -> Result<(Tensor, Dtype)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m), Dtype::F64)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    read_tensor(path)?.to_matrix()
}
