//! VSCT: a minimal binary container for 2-D and 3-D f32 tensors.
//!
//! Layout (little-endian): `"VSCT" | u8 version=1 | u8 ndim | u16 reserved=0
//! | ndim x u32 dims | f32 payload`. 3-D dims are ordered
//! `(frames, rows, cols)`; the payload is frame-major, row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VSCT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VsctTensor {
    dims: Vec<u32>,
    data: Vec<f32>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl VsctTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        if !(dims.len() == 2 || dims.len() == 3) {
            return Err(format_err(format!("ndim must be 2 or 3, got {}", dims.len())));
        }
        let count: u64 = dims.iter().map(|&d| u64::from(d)).product();
        if count != data.len() as u64 {
            return Err(format_err(format!(
                "dims {dims:?} declare {count} elements, payload has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format_err("tensor contains non-finite values"));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn from_array2(a: &Array2<f64>) -> Result<Self> {
        let (h, w) = a.dim();
        Self::new(
            vec![dim_u32(h)?, dim_u32(w)?],
            a.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_array3(a: &Array3<f64>) -> Result<Self> {
        let (b, h, w) = a.dim();
        Self::new(
            vec![dim_u32(b)?, dim_u32(h)?, dim_u32(w)?],
            a.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        match self.dims[..] {
            [h, w] => Ok(Array2::from_shape_vec(
                (h as usize, w as usize),
                self.data.iter().map(|&v| f64::from(v)).collect(),
            )
            .expect("validated element count")),
            _ => Err(format_err(format!("expected a 2-D tensor, got dims {:?}", self.dims))),
        }
    }

    /// 3-D tensors map directly; a 2-D tensor becomes a single frame.
    pub fn to_array3(&self) -> Result<Array3<f64>> {
        let (b, h, w) = match self.dims[..] {
            [b, h, w] => (b, h, w),
            [h, w] => (1, h, w),
            _ => unreachable!("ndim validated"),
        };
        Ok(Array3::from_shape_vec(
            (b as usize, h as usize, w as usize),
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated element count"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(format_err("file shorter than the VSCT header"));
        }
        if bytes[..4] != MAGIC {
            return Err(format_err(format!("bad magic {:02x?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(format_err(format!("unsupported version {}", bytes[4])));
        }
        let ndim = bytes[5] as usize;
        if !(ndim == 2 || ndim == 3) {
            return Err(format_err(format!("ndim must be 2 or 3, got {ndim}")));
        }
        let head = 8 + 4 * ndim;
        if bytes.len() < head {
            return Err(format_err("truncated dimension table"));
        }
        let dims: Vec<u32> = bytes[8..head]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let count: u64 = dims.iter().map(|&d| u64::from(d)).product();
        let payload = &bytes[head..];
        if payload.len() as u64 != count * 4 {
            return Err(format_err(format!(
                "dims {dims:?} need {} payload bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| format_err(format!("dimension {d} does not fit in u32")))
}

pub fn save_array2(path: impl AsRef<Path>, a: &Array2<f64>) -> Result<()> {
    VsctTensor::from_array2(a)?.save(path)
}

pub fn save_array3(path: impl AsRef<Path>, a: &Array3<f64>) -> Result<()> {
    VsctTensor::from_array3(a)?.save(path)
}

pub fn load_array2(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    VsctTensor::load(path)?.to_array2()
}

pub fn load_array3(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    VsctTensor::load(path)?.to_array3()
}
