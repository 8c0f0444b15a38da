//! FGC1: a 16-byte header followed by column-major little-endian values.
//!
//! Header layout: magic `FGC1`, dtype `u8`, rank `u8`, reserved `u16`,
//! two `u32` dimensions (the second is 0 for rank 1).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const FGC1_MAGIC: &[u8; 4] = b"FGC1";
pub const FGC1_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    I32 = 3,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Self::F32),
            2 => Ok(Self::F64),
            3 => Ok(Self::I32),
            _ => Err(Error::Format(format!("unknown FGC1 dtype code {code}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 | Self::I32 => 4,
        }
    }
}

/// A rank-1 or rank-2 array. `data` is row-major in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Fgc1Array {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Fgc1Array {
    pub fn new(dtype: Dtype, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.len() == 1 || shape.len() == 2,
            Shape,
            "FGC1 stores rank 1 or 2, got shape {:?}",
            shape
        );
        ensure!(
            shape.iter().all(|&d| d <= u32::MAX as usize),
            Shape,
            "dimension too large for FGC1: {:?}",
            shape
        );
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            Shape,
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        if dtype == Dtype::I32 {
            ensure!(
                data.iter().all(|v| v.fract() == 0.0 && v.abs() <= i32::MAX as f64),
                InvalidInput,
                "i32 array holds non-integer values"
            );
        }
        Ok(Self {
            dtype,
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_tensor(t: &Tensor, dtype: Dtype) -> Result<Self> {
        Self::new(dtype, t.shape(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.data.clone())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn byte_len(&self) -> usize {
        FGC1_HEADER_LEN + self.data.len() * self.dtype.size()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut header = [0u8; FGC1_HEADER_LEN];
        header[..4].copy_from_slice(FGC1_MAGIC);
        header[4] = self.dtype as u8;
        header[5] = self.shape.len() as u8;
        header[8..12].copy_from_slice(&(self.shape[0] as u32).to_le_bytes());
        let second = if self.shape.len() == 2 { self.shape[1] as u32 } else { 0 };
        header[12..16].copy_from_slice(&second.to_le_bytes());
        let mut buf = Vec::with_capacity(self.byte_len());
        buf.extend_from_slice(&header);
        let (rows, cols) = (self.rows(), self.cols());
        for j in 0..cols {
            for i in 0..rows {
                let v = self.data[i * cols + j];
                match self.dtype {
                    Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                    Dtype::I32 => buf.extend_from_slice(&(v as i32).to_le_bytes()),
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; FGC1_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated FGC1 header: {e}")))?;
        ensure!(&header[..4] == FGC1_MAGIC, Format, "bad FGC1 magic {:?}", &header[..4]);
        let dtype = Dtype::from_code(header[4])?;
        let rank = header[5] as usize;
        ensure!(rank == 1 || rank == 2, Format, "unsupported FGC1 rank {rank}");
        let d0 = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let d1 = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
        let shape = if rank == 1 { vec![d0] } else { vec![d0, d1] };
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated FGC1 payload: {e}")))?;
        let (rows, cols) = (d0, if rank == 2 { d1 } else { 1 });
        let mut data = vec![0.0; n];
        for (k, chunk) in raw.chunks_exact(dtype.size()).enumerate() {
            let (j, i) = (k / rows.max(1), k % rows.max(1));
            data[i * cols + j] = match dtype {
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
                Dtype::I32 => i32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
            };
        }
        Self::new(dtype, &shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}
