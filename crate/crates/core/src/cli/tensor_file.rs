//! Binary tensor container.
//!
//! ```text
//! "ICBT" | version u8 = 1 | dtype u8 = 0 (f32 LE) | ndim u8 | ndim × u64 LE dims | f32 LE data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::layout::{BinaryMask, LatentGrid, PromptTokens};
use crate::numerics::Tensor2D;

pub const MAGIC: &[u8; 4] = b"ICBT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const FIXED_HEADER: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!(
                "{} dimensions exceed the format limit",
                dims.len()
            )));
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} describe {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FIXED_HEADER + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected ICBT".into()));
        }
        if bytes.len() < FIXED_HEADER {
            return Err(Error::Truncated(format!(
                "header needs {FIXED_HEADER} bytes, got {}",
                bytes.len()
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        let dims_end = FIXED_HEADER + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Truncated(format!(
                "{ndim} dims need {dims_end} header bytes, got {}",
                bytes.len()
            )));
        }
        let dims = bytes[FIXED_HEADER..dims_end]
            .chunks_exact(8)
            .map(|c| {
                let v = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
                usize::try_from(v).map_err(|_| Error::Format(format!("dimension {v} too large")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = element_count(&dims)?;
        let payload = &bytes[dims_end..];
        if payload.len() != n * 4 {
            return Err(Error::Truncated(format!(
                "dims {dims:?} need {} payload bytes, found {}",
                n * 4,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn into_tensor2d(self) -> Result<Tensor2D> {
        match self.dims[..] {
            [r, c] => Tensor2D::from_vec(r, c, self.data),
            _ => Err(Error::shape(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn into_grid(self) -> Result<LatentGrid> {
        match self.dims[..] {
            [h, w, c] => LatentGrid::new(h, w, c, self.data),
            _ => Err(Error::shape(format!(
                "expected a 3-D grid, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask> {
        match self.dims[..] {
            [h, w] => BinaryMask::from_f32(h, w, &self.data),
            _ => Err(Error::shape(format!(
                "expected a 2-D mask, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn into_prompt(self) -> Result<PromptTokens> {
        PromptTokens::new(self.into_tensor2d()?)
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
}

impl From<&Tensor2D> for TensorFile {
    fn from(t: &Tensor2D) -> Self {
        Self {
            dims: vec![t.rows(), t.cols()],
            data: t.data().to_vec(),
        }
    }
}

impl From<&LatentGrid> for TensorFile {
    fn from(g: &LatentGrid) -> Self {
        Self {
            dims: vec![g.height(), g.width(), g.channels()],
            data: g.data().to_vec(),
        }
    }
}

impl From<&BinaryMask> for TensorFile {
    fn from(m: &BinaryMask) -> Self {
        Self {
            dims: vec![m.height(), m.width()],
            data: m.to_f32(),
        }
    }
}

pub fn read_tensor(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Truncated(m) => Error::Truncated(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_tensor(path: &Path, value: &TensorFile) -> Result<()> {
    std::fs::write(path, value.encode()).map_err(|e| Error::io(path, e))
}
