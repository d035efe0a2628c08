//! Dense row-major tensors of 64-bit floats.
//!
//! `Tensor` carries every image, channel stack, feature map, and parameter
//! block in the toolkit. Data is stored flat in row-major order; the shape is
//! explicit and the data length always equals the product of the dimensions.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// BDLT tensor file magic bytes.
pub const BDLT_MAGIC: &[u8; 4] = b"BDLT";
/// BDLT format version written and accepted by this crate.
pub const BDLT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element accessor for multi-dimensional indices; row-major layout.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i} ({dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Write in BDLT format: magic `BDLT`, then little-endian u32 version (=1),
    /// u32 ndim, ndim u32 dims, and the row-major f64 payload.
    pub fn write_bdlt(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.shape.len() + 8 * self.data.len());
        buf.extend_from_slice(BDLT_MAGIC);
        buf.extend_from_slice(&BDLT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Read a BDLT file written by [`Tensor::write_bdlt`].
    pub fn read_bdlt(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let fail = |msg: &str| Error::ImageFormat {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != BDLT_MAGIC {
            return Err(fail("not a BDLT file"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != BDLT_VERSION {
            return Err(fail(&format!("unsupported BDLT version {version}")));
        }
        let ndim = u32_at(8) as usize;
        if ndim == 0 || bytes.len() < 12 + 4 * ndim {
            return Err(fail("truncated BDLT header"));
        }
        let shape: Vec<usize> = (0..ndim).map(|i| u32_at(12 + 4 * i) as usize).collect();
        if shape.iter().any(|&d| d == 0) {
            return Err(fail("zero dimension in BDLT header"));
        }
        let len: usize = shape.iter().product();
        let payload = &bytes[12 + 4 * ndim..];
        if payload.len() != 8 * len {
            return Err(fail(&format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                payload.len(),
                8 * len
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite value in BDLT payload"));
        }
        Tensor::new(shape, data)
    }
}
