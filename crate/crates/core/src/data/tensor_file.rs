//! Portable binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "PSDN"
//! version u8       1
//! dtype   u8       1 = float32
//! ndim    u8       0..=4
//! dims    ndim × u32
//! payload product(dims) × f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"PSDN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MAX_NDIM: usize = 4;

/// An n-dimensional float32 array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorData {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    /// Explicit f64 -> f32 narrowing. Rejects values that are not finite in either width.
    pub fn from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        let mut narrowed = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            let n = v as f32;
            if !n.is_finite() {
                return Err(Error::NonFinite(format!(
                    "element {i} = {v} is not representable as a finite float32"
                )));
            }
            narrowed.push(n);
        }
        Self::new(dims, narrowed)
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::from_f64(vec![m.rows(), m.cols()], m.data())
    }

    /// Interpret a 2-D tensor (or 1-D as a single row) as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let (rows, cols) = match self.dims.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            other => {
                return Err(Error::Shape(format!(
                    "expected a 1-D or 2-D tensor, got dims {other:?}"
                )))
            }
        };
        Ok(Matrix::from_vec(
            rows,
            cols,
            self.values.iter().map(|&v| v as f64).collect(),
        ))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > MAX_NDIM {
            return Err(Error::Shape(format!(
                "ndim {} exceeds the maximum of {MAX_NDIM}",
                self.dims.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {i} = {} cannot be written",
                self.values[i]
            )));
        }
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Shape(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// `origin` is only used to label errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 7 {
            return Err(Error::format(origin, "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format(origin, "bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {}", bytes[4]),
            ));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::format(origin, format!("unknown dtype {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        if ndim > MAX_NDIM {
            return Err(Error::format(origin, format!("ndim {ndim} exceeds {MAX_NDIM}")));
        }
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::format(origin, "truncated dimension list"));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| {
                let at = 7 + 4 * i;
                u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
            })
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != 4 * count {
            return Err(Error::format(
                origin,
                format!(
                    "truncated payload: expected {} bytes, found {}",
                    4 * count,
                    payload.len()
                ),
            ));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, values })
    }
}

pub fn write_tensor(path: &Path, data: &TensorData) -> Result<()> {
    let bytes = data.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorData::decode(&bytes, path)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_tensor(path, &TensorData::from_matrix(m)?)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_tensor(path)?.to_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_2x3_is_39_bytes() {
        let t = TensorData::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 1 + 8 + 24);
        assert_eq!(&bytes[..4], b"PSDN");
        assert_eq!(bytes[4..7], [1, 1, 2]);
        assert_eq!(bytes[7..11], 2u32.to_le_bytes());
        assert_eq!(bytes[11..15], 3u32.to_le_bytes());
        let back = TensorData::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mel_payload_size() {
        let t = TensorData::new(vec![64, 80], vec![0.5; 64 * 80]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(bytes.len() - (7 + 8), 20480);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = TensorData::new(vec![1], vec![1.0]).unwrap().encode().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = TensorData::decode(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn rejects_unknown_dtype_version_and_truncation() {
        let good = TensorData::new(vec![2, 2], vec![1.0; 4]).unwrap().encode().unwrap();
        let mut b = good.clone();
        b[5] = 9;
        assert!(TensorData::decode(&b, Path::new("x"))
            .unwrap_err()
            .to_string()
            .contains("unknown dtype"));
        let mut b = good.clone();
        b[4] = 2;
        assert!(TensorData::decode(&b, Path::new("x")).is_err());
        let b = &good[..good.len() - 1];
        assert!(TensorData::decode(b, Path::new("x"))
            .unwrap_err()
            .to_string()
            .contains("truncated payload"));
    }

    #[test]
    fn rejects_non_finite_and_high_rank() {
        assert!(TensorData::from_f64(vec![2], &[1.0, f64::NAN]).is_err());
        assert!(TensorData::from_f64(vec![1], &[1e300]).is_err());
        let t = TensorData::new(vec![1, 1, 1, 1, 1], vec![0.0]).unwrap();
        assert!(t.encode().is_err());
    }

    #[test]
    fn unwritable_path_is_reported() {
        let t = TensorData::new(vec![1], vec![0.0]).unwrap();
        let err = write_tensor(Path::new("/nonexistent-dir/x.psdn"), &t).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..=4),
            seed in any::<u64>(),
        ) {
            let count: usize = dims.iter().product();
            let mut state = seed | 1;
            let values: Vec<f32> = (0..count).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                let v = f32::from_bits(state as u32);
                if v.is_finite() { v } else { 0.25 }
            }).collect();
            let t = TensorData::new(dims, values).unwrap();
            let back = TensorData::decode(&t.encode().unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(&back.dims, &t.dims);
            for (a, b) in back.values.iter().zip(&t.values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
