//! Minimal dense tensor container.
//!
//! Layout: magic `F3DT`, `u16` version (1), `u16` rank, `rank` x `u64` dims,
//! then `product(dims)` little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"F3DT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("dims {dims:?} need {expected} values, got {found}")]
    LengthMismatch { dims: Vec<u64>, expected: usize, found: usize },
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

fn element_count(dims: &[u64]) -> usize {
    dims.iter().map(|d| *d as usize).product()
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self, TensorFileError> {
        let expected = element_count(&dims);
        if expected != data.len() {
            return Err(TensorFileError::LengthMismatch { dims, expected, found: data.len() });
        }
        Ok(Self { dims, data })
    }

    /// Narrows `f64` values to `f32`.
    pub fn from_f64(dims: Vec<u64>, data: &[f64]) -> Result<Self, TensorFileError> {
        Self::new(dims, data.iter().map(|v| *v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| f64::from(*v)).collect()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), TensorFileError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u16).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, TensorFileError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorFileError::BadMagic(magic));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(TensorFileError::UnsupportedVersion(version));
        }
        r.read_exact(&mut b2)?;
        let rank = u16::from_le_bytes(b2) as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            dims.push(u64::from_le_bytes(b8));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = element_count(&dims);
        if payload.len() != expected * 4 {
            if payload.len() > expected * 4 {
                return Err(TensorFileError::TrailingBytes);
            }
            return Err(TensorFileError::LengthMismatch { dims, expected, found: payload.len() / 4 });
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorFileError> {
        let io = |source| TensorFileError::Io { path: path.display().to_string(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TensorFileError> {
        let f = File::open(path).map_err(|source| TensorFileError::Io { path: path.display().to_string(), source })?;
        Self::read_from(&mut BufReader::new(f))
    }

    /// Human-readable dump: a header line, then one line per last-axis row.
    pub fn dump_text(&self, max_rows: usize) -> String {
        let mut out = format!("F3DT v{VERSION} rank {} dims {:?}\n", self.rank(), self.dims);
        let row = self.dims.last().map_or(1, |d| (*d as usize).max(1));
        for (i, chunk) in self.data.chunks(row).enumerate() {
            if i == max_rows {
                out.push_str("...\n");
                break;
            }
            out.push_str(&chunk.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" "));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut want = b"F3DT".to_vec();
        want.extend([1, 0, 2, 0]);
        want.extend(2u64.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_from(&mut bad.as_slice()), Err(TensorFileError::BadMagic(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(Tensor::read_from(&mut bad.as_slice()), Err(TensorFileError::UnsupportedVersion(2))));
        assert!(matches!(Tensor::read_from(&mut &buf[..buf.len() - 1]), Err(TensorFileError::LengthMismatch { .. })));
        let mut long = buf.clone();
        long.extend([0; 4]);
        assert!(matches!(Tensor::read_from(&mut long.as_slice()), Err(TensorFileError::TrailingBytes)));
    }

    #[test]
    fn file_round_trip_and_dump() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.f3dt");
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        t.save(&p).unwrap();
        assert_eq!(Tensor::load(&p).unwrap(), t);
        assert_eq!(t.dump_text(10), "F3DT v1 rank 2 dims [2, 3]\n0 1 2\n3 4 5\n");
        assert!(matches!(Tensor::load(&dir.path().join("missing")), Err(TensorFileError::Io { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(0u64..5, 0..4), seed in any::<u32>()) {
            let n = element_count(&dims);
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32) * 0.37 - 1.0).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(Tensor::read_from(&mut buf.as_slice()).unwrap(), t);
        }
    }
}
