//! `FSTN` tensor records.
//!
//! Layout: magic `FSTN`, version byte `1`, dtype byte (`0` = f32, `1` = f64),
//! rank byte, `rank` little-endian `u32` dims, then the row-major
//! little-endian payload. A rank of zero encodes a scalar.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSTN";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

pub fn to_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + dtype.width() * t.len());
    encode(t, dtype, &mut out);
    out
}

/// Decodes one record from the front of `bytes`; returns the tensor and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let take = |at: usize, n: usize| -> std::result::Result<&[u8], String> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| format!("truncated record: need {} bytes at offset {at}", n))
    };
    if take(0, 4)? != MAGIC {
        return Err("bad magic".into());
    }
    let header = take(4, 3)?;
    if header[0] != VERSION {
        return Err(format!("unknown version {}", header[0]));
    }
    let dtype = match header[1] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(format!("unknown dtype {other}")),
    };
    let rank = header[2] as usize;
    let mut pos = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err("zero dimension".into());
        }
        shape.push(d);
        pos += 4;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dimension overflow")?;
    let width = dtype.width();
    let payload = take(pos, n.checked_mul(width).ok_or("payload overflow")?)?;
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    pos += n * width;
    let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
    Ok((t, pos))
}

pub fn write_file(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    std::fs::write(path, to_bytes(t, dtype))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let (t, used) = decode(&bytes).map_err(corrupt)?;
    if used != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = to_bytes(&t, Dtype::F64);
        assert_eq!(&b[..4], b"FSTN");
        assert_eq!(&b[4..7], &[1, 1, 2]);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &3u32.to_le_bytes());
        assert_eq!(b.len(), 15 + 48);
        assert_eq!(&b[15 + 8..15 + 16], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncation_and_magic_errors() {
        let t = Tensor::ones(&[4]);
        let b = to_bytes(&t, Dtype::F32);
        for cut in [0, 3, 6, 9, b.len() - 1] {
            assert!(decode(&b[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err(), "bad magic");
    }

    #[test]
    fn truncated_file_reports_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fstn");
        let b = to_bytes(&Tensor::ones(&[3, 3]), Dtype::F64);
        std::fs::write(&p, &b[..b.len() - 5]).unwrap();
        assert!(matches!(read_file(&p), Err(Error::Corrupt { .. })));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1)) as f64).sin() * 1e3)
                .collect();
            let t = Tensor::new(&shape, data).unwrap();
            let (back, used) = decode(&to_bytes(&t, Dtype::F64)).unwrap();
            prop_assert_eq!(used, 7 + 4 * shape.len() + 8 * n);
            prop_assert!(back.bit_eq(&t));
        }
    }
}
