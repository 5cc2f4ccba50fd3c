//! Binary tensor files.
//!
//! `CRT1`: 4-byte magic, `u32` LE rank, `rank × u32` LE dims, then the values
//! as `f32` LE in row-major order. Used for content payloads and exported
//! embeddings.
//!
//! `CRT8` has the identical layout with `f64` values. Checkpoints use it so
//! that parameters survive a save/load cycle bit-exactly.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC_F32: &[u8; 4] = b"CRT1";
pub const MAGIC_F64: &[u8; 4] = b"CRT8";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], shape: &[usize]) -> Result<()> {
    w.write_all(magic)?;
    let rank = u32::try_from(shape.len()).map_err(|_| Error::Format("rank overflow".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} overflows u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, precision: Precision) -> Result<()> {
    match precision {
        Precision::F32 => {
            write_header(w, MAGIC_F32, t.shape())?;
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Precision::F64 => {
            write_header(w, MAGIC_F64, t.shape())?;
            let mut bytes = Vec::with_capacity(t.numel() * 8);
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor in either precision.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, Precision)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    let precision = match &magic {
        m if m == MAGIC_F32 => Precision::F32,
        m if m == MAGIC_F64 => Precision::F64,
        other => {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let data = match precision {
        Precision::F32 => {
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        Precision::F64 => {
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        }
    };
    Ok((Tensor::new(shape, data)?, precision))
}

pub fn save_crt1(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t, Precision::F32)?;
    f.flush()?;
    Ok(())
}

pub fn load_crt1(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (t, p) = read_tensor(&mut f)?;
    if p != Precision::F32 {
        return Err(Error::Format(format!("{}: expected CRT1", path.display())));
    }
    Ok(t)
}

/// Rounds every value through `f32`, the precision payload files store.
pub fn round_to_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crt1_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::F32).unwrap();
        assert_eq!(&buf[0..4], b"CRT1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&buf[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![3], vec![0.1, 1.0 / 3.0, -7e-300]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::F64).unwrap();
        let (back, p) = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\0\0\0\0".to_vec();
        assert!(matches!(read_tensor(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::F32).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
