//! PKMX flat binary matrix format: magic "PKMX", u32 rows, u32 cols,
//! u8 dtype tag, then row-major little-endian values.

use super::Matrix;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const DTYPE_F64: u8 = 0;
pub const DTYPE_F32: u8 = 1;

const MAGIC: &[u8; 4] = b"PKMX";

pub fn write_pkmx<W: Write>(w: &mut W, m: &Matrix, dtype: u8) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    w.write_all(&[dtype])?;
    match dtype {
        DTYPE_F64 => {
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DTYPE_F32 => {
            for v in m.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        other => return Err(Error::Config(format!("unknown PKMX dtype tag {other}"))),
    }
    Ok(())
}

pub fn read_pkmx<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("bad PKMX magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if rows == 0 || cols == 0 {
        return Err(Error::Config("PKMX matrix with zero dimension".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    match tag[0] {
        DTYPE_F64 => {
            let mut b8 = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
        }
        DTYPE_F32 => {
            for _ in 0..rows * cols {
                r.read_exact(&mut b4)?;
                data.push(f32::from_le_bytes(b4) as f64);
            }
        }
        other => return Err(Error::Config(format!("unknown PKMX dtype tag {other}"))),
    }
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f64_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Matrix::randn(5, 7, 3.0, &mut rng);
        let mut buf = Vec::new();
        write_pkmx(&mut buf, &m, DTYPE_F64).unwrap();
        assert_eq!(&buf[..4], b"PKMX");
        let back = read_pkmx(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn f32_roundtrip_within_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::randn(3, 3, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_pkmx(&mut buf, &m, DTYPE_F32).unwrap();
        let back = read_pkmx(&mut buf.as_slice()).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00".to_vec();
        assert!(read_pkmx(&mut buf.as_slice()).is_err());
    }
}
