//! FTT binary tensor files.
//!
//! Layout: magic `FTT1`, u8 dtype tag (0 = f64, 1 = f32), u8 rank,
//! `rank` little-endian u64 extents, then the raw little-endian scalars.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FTT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Error::format("FTT file", format!("unknown dtype tag {}", other))),
        }
    }
}

pub fn encode_ftt<W: Write>(tensor: &Tensor, dtype: Dtype, mut w: W) -> Result<()> {
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::format("FTT file", "rank exceeds 255"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.tag(), tensor.rank() as u8])?;
    for &e in tensor.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in tensor.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn decode_ftt<R: Read>(mut r: R) -> Result<(Tensor, Dtype)> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::format("FTT file", "bad magic"));
    }
    let dtype = Dtype::from_tag(head[4])?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf8)?;
        shape.push(
            usize::try_from(u64::from_le_bytes(buf8))
                .map_err(|_| Error::format("FTT file", "extent overflows usize"))?,
        );
    }
    let n = numel(&shape);
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F64 => {
            for _ in 0..n {
                r.read_exact(&mut buf8)?;
                data.push(f64::from_le_bytes(buf8));
            }
        }
        Dtype::F32 => {
            let mut buf4 = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf4)?;
                data.push(f32::from_le_bytes(buf4) as f64);
            }
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("FTT file", "trailing bytes after payload"));
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write_ftt(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_ftt(tensor, dtype, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_ftt(path: impl AsRef<Path>) -> Result<Tensor> {
    let (t, _) = decode_ftt(BufReader::new(File::open(path)?))?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut bytes = Vec::new();
        encode_ftt(&t, Dtype::F64, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FTT1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(&bytes[22..30], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 6 + 16 + 16);
    }

    #[test]
    fn f32_payload_is_narrowed() {
        let t = Tensor::new(vec![3], vec![0.1, 0.5, 1e10]).unwrap();
        let mut bytes = Vec::new();
        encode_ftt(&t, Dtype::F32, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 6 + 8 + 12);
        let (back, dtype) = decode_ftt(bytes.as_slice()).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(back.data()[1], 0.5);
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_ftt(&b"FTT2\0\0"[..]).is_err());
        assert!(decode_ftt(&b"FTT1\x07\0"[..]).is_err());
        let mut bytes = Vec::new();
        encode_ftt(&Tensor::scalar(1.0), Dtype::F64, &mut bytes).unwrap();
        bytes.push(0);
        assert!(decode_ftt(bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(shape in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&shape, |i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2));
            let mut bytes = Vec::new();
            encode_ftt(&t, Dtype::F64, &mut bytes).unwrap();
            let (back, _) = decode_ftt(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
