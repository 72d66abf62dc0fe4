//! `.tsr` tensor files: 8-byte magic `MSCDTTSR`, u8 dtype tag (0 = f32,
//! 1 = f64), u8 rank, little-endian u64 extents, then little-endian values.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{DType, Real, Tensor};
use super::{NumericsError, Result};

pub const MAGIC: &[u8; 8] = b"MSCDTTSR";

/// A tensor read back in whatever precision it was written.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`, rounding if the stored precision differs.
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * T::DTYPE.byte_width());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode_as<T: Real>(shape: Vec<usize>, body: &[u8]) -> Result<Tensor<T>> {
    let width = T::DTYPE.byte_width();
    let numel: usize = shape.iter().product();
    if body.len() != numel * width {
        return Err(NumericsError::Format(format!(
            "expected {} value bytes, found {}",
            numel * width,
            body.len()
        )));
    }
    let data = body.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(NumericsError::Format("missing MSCDTTSR magic".into()));
    }
    let dtype = DType::from_tag(bytes[8])
        .ok_or_else(|| NumericsError::Format(format!("unknown dtype tag {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    let header = 10 + 8 * rank;
    if bytes.len() < header {
        return Err(NumericsError::Format("truncated header".into()));
    }
    let shape = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let body = &bytes[header..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_as(shape, body)?),
        DType::F64 => AnyTensor::F64(decode_as(shape, body)?),
    })
}

pub fn write<T: Real, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..8], b"MSCDTTSR");
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &1u64.to_le_bytes());
        assert_eq!(&bytes[26..30], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 34);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOTATSR!\x01\x00").is_err());
        let mut bytes = encode(&Tensor::<f64>::zeros(&[3]));
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = values.len();
            let t = Tensor::<f64>::new(vec![n], values).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), AnyTensor::F64(t.clone()));
            let t32: Tensor<f32> = t.cast();
            prop_assert_eq!(decode(&encode(&t32)).unwrap(), AnyTensor::F32(t32));
        }
    }
}
