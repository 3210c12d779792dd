//! CTMT binary tensor records.
//!
//! Layout: magic `CTMT`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64),
//! `u8` rank, `rank` little-endian `u64` extents, then the raw
//! little-endian values in row-major order.

use std::io::Write;

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"CTMT";
pub const VERSION: u8 = 1;

/// A decoded tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding when narrowing.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor as `T`, failing if the stored dtype differs.
    pub fn into_exact<T: Scalar>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(TensorError::Format(format!("stored dtype {:?}, expected {:?}", self.dtype(), T::DTYPE)));
        }
        Ok(self.cast())
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode_tensor(t))?;
    Ok(())
}

/// Decodes one record from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(DynTensor, usize)> {
    let truncated = |what: &str| TensorError::Format(format!("truncated CTMT record ({what})"));
    if bytes.len() < 7 {
        return Err(truncated("header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(TensorError::Format("bad magic, expected CTMT".into()));
    }
    if bytes[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported CTMT version {}", bytes[4])));
    }
    let dtype = DType::from_tag(bytes[5]).ok_or_else(|| TensorError::Format(format!("unknown dtype tag {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let mut pos = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes.get(pos..pos + 8).ok_or_else(|| truncated("extents"))?;
        let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| TensorError::Format(format!("extent {d} too large")))?);
        pos += 8;
    }
    let count = numel(&shape);
    let width = dtype.size();
    let payload = count.checked_mul(width).ok_or_else(|| TensorError::Format("payload size overflows".into()))?;
    let raw = bytes.get(pos..pos + payload).ok_or_else(|| truncated("payload"))?;
    let tensor = match dtype {
        DType::F32 => DynTensor::F32(Tensor::new(shape, raw.chunks_exact(width).map(f32::read_le).collect())?),
        DType::F64 => DynTensor::F64(Tensor::new(shape, raw.chunks_exact(width).map(f64::read_le).collect())?),
    };
    Ok((tensor, pos + payload))
}

/// Decodes a buffer holding exactly one record.
pub fn decode_tensor_exact(bytes: &[u8]) -> Result<DynTensor> {
    let (t, used) = decode_tensor(bytes)?;
    if used != bytes.len() {
        return Err(TensorError::Format(format!("{} trailing bytes after CTMT record", bytes.len() - used)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..7], &[b'C', b'T', b'M', b'T', 1, 0, 2]);
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[15..23], &1u64.to_le_bytes());
        assert_eq!(&b[23..27], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 31);
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let t = Tensor::<f32>::new([3], vec![f32::MIN_POSITIVE, -0.0, 1.0e30]).unwrap();
        let back = decode_tensor_exact(&encode_tensor(&t)).unwrap().into_exact::<f32>().unwrap();
        let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::ones([2, 2]);
        let mut b = encode_tensor(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        assert!(decode_tensor_exact(&[b.clone(), vec![0]].concat()).is_err());
        b[0] = b'X';
        assert!(decode_tensor(&b).is_err());
        let dt = decode_tensor(&encode_tensor(&t)).unwrap().0;
        assert!(dt.into_exact::<f32>().is_err());
    }
}
