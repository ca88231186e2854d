//! The `CFT1` tensor file format.
//!
//! ```text
//! b"CFT1" | u8 dtype (0 = f32, 1 = f64) | u8 ndim | ndim x u32 dims | payload
//! ```
//! All integers and payload values are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CFT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_cft(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + dtype.width() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_cft(bytes: &[u8]) -> Result<(Tensor, DType)> {
    let corrupt = |what: &str| Error::Format(format!("corrupt CFT1 data: {what}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::F64,
        code => return Err(corrupt(&format!("unknown dtype code {code}"))),
    };
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(corrupt("truncated header"));
    }
    let shape: Vec<usize> =
        bytes[6..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * dtype.width() {
        return Err(corrupt(&format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * dtype.width()
        )));
    }
    let data = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let tensor = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
    Ok((tensor, dtype))
}

pub fn write_cft(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    std::fs::write(path, encode_cft(t, dtype)?)?;
    Ok(())
}

pub fn read_cft(path: &Path) -> Result<Tensor> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Format(format!("cannot read tensor file {}: {e}", path.display())))?;
    decode_cft(&bytes).map(|(t, _)| t).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode_cft(&t, DType::F64).unwrap();
        assert_eq!(&bytes[..4], b"CFT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(bytes.len(), 14 + 16);
        assert_eq!(&bytes[14..22], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_and_garbage_rejected() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let bytes = encode_cft(&t, DType::F32).unwrap();
        assert!(matches!(decode_cft(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_cft(b"CFT2\x01\x01"), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_cft(&extra), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_exact(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let (back, dtype) = decode_cft(&encode_cft(&t, DType::F64).unwrap()).unwrap();
            prop_assert_eq!(dtype, DType::F64);
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
