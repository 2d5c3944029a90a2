//! `TDW1` parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TDW1"
//! u32                 entry count
//! per entry:
//!   u32 + utf-8       name
//!   u8                dtype code (0 = f32, 1 = f64)
//!   u8                rank
//!   u64 × rank        dims
//! payloads            raw little-endian values, in manifest order
//! ```

use super::tensor::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TDW1";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            StoredTensor::F32(t) => t,
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode(entries: &[(String, StoredTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype() as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in entries {
        match t {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                kind: "TDW1",
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    let corrupt = |reason: String| Error::Corrupt { kind: "TDW1", reason };
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| corrupt("name is not utf-8".into()))?
            .to_owned();
        let dtype = match cur.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(corrupt(format!("unknown dtype code {c}"))),
        };
        let rank = cur.u8()? as usize;
        let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, dtype, dims));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, dtype, dims) in manifest {
        let n: usize = dims.iter().product();
        let t = match dtype {
            DType::F32 => {
                let raw = cur.take(n * 4)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                StoredTensor::F32(Tensor::new(dims, data)?)
            }
            DType::F64 => {
                let raw = cur.take(n * 8)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                StoredTensor::F64(Tensor::new(dims, data)?)
            }
        };
        out.push((name, t));
    }
    if cur.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let entries = vec![("w".to_string(), StoredTensor::F32(Tensor::new([2], vec![1.0, -2.0]).unwrap()))];
        let bytes = encode(&entries);
        let mut expected = b"TDW1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.push(0);
        expected.push(1);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"XXXX\0\0\0\0").is_err());
        let entries = vec![("a".to_string(), StoredTensor::F64(Tensor::ones([3])))];
        let bytes = encode(&entries);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), wide in proptest::collection::vec(-1e6f64..1e6, 1..10)) {
            let entries = vec![
                ("first".to_string(), StoredTensor::F32(Tensor::new([vals.len()], vals.clone()).unwrap())),
                ("second.x".to_string(), StoredTensor::F64(Tensor::new([1, wide.len()], wide.clone()).unwrap())),
            ];
            prop_assert_eq!(decode(&encode(&entries)).unwrap(), entries);
        }
    }
}
