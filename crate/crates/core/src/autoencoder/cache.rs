//! `TDLC` latent cache.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TDLC"
//! u8                  version (1)
//! u64                 record count N
//! per record:         image latent then mask latent, each
//!   u32 × 3           shape
//!   f32 × numel       payload
//! u64 × N             byte offset of every record
//! ```

use std::path::Path;

use super::{gather_batch, EncodeMode, LatentTensor, VaeParams, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::image_io::{read_file, write_atomic};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"TDLC";
const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 8;

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "latent cache",
        reason: reason.into(),
    }
}

fn put_latent(out: &mut Vec<u8>, z: &Tensor<f32>) {
    for &d in z.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in z.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes `(image, mask)` pairs (both `[3, H, W]` in `[−1, 1]`, masks
/// already in RGB form) in mean mode, multiplies by `vae.scale` and writes
/// the cache atomically to `path`. Returns the record count.
pub fn cache_latents(pairs: &[(Tensor<f32>, Tensor<f32>)], vae: &VaeParams, path: &Path) -> Result<usize> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    let mut offsets = Vec::with_capacity(pairs.len());
    let images: Vec<Tensor<f32>> = pairs.iter().map(|p| p.0.clone()).collect();
    let masks: Vec<Tensor<f32>> = pairs.iter().map(|p| p.1.clone()).collect();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(32) {
        let zi = vae.scale_latent(&vae.encode_batch(&gather_batch(&images, chunk)?, EncodeMode::Mean)?);
        let zm = vae.scale_latent(&vae.encode_batch(&gather_batch(&masks, chunk)?, EncodeMode::Mean)?);
        for j in 0..chunk.len() {
            offsets.push(out.len() as u64);
            put_latent(&mut out, &zi.index_axis0(j));
            put_latent(&mut out, &zm.index_axis0(j));
        }
    }
    for o in offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    write_atomic(path, &out)?;
    Ok(pairs.len())
}

/// Read-only view of a cache file held in memory.
#[derive(Clone, Debug)]
pub struct LatentCache {
    bytes: Vec<u8>,
    offsets: Vec<u64>,
}

impl LatentCache {
    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(read_file(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(format!("unsupported version {}", bytes[4])));
        }
        let count = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let table = count
            .checked_mul(8)
            .filter(|&t| t <= (bytes.len() - HEADER) as u64)
            .ok_or_else(|| corrupt(format!("{count} records do not fit in {} bytes", bytes.len())))?
            as usize;
        let start = bytes.len() - table;
        let offsets: Vec<u64> = bytes[start..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if offsets.iter().any(|&o| o < HEADER as u64 || o >= start as u64) {
            return Err(corrupt("record offset outside the payload"));
        }
        let cache = Self { bytes, offsets };
        for i in 0..cache.len() {
            cache.load(i)?;
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// `(image latent, mask latent)` of record `index`, both scaled.
    pub fn load(&self, index: usize) -> Result<(LatentTensor, LatentTensor)> {
        let &off = self.offsets.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.len(),
        })?;
        let end = self.bytes.len() - 8 * self.len();
        let mut pos = off as usize;
        let img = read_latent(&self.bytes[..end], &mut pos)?;
        let mask = read_latent(&self.bytes[..end], &mut pos)?;
        Ok((img, mask))
    }

    /// Every record as `[4, h, w]` tensors.
    pub fn load_all(&self) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        (0..self.len())
            .map(|i| self.load(i).map(|(a, b)| (a.into_tensor(), b.into_tensor())))
            .collect()
    }
}

fn read_latent(bytes: &[u8], pos: &mut usize) -> Result<LatentTensor> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(|| corrupt("record truncated"))?;
        *pos += n;
        Ok(s)
    };
    let mut shape = [0usize; 3];
    for d in &mut shape {
        *d = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
    }
    if shape[0] != LATENT_CHANNELS {
        return Err(corrupt(format!("latent shape {shape:?}")));
    }
    let n = shape.iter().product::<usize>();
    let data = take(pos, 4 * n)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LatentTensor::new(Tensor::new(shape.to_vec(), data)?)
}

/// Opens `path` and loads one record.
pub fn load_latent(path: &Path, index: usize) -> Result<(LatentTensor, LatentTensor)> {
    LatentCache::open(path)?.load(index)
}
