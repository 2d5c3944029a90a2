//! PNG and atomic file helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::annotations::StructureMask;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes bytes to `path` through a sibling temporary file and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// `[3, H, W]` in `[0, 1]` to an 8-bit RGB image.
pub fn to_rgb8(image: &Tensor<f32>) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape {
            op: "to_rgb8",
            shape: s.to_vec(),
            reason: "expected [3, H, W]".into(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("image buffer matches its dimensions")
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    to_rgb8(image)?.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

/// Loads any PNG as RGB `[3, H, W]` in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Saves a mask as 8-bit grayscale, 1 → 255.
pub fn save_mask_png(mask: &StructureMask, path: &Path) -> Result<()> {
    let px = mask.bits().iter().map(|&b| b * 255).collect();
    let img = GrayImage::from_raw(mask.width(), mask.height(), px).expect("mask buffer matches its dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

/// Loads a grayscale mask, thresholding at mid-gray.
pub fn load_mask_png(path: &Path) -> Result<StructureMask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_luma8();
    let bits = img.pixels().map(|p| (p.0[0] >= 128) as u8).collect();
    StructureMask::from_bits(img.height(), img.width(), bits)
}
