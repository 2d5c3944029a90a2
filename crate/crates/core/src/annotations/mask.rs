use super::{round_half_up, BBox, TableAnnotation};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Binary `H×W` conditioning image; 1 marks row or column pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructureMask {
    height: u32,
    width: u32,
    bits: Vec<u8>,
}

impl StructureMask {
    pub fn zeros(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            bits: vec![0; (height * width) as usize],
        }
    }

    /// Builds a mask from 0/1 values.
    pub fn from_bits(height: u32, width: u32, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != (height * width) as usize {
            return Err(Error::invalid(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    fn fill(&mut self, b: &BBox) {
        for y in b.ymin..b.ymax {
            let row = (y * self.width) as usize;
            self.bits[row + b.xmin as usize..row + b.xmax as usize].fill(1);
        }
    }

    /// Replicates the mask into three channels: 1 → white, 0 → black,
    /// values in `[0, 1]`.
    pub fn to_rgb(&self) -> Tensor<f32> {
        let plane: Vec<f32> = self.bits.iter().map(|&b| b as f32).collect();
        let mut data = Vec::with_capacity(plane.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor::new([3, self.height as usize, self.width as usize], data).expect("mask dims are positive")
    }

    /// Recovers full-span bands: rows are maximal runs of all-ones pixel
    /// rows, columns maximal runs of all-ones pixel columns. Exact inverse
    /// of [`render_mask`] for annotations whose boxes span the image.
    pub fn to_annotation(&self) -> TableAnnotation {
        let (w, h) = (self.width, self.height);
        let full_row: Vec<bool> = (0..h).map(|y| (0..w).all(|x| self.get(x, y) == 1)).collect();
        let full_col: Vec<bool> = (0..w).map(|x| (0..h).all(|y| self.get(x, y) == 1)).collect();
        let runs = |flags: &[bool]| {
            let mut out = Vec::new();
            let mut start = None;
            for (i, &f) in flags.iter().chain([&false]).enumerate() {
                match (f, start) {
                    (true, None) => start = Some(i as u32),
                    (false, Some(s)) => {
                        out.push((s, i as u32));
                        start = None;
                    }
                    _ => {}
                }
            }
            out
        };
        let rows = runs(&full_row).into_iter().map(|(a, b)| BBox::new(0, a, w, b)).collect();
        let columns = runs(&full_col).into_iter().map(|(a, b)| BBox::new(a, 0, b, h)).collect();
        TableAnnotation::new(w, h, rows, columns).expect("runs lie inside the mask")
    }
}

fn scale_box(b: &BBox, sx: f64, sy: f64, width: u32, height: u32) -> Option<BBox> {
    let clamp = |v: i64, hi: u32| v.clamp(0, hi as i64) as u32;
    let xmin = clamp(round_half_up(b.xmin as f64 * sx), width);
    let xmax = clamp(round_half_up(b.xmax as f64 * sx), width);
    let ymin = clamp(round_half_up(b.ymin as f64 * sy), height);
    let ymax = clamp(round_half_up(b.ymax as f64 * sy), height);
    (xmin < xmax && ymin < ymax).then(|| BBox::new(xmin, ymin, xmax, ymax))
}

/// Rasterizes the union of row and column boxes at `height×width`.
///
/// Boxes are scaled from the annotation's image size by independent axis
/// ratios, with coordinates rounded half-up. A box that collapses to zero
/// extent after scaling draws nothing.
pub fn render_mask(annotation: &TableAnnotation, height: u32, width: u32) -> StructureMask {
    assert!(height > 0 && width > 0, "mask dimensions must be positive");
    let sx = width as f64 / annotation.width as f64;
    let sy = height as f64 / annotation.height as f64;
    let mut mask = StructureMask::zeros(height, width);
    for b in annotation.rows.iter().chain(&annotation.columns) {
        if let Some(s) = scale_box(b, sx, sy, width, height) {
            mask.fill(&s);
        }
    }
    mask
}
