//! Table-structure annotations and everything derived from them: structure
//! masks, random layouts, procedural toy tables and projection-profile
//! structure extraction.

mod extract;
mod mask;
mod random;
mod toy;
mod voc;

pub use extract::{extract_structure, extract_structure_with, ExtractConfig};
pub use mask::{render_mask, StructureMask};
pub use random::{random_structure, StructureConstraints};
pub use toy::{generate_toy_table, toy_corpus, ToySample, ToyStyle};
pub use voc::{parse_voc_xml, write_voc_xml, VocParse, COLUMN_LABEL, ROW_LABEL};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel box with inclusive minimum and exclusive maximum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: u32,
    pub ymin: u32,
    pub xmax: u32,
    pub ymax: u32,
}

impl BBox {
    pub fn new(xmin: u32, ymin: u32, xmax: u32, ymax: u32) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> u32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> u32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.xmin && x < self.xmax && y >= self.ymin && y < self.ymax
    }

    fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.xmin >= self.xmax || self.ymin >= self.ymax || self.xmax > width || self.ymax > height {
            return Err(Error::Annotation(format!(
                "box ({}, {}, {}, {}) invalid for a {width}x{height} image",
                self.xmin, self.ymin, self.xmax, self.ymax
            )));
        }
        Ok(())
    }
}

/// Row and column boxes of one table image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableAnnotation {
    pub width: u32,
    pub height: u32,
    pub rows: Vec<BBox>,
    pub columns: Vec<BBox>,
}

impl TableAnnotation {
    /// Validates bounds and sorts rows by `ymin`, columns by `xmin`.
    pub fn new(width: u32, height: u32, mut rows: Vec<BBox>, mut columns: Vec<BBox>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Annotation(format!("image size {width}x{height} must be positive")));
        }
        for b in rows.iter().chain(&columns) {
            b.validate(width, height)?;
        }
        rows.sort_by_key(|b| (b.ymin, b.ymax, b.xmin, b.xmax));
        columns.sort_by_key(|b| (b.xmin, b.xmax, b.ymin, b.ymax));
        Ok(Self {
            width,
            height,
            rows,
            columns,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            rows: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.columns.is_empty()
    }
}

/// Rounds half-up to the nearest integer.
pub(crate) fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_sorts_and_validates() {
        let a = TableAnnotation::new(
            100,
            100,
            vec![BBox::new(0, 50, 100, 52), BBox::new(0, 10, 100, 12)],
            vec![BBox::new(70, 0, 72, 100), BBox::new(30, 0, 32, 100)],
        )
        .unwrap();
        assert_eq!(a.rows[0].ymin, 10);
        assert_eq!(a.columns[0].xmin, 30);
        assert!(TableAnnotation::new(100, 100, vec![BBox::new(0, 0, 101, 2)], vec![]).is_err());
        assert!(TableAnnotation::new(100, 100, vec![BBox::new(5, 0, 5, 2)], vec![]).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(0.5), 1);
    }
}
