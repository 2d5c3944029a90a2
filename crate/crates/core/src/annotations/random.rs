use serde::{Deserialize, Serialize};

use super::{BBox, TableAnnotation};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Sampling ranges for [`random_structure`]. Ranges are inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConstraints {
    pub width: u32,
    pub height: u32,
    pub rows: [usize; 2],
    pub columns: [usize; 2],
    /// Bands never start closer than this to the image border.
    pub margin: u32,
    /// Minimum empty pixels between neighbouring bands.
    pub min_gap: u32,
    pub thickness: [u32; 2],
}

impl Default for StructureConstraints {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            rows: [2, 5],
            columns: [2, 4],
            margin: 4,
            min_gap: 8,
            thickness: [3, 4],
        }
    }
}

impl StructureConstraints {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{}", self.width, self.height));
        }
        if self.rows[0] > self.rows[1] || self.columns[0] > self.columns[1] {
            return bad("count ranges must satisfy min <= max".into());
        }
        if self.thickness[0] == 0 || self.thickness[0] > self.thickness[1] {
            return bad("thickness range must satisfy 1 <= min <= max".into());
        }
        check_capacity("rows", self.rows[1], self.height, self.margin, self.min_gap, self.thickness[1])?;
        check_capacity("columns", self.columns[1], self.width, self.margin, self.min_gap, self.thickness[1])
    }
}

fn check_capacity(what: &str, count: usize, extent: u32, margin: u32, gap: u32, thick: u32) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    let available = extent.saturating_sub(2 * margin) as u64;
    let needed = count as u64 * thick as u64 + (count as u64 - 1) * gap as u64;
    if needed > available {
        return Err(Error::Infeasible(format!(
            "{what}: {count} bands of up to {thick} px with {gap} px gaps need {needed} px, \
             but only {available} px fit inside the margins"
        )));
    }
    Ok(())
}

/// Returns `(start, thickness)` of non-overlapping bands along one axis.
fn place_bands(rng: &mut Rng, count: usize, extent: u32, margin: u32, gap: u32, thick: [u32; 2]) -> Vec<(u32, u32)> {
    if count == 0 {
        return Vec::new();
    }
    let sizes: Vec<u32> = (0..count)
        .map(|_| rng.range_inclusive(thick[0] as usize, thick[1] as usize) as u32)
        .collect();
    let available = extent - 2 * margin;
    let used: u32 = sizes.iter().sum::<u32>() + (count as u32 - 1) * gap;
    let slack = available - used;
    let mut cuts: Vec<u32> = (0..count)
        .map(|_| rng.range_inclusive(0, slack as usize) as u32)
        .collect();
    cuts.sort_unstable();
    let mut pos = margin + cuts[0];
    let mut bands = Vec::with_capacity(count);
    for (i, &size) in sizes.iter().enumerate() {
        bands.push((pos, size));
        if i + 1 < count {
            pos += size + gap + (cuts[i + 1] - cuts[i]);
        }
    }
    bands
}

/// Draws a random grid of full-width row bands and full-height column
/// bands. Deterministic in `seed`.
pub fn random_structure(seed: u64, c: &StructureConstraints) -> Result<TableAnnotation> {
    c.validate()?;
    let mut rng = Rng::new(seed);
    let n_rows = rng.range_inclusive(c.rows[0], c.rows[1]);
    let n_cols = rng.range_inclusive(c.columns[0], c.columns[1]);
    let rows = place_bands(&mut rng, n_rows, c.height, c.margin, c.min_gap, c.thickness)
        .into_iter()
        .map(|(y, t)| BBox::new(0, y, c.width, y + t))
        .collect();
    let cols = place_bands(&mut rng, n_cols, c.width, c.margin, c.min_gap, c.thickness)
        .into_iter()
        .map(|(x, t)| BBox::new(x, 0, x + t, c.height))
        .collect();
    TableAnnotation::new(c.width, c.height, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_counts() {
        let c = StructureConstraints {
            rows: [3, 3],
            columns: [2, 2],
            ..Default::default()
        };
        for seed in 0..20 {
            let a = random_structure(seed, &c).unwrap();
            assert_eq!((a.rows.len(), a.columns.len()), (3, 2));
        }
    }

    #[test]
    fn deterministic() {
        let c = StructureConstraints::default();
        assert_eq!(random_structure(77, &c).unwrap(), random_structure(77, &c).unwrap());
        assert_ne!(random_structure(77, &c).unwrap(), random_structure(78, &c).unwrap());
    }

    #[test]
    fn covers_all_row_counts() {
        let c = StructureConstraints {
            width: 128,
            height: 128,
            rows: [2, 8],
            ..Default::default()
        };
        let mut seen = [false; 9];
        for seed in 0..1000 {
            seen[random_structure(seed, &c).unwrap().rows.len()] = true;
        }
        assert!((2..=8).all(|n| seen[n]), "{seen:?}");
    }

    #[test]
    fn bands_respect_margin_and_gap() {
        let c = StructureConstraints::default();
        for seed in 0..200 {
            let a = random_structure(seed, &c).unwrap();
            for w in a.rows.windows(2) {
                assert!(w[1].ymin >= w[0].ymax + c.min_gap);
            }
            for w in a.columns.windows(2) {
                assert!(w[1].xmin >= w[0].xmax + c.min_gap);
            }
            for r in &a.rows {
                assert!(r.ymin >= c.margin && r.ymax <= c.height - c.margin);
                assert!((c.thickness[0]..=c.thickness[1]).contains(&r.height()));
            }
        }
    }

    #[test]
    fn infeasible_names_capacity() {
        let c = StructureConstraints {
            rows: [9, 9],
            ..Default::default()
        };
        let err = random_structure(0, &c).unwrap_err().to_string();
        assert!(err.contains("rows") && err.contains("need"), "{err}");
    }
}
