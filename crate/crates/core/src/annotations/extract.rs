use serde::{Deserialize, Serialize};

use super::{BBox, TableAnnotation};
use crate::numerics::Tensor;

/// Projection-profile detector settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Darkness above the profile median that marks a separator.
    pub tau: f32,
    /// Shorter runs are discarded.
    pub min_run: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { tau: 0.25, min_run: 2 }
    }
}

/// [`extract_structure_with`] using the default settings.
pub fn extract_structure(image: &Tensor<f32>) -> TableAnnotation {
    extract_structure_with(image, &ExtractConfig::default())
}

/// Recovers full-width row bands and full-height column bands from an
/// image `[3, H, W]` with values in `[0, 1]`.
///
/// The image is reduced to gray by channel mean. A row's darkness is
/// `1 − mean intensity` across the width; maximal runs of rows whose
/// darkness exceeds `median + tau` become row boxes. Columns are symmetric.
pub fn extract_structure_with(image: &Tensor<f32>, config: &ExtractConfig) -> TableAnnotation {
    let shape = image.shape();
    assert!(shape.len() == 3 && shape[0] >= 1, "expected [C, H, W], got {shape:?}");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut gray = vec![0f32; h * w];
    for plane in image.data().chunks_exact(h * w) {
        for (g, v) in gray.iter_mut().zip(plane) {
            *g += v;
        }
    }
    gray.iter_mut().for_each(|g| *g /= c as f32);

    let mut row_dark = vec![0f32; h];
    let mut col_dark = vec![0f32; w];
    for y in 0..h {
        for x in 0..w {
            let d = 1.0 - gray[y * w + x];
            row_dark[y] += d;
            col_dark[x] += d;
        }
    }
    row_dark.iter_mut().for_each(|d| *d /= w as f32);
    col_dark.iter_mut().for_each(|d| *d /= h as f32);

    let (w32, h32) = (w as u32, h as u32);
    let rows = runs(&row_dark, config)
        .into_iter()
        .map(|(a, b)| BBox::new(0, a, w32, b))
        .collect();
    let columns = runs(&col_dark, config)
        .into_iter()
        .map(|(a, b)| BBox::new(a, 0, b, h32))
        .collect();
    TableAnnotation::new(w32, h32, rows, columns).expect("runs lie inside the image")
}

fn median(values: &[f32]) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn runs(profile: &[f32], config: &ExtractConfig) -> Vec<(u32, u32)> {
    let threshold = median(profile) + config.tau;
    let mut out = Vec::new();
    let mut start = None;
    for (i, &d) in profile.iter().chain(std::iter::once(&f32::NEG_INFINITY)).enumerate() {
        match (d > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= config.min_run.max(1) {
                    out.push((s as u32, i as u32));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_page_is_empty() {
        assert!(extract_structure(&Tensor::ones([3, 32, 48])).is_empty());
    }

    #[test]
    fn single_dark_band() {
        let mut img = Tensor::<f32>::ones([3, 100, 100]);
        for c in 0..3 {
            for y in 50..54 {
                for x in 0..100 {
                    img.data_mut()[c * 10_000 + y * 100 + x] = 0.0;
                }
            }
        }
        let a = extract_structure(&img);
        assert_eq!(a.rows, vec![BBox::new(0, 50, 100, 54)]);
        assert!(a.columns.is_empty());
    }

    #[test]
    fn short_runs_are_dropped() {
        let mut img = Tensor::<f32>::ones([1, 20, 20]);
        for x in 0..20 {
            img.data_mut()[7 * 20 + x] = 0.0;
        }
        assert!(extract_structure(&img).rows.is_empty());
        let loose = ExtractConfig { min_run: 1, ..Default::default() };
        assert_eq!(extract_structure_with(&img, &loose).rows.len(), 1);
    }

    #[test]
    fn run_touching_the_edge() {
        assert_eq!(runs(&[0.0, 0.0, 0.0, 0.9, 0.9], &ExtractConfig::default()), vec![(3, 5)]);
    }
}
