use serde::{Deserialize, Serialize};

use crate::annotations::{extract_structure_with, ExtractConfig, TableAnnotation};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Minimum 1-D IoU for a detected band to count as a match.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Two empty sets agree perfectly; otherwise an empty side scores 0.
    pub fn from_counts(matched: usize, predicted: usize, truth: usize) -> Self {
        if predicted == 0 && truth == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(matched, predicted), ratio(matched, truth));
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Self {
            precision: p,
            recall: r,
            f1,
        }
    }

    fn mean(items: impl Iterator<Item = Prf>) -> Prf {
        let mut acc = Prf::default();
        let mut n = 0usize;
        for p in items {
            acc.precision += p.precision;
            acc.recall += p.recall;
            acc.f1 += p.f1;
            n += 1;
        }
        if n > 0 {
            acc.precision /= n as f64;
            acc.recall /= n as f64;
            acc.f1 /= n as f64;
        }
        acc
    }
}

/// IoU of half-open intervals `[a0, a1)` and `[b0, b1)`.
pub fn interval_iou(a: (u32, u32), b: (u32, u32)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0)) as f64;
    let union = (a.1 - a.0) as f64 + (b.1 - b.0) as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy one-to-one matching by descending IoU; ties go to the lower
/// (predicted, truth) index pair. Returns matched `(predicted, truth)` pairs.
pub fn match_bands(predicted: &[(u32, u32)], truth: &[(u32, u32)]) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &p) in predicted.iter().enumerate() {
        for (j, &t) in truth.iter().enumerate() {
            let iou = interval_iou(p, t);
            if iou >= MATCH_IOU {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_t) = (vec![false; predicted.len()], vec![false; truth.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            out.push((i, j));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAdherence {
    pub rows: Prf,
    pub columns: Prf,
    pub detected: TableAnnotation,
}

impl SampleAdherence {
    pub fn mean_f1(&self) -> f64 {
        0.5 * (self.rows.f1 + self.columns.f1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub samples: Vec<SampleAdherence>,
    pub rows: Prf,
    pub columns: Prf,
    /// Mean over samples of the row/column F1 average.
    pub mean_f1: f64,
}

fn axis(pred: &[(u32, u32)], truth: &[(u32, u32)]) -> Prf {
    Prf::from_counts(match_bands(pred, truth).len(), pred.len(), truth.len())
}

/// Extracts the structure of each image and scores it against the
/// annotation its mask was rendered from.
pub fn structure_adherence(
    images: &[Tensor<f32>],
    targets: &[TableAnnotation],
    config: &ExtractConfig,
) -> Result<AdherenceReport> {
    if images.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} images but {} target annotations",
            images.len(),
            targets.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::invalid("no images to score"));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (img, target) in images.iter().zip(targets) {
        let s = img.shape();
        if s.len() != 3 || s[1] != target.height as usize || s[2] != target.width as usize {
            return Err(Error::invalid(format!(
                "image shape {s:?} does not match a {}x{} annotation",
                target.width, target.height
            )));
        }
        let detected = extract_structure_with(img, config);
        let ys = |a: &TableAnnotation| a.rows.iter().map(|b| (b.ymin, b.ymax)).collect::<Vec<_>>();
        let xs = |a: &TableAnnotation| a.columns.iter().map(|b| (b.xmin, b.xmax)).collect::<Vec<_>>();
        samples.push(SampleAdherence {
            rows: axis(&ys(&detected), &ys(target)),
            columns: axis(&xs(&detected), &xs(target)),
            detected,
        });
    }
    let rows = Prf::mean(samples.iter().map(|s| s.rows));
    let columns = Prf::mean(samples.iter().map(|s| s.columns));
    let mean_f1 = samples.iter().map(SampleAdherence::mean_f1).sum::<f64>() / samples.len() as f64;
    Ok(AdherenceReport {
        samples,
        rows,
        columns,
        mean_f1,
    })
}
