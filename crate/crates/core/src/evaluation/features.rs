use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng, Tape, Tensor};

/// Deterministic image embedders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FeatureExtractor {
    /// Three random stride-2 convolutions (3→8→16→16, tanh) followed by
    /// 2×2 block averaging: 64 features.
    Conv64 { seed: u64 },
    /// Gray image area-averaged to 16×16: 256 features.
    Raw16,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::Conv64 { seed: 0 }
    }
}

impl FeatureExtractor {
    pub fn dim(&self) -> usize {
        match self {
            FeatureExtractor::Conv64 { .. } => 64,
            FeatureExtractor::Raw16 => 256,
        }
    }

    pub fn name(&self) -> String {
        match self {
            FeatureExtractor::Conv64 { seed } => format!("conv64-seed{seed}"),
            FeatureExtractor::Raw16 => "raw16".into(),
        }
    }
}

const CONV_WIDTHS: [usize; 4] = [3, 8, 16, 16];

fn conv_weights(seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = Rng::new(derive_seed(seed, 0xfea7));
    CONV_WIDTHS
        .windows(2)
        .map(|w| {
            let std = (1.0 / (w[0] * 16) as f64).sqrt() as f32;
            rng.normal_tensor::<f32>([w[1], w[0], 4, 4]).map(|v| v * std)
        })
        .collect()
}

/// Block-averages `[C, H, W]` to `[C, oh, ow]`.
fn block_mean(x: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (bh, bw) = (h / oh, w / ow);
    let mut out = vec![0f64; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh * bh {
            for xx in 0..ow * bw {
                out[(ch * oh + y / bh) * ow + xx / bw] += x[(ch * h + y) * w + xx] as f64;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= (bh * bw) as f64);
    out
}

/// Features of images `[3, H, W]` in `[0, 1]`, one row per image.
/// `H` and `W` must be multiples of 16.
pub fn extract_features(images: &[Tensor<f32>], extractor: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to extract features from"))?;
    let s = first.shape().to_vec();
    if s.len() != 3 || s[0] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::InvalidShape {
            op: "extract_features",
            shape: s,
            reason: "expected [3, H, W] with H, W positive multiples of 16".into(),
        });
    }
    if let Some(bad) = images.iter().find(|t| t.shape() != s.as_slice()) {
        return Err(Error::ShapeMismatch {
            op: "extract_features",
            lhs: s,
            rhs: bad.shape().to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    match extractor {
        FeatureExtractor::Raw16 => Ok(images
            .iter()
            .map(|img| {
                let d = img.data();
                let gray: Vec<f32> = (0..h * w).map(|i| (d[i] + d[h * w + i] + d[2 * h * w + i]) / 3.0).collect();
                block_mean(&gray, 1, h, w, 16, 16)
            })
            .collect()),
        FeatureExtractor::Conv64 { seed } => {
            let weights = conv_weights(*seed);
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(64) {
                let tape = Tape::new();
                let mut x = tape.constant(Tensor::stack(chunk)?.map(|v| 2.0 * v - 1.0));
                for wt in &weights {
                    x = x.conv2d(tape.constant(wt.clone()), None, 2, 1)?.tanh()?;
                }
                let v = x.value();
                let (c, fh, fw) = (v.shape()[1], v.shape()[2], v.shape()[3]);
                for i in 0..chunk.len() {
                    let item = &v.data()[i * c * fh * fw..(i + 1) * c * fh * fw];
                    out.push(block_mean(item, c, fh, fw, 2, 2));
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_and_determinism() {
        let imgs: Vec<Tensor<f32>> = (0..3).map(|i| Tensor::from_fn([3, 32, 32], |j| ((i * 7 + j) % 11) as f32 / 10.0)).collect();
        for ex in [FeatureExtractor::default(), FeatureExtractor::Raw16] {
            let a = extract_features(&imgs, &ex).unwrap();
            assert_eq!(a.len(), 3);
            assert!(a.iter().all(|r| r.len() == ex.dim()));
            assert_eq!(a, extract_features(&imgs, &ex).unwrap());
        }
    }

    #[test]
    fn duplicates_give_equal_rows() {
        let img = Tensor::from_fn([3, 16, 16], |j| (j % 5) as f32 / 4.0);
        let f = extract_features(&[img.clone(), img.clone(), img], &FeatureExtractor::default()).unwrap();
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1], f[2]);
    }

    #[test]
    fn rejects_empty_and_odd_sizes() {
        assert!(extract_features(&[], &FeatureExtractor::Raw16).is_err());
        assert!(extract_features(&[Tensor::zeros([3, 20, 16])], &FeatureExtractor::Raw16).is_err());
    }
}
