use super::{random_structure, render_mask, StructureConstraints, StructureMask, TableAnnotation};
use crate::error::Result;
use crate::numerics::{derive_seed, Rng, Tensor};

/// Separator strokes never exceed this many pixels; wider bands get a
/// centered stroke.
const MAX_STROKE: u32 = 6;

/// Appearance parameters of a procedural table page.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyStyle {
    /// Darkness (1 − intensity) of separator strokes.
    pub line_darkness: f32,
    /// Darkness range of pseudo-text blobs.
    pub text_darkness: [f32; 2],
    /// Probability that a text line slot inside a cell is filled.
    pub text_density: f64,
    /// Maximum horizontal offset of a text line's first blob.
    pub jitter: u32,
}

impl ToyStyle {
    /// Draws a style from `seed`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = Rng::new(derive_seed(seed, 0x5717));
        let lo = rng.uniform_range(0.12, 0.18) as f32;
        Self {
            line_darkness: rng.uniform_range(0.7, 1.0) as f32,
            text_darkness: [lo, lo + rng.uniform_range(0.03, 0.08) as f32],
            text_density: rng.uniform_range(0.4, 0.9),
            jitter: rng.range_inclusive(0, 3) as u32,
        }
    }
}

/// Half-open interval along one axis.
type Span = (u32, u32);

/// Regions between consecutive bands, including the outer regions bounded
/// by the image edge.
fn cells(bands: impl Iterator<Item = Span>, extent: u32) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = 0;
    for (lo, hi) in bands {
        if lo > start {
            out.push((start, lo));
        }
        start = start.max(hi);
    }
    if extent > start {
        out.push((start, extent));
    }
    out
}

fn stroke(lo: u32, hi: u32) -> Span {
    let w = (hi - lo).min(MAX_STROKE);
    let start = lo + (hi - lo - w) / 2;
    (start, start + w)
}

/// Renders a white page with dark separator strokes inside every row and
/// column band and light pseudo-text blobs inside the cells.
///
/// Output is `[3, H, W]` in `[0, 1]`; all three channels are equal. The
/// image depends only on `(annotation, style_seed)`.
pub fn generate_toy_table(annotation: &TableAnnotation, style_seed: u64) -> Tensor<f32> {
    let style = ToyStyle::sample(style_seed);
    let (w, h) = (annotation.width, annotation.height);
    let mut dark = vec![0f32; (w * h) as usize];
    let mut rng = Rng::new(derive_seed(style_seed, 0x7e47));

    let row_cells = cells(annotation.rows.iter().map(|b| (b.ymin, b.ymax)), h);
    let col_cells = cells(annotation.columns.iter().map(|b| (b.xmin, b.xmax)), w);
    for &(y0, y1) in &row_cells {
        for &(x0, x1) in &col_cells {
            fill_text(&mut dark, w, (x0, x1), (y0, y1), &style, &mut rng);
        }
    }

    for b in &annotation.rows {
        let (y0, y1) = stroke(b.ymin, b.ymax);
        for y in y0..y1 {
            for x in b.xmin..b.xmax {
                dark[(y * w + x) as usize] = style.line_darkness;
            }
        }
    }
    for b in &annotation.columns {
        let (x0, x1) = stroke(b.xmin, b.xmax);
        for y in b.ymin..b.ymax {
            for x in x0..x1 {
                dark[(y * w + x) as usize] = style.line_darkness;
            }
        }
    }

    let plane: Vec<f32> = dark.iter().map(|d| 1.0 - d).collect();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new([3, h as usize, w as usize], data).expect("annotation dims are positive")
}

fn fill_text(dark: &mut [f32], width: u32, (x0, x1): Span, (y0, y1): Span, style: &ToyStyle, rng: &mut Rng) {
    const PAD: u32 = 2;
    if x1 < x0 + 2 * PAD + 3 || y1 < y0 + 2 * PAD + 2 {
        return;
    }
    let (left, right) = (x0 + PAD, x1 - PAD);
    let mut y = y0 + PAD;
    loop {
        let line_h = rng.range_inclusive(2, 3) as u32;
        if y + line_h > y1 - PAD {
            break;
        }
        if rng.uniform() < style.text_density {
            let mut x = left + rng.range_inclusive(0, style.jitter as usize) as u32;
            while x + 3 <= right {
                let len = (rng.range_inclusive(3, 8) as u32).min(right - x);
                let d = rng.uniform_range(style.text_darkness[0] as f64, style.text_darkness[1] as f64) as f32;
                for yy in y..y + line_h {
                    for xx in x..x + len {
                        dark[(yy * width + xx) as usize] = d;
                    }
                }
                x += len + rng.range_inclusive(2, 3) as u32;
            }
        }
        y += line_h + 2;
    }
}

/// One procedurally generated training example.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub annotation: TableAnnotation,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: StructureMask,
}

/// `count` samples; sample `i` uses structure seed `derive_seed(seed, 2i)`
/// and style seed `derive_seed(seed, 2i + 1)`.
pub fn toy_corpus(count: usize, constraints: &StructureConstraints, seed: u64) -> Result<Vec<ToySample>> {
    use rayon::prelude::*;
    constraints.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let annotation = random_structure(derive_seed(seed, 2 * i), constraints)?;
            let image = generate_toy_table(&annotation, derive_seed(seed, 2 * i + 1));
            let mask = render_mask(&annotation, annotation.height, annotation.width);
            Ok(ToySample {
                annotation,
                image,
                mask,
            })
        })
        .collect()
}
