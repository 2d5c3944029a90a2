use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Two-pass mean and `1/(n−1)` covariance. Rows are samples.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid(format!("gaussian_stats needs at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("feature rows differ in length"));
    }
    if n < d + 1 {
        log::warn!("covariance from {n} samples in {d} dimensions is rank-deficient");
    }
    let mut mean = DVector::zeros(d);
    for r in features {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in features {
        let c = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(v, m)| v - m));
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    // Exact symmetry regardless of accumulation order.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

/// Fréchet distance and how many negative eigenvalues were clamped while
/// taking matrix square roots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    pub clamped: usize,
}

fn sym_sqrt(m: &DMatrix<f64>, clamped: &mut usize) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let roots = e.eigenvalues.map(|l| {
        if l < 0.0 {
            *clamped += 1;
            0.0
        } else {
            l.sqrt()
        }
    });
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2·(Σ_a Σ_b)^{1/2})`.
///
/// The trace of the product root is taken as `Σ √λ_i` over eigenvalues of
/// the symmetrized `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, clamping negative
/// eigenvalues (here and in `Σ_a^{1/2}`) to zero. The result is clamped at
/// zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<FrechetResult> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let mut clamped = 0;
    let ra = sym_sqrt(&a.cov, &mut clamped);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                clamped += 1;
                0.0
            } else {
                l.sqrt()
            }
        })
        .sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
    Ok(FrechetResult {
        distance: d.max(0.0),
        clamped,
    })
}
