//! Dense linear algebra written independently of the library, for
//! checking the Fréchet distance.

#![allow(clippy::needless_range_loop)]

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Cyclic Jacobi rotations: eigenvalues and column eigenvectors of a
/// symmetric matrix.
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

pub fn sqrt_psd(a: &Mat) -> Mat {
    let (vals, vecs) = jacobi_eigen(a);
    let n = a.len();
    let d: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { vals[i].max(0.0).sqrt() } else { 0.0 }).collect()).collect();
    matmul(&matmul(&vecs, &d), &transpose(&vecs))
}

/// `‖μa − μb‖² + Tr Σa + Tr Σb − 2 Σ √λ(Σa^{1/2} Σb Σa^{1/2})`.
pub fn frechet(mu_a: &[f64], sa: &Mat, mu_b: &[f64], sb: &Mat) -> f64 {
    let ra = sqrt_psd(sa);
    let inner = matmul(&matmul(&ra, sb), &ra);
    let (vals, _) = jacobi_eigen(&inner);
    let diff: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b).powi(2)).sum();
    let tr = |m: &Mat| (0..m.len()).map(|i| m[i][i]).sum::<f64>();
    diff + tr(sa) + tr(sb) - 2.0 * vals.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>()
}

/// `A Aᵀ + ridge·I` from a random square `A`.
pub fn random_spd(rng: &mut tablediff::numerics::Rng, d: usize, ridge: f64) -> Mat {
    let a: Mat = (0..d).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let mut s = matmul(&a, &transpose(&a));
    for (i, row) in s.iter_mut().enumerate() {
        row[i] += ridge;
    }
    s
}

/// Two-pass mean and unbiased covariance.
pub fn two_pass_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Mat) {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let cov = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect();
    (mean, cov)
}
