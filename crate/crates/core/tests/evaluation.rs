mod common;

use common::oracle::{frechet, random_spd, two_pass_cov, Mat};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tablediff::annotations::{parse_voc_xml, toy_corpus, ExtractConfig, StructureConstraints};
use tablediff::evaluation::{
    export_detection_dataset, extract_features, frechet_distance, gaussian_stats, structure_adherence, FeatureExtractor,
    GaussianStats, IndexEntry,
};
use tablediff::numerics::{Rng, Tensor};

fn stats(mean: &[f64], cov: &Mat) -> GaussianStats {
    let d = mean.len();
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_fn(d, d, |i, j| cov[i][j]),
        n: 1000,
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn covariance_matches_two_pass_oracle() {
    let mut rng = Rng::new(1);
    let rows: Vec<Vec<f64>> = (0..1000).map(|_| (0..4).map(|j| rng.normal() * (j + 1) as f64 + j as f64).collect()).collect();
    let s = gaussian_stats(&rows).unwrap();
    let (mean, cov) = two_pass_cov(&rows);
    for i in 0..4 {
        assert!((s.mean[i] - mean[i]).abs() < 1e-10);
        for j in 0..4 {
            assert!((s.cov[(i, j)] - cov[i][j]).abs() < 1e-10);
            assert_eq!(s.cov[(i, j)], s.cov[(j, i)]);
        }
    }
}

#[test]
fn frechet_matches_sandwich_oracle_on_spd_pairs() {
    let mut rng = Rng::new(2);
    for _ in 0..100 {
        let (sa, sb) = (random_spd(&mut rng, 4, 0.1), random_spd(&mut rng, 4, 0.1));
        let ma: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mb: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let got = frechet_distance(&stats(&ma, &sa), &stats(&mb, &sb)).unwrap();
        let want = frechet(&ma, &sa, &mb, &sb);
        assert!((got.distance - want).abs() < 1e-6, "{} vs {want}", got.distance);
        assert_eq!(got.clamped, 0);
    }
}

#[test]
fn mean_shift_with_identity_covariance() {
    let id: Mat = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let r = frechet_distance(&stats(&[0.0; 3], &id), &stats(&[0.5, -1.0, 2.0], &id)).unwrap();
    assert!((r.distance - 5.25).abs() < 1e-8);
}

#[test]
fn singular_covariances_clamp_instead_of_failing() {
    let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 8]).collect();
    let a = gaussian_stats(&rows).unwrap();
    let r = frechet_distance(&a, &a).unwrap();
    assert!(r.distance >= 0.0 && r.distance < 1e-8);
}

fn spd_strategy() -> impl Strategy<Value = (u64, Vec<f64>, Vec<f64>)> {
    (any::<u64>(), prop::collection::vec(-3.0..3.0f64, 3), prop::collection::vec(-3.0..3.0f64, 3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric_and_non_negative((seed, ma, mb) in spd_strategy()) {
        let mut rng = Rng::new(seed);
        let (sa, sb) = (random_spd(&mut rng, 3, 0.05), random_spd(&mut rng, 3, 0.05));
        let (a, b) = (stats(&ma, &sa), stats(&mb, &sb));
        let ab = frechet_distance(&a, &b).unwrap().distance;
        let ba = frechet_distance(&b, &a).unwrap().distance;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()));
        prop_assert!(frechet_distance(&a, &a).unwrap().distance < 1e-8 * (1.0 + sa[0][0]));
    }

    #[test]
    fn frechet_grows_with_mean_separation(seed in any::<u64>(), dir in prop::collection::vec(-1.0..1.0f64, 3), k in 1.01..3.0f64) {
        prop_assume!(dir.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let mut rng = Rng::new(seed);
        let (sa, sb) = (random_spd(&mut rng, 3, 0.05), random_spd(&mut rng, 3, 0.05));
        let far: Vec<f64> = dir.iter().map(|v| v * k).collect();
        let a = stats(&[0.0; 3], &sa);
        let near = frechet_distance(&a, &stats(&dir, &sb)).unwrap().distance;
        let further = frechet_distance(&a, &stats(&far, &sb)).unwrap().distance;
        prop_assert!(further > near);
    }

    #[test]
    fn stats_ignore_sample_order(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        let (a, b) = (gaussian_stats(&rows).unwrap(), gaussian_stats(&shuffled).unwrap());
        prop_assert!((a.mean - b.mean).amax() < 1e-12);
        prop_assert!((a.cov - b.cov).amax() < 1e-12);
    }
}

#[test]
fn aligned_toy_tables_score_perfectly() {
    let corpus = toy_corpus(24, &StructureConstraints::default(), 5).unwrap();
    let imgs: Vec<Tensor<f32>> = corpus.iter().map(|s| s.image.clone()).collect();
    let anns: Vec<_> = corpus.iter().map(|s| s.annotation.clone()).collect();
    let aligned = structure_adherence(&imgs, &anns, &ExtractConfig::default()).unwrap();
    assert_eq!(aligned.mean_f1, 1.0);
    assert_eq!(aligned.rows.f1, 1.0);
    assert_eq!(aligned.columns.f1, 1.0);

    let mut shifted = anns.clone();
    shifted.rotate_left(1);
    let shuffled = structure_adherence(&imgs, &shifted, &ExtractConfig::default()).unwrap();
    assert!(shuffled.mean_f1 < aligned.mean_f1);

    let blank = vec![Tensor::ones([3, 64, 64]); anns.len()];
    let r = structure_adherence(&blank, &anns, &ExtractConfig::default()).unwrap();
    assert_eq!(r.rows.recall, 0.0);
    assert_eq!(r.columns.recall, 0.0);

    assert!(structure_adherence(&imgs[..3], &anns, &ExtractConfig::default()).is_err());
}

#[test]
fn export_round_trips_annotations() {
    let corpus = toy_corpus(5, &StructureConstraints::default(), 6).unwrap();
    let samples: Vec<_> = corpus.iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
    let dir = tempfile::tempdir().unwrap();
    let summary = export_detection_dataset(&samples, dir.path()).unwrap();
    assert_eq!(summary.entries.len(), 5);
    let count = |sub: &str| std::fs::read_dir(dir.path().join(sub)).unwrap().count();
    assert_eq!(count("images"), 5);
    assert_eq!(count("annotations"), 5);
    let index = std::fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 5);
    for (line, (img, ann)) in index.lines().zip(&samples) {
        let e: IndexEntry = serde_json::from_str(line).unwrap();
        let xml = std::fs::read(dir.path().join(&e.annotation)).unwrap();
        assert_eq!(&parse_voc_xml(&xml).unwrap().annotation, ann);
        let png = tablediff::image_io::load_png(&dir.path().join(&e.image)).unwrap();
        assert_eq!(png.shape(), img.shape());
    }
}

#[test]
fn conv_features_have_preset_width() {
    let corpus = toy_corpus(3, &StructureConstraints::default(), 7).unwrap();
    let imgs: Vec<Tensor<f32>> = corpus.iter().map(|s| s.image.clone()).collect();
    let f = extract_features(&imgs, &FeatureExtractor::default()).unwrap();
    assert!(f.iter().all(|r| r.len() == 64));
    assert_ne!(f[0], f[1]);
}
