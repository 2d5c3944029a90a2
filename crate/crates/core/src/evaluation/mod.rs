//! Distribution distance, structure adherence and dataset export.

mod adherence;
mod export;
mod features;
mod frechet;

pub use adherence::{interval_iou, match_bands, structure_adherence, AdherenceReport, Prf, SampleAdherence};
pub use export::{export_detection_dataset, ExportSummary, IndexEntry};
pub use features::{extract_features, FeatureExtractor};
pub use frechet::{frechet_distance, gaussian_stats, FrechetResult, GaussianStats};

use serde::{Deserialize, Serialize};

/// Machine-readable evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor: String,
    pub n_generated: usize,
    pub n_reference: usize,
    pub frechet: f64,
    pub clamped_eigenvalues: usize,
    pub rows: Prf,
    pub columns: Prf,
    pub mean_f1: f64,
}
