use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tablediff::annotations::{ExtractConfig, StructureConstraints};
use tablediff::autoencoder::{VaeConfig, VaeTrainConfig};
use tablediff::diffusion::TrainConfig;
use tablediff::dit::DiTConfig;
use tablediff::evaluation::FeatureExtractor;
use tablediff::schedule::{NoiseSchedule, ScheduleConfig};

/// Every section and field is optional in the file; missing ones take the
/// desk defaults below.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vae: VaeSection,
    pub schedule: ScheduleConfig,
    pub dit: DitSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Toy tables to generate (ignored when `voc_dir` is set).
    pub count: usize,
    pub seed: u64,
    pub constraints: StructureConstraints,
    /// Directory of VOC XML annotations to use instead of random structures.
    pub voc_dir: Option<PathBuf>,
    /// PNGs named after the XML stems; toy images are rendered when absent.
    pub image_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seed: 0,
            constraints: StructureConstraints::default(),
            voc_dir: None,
            image_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub model: VaeConfig,
    /// Leading data samples used for training; each contributes its image
    /// and its mask.
    pub images: usize,
    pub train: VaeTrainConfig,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            model: VaeConfig::default(),
            images: 512,
            train: VaeTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitSection {
    pub preset: String,
    /// Explicit architecture; overrides `preset` when present.
    pub config: Option<DiTConfig>,
}

impl Default for DitSection {
    fn default() -> Self {
        Self {
            preset: "desk-64".into(),
            config: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    pub eta: f64,
    /// Samples drawn when no `--seeds` list is given.
    pub count: usize,
    /// Base seed for target structures and start noise.
    pub seed: u64,
    /// Items per network batch.
    pub batch: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 750,
            eta: 0.0,
            count: 64,
            seed: 0,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub extractor: FeatureExtractor,
    /// Held-out toy tables forming the Fréchet reference set.
    pub reference_count: usize,
    pub reference_seed: u64,
    pub extract: ExtractConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            extractor: FeatureExtractor::default(),
            reference_count: 256,
            reference_seed: 2002,
            extract: ExtractConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Architecture for the current `train.conditional` setting.
    pub fn dit_config(&self) -> Result<DiTConfig> {
        let cfg = match &self.dit.config {
            Some(c) => c.clone(),
            None => DiTConfig::preset(&self.dit.preset, self.train.conditional)?,
        };
        if cfg.conditional() != self.train.conditional {
            bail!(
                "dit.config has {} input channels but train.conditional = {}",
                cfg.in_channels,
                self.train.conditional
            );
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.constraints.validate()?;
        let c = &self.data.constraints;
        if !c.width.is_multiple_of(16) || !c.height.is_multiple_of(16) {
            bail!("data.constraints width and height must be multiples of 16, got {}x{}", c.width, c.height);
        }
        if self.data.voc_dir.is_none() && self.data.count == 0 {
            bail!("data.count must be positive");
        }
        if self.data.image_dir.is_some() && self.data.voc_dir.is_none() {
            bail!("data.image_dir requires data.voc_dir");
        }
        if self.vae.images == 0 || self.vae.train.batch_size == 0 || self.vae.model.widths.contains(&0) {
            bail!("vae.images, vae.train.batch_size and vae.model.widths must be positive");
        }
        NoiseSchedule::new(self.schedule)?;
        let dit = self.dit_config()?;
        dit.validate()?;
        if dit.max_t != self.schedule.steps {
            bail!("dit max_t {} differs from schedule.steps {}", dit.max_t, self.schedule.steps);
        }
        let want = [c.height as usize / 8, c.width as usize / 8];
        if dit.latent_size != want {
            bail!(
                "dit latent size {:?} does not match {}x{} images (expected {:?})",
                dit.latent_size,
                c.width,
                c.height,
                want
            );
        }
        self.train.validate()?;
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps || self.sample.batch == 0 {
            bail!("sample.steps must lie in 1..={} and sample.batch be positive", self.schedule.steps);
        }
        if !(self.sample.eta >= 0.0 && self.sample.eta.is_finite()) {
            bail!("sample.eta must be a finite non-negative number");
        }
        if self.eval.reference_count < 2 {
            bail!("eval.reference_count must be at least 2");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1e-4, "momentum": 0.9}}"#).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string_pretty(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn preset_must_match_image_size() {
        let mut c = RunConfig::default();
        c.dit.preset = "paper-256".into();
        assert!(c.validate().is_err());
        c.data.constraints.width = 256;
        c.data.constraints.height = 256;
        c.validate().unwrap();
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = RunConfig::load(Some(&path)).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
            n += 1;
        }
        assert_eq!(n, 5);
    }
}
