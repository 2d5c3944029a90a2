use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autoencoder::{VaeConfig, VaeParams};
use crate::dit::{DiTConfig, DiTParams};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, ParamSet};
use crate::persist::{fill_params, paths, push_params, read_json, read_weights, write_json, write_weights};
use crate::numerics::container::StoredTensor;
use crate::schedule::ScheduleConfig;

/// Training randomness is a pure function of `(seed, step)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dit: DiTParams,
    pub vae: VaeParams,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    weights: String,
    weights_bytes: u64,
    iteration: u64,
    rng: RngState,
    dit: DiTConfig,
    vae: VaeConfig,
    scale: f32,
    schedule: ScheduleConfig,
    train: TrainConfig,
    adam: AdamConfig,
    adam_step: u64,
}

impl Checkpoint {
    /// Fresh optimizer state at iteration 0.
    pub fn new(dit: DiTParams, vae: VaeParams, schedule: ScheduleConfig, train: TrainConfig) -> Self {
        let adam = AdamState::new(
            AdamConfig {
                lr: train.lr,
                ..Default::default()
            },
            dit.params.tensors(),
        );
        Self {
            dit,
            vae,
            schedule,
            train,
            adam,
            iteration: 0,
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.train.seed,
            step: self.iteration,
        }
    }

    /// Writes `stem.tdw` and `stem.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json, tdw) = paths(stem);
        let mut entries = Vec::new();
        push_params(&mut entries, "dit.", &self.dit.params);
        push_params(&mut entries, "vae.", &self.vae.params);
        for (name, (m, v)) in self.dit.params.names().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            entries.push((format!("adam.m.{name}"), StoredTensor::F32(m.clone())));
            entries.push((format!("adam.v.{name}"), StoredTensor::F32(v.clone())));
        }
        let weights_bytes = write_weights(&tdw, &entries)?;
        write_json(
            &json,
            &Manifest {
                weights: tdw.file_name().unwrap().to_string_lossy().into_owned(),
                weights_bytes,
                iteration: self.iteration,
                rng: self.rng_state(),
                dit: self.dit.config.clone(),
                vae: self.vae.config.clone(),
                scale: self.vae.scale,
                schedule: self.schedule,
                train: self.train.clone(),
                adam: self.adam.config,
                adam_step: self.adam.step,
            },
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json, _) = paths(stem);
        let m: Manifest = read_json(&json)?;
        if m.rng.step != m.iteration || m.rng.seed != m.train.seed {
            return Err(Error::Corrupt {
                kind: "checkpoint",
                reason: "rng state disagrees with iteration or seed".into(),
            });
        }
        let mut w = read_weights(&json.with_file_name(&m.weights), Some(m.weights_bytes))?;
        let dit_t = DiTParams::init(m.dit.clone(), 0)?;
        let vae_t = VaeParams::init(m.vae.clone(), 0);
        let dit = DiTParams {
            params: fill_params(&dit_t.params, "dit.", &mut w)?,
            config: m.dit,
        };
        let vae = VaeParams {
            params: fill_params(&vae_t.params, "vae.", &mut w)?,
            config: m.vae,
            scale: m.scale,
        };
        let mom = fill_params(&dit_t.params, "adam.m.", &mut w)?;
        let vel = fill_params(&dit_t.params, "adam.v.", &mut w)?;
        if let Some(extra) = w.keys().next() {
            return Err(Error::Corrupt {
                kind: "checkpoint",
                reason: format!("unexpected tensor {extra}"),
            });
        }
        let to_vec = |p: ParamSet| p.tensors().to_vec();
        Ok(Self {
            dit,
            vae,
            schedule: m.schedule,
            train: m.train,
            adam: AdamState {
                config: m.adam,
                m: to_vec(mom),
                v: to_vec(vel),
                step: m.adam_step,
            },
            iteration: m.iteration,
        })
    }
}
