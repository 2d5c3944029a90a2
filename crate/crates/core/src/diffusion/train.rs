use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{training_loss, Checkpoint};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, derive_seed, Rng, Tensor};
use crate::schedule::NoiseSchedule;

pub const METRICS_HEADER: &str = "iteration,loss,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// DiT preset name.
    pub preset: String,
    pub conditional: bool,
    /// Leading cache records used for training.
    pub samples: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Write a numbered checkpoint every this many iterations (0 = never).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: "desk-64".into(),
            conditional: true,
            samples: 2000,
            iterations: 2000,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.samples == 0 {
            return Err(Error::invalid("iterations, batch_size and samples must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Single-writer optimizer loop over cached `(image, mask)` latents.
pub struct Trainer<'a> {
    pub state: Checkpoint,
    schedule: NoiseSchedule,
    latents: &'a [(Tensor<f32>, Tensor<f32>)],
    grads: Vec<Tensor<f32>>,
}

impl<'a> Trainer<'a> {
    /// Validates the pairing of checkpoint and cache before any step runs.
    pub fn new(state: Checkpoint, latents: &'a [(Tensor<f32>, Tensor<f32>)]) -> Result<Self> {
        state.train.validate()?;
        let cfg = &state.dit.config;
        if state.train.conditional != cfg.conditional() {
            return Err(Error::invalid(format!(
                "train.conditional = {} but the model has {} input channels",
                state.train.conditional, cfg.in_channels
            )));
        }
        if latents.len() < state.train.samples {
            return Err(Error::invalid(format!(
                "training wants {} samples but the latent cache holds {}",
                state.train.samples,
                latents.len()
            )));
        }
        let want = [4, cfg.latent_size[0], cfg.latent_size[1]];
        if let Some((i, _)) = latents
            .iter()
            .enumerate()
            .find(|(_, (a, b))| a.shape() != want || b.shape() != want)
        {
            return Err(Error::invalid(format!(
                "cache record {i} has latent shape {:?}, model expects {want:?}",
                latents[i].0.shape()
            )));
        }
        let schedule = NoiseSchedule::new(state.schedule)?;
        if schedule.steps() != cfg.max_t {
            return Err(Error::invalid(format!(
                "schedule has {} steps but the model expects T = {}",
                schedule.steps(),
                cfg.max_t
            )));
        }
        let n = state.train.samples;
        Ok(Self {
            state,
            schedule,
            latents: &latents[..n],
            grads: Vec::new(),
        })
    }
}

impl Trainer<'_> {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Batch indices and per-item noise seeds for iteration `it`.
    pub fn batch_plan(&self, it: u64) -> (Vec<usize>, Vec<u64>) {
        let step_seed = derive_seed(self.state.train.seed, it);
        let mut rng = Rng::new(step_seed);
        let n = self.state.train.batch_size;
        let idx = (0..n).map(|_| rng.below(self.latents.len())).collect();
        let seeds = (0..n as u64).map(|j| derive_seed(step_seed, j + 1)).collect();
        (idx, seeds)
    }

    /// Runs one optimizer step and returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let (idx, seeds) = self.batch_plan(self.state.iteration);
        let z0 = Tensor::stack(&idx.iter().map(|&i| self.latents[i].0.clone()).collect::<Vec<_>>())?;
        let mask = if self.state.train.conditional {
            Some(Tensor::stack(&idx.iter().map(|&i| self.latents[i].1.clone()).collect::<Vec<_>>())?)
        } else {
            None
        };
        let loss = training_loss(
            &self.state.dit,
            &self.schedule,
            &z0,
            mask.as_ref(),
            &seeds,
            Some(&mut self.grads),
        )?;
        adam_step(&mut self.state.dit.params.tensors_mut(), &self.grads, &mut self.state.adam)?;
        self.state.iteration += 1;
        Ok(loss)
    }
}

fn trim_metrics(path: &Path, keep_through: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for line in text.lines().skip(1) {
        let it: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Corrupt {
                kind: "metrics",
                reason: format!("bad line {line:?}"),
            })?;
        if it <= keep_through {
            out.push_str(line);
            out.push('\n');
        }
    }
    crate::image_io::write_atomic(path, out.as_bytes())
}

/// Steps until `train.iterations`, returning the losses of the steps run.
///
/// With `run_dir`, losses are appended to `metrics.csv`, numbered
/// checkpoints go to `checkpoints/ckpt-NNNNNNN` on the configured cadence
/// and the final state to `checkpoint`. On resume, metric rows past the
/// checkpoint's iteration are discarded first.
pub fn train_loop(trainer: &mut Trainer<'_>, run_dir: Option<&Path>, mut on_step: impl FnMut(u64, f64)) -> Result<Vec<f64>> {
    let mut metrics = None;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        if trainer.state.iteration == 0 || !path.exists() {
            fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        } else {
            trim_metrics(&path, trainer.state.iteration)?;
        }
        let f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        metrics = Some((path, f));
    }
    let start = Instant::now();
    let mut losses = Vec::new();
    let every = trainer.state.train.checkpoint_every;
    while trainer.state.iteration < trainer.state.train.iterations {
        let loss = trainer.step()?;
        let it = trainer.state.iteration;
        losses.push(loss);
        on_step(it, loss);
        if let Some((path, f)) = metrics.as_mut() {
            writeln!(f, "{it},{loss},{}", start.elapsed().as_millis()).map_err(|e| Error::io(&*path, e))?;
        }
        if let (Some(dir), true) = (run_dir, every > 0 && it.is_multiple_of(every)) {
            trainer.state.save(&dir.join("checkpoints").join(format!("ckpt-{it:07}")))?;
        }
    }
    if let Some(dir) = run_dir {
        trainer.state.save(&dir.join("checkpoint"))?;
    }
    Ok(losses)
}
