//! Noise-prediction objective, z₀ estimate, DDIM sampling and training.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use train::{train_loop, TrainConfig, Trainer, METRICS_HEADER};

use crate::annotations::StructureMask;
use crate::autoencoder::{to_signed, to_unit, EncodeMode, VaeParams, LATENT_CHANNELS};
use crate::dit::{forward, DiTParams};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Element, Rng, Tape, Tensor};
use crate::schedule::{to_f64, NoiseSchedule};

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `ẑ₀ = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
///
/// Near `t = T` the division amplifies errors in `ε̂` by roughly
/// `1/√ᾱ_T ≈ 157` for the standard linear schedule.
pub fn estimate_z0<E: Element>(schedule: &NoiseSchedule, z_t: &Tensor<E>, eps_hat: &Tensor<E>, t: usize) -> Result<Tensor<E>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "estimate_z0",
            lhs: z_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let (a, s) = schedule.marginal_stats(t)?;
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| E::from_f64((to_f64(z) - s * to_f64(e)) / a).expect("finite f64 converts"))
        .collect();
    Tensor::new(z_t.shape().to_vec(), data)
}

/// Deterministic DDIM update from `t` to `t_prev < t`:
/// `√ᾱ_prev·ẑ₀ + √(1−ᾱ_prev)·ε̂`, with `ᾱ_0 = 1`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    t_prev: usize,
) -> Result<Tensor<f32>> {
    ddim_step_eta(schedule, z_t, eps_hat, t, t_prev, 0.0, None)
}

/// DDIM update with stochasticity `η`. For `η > 0` the fresh noise `xi`
/// (same shape as `z_t`) is required.
pub fn ddim_step_eta(
    schedule: &NoiseSchedule,
    z_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    eta: f64,
    xi: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    same_shape("ddim_step", z_t, eps_hat)?;
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar_or_one(t_prev)?;
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
    } else {
        0.0
    };
    let xi = match (sigma > 0.0, xi) {
        (false, _) => None,
        (true, Some(x)) => {
            same_shape("ddim_step noise", z_t, x)?;
            Some(x.data())
        }
        (true, None) => return Err(Error::invalid("ddim_step with eta > 0 needs a noise tensor")),
    };
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (ap, dir) = (ab_prev.sqrt(), (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (&z, &e))| {
            let z0 = (z as f64 - s * e as f64) / a;
            let noise = xi.map_or(0.0, |x| sigma * x[i] as f64);
            (ap * z0 + dir * e as f64 + noise) as f32
        })
        .collect();
    Tensor::new(z_t.shape().to_vec(), data)
}

/// `steps` timesteps spaced evenly from `T` down to 1, both included:
/// `t_i = round_half_up(T − i·(T−1)/(steps−1))`, duplicates removed.
pub fn timestep_subsequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let stride = (total - 1) as f64 / (steps - 1) as f64;
    let mut seq: Vec<usize> = (0..steps)
        .map(|i| crate::annotations::round_half_up(total as f64 - i as f64 * stride) as usize)
        .collect();
    seq.dedup();
    Ok(seq)
}

/// Timesteps and noise drawn for a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    /// `[N, 4, h, w]`.
    pub eps: Tensor<f32>,
    /// `q_sample(z0, t, ε)` per item.
    pub z_t: Tensor<f32>,
}

/// Item `i` draws `t ~ Uniform{1..T}` then `ε ~ N(0, I)` from
/// `Rng::new(seeds[i])`.
pub fn draw_training_noise(schedule: &NoiseSchedule, z0: &Tensor<f32>, seeds: &[u64]) -> Result<NoiseDraw> {
    if z0.rank() != 4 || z0.shape()[0] != seeds.len() {
        return Err(Error::InvalidShape {
            op: "training_loss",
            shape: z0.shape().to_vec(),
            reason: format!("expected [{}, C, h, w]", seeds.len()),
        });
    }
    let item = z0.shape()[1..].to_vec();
    let mut ts = Vec::with_capacity(seeds.len());
    let mut eps = Vec::with_capacity(z0.numel());
    let mut zt = Vec::with_capacity(z0.numel());
    for (i, &seed) in seeds.iter().enumerate() {
        let mut rng = Rng::new(seed);
        let t = 1 + rng.below(schedule.steps());
        let e = rng.normal_tensor::<f32>(item.clone());
        let z = schedule.q_sample(&z0.index_axis0(i), t, &e)?;
        ts.push(t);
        eps.extend_from_slice(e.data());
        zt.extend_from_slice(z.data());
    }
    Ok(NoiseDraw {
        ts,
        eps: Tensor::new(z0.shape().to_vec(), eps)?,
        z_t: Tensor::new(z0.shape().to_vec(), zt)?,
    })
}

/// Mean squared error between the drawn noise and the network's
/// prediction. Gradients, in parameter order, go to `grads_out` if given.
pub fn training_loss(
    dit: &DiTParams,
    schedule: &NoiseSchedule,
    z0: &Tensor<f32>,
    mask: Option<&Tensor<f32>>,
    seeds: &[u64],
    grads_out: Option<&mut Vec<Tensor<f32>>>,
) -> Result<f64> {
    if let Some(m) = mask {
        same_shape("training_loss", z0, m)?;
    }
    let draw = draw_training_noise(schedule, z0, seeds)?;
    let tape = Tape::new();
    let bound = dit.params.bind(&tape, grads_out.is_some());
    let m = mask.map(|m| tape.constant(m.clone()));
    let pred = forward(&bound, &dit.config, tape.constant(draw.z_t), m, &draw.ts)?;
    let loss = pred.mse_loss(tape.constant(draw.eps))?;
    if let Some(out) = grads_out {
        let mut g = tape.backward(loss)?;
        *out = bound.grads(&mut g);
    }
    Ok(loss.value().item() as f64)
}

/// Sampling settings.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub eta: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 750, eta: 0.0 }
    }
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Final scaled latent `[4, h, w]`.
    pub latent: Tensor<f32>,
    /// Scaled latent after each step; empty unless requested.
    pub trajectory: Vec<Tensor<f32>>,
}

/// Frozen models needed to generate images.
pub struct Sampler<'a> {
    pub dit: &'a DiTParams,
    pub vae: &'a VaeParams,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> Sampler<'a> {
    pub fn new(dit: &'a DiTParams, vae: &'a VaeParams, schedule: &'a NoiseSchedule) -> Result<Self> {
        if dit.config.max_t != schedule.steps() {
            return Err(Error::invalid(format!(
                "model trained for T = {} but the schedule has {} steps",
                dit.config.max_t,
                schedule.steps()
            )));
        }
        Ok(Self { dit, vae, schedule })
    }

    /// Scaled mean-mode latent of a mask's RGB rendering.
    pub fn mask_latent(&self, mask: &StructureMask) -> Result<Tensor<f32>> {
        let z = self.vae.encode(&to_signed(&mask.to_rgb()), EncodeMode::Mean)?;
        Ok(self.vae.scale_latent(z.tensor()))
    }

    /// One image for `(mask, seed)`, keeping the full trajectory.
    pub fn sample(&self, mask: Option<&StructureMask>, config: &SampleConfig, seed: u64) -> Result<SampleOutput> {
        let mut out = self.sample_batch(&[mask], &[seed], config, true)?;
        Ok(out.remove(0))
    }

    /// Runs all items through the network together. Item `i` starts from
    /// `random_normal([4, h, w], seeds[i])`.
    pub fn sample_batch(
        &self,
        masks: &[Option<&StructureMask>],
        seeds: &[u64],
        config: &SampleConfig,
        keep_trajectory: bool,
    ) -> Result<Vec<SampleOutput>> {
        if masks.len() != seeds.len() || seeds.is_empty() {
            return Err(Error::invalid(format!(
                "sample_batch needs one mask slot per seed, got {} and {}",
                masks.len(),
                seeds.len()
            )));
        }
        let cond = self.dit.config.conditional();
        let [h, w] = self.dit.config.latent_size;
        let mut mask_lat = Vec::new();
        for m in masks {
            match (m, cond) {
                (Some(m), true) => {
                    let (mh, mw) = (m.height() as usize, m.width() as usize);
                    if (mh, mw) != (h * 8, w * 8) {
                        return Err(Error::invalid(format!(
                            "mask is {mh}x{mw} but the model generates {}x{}",
                            h * 8,
                            w * 8
                        )));
                    }
                    mask_lat.push(self.mask_latent(m)?);
                }
                (None, false) => {}
                (Some(_), false) => return Err(Error::invalid("unconditional model was given a mask")),
                (None, true) => return Err(Error::invalid("conditional model requires a mask")),
            }
        }
        let n = seeds.len();
        let mask_batch = if cond { Some(Tensor::stack(&mask_lat)?) } else { None };
        let starts: Vec<Tensor<f32>> = seeds
            .iter()
            .map(|&s| Rng::new(s).normal_tensor::<f32>([LATENT_CHANNELS, h, w]))
            .collect();
        let mut z = Tensor::stack(&starts)?;
        let seq = timestep_subsequence(self.schedule.steps(), config.steps)?;
        let mut traj: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); n];
        for (i, &t) in seq.iter().enumerate() {
            let t_prev = seq.get(i + 1).copied().unwrap_or(0);
            let eps = self.dit.predict_noise_batch(&z, mask_batch.as_ref(), &vec![t; n])?;
            let xi = if config.eta > 0.0 {
                let parts: Vec<Tensor<f32>> = seeds
                    .iter()
                    .map(|&s| Rng::new(derive_seed(s, 1 + i as u64)).normal_tensor::<f32>([LATENT_CHANNELS, h, w]))
                    .collect();
                Some(Tensor::stack(&parts)?)
            } else {
                None
            };
            z = ddim_step_eta(self.schedule, &z, &eps, t, t_prev, config.eta, xi.as_ref())?;
            if keep_trajectory {
                for (j, tr) in traj.iter_mut().enumerate() {
                    tr.push(z.index_axis0(j));
                }
            }
        }
        let images = self.vae.decode_batch(&self.vae.unscale_latent(&z))?;
        Ok(traj
            .into_iter()
            .enumerate()
            .map(|(j, trajectory)| SampleOutput {
                image: to_unit(&images.index_axis0(j)),
                latent: z.index_axis0(j),
                trajectory,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random_normal;
    use crate::schedule::ScheduleConfig;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn estimate_inverts_q_sample() {
        let s = schedule();
        let z0 = random_normal::<f32>([4, 4, 4], 1);
        let eps = random_normal::<f32>([4, 4, 4], 2);
        for t in [1, 10, 500, 1000] {
            let zt = s.q_sample(&z0, t, &eps).unwrap();
            assert!(estimate_z0(&s, &zt, &eps, t).unwrap().max_abs_diff(&z0) < 1e-5);
        }
        let zt = random_normal::<f32>([4, 4, 4], 3);
        let plain = estimate_z0(&s, &zt, &Tensor::zeros([4, 4, 4]), 300).unwrap();
        let a = s.alpha_bar(300).unwrap().sqrt();
        assert!(plain.max_abs_diff(&zt.map(|v| (v as f64 / a) as f32)) < 1e-6);
    }

    #[test]
    fn ddim_to_zero_returns_estimate() {
        let s = schedule();
        let zt = random_normal::<f32>([4, 2, 2], 4);
        let e = random_normal::<f32>([4, 2, 2], 5);
        assert_eq!(ddim_step(&s, &zt, &e, 40, 0).unwrap(), estimate_z0(&s, &zt, &e, 40).unwrap());
        assert!(ddim_step(&s, &zt, &e, 40, 40).is_err());
    }

    #[test]
    fn one_step_oracle_recovers_z0() {
        let s = schedule();
        let z0 = random_normal::<f32>([4, 8, 8], 6);
        let eps = random_normal::<f32>([4, 8, 8], 7);
        let zt = s.q_sample(&z0, 1000, &eps).unwrap();
        assert!(ddim_step(&s, &zt, &eps, 1000, 0).unwrap().max_abs_diff(&z0) < 1e-4);
    }

    #[test]
    fn eta_requires_noise() {
        let s = schedule();
        let z = Tensor::zeros([4, 1, 1]);
        assert!(ddim_step_eta(&s, &z, &z, 10, 5, 1.0, None).is_err());
        assert!(ddim_step_eta(&s, &z, &z, 10, 5, 1.0, Some(&z)).is_ok());
    }

    #[test]
    fn subsequence_spacing() {
        let full = timestep_subsequence(1000, 1000).unwrap();
        assert_eq!(full, (1..=1000).rev().collect::<Vec<_>>());
        let s = timestep_subsequence(1000, 750).unwrap();
        assert_eq!((s.len(), s[0], *s.last().unwrap()), (750, 1000, 1));
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timestep_subsequence(1000, 1).unwrap(), vec![1000]);
        assert_eq!(timestep_subsequence(10, 4).unwrap(), vec![10, 7, 4, 1]);
        assert!(timestep_subsequence(1000, 1001).is_err());
    }

    #[test]
    fn noise_draw_is_per_sample() {
        let s = schedule();
        let z0 = random_normal::<f32>([3, 4, 2, 2], 8);
        let a = draw_training_noise(&s, &z0, &[1, 2, 3]).unwrap();
        let swapped = Tensor::stack(&[z0.index_axis0(2), z0.index_axis0(1), z0.index_axis0(0)]).unwrap();
        let b = draw_training_noise(&s, &swapped, &[3, 2, 1]).unwrap();
        assert_eq!(a.ts[0], b.ts[2]);
        assert_eq!(a.eps.index_axis0(0), b.eps.index_axis0(2));
    }
}
