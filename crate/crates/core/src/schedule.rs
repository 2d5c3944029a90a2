//! Noise schedule and the closed-form forward (noising) process.
//!
//! Timesteps are 1-indexed: `t ∈ 1..=T`. Internally tables are 0-indexed.
//! `ᾱ_0 = 1` is available through [`NoiseSchedule::alpha_bar_or_one`] for
//! samplers that step all the way to the clean latent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Parameters the β table is rebuilt from. This, not the table, is what
/// gets stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule: `β_t = β_start + (t−1)/(T−1)·(β_end − β_start)`.
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            kind: ScheduleKind::Linear,
        } = config;
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "schedule requires 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            config,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            kind: ScheduleKind::Linear,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Like [`alpha_bar`](Self::alpha_bar) but defines `ᾱ_0 = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`: mean coefficient and standard deviation of
    /// `q(z_t | z_0)`.
    pub fn marginal_stats(&self, t: usize) -> Result<(f64, f64)> {
        Ok(marginal_from_alpha_bar(self.alpha_bar(t)?))
    }

    /// One forward transition `z_t = √(1−β_t)·z_{t−1} + √β_t·ε`.
    pub fn q_step<E: Element>(&self, z_prev: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>> {
        let b = self.beta(t)?;
        mix("q_step", z_prev, (1.0 - b).sqrt(), eps, b.sqrt())
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`, computed in f64 and stored as `E`.
    pub fn q_sample<E: Element>(&self, z0: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, s) = self.marginal_stats(t)?;
        mix("q_sample", z0, a, eps, s)
    }
}

/// `a·x + b·y` elementwise in f64.
fn mix<E: Element>(op: &'static str, x: &Tensor<E>, a: f64, y: &Tensor<E>, b: f64) -> Result<Tensor<E>> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&u, &v)| E::from_f64(a * to_f64(u) + b * to_f64(v)).expect("finite f64 converts"))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn to_f64<E: Element>(v: E) -> f64 {
    v.to_f64().expect("float converts to f64")
}

pub(crate) fn marginal_from_alpha_bar(alpha_bar: f64) -> (f64, f64) {
    (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_normal, Rng};

    fn standard() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn first_alpha_bar() {
        assert!((standard().alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.05, 0.05).unwrap();
        assert_eq!(s.betas(), &[0.05]);
        assert!((s.alpha_bar(1).unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn final_alpha_bar_is_tiny() {
        // Independent oracle: log-sum of the product in closed form.
        let ab = standard().alpha_bar(1000).unwrap();
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 999.0)).ln())
            .sum();
        assert!((ab - log_sum.exp()).abs() < 1e-12);
        assert!(ab < 1e-2);
        assert!((ab - 4.0e-5).abs() < 1e-5, "{ab}");
    }

    #[test]
    fn bounds_are_validated() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn timestep_range_is_one_based() {
        let s = standard();
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(1001).is_err());
        assert!(s.marginal_stats(1000).is_ok());
        assert_eq!(s.alpha_bar_or_one(0).unwrap(), 1.0);
    }

    #[test]
    fn marginal_limits() {
        assert_eq!(marginal_from_alpha_bar(1.0), (1.0, 0.0));
        let (_, std) = standard().marginal_stats(1000).unwrap();
        assert!(std > 0.99);
        for t in 1..=1000 {
            let (m, s) = standard().marginal_stats(t).unwrap();
            assert!((m * m + s * s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_degenerate_inputs() {
        let s = standard();
        let z0 = random_normal::<f32>([4, 2, 2], 1);
        let zero = Tensor::zeros([4, 2, 2]);
        let eps = random_normal::<f32>([4, 2, 2], 2);
        let (a, sd) = s.marginal_stats(300).unwrap();
        let only_signal = s.q_sample(&z0, 300, &zero).unwrap();
        for (o, z) in only_signal.data().iter().zip(z0.data()) {
            assert!((o - (a * *z as f64) as f32).abs() < 1e-7);
        }
        let only_noise = s.q_sample(&zero, 300, &eps).unwrap();
        for (o, e) in only_noise.data().iter().zip(eps.data()) {
            assert!((o - (sd * *e as f64) as f32).abs() < 1e-7);
        }
        assert!(s.q_sample(&z0, 0, &eps).is_err());
        assert!(s.q_sample(&z0, 5, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn q_sample_preserves_unit_variance() {
        let s = standard();
        let mut rng = Rng::new(9);
        for &t in &[1, 250, 999] {
            let z0 = rng.normal_tensor::<f32>([100_000]);
            let eps = rng.normal_tensor::<f32>([100_000]);
            let zt = s.q_sample(&z0, t, &eps).unwrap();
            let m = zt.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
            let var = zt.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 1e5;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn one_step_chain_equals_marginal_at_t1() {
        let s = standard();
        let z0 = random_normal::<f64>([16], 3);
        let eps = random_normal::<f64>([16], 4);
        let a = s.q_step(&z0, 1, &eps).unwrap();
        let b = s.q_sample(&z0, 1, &eps).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(s.q_step(&z0, 0, &eps).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = standard();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }
}
