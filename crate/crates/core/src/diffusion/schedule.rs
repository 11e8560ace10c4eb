use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::SeededRng;

use super::LatentVideo;

/// Linear β schedule with cumulative products. Index 0 is the clean latent,
/// so `alpha_bar(0) = 1` and `betas[t - 1]` is the strength of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(config_err!("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(config_err!("beta {b} outside (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn linear(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
        } = params;
        if steps == 0 {
            return Err(config_err!("schedule needs at least one step"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    /// Builds a schedule from explicit cumulative values, `alpha_bars[0] = 1`
    /// excluded. Used for hand-sized fixtures.
    pub fn from_alpha_bars(alpha_bars: &[f64]) -> Result<Self> {
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &a in alpha_bars {
            if !(a > 0.0 && a <= prev) {
                return Err(config_err!("cumulative alpha {a} must lie in (0, {prev}]"));
            }
            betas.push(1.0 - a / prev);
            prev = a;
        }
        let mut all = vec![1.0];
        all.extend_from_slice(alpha_bars);
        Ok(Self {
            betas,
            alpha_bars: all,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(config_err!("timestep {t} outside 1..={}", self.steps()))
        } else {
            Ok(())
        }
    }
}

/// Stepwise forward chain `z_t = √(1−β_t)·z_{t−1} + √β_t·ε`.
pub fn forward_diffuse(
    z0: &LatentVideo,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<LatentVideo> {
    schedule.check_step(t)?;
    let mut data = z0.tensor().data().to_vec();
    for s in 1..=t {
        let b = schedule.beta(s);
        let keep = (1.0 - b).sqrt();
        let noise = b.sqrt();
        for v in data.iter_mut() {
            *v = keep * *v + noise * rng.normal();
        }
    }
    LatentVideo::new(
        crate::tensor::Tensor::new(z0.tensor().shape().to_vec(), data)?,
        t,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(50) - 2e-2).abs() < 1e-15);
        for t in 1..=50 {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(NoiseSchedule::new(vec![0.5, 1.0]).is_err());
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(51).is_err());
    }

    #[test]
    fn from_alpha_bars_round_trips() {
        let s = NoiseSchedule::from_alpha_bars(&[0.5, 0.25]).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-15);
        assert!(NoiseSchedule::from_alpha_bars(&[0.5, 0.7]).is_err());
    }

    #[test]
    fn forward_no_noise_limit() {
        let s = NoiseSchedule::new(vec![1e-9; 20]).unwrap();
        let mut rng = SeededRng::new(1);
        let z0 = LatentVideo::new(Tensor::new(vec![2, 2, 2, 2], rng.normal_vec(16)).unwrap(), 0).unwrap();
        let zt = forward_diffuse(&z0, 20, &s, &mut SeededRng::new(2)).unwrap();
        let rel = zt.tensor().max_abs_diff(z0.tensor()).unwrap() / z0.tensor().norm();
        assert!(rel < 1e-3);
        assert_eq!(zt.timestep(), 20);
    }

    #[test]
    fn forward_variance_matches_closed_form() {
        let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
        let z0 = LatentVideo::zeros(25, 25, 4, 4);
        let zt = forward_diffuse(&z0, 50, &s, &mut SeededRng::new(3)).unwrap();
        let d = zt.tensor().data();
        assert!(d.len() >= 10_000);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        let expected = 1.0 - s.alpha_bar(50);
        assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn forward_is_deterministic_and_range_checked() {
        let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
        let z0 = LatentVideo::zeros(2, 2, 2, 2);
        let a = forward_diffuse(&z0, 7, &s, &mut SeededRng::new(9)).unwrap();
        let b = forward_diffuse(&z0, 7, &s, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(forward_diffuse(&z0, 0, &s, &mut SeededRng::new(9)).is_err());
        assert!(forward_diffuse(&z0, 51, &s, &mut SeededRng::new(9)).is_err());
    }
}
