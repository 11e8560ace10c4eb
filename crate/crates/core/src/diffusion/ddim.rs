//! Deterministic DDIM stepping over explicit cumulative noise levels.
//!
//! With `a = ᾱ_t` and `p = ᾱ_{t−1}`:
//!
//! ```text
//! z_{t−1} = √(p/a)·z_t + (√((1−p)/p) − √((1−a)/a))·ε
//! ```
//!
//! The step functions take the two levels directly because the sampler may
//! stride over the schedule.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

use super::schedule::NoiseSchedule;
use super::LatentVideo;

fn coefficients(a_t: f64, a_prev: f64) -> (f64, f64) {
    let scale = (a_prev / a_t).sqrt();
    let mix = ((1.0 - a_prev) / a_prev).sqrt() - ((1.0 - a_t) / a_t).sqrt();
    (scale, mix)
}

fn check(z: &LatentVideo, eps: &Tensor, a_t: f64, a_prev: f64) -> Result<()> {
    if eps.shape() != z.tensor().shape() {
        return Err(shape_err!(
            "noise {:?} does not match latent {:?}",
            eps.shape(),
            z.tensor().shape()
        ));
    }
    if !(a_t > 0.0 && a_t <= 1.0 && a_prev > 0.0 && a_prev <= 1.0) {
        return Err(config_err!("noise levels {a_t}, {a_prev} outside (0, 1]"));
    }
    Ok(())
}

/// One reverse step between explicit levels; the result is tagged `t_prev`.
pub fn ddim_step_between(
    z_t: &LatentVideo,
    eps: &Tensor,
    a_t: f64,
    a_prev: f64,
    t_prev: usize,
) -> Result<LatentVideo> {
    check(z_t, eps, a_t, a_prev)?;
    let (scale, mix) = coefficients(a_t, a_prev);
    let out = z_t.tensor().zip_with(eps, |z, e| scale * z + mix * e)?;
    LatentVideo::new(out, t_prev)
}

/// Exact algebraic inverse of [`ddim_step_between`].
pub fn ddim_invert_between(
    z_prev: &LatentVideo,
    eps: &Tensor,
    a_t: f64,
    a_prev: f64,
    t: usize,
) -> Result<LatentVideo> {
    check(z_prev, eps, a_t, a_prev)?;
    let (scale, mix) = coefficients(a_t, a_prev);
    let out = z_prev.tensor().zip_with(eps, |z, e| (z - mix * e) / scale)?;
    LatentVideo::new(out, t)
}

pub fn ddim_step(z_t: &LatentVideo, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    schedule.check_step(t)?;
    ddim_step_between(z_t, eps, schedule.alpha_bar(t), schedule.alpha_bar(t - 1), t - 1)
}

pub fn ddim_invert_step(
    z_prev: &LatentVideo,
    eps: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    schedule.check_step(t)?;
    ddim_invert_between(z_prev, eps, schedule.alpha_bar(t), schedule.alpha_bar(t - 1), t)
}

/// `w·cond + (1 − w)·uncond`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(config_err!("guidance weight {w} outside [0, 1]"));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        if eps_cond.shape() != eps_uncond.shape() {
            return Err(shape_err!("guidance branches disagree in shape"));
        }
        return Ok(eps_uncond.clone());
    }
    eps_cond.zip_with(eps_uncond, |c, u| w * c + (1.0 - w) * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    fn scalar(v: f64, t: usize) -> LatentVideo {
        LatentVideo::new(Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap(), t).unwrap()
    }

    fn one(v: f64) -> Tensor {
        Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn scalar_fixture() {
        let s = NoiseSchedule::from_alpha_bars(&[0.5, 0.25]).unwrap();
        let out = ddim_step(&scalar(1.0, 2), &one(1.0), 2, &s).unwrap();
        let expected = 2f64.sqrt() + (1.0 - 3f64.sqrt());
        assert!((out.tensor().data()[0] - expected).abs() < 1e-15);
        assert_eq!(out.timestep(), 1);
    }

    #[test]
    fn noise_free_and_flat_steps() {
        let s = NoiseSchedule::from_alpha_bars(&[0.5, 0.25]).unwrap();
        let out = ddim_step(&scalar(3.0, 2), &one(0.0), 2, &s).unwrap();
        assert_eq!(out.tensor().data()[0], (0.5f64 / 0.25).sqrt() * 3.0);
        let inv = ddim_invert_step(&scalar(3.0, 1), &one(0.0), 2, &s).unwrap();
        assert!((inv.tensor().data()[0] - (0.25f64 / 0.5).sqrt() * 3.0).abs() < 1e-15);
        let flat = ddim_step_between(&scalar(1.7, 2), &one(0.0), 0.4, 0.4, 1).unwrap();
        assert_eq!(flat.tensor().data()[0], 1.7);
        assert!(ddim_step(&scalar(1.0, 0), &one(0.0), 0, &s).is_err());
        assert!(ddim_step(&scalar(1.0, 2), &Tensor::zeros(&[2]), 2, &s).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::filled(&[3], 2.0);
        let u = Tensor::zeros(&[3]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &u, 0.5).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(cfg_combine(&c, &u, 1.5).is_err());
        assert!(cfg_combine(&c, &u, -0.1).is_err());
        assert!(cfg_combine(&c, &Tensor::zeros(&[2]), 0.3).is_err());
    }

    proptest! {
        #[test]
        fn step_then_invert_is_identity(seed in any::<u64>(), t in 1usize..=50) {
            let s = NoiseSchedule::linear(Default::default()).unwrap();
            let mut rng = SeededRng::new(seed);
            let z = LatentVideo::new(Tensor::new(vec![2, 2, 2, 3], rng.normal_vec(24)).unwrap(), t).unwrap();
            let eps = Tensor::new(vec![2, 2, 2, 3], rng.normal_vec(24)).unwrap();
            let back = ddim_invert_step(&ddim_step(&z, &eps, t, &s).unwrap(), &eps, t, &s).unwrap();
            let rel = back.tensor().max_abs_diff(z.tensor()).unwrap() / z.tensor().norm().max(1e-300);
            prop_assert!(rel <= 1e-12);
        }

        #[test]
        fn cfg_is_linear(seed in any::<u64>(), w in 0.0f64..=1.0) {
            let mut rng = SeededRng::new(seed);
            let c = Tensor::new(vec![6], rng.normal_vec(6)).unwrap();
            let u = Tensor::new(vec![6], rng.normal_vec(6)).unwrap();
            let out = cfg_combine(&c, &u, w).unwrap();
            for i in 0..6 {
                let e = w * c.data()[i] + (1.0 - w) * u.data()[i];
                prop_assert!((out.data()[i] - e).abs() <= 1e-15);
            }
        }
    }
}
