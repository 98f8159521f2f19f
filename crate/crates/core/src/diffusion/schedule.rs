//! Forward-process noise schedule and the closed-form one-step reversal.
//!
//! The schedule fixes the per-step noise variances `β_t` and their cumulative
//! products `ᾱ_t = ∏_{s≤t}(1−β_s)`. Everything here is plain array math in
//! `f64` coefficients; the differentiable graph counterparts live in
//! [`super::hybrid`].

use ndarray::ArrayD;

use crate::err::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Variance schedule of the forward noising process.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` between `beta_min` and `beta_max` over `steps` steps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            (0..steps)
                .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule parameters are valid")
    }

    /// Schedule with explicitly given cumulative products. Mostly useful for
    /// pinning exact coefficients in tests and diagnostics; values must be in
    /// (0, 1] and non-increasing.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let mut prev = 1.0;
        for &a in &alpha_bars {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("alpha_bar {a} outside (0, 1]")));
            }
            if a > prev {
                return Err(Error::invalid("alpha_bars must be non-increasing"));
            }
            prev = a;
        }
        let mut betas = Vec::with_capacity(alpha_bars.len());
        let mut before = 1.0;
        for &a in &alpha_bars {
            betas.push(1.0 - a / before);
            before = a;
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::invalid(format!(
                "time-step {t} outside schedule of length {}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Expected mean-squared difference between `z` and its forward-noised
    /// version at step `t`: `(1−√ᾱ_t)²·mean(z²) + (1−ᾱ_t)`.
    pub fn diffusion_mse<S: Scalar>(&self, z: &ArrayD<S>, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let a = self.alpha_bars[t];
        let mean_sq = mean_square(z);
        Ok((1.0 - a.sqrt()).powi(2) * mean_sq + (1.0 - a))
    }

    /// Smallest `t` whose expected forward-process MSE reaches `rescale_mse`;
    /// saturates at the last step when even full noising falls short.
    pub fn align_timestep<S: Scalar>(&self, rescale_mse: f64, z: &ArrayD<S>) -> Result<usize> {
        if !(rescale_mse >= 0.0) {
            return Err(Error::invalid(format!(
                "rescale mse must be non-negative, got {rescale_mse}"
            )));
        }
        let mean_sq = mean_square(z);
        for t in 0..self.len() {
            let a = self.alpha_bars[t];
            let dmse = (1.0 - a.sqrt()).powi(2) * mean_sq + (1.0 - a);
            if dmse >= rescale_mse {
                return Ok(t);
            }
        }
        Ok(self.len() - 1)
    }
}

fn mean_square<S: Scalar>(z: &ArrayD<S>) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let sum: f64 = z.iter().map(|&v| v.as_f64() * v.as_f64()).sum();
    sum / z.len() as f64
}

/// Forward noising `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn forward_noise<S: Scalar>(
    z: &ArrayD<S>,
    eps: &ArrayD<S>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<S>> {
    sched.check_step(t)?;
    if z.shape() != eps.shape() {
        return Err(Error::invalid("noise shape must match the latent"));
    }
    let a = sched.alpha_bar(t);
    let ca = S::of(a.sqrt());
    let cb = S::of((1.0 - a).sqrt());
    Ok(z * ca + eps * cb)
}

/// Single-step reversal `(ẑ − √(1−ᾱ_t)·ε) / √ᾱ_t`, the algebraic inverse of
/// [`forward_noise`] at matched `(t, ε)`.
pub fn denoise_fixed<S: Scalar>(
    z_hat: &ArrayD<S>,
    eps: &ArrayD<S>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<S>> {
    sched.check_step(t)?;
    if z_hat.shape() != eps.shape() {
        return Err(Error::invalid("noise shape must match the latent"));
    }
    let a = sched.alpha_bar(t);
    let inv = S::of(1.0 / a.sqrt());
    let coef = S::of((1.0 - a).sqrt() / a.sqrt());
    Ok(z_hat * inv - eps * coef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn single_step_schedule_has_one_product() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.alpha_bar(0), 0.5);
    }

    #[test]
    fn default_schedule_decays_below_one_percent() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.len(), 1000);
        for t in 1..s.len() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(999) < 0.01);
        for t in 0..s.len() {
            let a = s.alpha_bar(t);
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn invalid_schedule_parameters_are_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_alpha_bars(vec![0.5, 0.7]).is_err());
        assert!(NoiseSchedule::from_alpha_bars(vec![1.5]).is_err());
    }

    #[test]
    fn denoise_with_no_accumulated_noise_is_identity() {
        let s = NoiseSchedule::from_alpha_bars(vec![1.0, 0.5]).unwrap();
        let z = randn(&[2, 3, 3], 1);
        let eps = randn(&[2, 3, 3], 2);
        let out = denoise_fixed(&z, &eps, 0, &s).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn denoise_with_zero_noise_rescales_by_inverse_root() {
        let s = NoiseSchedule::from_alpha_bars(vec![0.25]).unwrap();
        let z = randn(&[1, 4, 4], 3);
        let eps = ArrayD::zeros(IxDyn(&[1, 4, 4]));
        let out = denoise_fixed(&z, &eps, 0, &s).unwrap();
        let expect = &z * 2.0;
        assert!(out.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn denoise_matches_hand_computed_value() {
        let s = NoiseSchedule::from_alpha_bars(vec![0.25]).unwrap();
        let z = ArrayD::from_elem(IxDyn(&[1, 1, 1]), 1.0);
        let eps = ArrayD::from_elem(IxDyn(&[1, 1, 1]), 0.5);
        let out = denoise_fixed(&z, &eps, 0, &s).unwrap();
        let expect = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((out[[0, 0, 0]] - expect).abs() < 1e-12);
        assert!((out[[0, 0, 0]] - 1.133_974_596_215_561_4).abs() < 1e-9);
    }

    #[test]
    fn denoise_inverts_forward_noising_at_all_depths() {
        let s = NoiseSchedule::default_linear();
        let z = randn(&[4, 8, 8], 4);
        for &t in &[0usize, 250, 500, 999] {
            let eps = randn(&[4, 8, 8], 100 + t as u64);
            let zt = forward_noise(&z, &eps, t, &s).unwrap();
            let rec = denoise_fixed(&zt, &eps, t, &s).unwrap();
            let err = rec
                .iter()
                .zip(z.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "t={t}: max reconstruction error {err}");
        }
    }

    #[test]
    fn out_of_range_steps_are_rejected() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let z = randn(&[1, 2, 2], 5);
        assert!(denoise_fixed(&z, &z, 10, &s).is_err());
        assert!(forward_noise(&z, &z, 10, &s).is_err());
        assert!(s.diffusion_mse(&z, 10).is_err());
    }

    #[test]
    fn diffusion_mse_closed_form_cases() {
        let s = NoiseSchedule::from_alpha_bars(vec![1.0, 0.5, 0.25]).unwrap();
        let z = randn(&[2, 4, 4], 6);
        assert_eq!(s.diffusion_mse(&z, 0).unwrap(), 0.0);
        let zero = ArrayD::<f64>::zeros(IxDyn(&[2, 4, 4]));
        assert!((s.diffusion_mse(&zero, 1).unwrap() - 0.5).abs() < 1e-12);
        assert!((s.diffusion_mse(&zero, 2).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn diffusion_mse_matches_monte_carlo_sampling() {
        let s = NoiseSchedule::default_linear();
        let z = randn(&[4, 4, 4], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &t in &[100usize, 500, 999] {
            let closed = s.diffusion_mse(&z, t).unwrap();
            let a = s.alpha_bar(t);
            let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
            let draws = 100_000;
            let mut acc = 0.0;
            for _ in 0..draws {
                let mut sq = 0.0;
                for &zv in z.iter() {
                    let e: f64 = rng.sample(StandardNormal);
                    let d = ca * zv + cb * e - zv;
                    sq += d * d;
                }
                acc += sq / z.len() as f64;
            }
            let mc = acc / draws as f64;
            let rel = (mc - closed).abs() / closed.max(1e-12);
            assert!(rel < 0.01, "t={t}: closed {closed} vs sampled {mc}");
        }
    }

    #[test]
    fn diffusion_mse_is_monotone_in_t() {
        let s = NoiseSchedule::default_linear();
        let z = randn(&[4, 6, 6], 9);
        let mut prev = -1.0;
        for t in 0..s.len() {
            let m = s.diffusion_mse(&z, t).unwrap();
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn align_timestep_boundaries_and_monotonicity() {
        let s = NoiseSchedule::default_linear();
        let z = randn(&[4, 6, 6], 10);
        assert_eq!(s.align_timestep(0.0, &z).unwrap(), 0);
        let huge = s.diffusion_mse(&z, 999).unwrap() * 2.0;
        assert_eq!(s.align_timestep(huge, &z).unwrap(), 999);
        let mut prev = 0;
        for i in 0..20 {
            let target = i as f64 * 0.05;
            let t = s.align_timestep(target, &z).unwrap();
            assert!(t >= prev, "alignment went backwards at target {target}");
            prev = t;
        }
        assert!(s.align_timestep(-0.5, &z).is_err());
    }

    #[test]
    fn aligned_step_is_the_smallest_crossing() {
        let s = NoiseSchedule::default_linear();
        let z = randn(&[4, 6, 6], 11);
        let target = 0.4;
        let t = s.align_timestep(target, &z).unwrap();
        assert!(s.diffusion_mse(&z, t).unwrap() >= target);
        if t > 0 {
            assert!(s.diffusion_mse(&z, t - 1).unwrap() < target);
        }
    }
}
