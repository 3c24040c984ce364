//! Noise schedule, forward noising and the deterministic DDIM update in both
//! directions. Timesteps are 1-based: `t = 1..=T`, with `t = 0` standing for
//! the clean latent (`alpha_bar(0) = 1`).

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    Linear,
    /// Linear in `sqrt(beta)`, the latent-diffusion convention.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(
        total_steps: usize,
        beta_start: f64,
        beta_end: f64,
        spacing: BetaSpacing,
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(invalid("total_steps must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let frac = |i: usize| {
            if total_steps == 1 {
                0.0
            } else {
                i as f64 / (total_steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..total_steps)
            .map(|i| match spacing {
                BetaSpacing::Linear => beta_start + (beta_end - beta_start) * frac(i),
                BetaSpacing::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let s = a + (b - a) * frac(i);
                    s * s
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(total_steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            total_steps,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Cumulative products, index 0 holding timestep 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar` at a 1-based timestep; `t = 0` is the clean end and maps to 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.total_steps => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::TimestepRange {
                t,
                min: 0,
                max: self.total_steps,
            }),
        }
    }

    fn check_noisy(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps {
            return Err(Error::TimestepRange {
                t,
                min: 1,
                max: self.total_steps,
            });
        }
        Ok(())
    }

    /// Uniformly strided timesteps `[T/n, 2T/n, ..., T]` (ascending).
    pub fn strided_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps == 0 || num_steps > self.total_steps {
            return Err(invalid(format!(
                "num_steps must be in 1..={}, got {num_steps}",
                self.total_steps
            )));
        }
        let stride = self.total_steps / num_steps;
        let offset = self.total_steps - stride * num_steps;
        Ok((1..=num_steps).map(|k| offset + k * stride).collect())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `a * x + b * y` with scalar coefficients.
fn affine_pair(x: &Tensor, a: f64, y: &Tensor, b: f64) -> Result<Tensor> {
    Ok((x.affine(a, 0.0)? + y.affine(b, 0.0)?)?)
}

/// Forward q-sample: `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_noisy(t)?;
    check_same_shape(z0, eps, "add_noise")?;
    let ab = sched.alpha_bar(t)?;
    affine_pair(z0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Deterministic (eta = 0) DDIM update from `t` down to `t_prev`.
pub fn ddim_denoise_step(
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::TimestepOrder {
            earlier: t_prev,
            later: t,
        });
    }
    check_same_shape(z_t, eps_pred, "ddim_denoise_step")?;
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let x0 = affine_pair(z_t, 1.0 / ab_t.sqrt(), eps_pred, -(1.0 - ab_t).sqrt() / ab_t.sqrt())?;
    affine_pair(&x0, ab_prev.sqrt(), eps_pred, (1.0 - ab_prev).sqrt())
}

/// Inverse of [`ddim_denoise_step`]: maps the latent at `t_prev` up to `t`.
pub fn ddim_invert_step(
    z_tprev: &Tensor,
    eps_pred: &Tensor,
    t_prev: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::TimestepOrder {
            earlier: t_prev,
            later: t,
        });
    }
    check_same_shape(z_tprev, eps_pred, "ddim_invert_step")?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let ab_t = sched.alpha_bar(t)?;
    let x0 = affine_pair(
        z_tprev,
        1.0 / ab_prev.sqrt(),
        eps_pred,
        -(1.0 - ab_prev).sqrt() / ab_prev.sqrt(),
    )?;
    affine_pair(&x0, ab_t.sqrt(), eps_pred, (1.0 - ab_t).sqrt())
}

/// Uniform integer timestep sampler over `[t_min, t_max]`.
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    t_min: usize,
    t_max: usize,
    rng: ChaCha8Rng,
}

impl TimestepSampler {
    pub fn new(t_min: usize, t_max: usize, total_steps: usize, seed: u64) -> Result<Self> {
        if !(1 <= t_min && t_min <= t_max && t_max <= total_steps) {
            return Err(invalid(format!(
                "sampler requires 1 <= t_min <= t_max <= T, got {t_min}, {t_max}, T={total_steps}"
            )));
        }
        Ok(Self {
            t_min,
            t_max,
            rng: rng::stream(seed, "timestep-sampler"),
        })
    }

    pub fn t_min(&self) -> usize {
        self.t_min
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn sample(&mut self) -> usize {
        self.rng.random_range(self.t_min..=self.t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bit_identical, relative_l2};
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn manual(abars: &[f64]) -> NoiseSchedule {
        // schedule with prescribed alpha_bars, for formula-level examples
        let mut prev = 1.0;
        let alphas: Vec<f64> = abars
            .iter()
            .map(|a| {
                let r = a / prev;
                prev = *a;
                r
            })
            .collect();
        NoiseSchedule {
            total_steps: abars.len(),
            betas: alphas.iter().map(|a| 1.0 - a).collect(),
            alphas,
            alpha_bars: abars.to_vec(),
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::build(1, 0.02, 0.02, BetaSpacing::Linear).unwrap();
        assert_eq!(s.betas(), &[0.02]);
        assert!((s.alpha_bars()[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn thousand_step_linear_schedule() {
        let s = NoiseSchedule::build(1000, 1e-4, 0.02, BetaSpacing::Linear).unwrap();
        assert!((s.alpha_bars()[0] - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn constant_beta_matches_power() {
        let s = NoiseSchedule::build(10, 0.1, 0.1, BetaSpacing::Linear).unwrap();
        // cumulative-product oracle: 0.9^10
        let oracle: f64 = (0..10).map(|_| 0.9).product();
        assert!((s.alpha_bars()[9] - oracle).abs() < 1e-12);
        assert!((oracle - 0.348678).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::build(0, 0.1, 0.1, BetaSpacing::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.0, 0.1, BetaSpacing::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.2, 0.1, BetaSpacing::Linear).is_err());
        assert!(NoiseSchedule::build(10, 0.1, 1.0, BetaSpacing::Linear).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = manual(&[1.0, 0.25, 1e-300]);
        let z0 = vec_t(&[1.0, 0.0]);
        let eps = vec_t(&[0.0, 1.0]);
        assert!(bit_identical(&add_noise(&z0, &eps, 1, &s).unwrap(), &z0).unwrap());
        let mid = add_noise(&z0, &eps, 2, &s).unwrap().to_vec1::<f64>().unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-12 && (mid[1] - 0.866025).abs() < 1e-6);
        let pure = add_noise(&z0, &eps, 3, &s).unwrap();
        assert!(relative_l2(&pure, &eps).unwrap() < 1e-12);
        assert!(add_noise(&z0, &eps, 0, &s).is_err());
        assert!(add_noise(&z0, &eps, 4, &s).is_err());
    }

    #[test]
    fn denoise_step_examples() {
        let s = manual(&[0.64, 0.25]);
        let z = vec_t(&[1.0]);
        let zero = vec_t(&[0.0]);
        let out = ddim_denoise_step(&z, &zero, 2, 1, &s).unwrap().to_vec1::<f64>().unwrap();
        assert!((out[0] - 1.6).abs() < 1e-12);
        assert!(ddim_denoise_step(&z, &zero, 1, 1, &s).is_err());

        // exact eps to the clean end recovers z0
        let z0 = vec_t(&[0.3, -1.2]);
        let eps = vec_t(&[0.7, 0.1]);
        let zt = add_noise(&z0, &eps, 2, &s).unwrap();
        let back = ddim_denoise_step(&zt, &eps, 2, 0, &s).unwrap();
        assert!(relative_l2(&back, &z0).unwrap() < 1e-12);
    }

    #[test]
    fn invert_with_zero_eps_is_rescale() {
        let s = manual(&[0.64, 0.25]);
        let z = vec_t(&[2.0, -1.0]);
        let zero = vec_t(&[0.0, 0.0]);
        let out = ddim_invert_step(&z, &zero, 1, 2, &s).unwrap().to_vec1::<f64>().unwrap();
        let k = (0.25f64 / 0.64).sqrt();
        assert!((out[0] - 2.0 * k).abs() < 1e-12 && (out[1] + k).abs() < 1e-12);
        assert!(ddim_invert_step(&z, &zero, 2, 2, &s).is_err());
    }

    #[test]
    fn strided_timesteps_cover_range() {
        let s = NoiseSchedule::build(1000, 1e-4, 0.02, BetaSpacing::Linear).unwrap();
        let ts = s.strided_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 20);
        assert_eq!(*ts.last().unwrap(), 1000);
        assert_eq!(ts.iter().filter(|&&t| t > 500).count(), 25);
    }

    #[test]
    fn sampler_degenerate_interval() {
        let mut s = TimestepSampler::new(7, 7, 10, 3).unwrap();
        assert!((0..100).all(|_| s.sample() == 7));
        assert!(TimestepSampler::new(0, 5, 10, 0).is_err());
        assert!(TimestepSampler::new(6, 5, 10, 0).is_err());
        assert!(TimestepSampler::new(1, 11, 10, 0).is_err());
    }

    #[test]
    fn sampler_upper_half_mean() {
        let mut s = TimestepSampler::new(500, 1000, 1000, 11).unwrap();
        let draws: Vec<usize> = (0..10_000).map(|_| s.sample()).collect();
        assert!(draws.iter().all(|&t| (500..=1000).contains(&t)));
        // discrete uniform oracle: mean 750, variance ((n^2 - 1) / 12) with n = 501
        let n = 501.0f64;
        let sigma = ((n * n - 1.0) / 12.0 / 10_000.0).sqrt();
        let mean = draws.iter().sum::<usize>() as f64 / 10_000.0;
        assert!((mean - 750.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(
            steps in 2usize..400,
            start in 1e-5f64..0.05,
            span in 0.0f64..0.5,
            scaled in any::<bool>(),
        ) {
            let spacing = if scaled { BetaSpacing::ScaledLinear } else { BetaSpacing::Linear };
            let s = NoiseSchedule::build(steps, start, (start + span).min(0.9), spacing).unwrap();
            prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            for t in 0..steps {
                prop_assert_eq!(s.alphas()[t], 1.0 - s.betas()[t]);
                if t > 0 {
                    prop_assert!((s.alpha_bars()[t] - s.alpha_bars()[t - 1] * s.alphas()[t]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn invert_then_denoise_is_identity(
            seed in any::<u64>(),
            a in 1usize..1000,
            gap in 1usize..1000,
        ) {
            let s = NoiseSchedule::build(1000, 0.00085, 0.012, BetaSpacing::ScaledLinear).unwrap();
            let t_prev = a.min(999);
            let t = (t_prev + gap).min(1000);
            prop_assume!(t > t_prev);
            let mut r = rng::stream(seed, "prop");
            let z = rng::gaussian_tensor(&mut r, &[3, 4, 4], 1.0, DType::F64, &Device::Cpu).unwrap();
            let e = rng::gaussian_tensor(&mut r, &[3, 4, 4], 1.0, DType::F64, &Device::Cpu).unwrap();
            let up = ddim_invert_step(&z, &e, t_prev, t, &s).unwrap();
            let down = ddim_denoise_step(&up, &e, t, t_prev, &s).unwrap();
            prop_assert!(relative_l2(&down, &z).unwrap() < 1e-6);
        }

        #[test]
        fn add_noise_coefficients_square_sum_to_one(t in 1usize..=1000) {
            let s = NoiseSchedule::build(1000, 0.00085, 0.012, BetaSpacing::ScaledLinear).unwrap();
            let one = vec_t(&[1.0]);
            let zero = vec_t(&[0.0]);
            let a = add_noise(&one, &zero, t, &s).unwrap().to_vec1::<f64>().unwrap()[0];
            let b = add_noise(&zero, &one, t, &s).unwrap().to_vec1::<f64>().unwrap()[0];
            prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }
}
