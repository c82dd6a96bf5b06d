//! DDPM machinery: the variance schedule, the forward (noising) process in
//! both its one-step-kernel and closed forms, the noise-prediction loss and
//! the ancestral reverse sampler.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1` so that the
//! closed-form forward sample at `t = 0` is the identity.

use ndarray::{Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::AugmentedCloud;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Parameters of a linear β schedule; this is what checkpoints store.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    // alpha_bars[0] = 1, alpha_bars[t] = alpha_bars[t-1] * alphas[t-1]
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "schedule bounds must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Defined for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

fn check_same_shape(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Closed-form forward sample: `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise`.
pub fn forward_sample(
    x0: ArrayView2<'_, f64>,
    t: usize,
    noise: ArrayView2<'_, f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_same_shape(&x0, &noise, "forward_sample noise")?;
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x0).and(&noise).map_collect(|&x, &e| s * x + n * e))
}

/// Applies the one-step Gaussian kernel `N(sqrt(1 - beta_s) x, beta_s I)`
/// for `s = 1..=t`, drawing fresh noise each step.
pub fn iterated_forward_sample(
    x0: ArrayView2<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    let mut rng = rng::rng_from(rng_seed, &[rng::stream::DIFFUSION_EPS]);
    let mut x = x0.to_owned();
    for s in 1..=t {
        let keep = schedule.alpha(s).sqrt();
        let spread = schedule.beta(s).sqrt();
        x.mapv_inplace(|v| keep * v + spread * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    }
    Ok(x)
}

/// Mean squared error over every entry.
pub fn diffusion_loss(eps_pred: ArrayView2<'_, f64>, eps_true: ArrayView2<'_, f64>) -> Result<f64> {
    check_same_shape(&eps_pred, &eps_true, "diffusion_loss")?;
    if eps_pred.is_empty() {
        return Err(Error::shape("diffusion_loss on empty arrays"));
    }
    let sum: f64 = Zip::from(&eps_pred)
        .and(&eps_true)
        .fold(0.0, |acc, &p, &e| acc + (p - e) * (p - e));
    Ok(sum / eps_pred.len() as f64)
}

/// Inverts the closed-form forward process given the noise that produced `x_t`.
pub fn predict_x0(
    x_t: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_same_shape(&x_t, &eps, "predict_x0")?;
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x_t).and(&eps).map_collect(|&x, &e| (x - n * e) / s))
}

/// One ancestral step from `t` to `t - 1` with variance `sigma_t^2 = beta_t`.
/// Callers pass zero noise at `t = 1`.
pub fn reverse_step(
    x_t: ArrayView2<'_, f64>,
    eps_pred: ArrayView2<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    schedule.check_step(t)?;
    check_same_shape(&x_t, &eps_pred, "reverse_step eps")?;
    check_same_shape(&x_t, &noise, "reverse_step noise")?;
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let sigma = beta.sqrt();
    Ok(Zip::from(&x_t)
        .and(&eps_pred)
        .and(&noise)
        .map_collect(|&x, &e, &z| inv_sqrt_alpha * (x - coef * e) + sigma * z))
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` down to `x_0`,
/// attaching `condition` to the current iterate before every denoiser call.
pub fn sample_next_frame<F>(
    mut denoiser: F,
    condition: ArrayView2<'_, f64>,
    schedule: &NoiseSchedule,
    n_points: usize,
    rng_seed: u64,
) -> Result<Array2<f64>>
where
    F: FnMut(&AugmentedCloud, usize) -> Result<Array2<f64>>,
{
    if condition.nrows() != n_points {
        return Err(Error::shape(format!(
            "condition has {} rows but {n_points} points were requested",
            condition.nrows()
        )));
    }
    let mut rng = rng::rng_from(rng_seed, &[rng::stream::SAMPLER]);
    let mut x = standard_normal(n_points, 3, &mut rng);
    for t in (1..=schedule.num_steps()).rev() {
        let aug = AugmentedCloud::new(x.view(), condition)?;
        let eps = denoiser(&aug, t)?;
        let noise = if t > 1 {
            standard_normal(n_points, 3, &mut rng)
        } else {
            Array2::zeros((n_points, 3))
        };
        x = reverse_step(x.view(), eps.view(), t, schedule, noise.view())?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sampler produced non-finite points".into()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.3, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.3]);
    }

    #[test]
    fn constant_half_schedule() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn thousand_step_default_nearly_destroys_signal() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // direct product, independent of the stored recurrence
        let prod: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!(prod < 0.01);
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
    }

    #[test]
    fn schedule_invariants() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.num_steps() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_sample_zero_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = array![[1.0, -2.0, 0.5]];
        let out = forward_sample(x0.view(), 17, Array2::zeros((1, 3)).view(), &s).unwrap();
        assert_eq!(out, x0.mapv(|v| v * s.alpha_bar(17).sqrt()));
    }

    #[test]
    fn forward_sample_hand_case() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let out = forward_sample(array![[1.0, 0.0, 0.0]].view(), 2, array![[0.0, 0.0, 1.0]].view(), &s).unwrap();
        assert!((out[[0, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(out[[0, 1]], 0.0);
        assert!((out[[0, 2]] - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn forward_sample_bad_t() {
        let s = ScheduleConfig::default().build().unwrap();
        let x = Array2::zeros((2, 3));
        assert!(forward_sample(x.view(), 0, x.view(), &s).is_err());
        assert!(forward_sample(x.view(), 101, x.view(), &s).is_err());
        assert!(forward_sample(x.view(), 1, Array2::zeros((3, 3)).view(), &s).is_err());
    }

    #[test]
    fn forward_sample_monte_carlo_mean() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = array![[0.7, -0.3, 1.2]];
        let t = 40;
        let mut rng = rng::rng_from(3, &[]);
        let mut sum = Array2::<f64>::zeros((1, 3));
        for _ in 0..10_000 {
            let e = standard_normal(1, 3, &mut rng);
            sum += &forward_sample(x0.view(), t, e.view(), &s).unwrap();
        }
        let mean = sum / 10_000.0;
        for j in 0..3 {
            assert!((mean[[0, j]] - s.alpha_bar(t).sqrt() * x0[[0, j]]).abs() < 0.05);
        }
    }

    #[test]
    fn iterated_single_step_is_one_kernel() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = array![[0.5, 0.25, -1.0]];
        let out = iterated_forward_sample(x0.view(), 1, &s, 9).unwrap();
        let mut rng = rng::rng_from(9, &[rng::stream::DIFFUSION_EPS]);
        let e = standard_normal(1, 3, &mut rng);
        let expect = x0.mapv(|v| v * s.alpha(1).sqrt()) + e.mapv(|v| v * s.beta(1).sqrt());
        assert_eq!(out, expect);
    }

    #[test]
    fn iterated_vanishing_noise_limit() {
        let s = NoiseSchedule::linear(50, 1e-12, 1e-12).unwrap();
        let x0 = array![[0.5, 0.25, -1.0], [2.0, 0.0, 0.0]];
        let out = iterated_forward_sample(x0.view(), 50, &s, 1).unwrap();
        for (a, b) in out.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(iterated_forward_sample(x0.view(), 51, &s, 1).is_err());
    }

    #[test]
    fn loss_cases() {
        let ones = Array2::<f64>::ones((5, 3));
        let zeros = Array2::<f64>::zeros((5, 3));
        assert_eq!(diffusion_loss(ones.view(), ones.view()).unwrap(), 0.0);
        assert_eq!(diffusion_loss(zeros.view(), ones.view()).unwrap(), 1.0);
        let a = array![[0.3, -1.0, 2.0]];
        let b = array![[1.0, 0.5, 0.0]];
        let c = 3.0;
        let base = diffusion_loss(a.view(), b.view()).unwrap();
        let scaled = diffusion_loss((&a * c).view(), (&b * c).view()).unwrap();
        assert!((scaled - c * c * base).abs() < 1e-12);
        assert!(diffusion_loss(a.view(), ones.view()).is_err());
    }

    #[test]
    fn reverse_step_fixed_point_and_inversion() {
        let s = ScheduleConfig::default().build().unwrap();
        let z = Array2::<f64>::zeros((2, 3));
        assert_eq!(reverse_step(z.view(), z.view(), 1, &s, z.view()).unwrap(), z);

        let one = NoiseSchedule::linear(1, 0.2, 0.2).unwrap();
        let x0 = array![[0.4, -0.1, 0.9]];
        let eps = array![[1.5, -0.5, 0.25]];
        let x1 = forward_sample(x0.view(), 1, eps.view(), &one).unwrap();
        let back = reverse_step(x1.view(), eps.view(), 1, &one, Array2::zeros((1, 3)).view()).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(reverse_step(x1.view(), eps.view(), 2, &one, eps.view()).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_checks_shape() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let cond = Array2::<f64>::zeros((6, 2));
        let den = |aug: &AugmentedCloud, _t: usize| Ok(aug.coords().mapv(|v| 0.1 * v));
        let a = sample_next_frame(den, cond.view(), &s, 6, 5).unwrap();
        let b = sample_next_frame(den, cond.view(), &s, 6, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (6, 3));
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(sample_next_frame(den, cond.view(), &s, 7, 5).is_err());
    }
}
