//! Noise schedule and the closed-form diffusion maps.
//!
//! Timesteps are 1-based (`1..=T`); `alpha_bar(0)` is defined as 1 so the
//! final reverse step is well defined for both samplers.

use crate::error::{ModitError, Result};
use crate::numeric::{Matrix, Real};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β schedule over `steps` timesteps, both endpoints included.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(ModitError::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ModitError::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| beta_start + span * i as f64).collect()
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(ModitError::InvalidArgument("empty beta table".into()));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(ModitError::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(ModitError::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `((1 − ᾱ_{t−1}) / (1 − ᾱ_t)) · β_t`, zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// A noised sample together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState<F> {
    pub x_t: Matrix<F>,
    pub t: usize,
}

impl<F: Real> DiffusionState<F> {
    pub fn new(x_t: Matrix<F>, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        sched.check(t)?;
        x_t.ensure_finite("diffusion state")?;
        Ok(Self { x_t, t })
    }
}

fn combine<F: Real>(a: f64, x: &Matrix<F>, b: f64, y: &Matrix<F>) -> Result<Matrix<F>> {
    let (a, b) = (F::of(a), F::of(b));
    x.zip_map(y, |u, v| a * u + b * v)
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn forward_noise<F: Real>(
    x0: &Matrix<F>,
    t: usize,
    eps: &Matrix<F>,
    sched: &NoiseSchedule,
) -> Result<Matrix<F>> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    combine(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps)
}

/// `(x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn predict_x0<F: Real>(
    x_t: &Matrix<F>,
    eps_hat: &Matrix<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Matrix<F>> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    combine(inv, x_t, -(1.0 - ab).sqrt() * inv, eps_hat)
}

/// Coefficient of ε̂ in [`predict_x0`], used when backpropagating through it.
pub fn predict_x0_eps_coeff(t: usize, sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar(t);
    -(1.0 - ab).sqrt() / ab.sqrt()
}

/// Deterministic step `√ᾱ_{t−1} · x̂0 + √(1 − ᾱ_{t−1}) · ε̂`.
pub fn ddim_step<F: Real>(
    x0_hat: &Matrix<F>,
    eps_hat: &Matrix<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Matrix<F>> {
    sched.check(t)?;
    let ab_prev = sched.alpha_bar(t - 1);
    if t == 1 {
        x0_hat.check_same_shape(eps_hat, "ddim_step")?;
        return Ok(x0_hat.clone());
    }
    combine(ab_prev.sqrt(), x0_hat, (1.0 - ab_prev).sqrt(), eps_hat)
}

/// Ancestral step: posterior mean plus `√variance · noise`; the variance
/// vanishes at `t = 1`.
pub fn ddpm_posterior_sample<F: Real>(
    x_t: &Matrix<F>,
    eps_hat: &Matrix<F>,
    t: usize,
    noise: &Matrix<F>,
    sched: &NoiseSchedule,
) -> Result<Matrix<F>> {
    sched.check(t)?;
    x_t.check_same_shape(noise, "ddpm_posterior_sample")?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coeff = -inv_sqrt_alpha * sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mean = combine(inv_sqrt_alpha, x_t, eps_coeff, eps_hat)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = F::of(sched.posterior_variance(t).sqrt());
    mean.zip_map(noise, |m, n| m + sigma * n)
}

/// One forward transition `x_t ~ N(√(1 − β_t) · x_{t−1}, β_t I)`, used by the
/// optional resampling mode of the sampler.
pub fn renoise_step<F: Real>(
    x_prev: &Matrix<F>,
    t: usize,
    noise: &Matrix<F>,
    sched: &NoiseSchedule,
) -> Result<Matrix<F>> {
    sched.check(t)?;
    let b = sched.beta(t);
    combine((1.0 - b).sqrt(), x_prev, b.sqrt(), noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn four_step() -> NoiseSchedule {
        build_schedule(4, 0.1, 0.4).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn four_step_product() {
        let s = four_step();
        let oracle = 0.9 * 0.8 * 0.7 * 0.6;
        assert!((s.alpha_bar(4) - oracle).abs() < 1e-12);
        assert!((oracle - 0.3024f64).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = NoiseSchedule::default();
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
        }
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(4, 0.0, 0.2).is_err());
        assert!(build_schedule(4, 0.3, 0.2).is_err());
        assert!(build_schedule(4, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = four_step();
        let x0 = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let y = forward_noise(&x0, 2, &Matrix::zeros(2, 2), &s).unwrap();
        assert!(y.max_abs_diff(&x0.scale(s.alpha_bar(2).sqrt())) < 1e-15);
        assert!(forward_noise(&x0, 5, &x0, &s).is_err());
        assert!(forward_noise(&x0, 0, &x0, &s).is_err());
    }

    #[test]
    fn forward_noise_identity_limit() {
        // ᾱ_1 = 1 − 1e-12: the output collapses onto x0.
        let s = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let x0 = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let y = forward_noise(&x0, 1, &Matrix::filled(1, 2, 1.0), &s).unwrap();
        assert!(y.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &t in &[10usize, 250, 900] {
            let eps = randn(1, 100_000, &mut rng);
            let y = forward_noise(&Matrix::zeros(1, 100_000), t, &eps, &s).unwrap();
            let mean = y.mean();
            let var = y.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100_000.0;
            let expected = 1.0 - s.alpha_bar(t);
            assert!((var / expected - 1.0).abs() < 0.02, "t={t} var={var} expected={expected}");
        }
    }

    #[test]
    fn predict_x0_examples() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(3, 4, &mut rng);
        let eps = randn(3, 4, &mut rng);
        let xt = forward_noise(&x0, 300, &eps, &s).unwrap();
        assert!(predict_x0(&xt, &eps, 300, &s).unwrap().max_abs_diff(&x0) < 1e-12);

        let y = predict_x0(&xt, &Matrix::zeros(3, 4), 300, &s).unwrap();
        assert!(y.max_abs_diff(&xt.scale(1.0 / s.alpha_bar(300).sqrt())) < 1e-12);

        // independent re-derivation: x0 = x_t/√ᾱ − √(1/ᾱ − 1)·ε̂
        let ab = s.alpha_bar(300);
        let direct = Matrix::from_fn(3, 4, |i, j| xt[(i, j)] / ab.sqrt() - (1.0 / ab - 1.0).sqrt() * x0[(i, j)]);
        assert!(predict_x0(&xt, &x0, 300, &s).unwrap().max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn ddim_step_examples() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = randn(2, 5, &mut rng);
        let eps = randn(2, 5, &mut rng);
        assert_eq!(ddim_step(&x0, &eps, 1, &s).unwrap(), x0);
        let y = ddim_step(&x0, &Matrix::zeros(2, 5), 40, &s).unwrap();
        assert!(y.max_abs_diff(&x0.scale(s.alpha_bar(39).sqrt())) < 1e-15);

        for &t in &[2usize, 17, 500, 1000] {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let x0_hat = predict_x0(&xt, &eps, t, &s).unwrap();
            let prev = ddim_step(&x0_hat, &eps, t, &s).unwrap();
            let expected = forward_noise(&x0, t - 1, &eps, &s).unwrap();
            assert!(prev.max_abs_diff(&expected) < 1e-9, "t={t}");
        }
        let a = ddim_step(&x0, &eps, 17, &s).unwrap();
        let b = ddim_step(&x0, &eps, 17, &s).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn ddpm_posterior_examples() {
        let s = four_step();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = randn(2, 3, &mut rng);
        let eps = randn(2, 3, &mut rng);
        let noise = randn(2, 3, &mut rng);
        let mean = ddpm_posterior_sample(&xt, &eps, 3, &Matrix::zeros(2, 3), &s).unwrap();
        let oracle_mean = Matrix::from_fn(2, 3, |i, j| {
            (xt[(i, j)] - 0.3 / (1.0 - 0.504f64).sqrt() * eps[(i, j)]) / 0.7f64.sqrt()
        });
        assert!(mean.max_abs_diff(&oracle_mean) < 1e-12);

        let at_one = ddpm_posterior_sample(&xt, &eps, 1, &noise, &s).unwrap();
        let at_one_mean = ddpm_posterior_sample(&xt, &eps, 1, &Matrix::zeros(2, 3), &s).unwrap();
        assert_eq!(at_one, at_one_mean);

        let var = (1.0 - 0.72) / (1.0 - 0.504) * 0.3;
        assert!((s.posterior_variance(3) - var).abs() < 1e-12);
        let sampled = ddpm_posterior_sample(&xt, &eps, 3, &noise, &s).unwrap();
        let expected = Matrix::from_fn(2, 3, |i, j| oracle_mean[(i, j)] + var.sqrt() * noise[(i, j)]);
        assert!(sampled.max_abs_diff(&expected) < 1e-12);
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
            let hi = (lo + span).min(0.999);
            let s = build_schedule(steps, lo, hi).unwrap();
            prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            for t in 1..=steps {
                prop_assert!((s.alpha(t) - (1.0 - s.beta(t))).abs() == 0.0);
            }
        }

        #[test]
        fn predict_inverts_forward(seed in 0u64..1000, t in 1usize..=1000) {
            let s = NoiseSchedule::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = randn(2, 3, &mut rng);
            let eps = randn(2, 3, &mut rng);
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, &eps, t, &s).unwrap();
            prop_assert!(back.max_abs_diff(&x0) < 1e-10);

            let x0f: Matrix<f32> = x0.cast();
            let epsf: Matrix<f32> = eps.cast();
            let xtf = forward_noise(&x0f, t, &epsf, &s).unwrap();
            let backf = predict_x0(&xtf, &epsf, t, &s).unwrap();
            // f32 round-off is amplified by 1/√ᾱ_t at large t.
            let tol = 1e-5f32 * (1.0 / s.alpha_bar(t).sqrt()) as f32 * 4.0;
            prop_assert!(backf.max_abs_diff(&x0f) < tol.max(1e-5));
        }
    }
}
