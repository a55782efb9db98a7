//! Reverse-diffusion generation with phase-switched bias injection, batch
//! sampling and sliding-window stitching for long sequences.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::attention::PhaseConfig;
use crate::denoiser::{eps_theta_forward, BlockMasks, Conditioning, DenoiserConfig, ForwardCache, ModelParams};
use crate::error::{shape_err, ModitError, Result};
use crate::numeric::{Matrix, Real};
use crate::rng::{derive_seed, gaussian_matrix, stream};
use crate::schedule::{ddim_step, ddpm_posterior_sample, predict_x0, renoise_step, NoiseSchedule};

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor<F: Real>: Sync {
    fn shape(&self) -> (usize, usize);

    fn predict(&self, x_t: &Matrix<F>, t: usize, cond: &Conditioning<F>, phase: Option<&PhaseConfig>)
        -> Result<Matrix<F>>;

    /// Like [`predict`](Self::predict), also returning internals when the
    /// predictor has any worth logging.
    fn predict_logged(
        &self,
        x_t: &Matrix<F>,
        t: usize,
        cond: &Conditioning<F>,
        phase: Option<&PhaseConfig>,
    ) -> Result<(Matrix<F>, Option<ForwardCache<F>>)> {
        Ok((self.predict(x_t, t, cond, phase)?, None))
    }
}

/// The trained network as a noise predictor.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a, F> {
    pub params: &'a ModelParams<F>,
    pub config: &'a DenoiserConfig,
}

impl<F: Real> NoisePredictor<F> for Denoiser<'_, F> {
    fn shape(&self) -> (usize, usize) {
        (self.config.frames, self.config.coeff_dim)
    }

    fn predict(&self, x_t: &Matrix<F>, t: usize, cond: &Conditioning<F>, phase: Option<&PhaseConfig>)
        -> Result<Matrix<F>>
    {
        self.predict_logged(x_t, t, cond, phase).map(|(eps, _)| eps)
    }

    fn predict_logged(
        &self,
        x_t: &Matrix<F>,
        t: usize,
        cond: &Conditioning<F>,
        phase: Option<&PhaseConfig>,
    ) -> Result<(Matrix<F>, Option<ForwardCache<F>>)> {
        let masks = BlockMasks::at(t, self.config.frames, cond.audio.rows(), phase)?;
        let (eps, cache) = eps_theta_forward(x_t, t, cond, self.params, self.config, &masks)?;
        Ok((eps, Some(cache)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerMode {
    /// Deterministic `x̂0`-based step; noise is drawn only for `x_T`.
    #[default]
    Ddim,
    /// Ancestral posterior sampling.
    Ddpm,
}

impl FromStr for SamplerMode {
    type Err = ModitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "ddpm" => Ok(Self::Ddpm),
            other => Err(ModitError::InvalidArgument(format!("unknown sampler mode {other:?}"))),
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ddim => "ddim",
            Self::Ddpm => "ddpm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// `None` turns bias injection off.
    pub phase: Option<PhaseConfig>,
    /// Extra step-then-renoise repetitions per timestep.
    pub resample_inner: usize,
    pub seed: u64,
    /// Timesteps at which the predictor's internals are kept.
    pub log_attention_at: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<F> {
    pub x0: Matrix<F>,
    /// `(t, ‖x_t‖)` for every visited state, starting with `x_T`.
    pub norms: Vec<(usize, f64)>,
    pub attention: Vec<(usize, ForwardCache<F>)>,
}

fn norm<F: Real>(x: &Matrix<F>) -> f64 {
    x.frobenius().as_f64()
}

/// Runs the reverse process from `x_T ~ N(0, I)` down to `t = 1`.
pub fn sample<F: Real>(
    pred: &impl NoisePredictor<F>,
    cond: &Conditioning<F>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<SampleOutput<F>> {
    let (frames, dim) = pred.shape();
    let x = gaussian_matrix(frames, dim, &mut stream(cfg.seed, &[20]));
    sample_from(pred, x, cond, sched, cfg)
}

/// Runs the reverse process from a given `x_T`.
pub fn sample_from<F: Real>(
    pred: &impl NoisePredictor<F>,
    x_init: Matrix<F>,
    cond: &Conditioning<F>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<SampleOutput<F>> {
    let steps = sched.steps();
    if let Some(p) = &cfg.phase {
        p.validate(steps)?;
    }
    if x_init.shape() != pred.shape() {
        let (r, c) = pred.shape();
        return Err(shape_err("sample", format!("{r}x{c}"), format!("{}x{}", x_init.rows(), x_init.cols())));
    }
    let phase = cfg.phase.as_ref();
    let (rows, cols) = x_init.shape();
    let mut x = x_init;
    let mut norms = vec![(steps, norm(&x))];
    let mut attention = Vec::new();
    for t in (1..=steps).rev() {
        for r in 0..=cfg.resample_inner {
            let (eps_hat, cache) = if r == 0 && cfg.log_attention_at.contains(&t) {
                pred.predict_logged(&x, t, cond, phase)?
            } else {
                (pred.predict(&x, t, cond, phase)?, None)
            };
            if let Some(c) = cache {
                attention.push((t, c));
            }
            if !eps_hat.is_finite() {
                return Err(ModitError::Diverged { t });
            }
            let x_prev = match cfg.mode {
                SamplerMode::Ddim => {
                    let x0_hat = predict_x0(&x, &eps_hat, t, sched)?;
                    ddim_step(&x0_hat, &eps_hat, t, sched)?
                }
                SamplerMode::Ddpm => {
                    let noise = if t > 1 {
                        gaussian_matrix(rows, cols, &mut stream(cfg.seed, &[21, t as u64, r as u64]))
                    } else {
                        Matrix::zeros(rows, cols)
                    };
                    ddpm_posterior_sample(&x, &eps_hat, t, &noise, sched)?
                }
            };
            if !x_prev.is_finite() {
                return Err(ModitError::Diverged { t });
            }
            x = if r < cfg.resample_inner {
                let noise = gaussian_matrix(rows, cols, &mut stream(cfg.seed, &[22, t as u64, r as u64]));
                renoise_step(&x_prev, t, &noise, sched)?
            } else {
                x_prev
            };
        }
        norms.push((t - 1, norm(&x)));
    }
    Ok(SampleOutput {
        x0: x,
        norms,
        attention,
    })
}

/// One generation request. Without an explicit seed, request `i` uses
/// `derive_seed(cfg.seed, [i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest<F> {
    pub cond: Conditioning<F>,
    pub seed: Option<u64>,
}

pub fn request_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, &[index as u64])
}

/// Samples every request independently (in parallel); results are in
/// request order and identical to sequential calls.
pub fn sample_batch<F: Real>(
    pred: &impl NoisePredictor<F>,
    requests: &[SampleRequest<F>],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<Matrix<F>>> {
    let frames = pred.shape().0;
    if let Some(i) = requests.iter().position(|r| r.cond.audio.rows() != frames) {
        return Err(ModitError::InRequest {
            index: i,
            source: Box::new(shape_err("sample_batch", format!("{frames} frames"), requests[i].cond.audio.rows().to_string())),
        });
    }
    requests
        .par_iter()
        .enumerate()
        .map(|(i, req)| {
            let cfg = SamplerConfig {
                seed: req.seed.unwrap_or_else(|| request_seed(cfg.seed, i)),
                log_attention_at: Vec::new(),
                ..cfg.clone()
            };
            sample(pred, &req.cond, sched, &cfg)
                .map(|o| o.x0)
                .map_err(|e| ModitError::InRequest {
                    index: i,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Start frames of the windows covering `len` frames: stride
/// `window − overlap`, the last window aligned to the end.
pub fn window_starts(len: usize, window: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap >= window {
        return Err(ModitError::InvalidArgument(format!("overlap {overlap} must be below window {window}")));
    }
    if len < window {
        return Err(ModitError::InsufficientSequence { len, min: window });
    }
    let stride = window - overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window < len).collect();
    starts.push(len - window);
    Ok(starts)
}

/// Blends window outputs into one sequence. Frames covered by two windows
/// are cross-faded linearly from the earlier to the later window.
pub fn stitch_windows<F: Real>(windows: &[Matrix<F>], starts: &[usize], len: usize) -> Result<Matrix<F>> {
    if windows.is_empty() || windows.len() != starts.len() {
        return Err(ModitError::InvalidArgument("one start per window required".into()));
    }
    let cols = windows[0].cols();
    let mut out = Matrix::zeros(len, cols);
    let mut covered_to: usize = 0;
    for (w, &s) in windows.iter().zip(starts) {
        let overlap = covered_to.saturating_sub(s);
        for i in 0..w.rows() {
            let frame = s + i;
            let new_weight = if i < overlap {
                F::of((i + 1) as f64 / (overlap + 1) as f64)
            } else {
                F::one()
            };
            for j in 0..cols {
                let prev = out[(frame, j)];
                out[(frame, j)] = prev * (F::one() - new_weight) + w[(i, j)] * new_weight;
            }
        }
        covered_to = s + w.rows();
    }
    Ok(out)
}

/// Generates a sequence longer than the model window by sampling
/// overlapping windows of the audio track (window `k` seeded with
/// `derive_seed(cfg.seed, [k])`) and cross-fading the overlaps.
pub fn sample_long<F: Real>(
    pred: &impl NoisePredictor<F>,
    beta0: &Matrix<F>,
    audio: &Matrix<F>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    overlap: usize,
) -> Result<Matrix<F>> {
    let window = pred.shape().0;
    let starts = window_starts(audio.rows(), window, overlap)?;
    let requests: Vec<SampleRequest<F>> = starts
        .iter()
        .map(|&s| SampleRequest {
            cond: Conditioning {
                beta0: beta0.clone(),
                audio: audio.slice_rows(s, s + window),
            },
            seed: None,
        })
        .collect();
    let windows = sample_batch(pred, &requests, sched, cfg)?;
    stitch_windows(&windows, &starts, audio.rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, forward_noise};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_m(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Knows `x0` and returns the noise that explains `x_t` exactly.
    struct Oracle {
        x0: Matrix<f64>,
        sched: NoiseSchedule,
    }

    impl NoisePredictor<f64> for Oracle {
        fn shape(&self) -> (usize, usize) {
            self.x0.shape()
        }

        fn predict(&self, x_t: &Matrix<f64>, t: usize, _: &Conditioning<f64>, _: Option<&PhaseConfig>)
            -> Result<Matrix<f64>>
        {
            let ab = self.sched.alpha_bar(t);
            x_t.zip_map(&self.x0, |x, x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
        }
    }

    /// Predicts a constant regardless of input.
    struct Constant(Matrix<f64>);

    impl NoisePredictor<f64> for Constant {
        fn shape(&self) -> (usize, usize) {
            self.0.shape()
        }

        fn predict(&self, _: &Matrix<f64>, _: usize, _: &Conditioning<f64>, _: Option<&PhaseConfig>)
            -> Result<Matrix<f64>>
        {
            Ok(self.0.clone())
        }
    }

    fn cond(frames: usize) -> Conditioning<f64> {
        Conditioning {
            beta0: Matrix::zeros(1, 3),
            audio: Matrix::zeros(frames, 2),
        }
    }

    #[test]
    fn oracle_recovers_x0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_m(6, 3, &mut rng);
        let sched = NoiseSchedule::default();
        let oracle = Oracle { x0: x0.clone(), sched: sched.clone() };
        let out = sample(&oracle, &cond(6), &sched, &SamplerConfig::default()).unwrap();
        assert!(out.x0.max_abs_diff(&x0) < 1e-4);
        assert_eq!(out.norms.len(), 1001);
        assert!(out.norms.iter().all(|(_, n)| n.is_finite()));
    }

    #[test]
    fn oracle_on_a_synthetic_trajectory() {
        // the oracle noise equals the true noise of forward_noise(x0, t, ε)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_m(4, 3, &mut rng);
        let eps = rand_m(4, 3, &mut rng);
        let sched = build_schedule(50, 1e-3, 0.2).unwrap();
        let oracle = Oracle { x0: x0.clone(), sched: sched.clone() };
        let x_t = forward_noise(&x0, 50, &eps, &sched).unwrap();
        assert!(oracle.predict(&x_t, 50, &cond(4), None).unwrap().max_abs_diff(&eps) < 1e-12);
        let out = sample_from(&oracle, x_t, &cond(4), &sched, &SamplerConfig::default()).unwrap();
        assert!(out.x0.max_abs_diff(&x0) < 1e-10);
    }

    #[test]
    fn single_step_collapses_to_predict_x0() {
        let sched = build_schedule(1, 0.1, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Constant(rand_m(4, 3, &mut rng));
        for mode in [SamplerMode::Ddim, SamplerMode::Ddpm] {
            let cfg = SamplerConfig { mode, seed: 5, ..SamplerConfig::default() };
            let x_t: Matrix<f64> = gaussian_matrix(4, 3, &mut stream(5, &[20]));
            let out = sample(&pred, &cond(4), &sched, &cfg).unwrap();
            assert!(out.x0.max_abs_diff(&predict_x0(&x_t, &pred.0, 1, &sched).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let sched = build_schedule(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = Constant(rand_m(4, 3, &mut rng).scale(0.1));
        for mode in [SamplerMode::Ddim, SamplerMode::Ddpm] {
            let cfg = SamplerConfig { mode, seed: 9, resample_inner: 1, ..SamplerConfig::default() };
            let a = sample(&pred, &cond(4), &sched, &cfg).unwrap().x0;
            assert_eq!(a, sample(&pred, &cond(4), &sched, &cfg).unwrap().x0);
            let other = SamplerConfig { seed: 10, ..cfg };
            assert_ne!(a, sample(&pred, &cond(4), &sched, &other).unwrap().x0);
        }
    }

    #[test]
    fn divergence_names_the_timestep() {
        let sched = build_schedule(10, 1e-3, 0.2).unwrap();
        let pred = Constant(Matrix::filled(2, 3, f64::NAN));
        let err = sample(&pred, &cond(2), &sched, &SamplerConfig::default()).unwrap_err();
        assert_eq!(err, ModitError::Diverged { t: 10 });
    }

    #[test]
    fn batch_equals_sequential() {
        let sched = build_schedule(15, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = Constant(rand_m(4, 3, &mut rng).scale(0.1));
        let cfg = SamplerConfig { mode: SamplerMode::Ddpm, seed: 3, ..SamplerConfig::default() };
        let reqs: Vec<_> = (0..5).map(|_| SampleRequest { cond: cond(4), seed: None }).collect();
        let batch = sample_batch(&pred, &reqs, &sched, &cfg).unwrap();
        for (i, b) in batch.iter().enumerate() {
            let single = SamplerConfig { seed: request_seed(3, i), ..cfg.clone() };
            assert_eq!(*b, sample(&pred, &cond(4), &sched, &single).unwrap().x0);
        }
        let one = sample_batch(&pred, &reqs[..1], &sched, &cfg).unwrap();
        assert_eq!(one[0], batch[0]);
        let same: Vec<_> = (0..3).map(|_| SampleRequest { cond: cond(4), seed: Some(77) }).collect();
        let out = sample_batch(&pred, &same, &sched, &cfg).unwrap();
        assert!(out.iter().all(|o| *o == out[0]));
    }

    #[test]
    fn batch_errors_carry_the_request_index() {
        let sched = build_schedule(5, 1e-3, 0.2).unwrap();
        let pred = Constant(Matrix::zeros(4, 3));
        let reqs = vec![
            SampleRequest { cond: cond(4), seed: None },
            SampleRequest { cond: cond(5), seed: None },
        ];
        let err = sample_batch(&pred, &reqs, &sched, &SamplerConfig::default()).unwrap_err();
        assert!(matches!(err, ModitError::InRequest { index: 1, .. }));
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_starts(36, 12, 4).unwrap(), vec![0, 8, 16, 24]);
        assert_eq!(window_starts(12, 12, 4).unwrap(), vec![0]);
        assert_eq!(window_starts(30, 12, 4).unwrap(), vec![0, 8, 16, 18]);
        assert!(window_starts(11, 12, 4).is_err());
        assert!(window_starts(20, 12, 12).is_err());
    }

    #[test]
    fn stitching_cross_fades_overlaps() {
        let a: Matrix<f64> = Matrix::filled(4, 1, 1.0);
        let b = Matrix::filled(4, 1, 5.0);
        let out = stitch_windows(&[a, b], &[0, 2], 6).unwrap();
        let expected = [1.0, 1.0, 1.0 + 4.0 / 3.0, 1.0 + 8.0 / 3.0, 5.0, 5.0];
        for (i, e) in expected.iter().enumerate() {
            assert!((out[(i, 0)] - e).abs() < 1e-12, "{i}");
        }
        // identical windows stitch to the same constant
        let c: Matrix<f64> = Matrix::filled(12, 2, 0.5);
        let out = stitch_windows(&[c.clone(), c.clone(), c.clone(), c], &[0, 8, 16, 24], 36).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn long_sequences_have_requested_length() {
        let sched = build_schedule(5, 1e-3, 0.2).unwrap();
        let pred = Constant(Matrix::zeros(12, 3));
        let audio = Matrix::zeros(36, 2);
        let out = sample_long(&pred, &Matrix::zeros(1, 3), &audio, &sched, &SamplerConfig::default(), 4).unwrap();
        assert_eq!(out.shape(), (36, 3));
    }
}
