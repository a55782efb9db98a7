//! Losses, AdamW and the deterministic training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::attention::PhaseConfig;
use crate::denoiser::{
    eps_theta, eps_theta_backward, eps_theta_forward, BlockMasks, Conditioning, DenoiserConfig, ModelParams,
};
use crate::error::{shape_err, ModitError, Result};
use crate::numeric::{Matrix, Real};
use crate::params::ParamTree;
use crate::rng::{gaussian_matrix, stream};
use crate::schedule::{forward_noise, predict_x0, predict_x0_eps_coeff, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_read: f64,
    pub lambda_lks: f64,
    pub lambda_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 10.0,
            lambda_read: 0.2,
            lambda_lks: 0.1,
            lambda_v: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_t, self.lambda_read, self.lambda_lks, self.lambda_v];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(ModitError::InvalidArgument(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Mean squared error over all entries.
pub fn noise_loss<F: Real>(eps: &Matrix<F>, eps_hat: &Matrix<F>) -> Result<F> {
    eps.check_same_shape(eps_hat, "noise_loss")?;
    Ok(eps_hat.sub(eps)?.sum_squares() / F::of(eps.len() as f64))
}

/// `d noise_loss / d eps_hat`.
pub fn noise_loss_grad<F: Real>(eps: &Matrix<F>, eps_hat: &Matrix<F>) -> Result<Matrix<F>> {
    let scale = F::of(2.0 / eps.len() as f64);
    eps_hat.zip_map(eps, |p, e| scale * (p - e))
}

fn frame_diff<F: Real>(x: &Matrix<F>) -> Matrix<F> {
    Matrix::from_fn(x.rows() - 1, x.cols(), |i, j| x[(i + 1, j)] - x[(i, j)])
}

fn check_velocity_inputs<F: Real>(x0: &Matrix<F>, x0_hat: &Matrix<F>) -> Result<()> {
    x0.check_same_shape(x0_hat, "velocity_loss")?;
    if x0.rows() < 2 {
        return Err(ModitError::InsufficientSequence { len: x0.rows(), min: 2 });
    }
    Ok(())
}

/// MSE between first-order frame differences of `x0` and `x0_hat`.
pub fn velocity_loss<F: Real>(x0: &Matrix<F>, x0_hat: &Matrix<F>) -> Result<F> {
    check_velocity_inputs(x0, x0_hat)?;
    let d = frame_diff(x0_hat).sub(&frame_diff(x0))?;
    Ok(d.sum_squares() / F::of(d.len() as f64))
}

/// `d velocity_loss / d x0_hat`.
pub fn velocity_loss_grad<F: Real>(x0: &Matrix<F>, x0_hat: &Matrix<F>) -> Result<Matrix<F>> {
    check_velocity_inputs(x0, x0_hat)?;
    let d = frame_diff(x0_hat).sub(&frame_diff(x0))?;
    let scale = F::of(2.0 / d.len() as f64);
    let mut g = Matrix::zeros(x0.rows(), x0.cols());
    for i in 0..d.rows() {
        for j in 0..d.cols() {
            let v = scale * d[(i, j)];
            g[(i + 1, j)] += v;
            g[(i, j)] -= v;
        }
    }
    Ok(g)
}

pub fn total_loss(l_t: f64, l_read: f64, l_lks: f64, l_v: f64, w: &LossWeights) -> f64 {
    w.lambda_t * l_t + w.lambda_read * l_read + w.lambda_lks * l_lks + w.lambda_v * l_v
}

/// An auxiliary loss on the recovered motion, returning the value and its
/// gradient with respect to `x0_hat`.
pub trait AuxLoss<F: Real>: Send + Sync {
    fn eval(&self, x0: &Matrix<F>, x0_hat: &Matrix<F>) -> Result<(F, Matrix<F>)>;
}

/// The default hook: contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroLoss;

impl<F: Real> AuxLoss<F> for ZeroLoss {
    fn eval(&self, _x0: &Matrix<F>, x0_hat: &Matrix<F>) -> Result<(F, Matrix<F>)> {
        Ok((F::zero(), Matrix::zeros(x0_hat.rows(), x0_hat.cols())))
    }
}

/// Lip-reading and landmark loss slots.
pub struct AuxHooks<F> {
    pub read: Box<dyn AuxLoss<F>>,
    pub lks: Box<dyn AuxLoss<F>>,
}

impl<F: Real> Default for AuxHooks<F> {
    fn default() -> Self {
        Self {
            read: Box::new(ZeroLoss),
            lks: Box::new(ZeroLoss),
        }
    }
}

impl<F> fmt::Debug for AuxHooks<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AuxHooks")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators mirror the parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<P> {
    pub config: AdamWConfig,
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P> AdamW<P> {
    pub fn new<F: Real>(params: &P, config: AdamWConfig) -> Self
    where
        P: ParamTree<F>,
    {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Decoupled decay `p ← p − lr·wd·p`, then the bias-corrected Adam step.
    pub fn update<F: Real>(&mut self, params: &mut P, grads: &P)
    where
        P: ParamTree<F>,
    {
        self.step += 1;
        let c = self.config;
        let k = self.step as i32;
        let bc1 = F::of(1.0 - c.beta1.powi(k));
        let bc2 = F::of(1.0 - c.beta2.powi(k));
        let (lr, b1, b2, eps) = (F::of(c.lr), F::of(c.beta1), F::of(c.beta2), F::of(c.eps));
        let decay = F::one() - F::of(c.lr * c.weight_decay);
        let one = F::one();
        let g_all = grads.named();
        let m_all = self.m.named_mut();
        let v_all = self.v.named_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(g_all).zip(m_all).zip(v_all) {
            let it = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One conditioned training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<F> {
    pub cond: Conditioning<F>,
    pub x0: Matrix<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_t: f64,
    pub l_read: f64,
    pub l_lks: f64,
    pub l_v: f64,
    pub total: f64,
}

impl LossParts {
    fn check(&self) -> Result<()> {
        let parts = [("L_t", self.l_t), ("L_read", self.l_read), ("L_lks", self.l_lks), ("L_v", self.l_v)];
        match parts.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(ModitError::NonFinite(format!("{name} = {v}"))),
            None => Ok(()),
        }
    }
}

/// Everything fixed during a training run besides the parameters.
#[derive(Debug)]
pub struct LossContext<'a, F> {
    pub model: &'a DenoiserConfig,
    pub sched: &'a NoiseSchedule,
    /// `None` disables bias injection.
    pub phase: Option<&'a PhaseConfig>,
    pub weights: LossWeights,
    pub hooks: &'a AuxHooks<F>,
}

/// Loss and parameter gradient for one example at a given `(t, ε)`.
pub fn example_loss_and_grad<F: Real>(
    ex: &TrainExample<F>,
    t: usize,
    eps: &Matrix<F>,
    params: &ModelParams<F>,
    ctx: &LossContext<'_, F>,
) -> Result<(LossParts, ModelParams<F>)> {
    let x_t = forward_noise(&ex.x0, t, eps, ctx.sched)?;
    let masks = BlockMasks::at(t, ctx.model.frames, ex.cond.audio.rows(), ctx.phase)?;
    let (eps_hat, cache) = eps_theta_forward(&x_t, t, &ex.cond, params, ctx.model, &masks)?;
    let x0_hat = predict_x0(&x_t, &eps_hat, t, ctx.sched)?;
    let w = ctx.weights;

    let l_t = noise_loss(eps, &eps_hat)?;
    let l_v = velocity_loss(&ex.x0, &x0_hat)?;
    let (l_read, g_read) = ctx.hooks.read.eval(&ex.x0, &x0_hat)?;
    let (l_lks, g_lks) = ctx.hooks.lks.eval(&ex.x0, &x0_hat)?;
    let (l_t, l_v, l_read, l_lks) = (l_t.as_f64(), l_v.as_f64(), l_read.as_f64(), l_lks.as_f64());
    let parts = LossParts {
        l_t,
        l_read,
        l_lks,
        l_v,
        total: total_loss(l_t, l_read, l_lks, l_v, &w),
    };
    parts.check()?;

    // dL/dx̂0 flows back through x̂0 = (x_t − √(1−ᾱ)·ε̂)/√ᾱ
    let mut d_x0_hat = velocity_loss_grad(&ex.x0, &x0_hat)?.scale(F::of(w.lambda_v));
    d_x0_hat.add_assign(&g_read.scale(F::of(w.lambda_read)));
    d_x0_hat.add_assign(&g_lks.scale(F::of(w.lambda_lks)));
    let mut d_eps = noise_loss_grad(eps, &eps_hat)?.scale(F::of(w.lambda_t));
    d_eps.add_assign(&d_x0_hat.scale(F::of(predict_x0_eps_coeff(t, ctx.sched))));

    let mut grads = params.zeros_like();
    eps_theta_backward(&cache, params, ctx.model, &d_eps, &mut grads);
    if !grads.all_finite() {
        return Err(ModitError::NonFinite("parameter gradient".into()));
    }
    Ok((parts, grads))
}

/// Loss only, for finite-difference checks of the full objective.
pub fn example_loss<F: Real>(
    ex: &TrainExample<F>,
    t: usize,
    eps: &Matrix<F>,
    params: &ModelParams<F>,
    ctx: &LossContext<'_, F>,
) -> Result<LossParts> {
    let x_t = forward_noise(&ex.x0, t, eps, ctx.sched)?;
    let masks = BlockMasks::at(t, ctx.model.frames, ex.cond.audio.rows(), ctx.phase)?;
    let eps_hat = eps_theta(&x_t, t, &ex.cond, params, ctx.model, &masks)?;
    let x0_hat = predict_x0(&x_t, &eps_hat, t, ctx.sched)?;
    let l_t = noise_loss(eps, &eps_hat)?.as_f64();
    let l_v = velocity_loss(&ex.x0, &x0_hat)?.as_f64();
    let l_read = ctx.hooks.read.eval(&ex.x0, &x0_hat)?.0.as_f64();
    let l_lks = ctx.hooks.lks.eval(&ex.x0, &x0_hat)?.0.as_f64();
    Ok(LossParts {
        l_t,
        l_read,
        l_lks,
        l_v,
        total: total_loss(l_t, l_read, l_lks, l_v, &ctx.weights),
    })
}

/// Draws the timestep and noise for batch slot `slot` of step `step`.
pub fn draw_noise<F: Real>(seed: u64, step: u64, slot: usize, frames: usize, coeff_dim: usize, steps: usize)
    -> (usize, Matrix<F>)
{
    let mut rng = stream(seed, &[1, step, slot as u64]);
    let t = rng.random_range(1..=steps);
    (t, gaussian_matrix(frames, coeff_dim, &mut rng))
}

/// Example indices for step `step`: fixed-size batches drawn without
/// replacement from a per-epoch shuffle. A trailing partial batch is dropped.
pub fn batch_indices(seed: u64, step: u64, num_examples: usize, batch_size: usize) -> Vec<usize> {
    let batch = batch_size.min(num_examples).max(1);
    let per_epoch = (num_examples / batch) as u64;
    let (epoch, within) = (step / per_epoch, (step % per_epoch) as usize);
    let mut order: Vec<usize> = (0..num_examples).collect();
    order.shuffle(&mut stream(seed, &[0, epoch]));
    order[within * batch..(within + 1) * batch].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamWConfig::default(),
        }
    }
}

/// Metrics of one completed step; `step` counts updates applied so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub losses: LossParts,
}

/// Parameters, optimizer state and fixed context of a training run. The
/// random stream is a pure function of `(seed, step)`, so the optimizer's
/// step counter is the entire resumable RNG state.
#[derive(Debug)]
pub struct Trainer<F> {
    pub model: DenoiserConfig,
    pub sched: NoiseSchedule,
    pub phase: Option<PhaseConfig>,
    pub config: TrainConfig,
    pub params: ModelParams<F>,
    pub opt: AdamW<ModelParams<F>>,
    pub hooks: AuxHooks<F>,
}

impl<F: Real> Trainer<F> {
    pub fn new(
        model: DenoiserConfig,
        sched: NoiseSchedule,
        phase: Option<PhaseConfig>,
        config: TrainConfig,
        params: ModelParams<F>,
    ) -> Result<Self> {
        model.validate()?;
        params.check_config(&model)?;
        config.weights.validate()?;
        if let Some(p) = &phase {
            p.validate(sched.steps())?;
        }
        let opt = AdamW::new(&params, config.adam);
        Ok(Self {
            model,
            sched,
            phase,
            config,
            params,
            opt,
            hooks: AuxHooks::default(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    fn check_data(&self, data: &[TrainExample<F>]) -> Result<()> {
        if data.is_empty() {
            return Err(ModitError::InvalidArgument("training set is empty".into()));
        }
        let m = &self.model;
        for ex in data {
            if ex.x0.shape() != (m.frames, m.coeff_dim) {
                return Err(shape_err(
                    "training example",
                    format!("{}x{}", m.frames, m.coeff_dim),
                    format!("{}x{}", ex.x0.rows(), ex.x0.cols()),
                ));
            }
        }
        Ok(())
    }

    /// One AdamW update on the batch selected for the current step. A
    /// non-finite loss leaves parameters and optimizer untouched.
    pub fn train_step(&mut self, data: &[TrainExample<F>]) -> Result<StepMetrics> {
        self.check_data(data)?;
        let step = self.opt.step;
        let seed = self.config.seed;
        let idx = batch_indices(seed, step, data.len(), self.config.batch_size);
        let ctx = LossContext {
            model: &self.model,
            sched: &self.sched,
            phase: self.phase.as_ref(),
            weights: self.config.weights,
            hooks: &self.hooks,
        };
        let params = &self.params;
        let results: Vec<Result<(LossParts, ModelParams<F>)>> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let (t, eps) = draw_noise(seed, step, slot, ctx.model.frames, ctx.model.coeff_dim, ctx.sched.steps());
                example_loss_and_grad(&data[i], t, &eps, params, &ctx)
            })
            .collect();

        let n = results.len() as f64;
        let mut grads = self.params.zeros_like();
        let mut mean = LossParts::default();
        for r in results {
            let (parts, g) = r.map_err(|e| match e {
                ModitError::NonFinite(what) => ModitError::NonFinite(format!("{what} at step {}", step + 1)),
                other => other,
            })?;
            grads.accumulate(&g);
            mean.l_t += parts.l_t / n;
            mean.l_read += parts.l_read / n;
            mean.l_lks += parts.l_lks / n;
            mean.l_v += parts.l_v / n;
            mean.total += parts.total / n;
        }
        grads.scale_all(F::of(1.0 / n));
        self.opt.update(&mut self.params, &grads);
        Ok(StepMetrics {
            step: self.opt.step,
            losses: mean,
        })
    }

    /// Runs until `config.steps` updates have been applied in total.
    pub fn run(&mut self, data: &[TrainExample<F>], mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.opt.step < self.config.steps {
            let m = self.train_step(data)?;
            on_step(&m);
        }
        Ok(())
    }
}

/// Mean noise-prediction loss over `draws` fixed `(t, ε)` pairs per example.
/// The draws depend only on `seed`, so the value is comparable across
/// parameter sets.
pub fn eval_noise_loss<F: Real>(
    data: &[TrainExample<F>],
    params: &ModelParams<F>,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
    phase: Option<&PhaseConfig>,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let jobs: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| (0..draws).map(move |d| (i, d))).collect();
    let losses: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, d)| {
            let mut rng = stream(seed, &[2, i as u64, d as u64]);
            let t = rng.random_range(1..=sched.steps());
            let eps: Matrix<F> = gaussian_matrix(model.frames, model.coeff_dim, &mut rng);
            let ex = &data[i];
            let x_t = forward_noise(&ex.x0, t, &eps, sched)?;
            let masks = BlockMasks::at(t, model.frames, ex.cond.audio.rows(), phase)?;
            let eps_hat = eps_theta(&x_t, t, &ex.cond, params, model, &masks)?;
            Ok(noise_loss(&eps, &eps_hat)?.as_f64())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / jobs.len() as f64)
}
