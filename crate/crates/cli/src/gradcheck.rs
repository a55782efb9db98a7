//! Finite-difference verification of every hand-written backward pass on
//! reduced shapes, in 64-bit precision.

use std::fmt;

use modit_core::attention::{
    revised_temporal_attention, revised_temporal_attention_backward, AttentionBias, AttentionParams, BiasMode,
    BiasTargets, PhaseConfig, PhaseOrder, TemporalLatent,
};
use modit_core::blink_pose::{
    blink_delta_loss, blink_pose_backward, blink_pose_forward, BlinkPoseConfig, BlinkPoseParams, BlinkTrack,
    PoseSequence,
};
use modit_core::denoiser::{
    eps_theta, eps_theta_backward, eps_theta_forward, BlockMasks, BlockParams, Conditioning, DenoiserConfig,
    ModelParams,
};
use modit_core::numeric::gradcheck::BlockError;
use modit_core::numeric::{gradient_check, Linear, Matrix, DEFAULT_STEP, GRADCHECK_TOLERANCE};
use modit_core::rng::{gaussian_matrix, stream};
use modit_core::schedule::build_schedule;
use modit_core::training::{
    example_loss, example_loss_and_grad, noise_loss, noise_loss_grad, velocity_loss, velocity_loss_grad, AuxHooks,
    LossContext, LossWeights, TrainExample,
};
use modit_core::{ParamTree, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    /// `check/tensor`, e.g. `denoiser/blocks.0.ffn_in.weight`.
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl GradCheckSummary {
    pub fn max_relative_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_relative_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&BlockResult> {
        self.blocks.iter().filter(|b| !(b.max_relative_error < self.tolerance)).collect()
    }

    pub fn passes(&self) -> bool {
        self.failures().is_empty()
    }
}

impl fmt::Display for GradCheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "block\tentries\tmax_rel_error\tstatus")?;
        for b in &self.blocks {
            let status = if b.max_relative_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{}\t{}\t{:.3e}\t{status}", b.name, b.entries, b.max_relative_error)?;
        }
        write!(
            f,
            "{} blocks, max relative error {:.3e}, tolerance {:.0e}: {}",
            self.blocks.len(),
            self.max_relative_error(),
            self.tolerance,
            if self.passes() { "PASS" } else { "FAIL" }
        )
    }
}

struct Checker {
    rng: ChaCha8Rng,
    /// Prefix of block names whose analytic gradient gets perturbed.
    corrupt: Option<String>,
    blocks: Vec<BlockResult>,
}

impl Checker {
    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix<f64> {
        gaussian_matrix(rows, cols, &mut self.rng)
    }

    fn check<P: ParamTree<f64>>(
        &mut self,
        label: &str,
        at: &P,
        loss: impl Fn(&P) -> Result<f64>,
        analytic: &P,
    ) -> Result<()> {
        let mut analytic = analytic.clone();
        if let Some(prefix) = &self.corrupt {
            for (name, m) in analytic.named_mut() {
                if format!("{label}/{name}").starts_with(prefix.as_str()) {
                    for v in m.as_mut_slice() {
                        *v = *v * 1.01 + 1e-3;
                    }
                }
            }
        }
        let report = gradient_check(at, loss, &analytic, DEFAULT_STEP)?;
        self.blocks.extend(report.blocks.into_iter().map(|BlockError { name, count, max_relative_error }| {
            BlockResult {
                name: if name.is_empty() { label.to_string() } else { format!("{label}/{name}") },
                entries: count,
                max_relative_error,
            }
        }));
        Ok(())
    }
}

fn all_targets(order: PhaseOrder, mode: BiasMode) -> PhaseConfig {
    PhaseConfig {
        order,
        mode,
        targets: BiasTargets {
            self_attn: true,
            cross: true,
            temporal: true,
        },
        diag_floor: 0.1,
        ..PhaseConfig::default()
    }
}

/// Seed of the fixture draws used by the `gradcheck` command.
pub const FIXTURE_SEED: u64 = 0;

/// Runs every check. `corrupt` perturbs the analytic gradient of blocks
/// whose name starts with the given prefix.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<GradCheckSummary> {
    let mut ck = Checker {
        rng: stream(seed, &[50]),
        corrupt: corrupt.map(str::to_string),
        blocks: Vec::new(),
    };
    check_attention(&mut ck)?;
    check_temporal(&mut ck)?;
    check_model(&mut ck)?;
    check_losses(&mut ck)?;
    check_blink(&mut ck)?;
    Ok(GradCheckSummary {
        tolerance: GRADCHECK_TOLERANCE,
        blocks: ck.blocks,
    })
}

fn check_attention(ck: &mut Checker) -> Result<()> {
    let p = AttentionParams::<f64>::init(8, 2, &mut ck.rng)?;
    let queries = ck.matrix(4, 8);
    let keys = ck.matrix(5, 8);
    let mask = ck.matrix(4, 5).map(|v| 0.2 + v.abs());
    let score_bias = ck.matrix(4, 5);
    let probe = ck.matrix(4, 8);
    for (label, mode) in [("attention.mult", BiasMode::Multiplicative), ("attention.add", BiasMode::Additive)] {
        let bias = AttentionBias {
            mask: Some(&mask),
            mode,
            score_bias: Some(&score_bias),
        };
        let (_, cache) = p.forward(&queries, &keys, &bias)?;
        let mut g = p.zeros_like();
        let d = p.backward(&cache, &probe, &mut g);
        ck.check(label, &p, |q| Ok(q.forward(&queries, &keys, &bias)?.0.hadamard(&probe)?.sum()), &g)?;
        ck.check(
            &format!("{label}/d_queries"),
            &queries,
            |x| Ok(p.forward(x, &keys, &bias)?.0.hadamard(&probe)?.sum()),
            &d.d_queries,
        )?;
        ck.check(
            &format!("{label}/d_keys_values"),
            &keys,
            |x| Ok(p.forward(&queries, x, &bias)?.0.hadamard(&probe)?.sum()),
            &d.d_keys_values,
        )?;
    }
    Ok(())
}

fn check_temporal(ck: &mut Checker) -> Result<()> {
    let frames = 4;
    let attn = AttentionParams::<f64>::init(8, 2, &mut ck.rng)?;
    let latent = TemporalLatent::<f64>::init(frames, 4, 8, &mut ck.rng);
    let h = ck.matrix(frames, 8);
    let probe = ck.matrix(frames, 8);
    let mode = BiasMode::Multiplicative;
    let (_, cache) = revised_temporal_attention(&h, Some(&latent), &attn, None, mode)?;
    let (mut ga, mut gl) = (attn.zeros_like(), latent.zeros_like());
    revised_temporal_attention_backward(&cache, Some(&latent), &attn, &probe, &mut ga, Some(&mut gl));
    let out = |a: &AttentionParams<f64>, l: &TemporalLatent<f64>| -> Result<f64> {
        Ok(revised_temporal_attention(&h, Some(l), a, None, mode)?.0.hadamard(&probe)?.sum())
    };
    ck.check("temporal.latent", &latent, |l| out(&attn, l), &gl)?;
    ck.check("temporal.attention", &attn, |a| out(a, &latent), &ga)
}

/// Standard init with a random output projection so every path carries
/// gradient.
fn random_model(cfg: &DenoiserConfig, ck: &mut Checker) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::init(cfg, &mut ck.rng)?;
    p.output = Linear::init(cfg.width, cfg.coeff_dim, &mut ck.rng);
    Ok(p)
}

fn check_model(ck: &mut Checker) -> Result<()> {
    let cfg = DenoiserConfig::reduced();
    let p = random_model(&cfg, ck)?;
    let x = ck.matrix(cfg.frames, cfg.coeff_dim);
    let cond = Conditioning {
        beta0: ck.matrix(1, cfg.coeff_dim),
        audio: ck.matrix(cfg.frames, cfg.audio_dim),
    };
    let probe = ck.matrix(cfg.frames, cfg.coeff_dim);
    let literal = all_targets(PhaseOrder::AlgorithmLiteral, BiasMode::Multiplicative);
    let prose = all_targets(PhaseOrder::ProseOrder, BiasMode::Additive);
    // (label, t, phase): both branches of both orders plus no bias. Timesteps
    // stay away from t = 1, where the slow embedding channels are ~1e-4 and
    // their weight gradients sink into finite-difference roundoff.
    let cases = [
        ("denoiser.lipsync", 250, Some(&literal)),
        ("denoiser.expression", 750, Some(&literal)),
        ("denoiser.prose", 750, Some(&prose)),
        ("denoiser.unbiased", 400, None),
    ];
    for (label, t, phase) in cases {
        let masks = BlockMasks::at(t, cfg.frames, cfg.frames, phase)?;
        let (_, cache) = eps_theta_forward(&x, t, &cond, &p, &cfg, &masks)?;
        let mut g = p.zeros_like();
        let dx = eps_theta_backward(&cache, &p, &cfg, &probe, &mut g);
        let out = |pp: &ModelParams<f64>, xx: &Matrix<f64>| -> Result<f64> {
            Ok(eps_theta(xx, t, &cond, pp, &cfg, &masks)?.hadamard(&probe)?.sum())
        };
        if label == "denoiser.lipsync" {
            // transformer block stack on its own
            let blocks = |bs: &Vec<BlockParams<f64>>| {
                let pp = ModelParams {
                    blocks: bs.clone(),
                    ..p.clone()
                };
                out(&pp, &x)
            };
            ck.check("block", &p.blocks, blocks, &g.blocks)?;
        }
        ck.check(label, &p, |pp| out(pp, &x), &g)?;
        ck.check(&format!("{label}/d_x"), &x, |xx| out(&p, xx), &dx)?;
    }
    Ok(())
}

fn check_losses(ck: &mut Checker) -> Result<()> {
    let target = ck.matrix(6, 5);
    let estimate = ck.matrix(6, 5);
    ck.check("loss.noise", &estimate, |e| noise_loss(&target, e), &noise_loss_grad(&target, &estimate)?)?;
    ck.check(
        "loss.velocity",
        &estimate,
        |e| velocity_loss(&target, e),
        &velocity_loss_grad(&target, &estimate)?,
    )?;

    // weighted objective through the x̂0 reconstruction
    let cfg = DenoiserConfig::reduced();
    let p = random_model(&cfg, ck)?;
    let sched = build_schedule(1000, 1e-4, 0.02)?;
    let phase = all_targets(PhaseOrder::AlgorithmLiteral, BiasMode::Multiplicative);
    let hooks = AuxHooks::default();
    let ctx = LossContext {
        model: &cfg,
        sched: &sched,
        phase: Some(&phase),
        weights: LossWeights::default(),
        hooks: &hooks,
    };
    let cond = Conditioning {
        beta0: ck.matrix(1, cfg.coeff_dim),
        audio: ck.matrix(cfg.frames, cfg.audio_dim),
    };
    let t = 300;
    // Place ε near ε̂(x_t) and solve for x0 at the same x_t, so the loss
    // value (and its roundoff) is small next to its gradient.
    let x_t = ck.matrix(cfg.frames, cfg.coeff_dim);
    let masks = BlockMasks::at(t, cfg.frames, cfg.frames, Some(&phase))?;
    let eps = eps_theta(&x_t, t, &cond, &p, &cfg, &masks)?.add(&ck.matrix(cfg.frames, cfg.coeff_dim).scale(0.1))?;
    let ab = sched.alpha_bar(t);
    let x0 = x_t.sub(&eps.scale((1.0 - ab).sqrt()))?.scale(1.0 / ab.sqrt());
    let ex = TrainExample { cond, x0 };
    let (_, g) = example_loss_and_grad(&ex, t, &eps, &p, &ctx)?;
    ck.check("loss.total", &p, |pp| Ok(example_loss(&ex, t, &eps, pp, &ctx)?.total), &g)
}

fn random_pose(frames: usize, coeff_dim: usize, ck: &mut Checker) -> PoseSequence<f64> {
    let mut angles = || ck.matrix(1, frames).into_vec();
    let (yaw, pitch, roll) = (angles(), angles(), angles());
    PoseSequence {
        yaw,
        pitch,
        roll,
        translation: ck.matrix(frames, 3),
        delta: ck.matrix(frames, coeff_dim),
    }
}

fn check_blink(ck: &mut Checker) -> Result<()> {
    let cfg = BlinkPoseConfig::reduced();
    let frames = 5;
    let p = BlinkPoseParams::<f64>::init(&cfg, &mut ck.rng)?;
    let window = ck.matrix(frames, cfg.coeff_dim);
    let blink = BlinkTrack::new(ck.matrix(1, frames).as_slice().iter().map(|v| 0.5 + 0.5 * v.tanh()))?;
    let probe = random_pose(frames, cfg.coeff_dim, ck);

    let (out, cache) = blink_pose_forward(&window, &blink, &p, &cfg)?;
    let mut g = p.zeros_like();
    let dw = blink_pose_backward(&cache, &p, &cfg, &probe, &mut g);
    let pose = |q: &BlinkPoseParams<f64>, w: &Matrix<f64>| -> Result<f64> {
        Ok(blink_pose_forward(w, &blink, q, &cfg)?.0.dot(&probe))
    };
    ck.check("blink", &p, |q| pose(q, &window), &g)?;
    ck.check("blink/d_window", &window, |w| pose(&p, w), &dw)?;

    let (_, d_delta) = blink_delta_loss(&out.delta, &blink)?;
    let mut d_out = PoseSequence::zeros(frames, cfg.coeff_dim);
    d_out.delta = d_delta;
    let mut g = p.zeros_like();
    blink_pose_backward(&cache, &p, &cfg, &d_out, &mut g);
    let loss = |q: &BlinkPoseParams<f64>| Ok(blink_delta_loss(&blink_pose_forward(&window, &blink, q, &cfg)?.0.delta, &blink)?.0);
    ck.check("blink.loss", &p, loss, &g)
}
