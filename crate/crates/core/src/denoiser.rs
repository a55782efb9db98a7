//! The conditional noise predictor: timestep embedding, transformer blocks
//! (self → cross → temporal → FFN, pre-norm with residuals) and the output
//! projection back to expression coefficients.

use rand::Rng;

use crate::attention::masks::BiasMode;
use crate::attention::mha::{
    biased_cross_attention, biased_self_attention, cross_attention_mask, AttentionCache, AttentionParams,
};
use crate::attention::temporal::{
    revised_temporal_attention, revised_temporal_attention_backward, TemporalCache, TemporalLatent,
    DEFAULT_HIDDEN, DEFAULT_LATENT_DIM,
};
use crate::attention::PhaseConfig;
use crate::error::{shape_err, ModitError, Result};
use crate::numeric::ops::{gelu, gelu_backward, silu, silu_backward, LayerNormCache};
use crate::numeric::{LayerNorm, Linear, Matrix, Real};
use crate::param_tree;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub ffn_width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub frames: usize,
    pub coeff_dim: usize,
    pub audio_dim: usize,
    pub latent_dim: usize,
    pub temporal_hidden: usize,
    /// Prepend the projected source-frame row to self-attention keys.
    pub use_beta0: bool,
    /// Add the learned relative-offset term to temporal attention scores.
    pub temporal_revision: bool,
}

impl Default for DenoiserConfig {
    /// Desk-scale profile.
    fn default() -> Self {
        Self {
            width: 64,
            ffn_width: 128,
            heads: 4,
            blocks: 1,
            frames: 12,
            coeff_dim: 64,
            audio_dim: 16,
            latent_dim: DEFAULT_LATENT_DIM,
            temporal_hidden: DEFAULT_HIDDEN,
            use_beta0: true,
            temporal_revision: true,
        }
    }
}

impl DenoiserConfig {
    /// Full-size profile: 1024 hidden, 2048 feed-forward, 4 heads, one block.
    pub fn full_scale(audio_dim: usize) -> Self {
        Self {
            width: 1024,
            ffn_width: 2048,
            audio_dim,
            ..Self::default()
        }
    }

    /// Small profile used by gradient checks.
    pub fn reduced() -> Self {
        Self {
            width: 16,
            ffn_width: 32,
            heads: 2,
            frames: 4,
            coeff_dim: 8,
            audio_dim: 4,
            latent_dim: 4,
            temporal_hidden: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("width", self.width),
            ("ffn_width", self.ffn_width),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("frames", self.frames),
            ("coeff_dim", self.coeff_dim),
            ("audio_dim", self.audio_dim),
            ("latent_dim", self.latent_dim),
            ("temporal_hidden", self.temporal_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModitError::InvalidArgument(format!("{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(ModitError::InvalidArgument(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(ModitError::InvalidArgument("width must be even".into()));
        }
        Ok(())
    }
}

/// Interleaved `[sin(t·ω_0), cos(t·ω_0), sin(t·ω_1), …]` with
/// `ω_k = 10000^(−2k/dim)`.
pub fn timestep_embedding<F: Real>(t: usize, dim: usize) -> Result<Matrix<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(ModitError::InvalidArgument(format!("embedding dim {dim} must be even")));
    }
    let mut out = Matrix::zeros(1, dim);
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let angle = t as f64 * omega;
        out[(0, 2 * k)] = F::of(angle.sin());
        out[(0, 2 * k + 1)] = F::of(angle.cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub self_norm: LayerNorm<F>,
    pub self_attn: AttentionParams<F>,
    pub cross_norm: LayerNorm<F>,
    pub cross_attn: AttentionParams<F>,
    pub temporal_norm: LayerNorm<F>,
    pub temporal_attn: AttentionParams<F>,
    pub latent: TemporalLatent<F>,
    pub ffn_norm: LayerNorm<F>,
    pub ffn_in: Linear<F>,
    pub ffn_out: Linear<F>,
}

param_tree!(BlockParams {
    self_norm,
    self_attn,
    cross_norm,
    cross_attn,
    temporal_norm,
    temporal_attn,
    latent,
    ffn_norm,
    ffn_in,
    ffn_out,
});

impl<F: Real> BlockParams<F> {
    pub fn init(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let w = cfg.width;
        Ok(Self {
            self_norm: LayerNorm::new(w),
            self_attn: AttentionParams::init(w, cfg.heads, rng)?,
            cross_norm: LayerNorm::new(w),
            cross_attn: AttentionParams::init(w, cfg.heads, rng)?,
            temporal_norm: LayerNorm::new(w),
            temporal_attn: AttentionParams::init(w, cfg.heads, rng)?,
            latent: TemporalLatent::init(cfg.frames, cfg.latent_dim, cfg.temporal_hidden, rng),
            ffn_norm: LayerNorm::new(w),
            ffn_in: Linear::init(w, cfg.ffn_width, rng),
            ffn_out: Linear::init(cfg.ffn_width, w, rng),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub input: Linear<F>,
    pub audio: Linear<F>,
    pub beta0: Linear<F>,
    pub time_hidden: Linear<F>,
    pub time_out: Linear<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub output: Linear<F>,
}

param_tree!(ModelParams {
    input,
    audio,
    beta0,
    time_hidden,
    time_out,
    blocks,
    output,
});

impl<F: Real> ModelParams<F> {
    /// Uniform `±1/√fan_in` everywhere except the output projection, which
    /// starts at zero so the initial prediction is identically zero.
    pub fn init(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let input = Linear::init(cfg.coeff_dim, w, rng);
        let audio = Linear::init(cfg.audio_dim, w, rng);
        let beta0 = Linear::init(cfg.coeff_dim, w, rng);
        let time_hidden = Linear::init(w, w, rng);
        let time_out = Linear::init(w, w, rng);
        let blocks = (0..cfg.blocks).map(|_| BlockParams::init(cfg, rng)).collect::<Result<_>>()?;
        Ok(Self {
            input,
            audio,
            beta0,
            time_hidden,
            time_out,
            blocks,
            output: Linear::zeros(w, cfg.coeff_dim),
        })
    }

    pub fn check_config(&self, cfg: &DenoiserConfig) -> Result<()> {
        let shape = |name: &str, found: (usize, usize), expected: (usize, usize)| {
            if found == expected {
                Ok(())
            } else {
                Err(shape_err("ModelParams", format!("{name} {expected:?}"), format!("{found:?}")))
            }
        };
        shape("input", self.input.weight.shape(), (cfg.coeff_dim, cfg.width))?;
        shape("audio", self.audio.weight.shape(), (cfg.audio_dim, cfg.width))?;
        shape("output", self.output.weight.shape(), (cfg.width, cfg.coeff_dim))?;
        if self.blocks.len() != cfg.blocks {
            return Err(shape_err("ModelParams", format!("{} blocks", cfg.blocks), self.blocks.len().to_string()));
        }
        for b in &self.blocks {
            shape("ffn_in", b.ffn_in.weight.shape(), (cfg.width, cfg.ffn_width))?;
            shape("latent.z", b.latent.z.shape(), (2 * cfg.frames - 1, cfg.latent_dim))?;
            if b.self_attn.heads != cfg.heads {
                return Err(shape_err("ModelParams", format!("{} heads", cfg.heads), b.self_attn.heads.to_string()));
            }
        }
        Ok(())
    }
}

/// Phase-selected masks for one network evaluation.
#[derive(Debug, Clone, Default)]
pub struct BlockMasks {
    pub self_attn: Option<Matrix<f64>>,
    pub cross: Option<Matrix<f64>>,
    pub temporal: Option<Matrix<f64>>,
    pub mode: BiasMode,
}

impl BlockMasks {
    /// Masks for timestep `t`; `None` disables bias injection entirely.
    pub fn at(t: usize, frames: usize, audio_frames: usize, phase: Option<&PhaseConfig>) -> Result<Self> {
        let Some(p) = phase else {
            return Ok(Self::default());
        };
        let core = p.mask_at(t, frames, frames);
        let cross = if p.targets.cross {
            Some(cross_attention_mask(&p.mask_at(t, frames, audio_frames), &core)?)
        } else {
            None
        };
        Ok(Self {
            self_attn: p.targets.self_attn.then(|| core.clone()),
            cross,
            temporal: p.targets.temporal.then_some(core),
            mode: p.mode,
        })
    }
}

/// One evaluation's conditioning signals.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning<F> {
    /// `1 × coeff_dim` source-frame expression row.
    pub beta0: Matrix<F>,
    /// `frames × audio_dim` audio latents.
    pub audio: Matrix<F>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    self_norm: LayerNormCache<F>,
    pub self_attn: AttentionCache<F>,
    cross_norm: LayerNormCache<F>,
    pub cross_attn: AttentionCache<F>,
    temporal_norm: LayerNormCache<F>,
    pub temporal_attn: TemporalCache<F>,
    ffn_norm: LayerNormCache<F>,
    ffn_normed: Matrix<F>,
    ffn_pre: Matrix<F>,
    ffn_act: Matrix<F>,
}

/// Everything the backward pass needs; also exposes per-block attention
/// weights for inspection.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    x_t: Matrix<F>,
    audio_in: Matrix<F>,
    beta0_in: Matrix<F>,
    temb_raw: Matrix<F>,
    temb_pre: Matrix<F>,
    temb_act: Matrix<F>,
    pub blocks: Vec<BlockCache<F>>,
    last_hidden: Matrix<F>,
}

fn check_inputs<F: Real>(x_t: &Matrix<F>, cond: &Conditioning<F>, cfg: &DenoiserConfig) -> Result<()> {
    let expect = |name: &str, found: (usize, usize), want: (usize, usize)| {
        if found == want {
            Ok(())
        } else {
            Err(shape_err("eps_theta", format!("{name} {}x{}", want.0, want.1), format!("{}x{}", found.0, found.1)))
        }
    };
    expect("x_t", x_t.shape(), (cfg.frames, cfg.coeff_dim))?;
    expect("beta0", cond.beta0.shape(), (1, cfg.coeff_dim))?;
    expect("audio", cond.audio.shape(), (cfg.frames, cfg.audio_dim))
}

/// Forward pass of the noise predictor with its cache.
pub fn eps_theta_forward<F: Real>(
    x_t: &Matrix<F>,
    t: usize,
    cond: &Conditioning<F>,
    params: &ModelParams<F>,
    cfg: &DenoiserConfig,
    masks: &BlockMasks,
) -> Result<(Matrix<F>, ForwardCache<F>)> {
    check_inputs(x_t, cond, cfg)?;
    let temb_raw = timestep_embedding::<F>(t, cfg.width)?;
    let temb_pre = params.time_hidden.forward(&temb_raw)?;
    let temb_act = silu(&temb_pre);
    let temb = params.time_out.forward(&temb_act)?;
    let audio = params.audio.forward(&cond.audio)?;
    let beta0 = params.beta0.forward(&cond.beta0)?;

    let mut h = params.input.forward(x_t)?;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let x = h.add_row_broadcast(&temb)?;
        let (n, self_norm) = bp.self_norm.forward(&x)?;
        let b0 = cfg.use_beta0.then_some(&beta0);
        let (s, self_attn) = biased_self_attention(&n, b0, &bp.self_attn, masks.self_attn.as_ref(), masks.mode)?;
        let x = x.add(&s)?;

        let (n, cross_norm) = bp.cross_norm.forward(&x)?;
        let (c, cross_attn) = biased_cross_attention(&n, &audio, &bp.cross_attn, masks.cross.as_ref(), masks.mode)?;
        let x = x.add(&c)?;

        let (n, temporal_norm) = bp.temporal_norm.forward(&x)?;
        let latent = cfg.temporal_revision.then_some(&bp.latent);
        let (m, temporal_attn) =
            revised_temporal_attention(&n, latent, &bp.temporal_attn, masks.temporal.as_ref(), masks.mode)?;
        let x = x.add(&m)?;

        let (ffn_normed, ffn_norm) = bp.ffn_norm.forward(&x)?;
        let ffn_pre = bp.ffn_in.forward(&ffn_normed)?;
        let ffn_act = gelu(&ffn_pre);
        let f = bp.ffn_out.forward(&ffn_act)?;
        h = x.add(&f)?;
        blocks.push(BlockCache {
            self_norm,
            self_attn,
            cross_norm,
            cross_attn,
            temporal_norm,
            temporal_attn,
            ffn_norm,
            ffn_normed,
            ffn_pre,
            ffn_act,
        });
    }
    let eps = params.output.forward(&h)?;
    let cache = ForwardCache {
        x_t: x_t.clone(),
        audio_in: cond.audio.clone(),
        beta0_in: cond.beta0.clone(),
        temb_raw,
        temb_pre,
        temb_act,
        blocks,
        last_hidden: h,
    };
    Ok((eps, cache))
}

/// Predicted noise `ε̂ = ε_θ(x_t, t, β0, audio)`.
pub fn eps_theta<F: Real>(
    x_t: &Matrix<F>,
    t: usize,
    cond: &Conditioning<F>,
    params: &ModelParams<F>,
    cfg: &DenoiserConfig,
    masks: &BlockMasks,
) -> Result<Matrix<F>> {
    eps_theta_forward(x_t, t, cond, params, cfg, masks).map(|(eps, _)| eps)
}

/// Accumulates `dL/dθ` into `grads` given `dL/dε̂`; returns `dL/dx_t`.
pub fn eps_theta_backward<F: Real>(
    cache: &ForwardCache<F>,
    params: &ModelParams<F>,
    cfg: &DenoiserConfig,
    d_eps: &Matrix<F>,
    grads: &mut ModelParams<F>,
) -> Matrix<F> {
    let mut dh = params.output.backward(&cache.last_hidden, d_eps, &mut grads.output);
    let t_a = cache.audio_in.rows();
    let frames = dh.rows();
    let mut d_audio = Matrix::zeros(t_a, cfg.width);
    let mut d_beta0 = Matrix::zeros(1, cfg.width);
    let mut d_temb = Matrix::zeros(1, cfg.width);

    for (b, (bp, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let g = &mut grads.blocks[b];
        // FFN
        let d_act = bp.ffn_out.backward(&bc.ffn_act, &dh, &mut g.ffn_out);
        let d_pre = gelu_backward(&bc.ffn_pre, &d_act);
        let d_n = bp.ffn_in.backward(&bc.ffn_normed, &d_pre, &mut g.ffn_in);
        dh.add_assign(&bp.ffn_norm.backward(&bc.ffn_norm, &d_n, &mut g.ffn_norm));

        // temporal
        let latent = cfg.temporal_revision.then_some(&bp.latent);
        let latent_grads = cfg.temporal_revision.then_some(&mut g.latent);
        let d_n = revised_temporal_attention_backward(
            &bc.temporal_attn,
            latent,
            &bp.temporal_attn,
            &dh,
            &mut g.temporal_attn,
            latent_grads,
        );
        dh.add_assign(&bp.temporal_norm.backward(&bc.temporal_norm, &d_n, &mut g.temporal_norm));

        // cross: keys are [audio; normed hidden]
        let ag = bp.cross_attn.backward(&bc.cross_attn, &dh, &mut g.cross_attn);
        d_audio.add_assign(&ag.d_keys_values.slice_rows(0, t_a));
        let mut d_n = ag.d_queries;
        d_n.add_assign(&ag.d_keys_values.slice_rows(t_a, t_a + frames));
        dh.add_assign(&bp.cross_norm.backward(&bc.cross_norm, &d_n, &mut g.cross_norm));

        // self: keys are [β0; normed hidden] when conditioning is on
        let ag = bp.self_attn.backward(&bc.self_attn, &dh, &mut g.self_attn);
        let offset = usize::from(cfg.use_beta0);
        if cfg.use_beta0 {
            d_beta0.add_assign(&ag.d_keys_values.slice_rows(0, 1));
        }
        let mut d_n = ag.d_queries;
        d_n.add_assign(&ag.d_keys_values.slice_rows(offset, offset + frames));
        dh.add_assign(&bp.self_norm.backward(&bc.self_norm, &d_n, &mut g.self_norm));

        d_temb.add_assign(&dh.sum_rows());
    }

    let dx = params.input.backward(&cache.x_t, &dh, &mut grads.input);
    params.audio.backward(&cache.audio_in, &d_audio, &mut grads.audio);
    params.beta0.backward(&cache.beta0_in, &d_beta0, &mut grads.beta0);
    let d_act = params.time_out.backward(&cache.temb_act, &d_temb, &mut grads.time_out);
    let d_pre = silu_backward(&cache.temb_pre, &d_act);
    params.time_hidden.backward(&cache.temb_raw, &d_pre, &mut grads.time_hidden);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{BiasTargets, PhaseOrder};
    use crate::numeric::gradcheck::{gradient_check, DEFAULT_STEP, GRADCHECK_TOLERANCE};
    use crate::params::ParamTree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_m(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Standard initialization with a random output projection so every
    /// path carries gradient.
    fn random_model(cfg: &DenoiserConfig, seed: u64) -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(cfg, &mut rng).unwrap();
        p.output = Linear::init(cfg.width, cfg.coeff_dim, &mut rng);
        p
    }

    fn inputs(cfg: &DenoiserConfig, seed: u64) -> (Matrix<f64>, Conditioning<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_m(cfg.frames, cfg.coeff_dim, &mut rng);
        let cond = Conditioning {
            beta0: rand_m(1, cfg.coeff_dim, &mut rng),
            audio: rand_m(cfg.frames, cfg.audio_dim, &mut rng),
        };
        (x, cond)
    }

    fn all_targets() -> PhaseConfig {
        PhaseConfig {
            t_threshold: 3,
            targets: BiasTargets {
                self_attn: true,
                cross: true,
                temporal: true,
            },
            diag_floor: 0.1,
            ..PhaseConfig::default()
        }
    }

    #[test]
    fn embedding_examples() {
        let e = timestep_embedding::<f64>(0, 8).unwrap();
        for k in 0..4 {
            assert_eq!(e[(0, 2 * k)], 0.0);
            assert_eq!(e[(0, 2 * k + 1)], 1.0);
        }
        let e = timestep_embedding::<f64>(7, 2).unwrap();
        assert_eq!(e.as_slice(), &[7f64.sin(), 7f64.cos()]);
        assert!(timestep_embedding::<f64>(3, 5).is_err());
    }

    #[test]
    fn embedding_has_no_collisions() {
        for dim in [8, 16, 64] {
            let all: Vec<_> = (1..=1000).map(|t| timestep_embedding::<f64>(t, dim).unwrap()).collect();
            for (i, a) in all.iter().enumerate() {
                for b in &all[i + 1..] {
                    assert!(a.max_abs_diff(b) > 1e-9, "dim {dim}");
                }
            }
        }
    }

    #[test]
    fn output_shape_and_zero_output_projection() {
        let cfg = DenoiserConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let (x, cond) = inputs(&cfg, 2);
        let masks = BlockMasks::at(10, cfg.frames, cfg.frames, Some(&PhaseConfig::default())).unwrap();
        let eps = eps_theta(&x, 10, &cond, &p, &cfg, &masks).unwrap();
        assert_eq!(eps.shape(), (12, 64));
        assert!(eps.as_slice().iter().all(|&v| v == 0.0));
        p.output.bias = Matrix::from_fn(1, 64, |_, j| j as f64);
        let eps = eps_theta(&x, 10, &cond, &p, &cfg, &masks).unwrap();
        for i in 0..12 {
            assert_eq!(eps.row(i), p.output.bias.row(0));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = DenoiserConfig::reduced();
        let p = random_model(&cfg, 1);
        let (x, mut cond) = inputs(&cfg, 2);
        cond.audio = Matrix::zeros(cfg.frames + 1, cfg.audio_dim);
        let err = eps_theta(&x, 1, &cond, &p, &cfg, &BlockMasks::default()).unwrap_err();
        assert!(matches!(err, ModitError::DimensionMismatch { .. }));
    }

    #[test]
    fn deterministic_and_conditioning_is_live() {
        let cfg = DenoiserConfig::reduced();
        let p = random_model(&cfg, 3);
        let (x, cond) = inputs(&cfg, 4);
        let masks = BlockMasks::default();
        let a = eps_theta(&x, 5, &cond, &p, &cfg, &masks).unwrap();
        assert_eq!(a, eps_theta(&x, 5, &cond, &p, &cfg, &masks).unwrap());
        let mut c2 = cond.clone();
        c2.beta0[(0, 0)] += 0.5;
        assert!(a.max_abs_diff(&eps_theta(&x, 5, &c2, &p, &cfg, &masks).unwrap()) >= 1e-3);
        let mut c3 = cond.clone();
        c3.audio[(1, 1)] += 0.5;
        assert!(a.max_abs_diff(&eps_theta(&x, 5, &c3, &p, &cfg, &masks).unwrap()) >= 1e-3);
    }

    #[test]
    fn pure_residual_block() {
        // with every sublayer output zeroed the block passes its input through
        let cfg = DenoiserConfig::reduced();
        let mut p = random_model(&cfg, 5);
        for b in &mut p.blocks {
            for attn in [&mut b.self_attn, &mut b.cross_attn, &mut b.temporal_attn] {
                attn.output = Linear::zeros(cfg.width, cfg.width);
            }
            b.ffn_out = Linear::zeros(cfg.ffn_width, cfg.width);
        }
        p.time_out = Linear::zeros(cfg.width, cfg.width);
        let (x, cond) = inputs(&cfg, 6);
        let (_, cache) = eps_theta_forward(&x, 2, &cond, &p, &cfg, &BlockMasks::default()).unwrap();
        let h = p.input.forward(&x).unwrap();
        assert!(cache.last_hidden.max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn single_frame_sequence() {
        let cfg = DenoiserConfig {
            frames: 1,
            ..DenoiserConfig::reduced()
        };
        let p = random_model(&cfg, 7);
        let (x, cond) = inputs(&cfg, 8);
        let (eps, cache) = eps_theta_forward(&x, 2, &cond, &p, &cfg, &BlockMasks::default()).unwrap();
        assert_eq!(eps.shape(), (1, cfg.coeff_dim));
        assert_eq!(cache.blocks[0].temporal_attn.attention.weights[0][(0, 0)], 1.0);
    }

    fn check_model(cfg: &DenoiserConfig, t: usize, phase: Option<&PhaseConfig>) {
        let p = random_model(cfg, 11);
        let (x, cond) = inputs(cfg, 12);
        let masks = BlockMasks::at(t, cfg.frames, cfg.frames, phase).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r = rand_m(cfg.frames, cfg.coeff_dim, &mut rng);
        let (_, cache) = eps_theta_forward(&x, t, &cond, &p, cfg, &masks).unwrap();
        let mut grads = p.zeros_like();
        let dx = eps_theta_backward(&cache, &p, cfg, &r, &mut grads);
        let loss = |pp: &ModelParams<f64>| Ok(eps_theta(&x, t, &cond, pp, cfg, &masks)?.hadamard(&r)?.sum());
        let rep = gradient_check(&p, loss, &grads, DEFAULT_STEP).unwrap();
        assert!(rep.passes(GRADCHECK_TOLERANCE), "{rep}");
        let loss_x = |xx: &Matrix<f64>| Ok(eps_theta(xx, t, &cond, &p, cfg, &masks)?.hadamard(&r)?.sum());
        let rep = gradient_check(&x, loss_x, &dx, DEFAULT_STEP).unwrap();
        assert!(rep.passes(GRADCHECK_TOLERANCE), "{rep}");
    }

    #[test]
    fn gradients_without_masks() {
        check_model(&DenoiserConfig::reduced(), 4, None);
    }

    #[test]
    fn gradients_with_all_masks_both_phases() {
        let phase = all_targets();
        check_model(&DenoiserConfig::reduced(), 1, Some(&phase));
        check_model(&DenoiserConfig::reduced(), 7, Some(&phase));
        let prose = PhaseConfig {
            order: PhaseOrder::ProseOrder,
            mode: BiasMode::Additive,
            ..phase
        };
        check_model(&DenoiserConfig::reduced(), 1, Some(&prose));
    }

    #[test]
    fn gradients_with_switches_off() {
        let cfg = DenoiserConfig {
            use_beta0: false,
            temporal_revision: false,
            blocks: 2,
            ..DenoiserConfig::reduced()
        };
        let p = random_model(&cfg, 24);
        let (x, cond) = inputs(&cfg, 22);
        let masks = BlockMasks::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let r = rand_m(cfg.frames, cfg.coeff_dim, &mut rng);
        let (_, cache) = eps_theta_forward(&x, 3, &cond, &p, &cfg, &masks).unwrap();
        let mut grads = p.zeros_like();
        eps_theta_backward(&cache, &p, &cfg, &r, &mut grads);
        // unused paths receive no gradient
        assert!(grads.beta0.weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.blocks[1].latent.z.as_slice().iter().all(|&v| v == 0.0));
        let sub_loss = |bs: &Vec<BlockParams<f64>>| {
            let pp = ModelParams {
                blocks: bs.clone(),
                ..p.clone()
            };
            Ok(eps_theta(&x, 3, &cond, &pp, &cfg, &masks)?.hadamard(&r)?.sum())
        };
        let rep = gradient_check(&p.blocks, sub_loss, &grads.blocks, DEFAULT_STEP).unwrap();
        // latents are unused here, so their zero gradients are exact
        assert!(rep.passes(GRADCHECK_TOLERANCE), "{rep}");
    }
}
