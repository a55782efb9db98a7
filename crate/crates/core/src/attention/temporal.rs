//! Temporal attention whose scores receive a learned relative-offset term.

use rand::Rng;

use crate::attention::masks::BiasMode;
use crate::attention::mha::{AttentionBias, AttentionCache, AttentionParams};
use crate::error::{ModitError, Result};
use crate::numeric::ops::{leaky_relu, leaky_relu_backward, LEAKY_SLOPE};
use crate::numeric::{Linear, Matrix, Real};
use crate::param_tree;

pub const DEFAULT_LATENT_DIM: usize = 8;
pub const DEFAULT_HIDDEN: usize = 16;

/// One latent row per relative offset `j − i ∈ [−(T−1), T−1]`, mapped to a
/// scalar score term by a two-layer LeakyReLU MLP. Neither layer has a bias:
/// a constant score offset cancels in the softmax, and the per-offset latents
/// already give every table entry its own free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalLatent<F> {
    pub z: Matrix<F>,
    pub hidden: Matrix<F>,
    pub out: Matrix<F>,
}

param_tree!(TemporalLatent { z, hidden, out });

#[derive(Debug, Clone)]
pub struct TemporalBiasCache<F> {
    pre: Matrix<F>,
    act: Matrix<F>,
}

impl<F: Real> TemporalLatent<F> {
    pub fn init(frames: usize, latent_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let z = Matrix::from_fn(2 * frames - 1, latent_dim, |_, _| F::of(rng.random_range(-1.0..1.0)));
        Self {
            z,
            hidden: Linear::<F>::init(latent_dim, hidden, rng).weight,
            out: Linear::<F>::init(hidden, 1, rng).weight,
        }
    }

    /// Largest sequence length whose offsets are covered.
    pub fn max_frames(&self) -> usize {
        (self.z.rows() + 1) / 2
    }

    /// `f(z_o)` for every offset, index `o + T − 1`.
    pub fn offset_table(&self) -> Result<(Vec<F>, TemporalBiasCache<F>)> {
        let pre = self.z.matmul(&self.hidden)?;
        let act = leaky_relu(&pre, F::of(LEAKY_SLOPE));
        let table = act.matmul(&self.out)?.into_vec();
        Ok((table, TemporalBiasCache { pre, act }))
    }

    /// `T × T` matrix with entry `(i, j) = f(z_{j−i})`.
    pub fn score_bias(&self, frames: usize) -> Result<(Matrix<F>, TemporalBiasCache<F>)> {
        if frames > self.max_frames() || frames == 0 {
            return Err(ModitError::InvalidArgument(format!(
                "temporal latent covers {} frames, got {frames}",
                self.max_frames()
            )));
        }
        let (table, cache) = self.offset_table()?;
        let center = self.max_frames() - 1;
        let bias = Matrix::from_fn(frames, frames, |i, j| table[center + j - i]);
        Ok((bias, cache))
    }

    pub fn backward(&self, cache: &TemporalBiasCache<F>, d_bias: &Matrix<F>, grads: &mut Self) {
        let center = self.max_frames() - 1;
        let mut d_table = Matrix::zeros(self.z.rows(), 1);
        for i in 0..d_bias.rows() {
            for j in 0..d_bias.cols() {
                d_table[(center + j - i, 0)] += d_bias[(i, j)];
            }
        }
        grads.out.add_assign(&cache.act.t_matmul(&d_table).expect("shapes"));
        let d_act = d_table.matmul_t(&self.out).expect("shapes");
        let d_pre = leaky_relu_backward(&cache.pre, &d_act, F::of(LEAKY_SLOPE));
        grads.hidden.add_assign(&self.z.t_matmul(&d_pre).expect("shapes"));
        grads.z.add_assign(&d_pre.matmul_t(&self.hidden).expect("shapes"));
    }
}

#[derive(Debug, Clone)]
pub struct TemporalCache<F> {
    pub attention: AttentionCache<F>,
    bias: Option<TemporalBiasCache<F>>,
}

/// Temporal self-attention over `h`. With `latent = None` this is plain
/// attention; otherwise `f(z_{j−i})` is added to every score before softmax.
pub fn revised_temporal_attention<F: Real>(
    h: &Matrix<F>,
    latent: Option<&TemporalLatent<F>>,
    params: &AttentionParams<F>,
    mask: Option<&Matrix<f64>>,
    mode: BiasMode,
) -> Result<(Matrix<F>, TemporalCache<F>)> {
    let (score_bias, bias_cache) = match latent {
        Some(l) => {
            let (b, c) = l.score_bias(h.rows())?;
            (Some(b), Some(c))
        }
        None => (None, None),
    };
    let bias = AttentionBias {
        mask,
        mode,
        score_bias: score_bias.as_ref(),
    };
    let (out, attention) = params.forward(h, h, &bias)?;
    Ok((out, TemporalCache { attention, bias: bias_cache }))
}

/// Returns `dL/dh`; parameter gradients are accumulated into the grads.
pub fn revised_temporal_attention_backward<F: Real>(
    cache: &TemporalCache<F>,
    latent: Option<&TemporalLatent<F>>,
    params: &AttentionParams<F>,
    d_out: &Matrix<F>,
    grads: &mut AttentionParams<F>,
    latent_grads: Option<&mut TemporalLatent<F>>,
) -> Matrix<F> {
    let g = params.backward(&cache.attention, d_out, grads);
    if let (Some(l), Some(lg), Some(bc)) = (latent, latent_grads, cache.bias.as_ref()) {
        l.backward(bc, &g.d_score_bias, lg);
    }
    let mut dh = g.d_queries;
    dh.add_assign(&g.d_keys_values);
    dh
}
