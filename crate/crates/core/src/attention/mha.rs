//! Multi-head scaled dot-product attention with optional key prepends,
//! bias masks and additive score terms.

use rand::Rng;

use crate::attention::masks::{mask_and_renormalize, BiasMode};
use crate::error::{shape_err, Result};
use crate::numeric::ops::softmax_rows_backward;
use crate::numeric::{softmax_rows, Linear, Matrix, Real};
use crate::param_tree;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub heads: usize,
    pub query: Linear<F>,
    /// No bias: a shared key offset cancels in the row softmax.
    pub key: Matrix<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
}

param_tree!(AttentionParams { query, key, value, output });

/// How the pre-softmax scores and post-softmax weights are modified.
#[derive(Debug, Clone, Default)]
pub struct AttentionBias<'a, F> {
    /// Full `T_q × T_k` multiplier (or additive term in `Additive` mode).
    pub mask: Option<&'a Matrix<f64>>,
    pub mode: BiasMode,
    /// Added to every head's scores before the softmax.
    pub score_bias: Option<&'a Matrix<F>>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    q_in: Matrix<F>,
    kv_in: Matrix<F>,
    q: Matrix<F>,
    k: Matrix<F>,
    v: Matrix<F>,
    merged: Matrix<F>,
    /// Plain softmax weights per head, before any mask.
    pub raw: Vec<Matrix<F>>,
    /// Final weights per head.
    pub weights: Vec<Matrix<F>>,
    pub mask: Option<Matrix<f64>>,
}

pub struct AttentionGrads<F> {
    pub d_queries: Matrix<F>,
    pub d_keys_values: Matrix<F>,
    pub d_score_bias: Matrix<F>,
}

impl<F> AttentionCache<F> {
    /// Query-side and key/value-side inputs of the logged call.
    pub fn inputs(&self) -> (&Matrix<F>, &Matrix<F>) {
        (&self.q_in, &self.kv_in)
    }
}

impl<F: Real> AttentionParams<F> {
    pub fn init(width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(shape_err("AttentionParams::init", "heads dividing width", format!("{heads} heads, width {width}")));
        }
        Ok(Self {
            heads,
            query: Linear::init(width, width, rng),
            key: Linear::<F>::init(width, width, rng).weight,
            value: Linear::init(width, width, rng),
            output: Linear::init(width, width, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.query.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(
        &self,
        queries: &Matrix<F>,
        keys_values: &Matrix<F>,
        bias: &AttentionBias<'_, F>,
    ) -> Result<(Matrix<F>, AttentionCache<F>)> {
        let width = self.width();
        if queries.cols() != width || keys_values.cols() != width {
            return Err(shape_err(
                "attention",
                format!("width {width}"),
                format!("{} / {}", queries.cols(), keys_values.cols()),
            ));
        }
        let (t_q, t_k) = (queries.rows(), keys_values.rows());
        for m in bias.mask.iter().map(|m| m.shape()).chain(bias.score_bias.iter().map(|m| m.shape())) {
            if m != (t_q, t_k) {
                return Err(shape_err("attention bias", format!("{t_q}x{t_k}"), format!("{}x{}", m.0, m.1)));
            }
        }
        let q = self.query.forward(queries)?;
        let k = keys_values.matmul(&self.key)?;
        let v = self.value.forward(keys_values)?;
        let dk = self.head_dim();
        let scale = F::one() / F::of(dk as f64).sqrt();

        let mut merged = Matrix::zeros(t_q, width);
        let mut raw = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.col_block(h * dk, dk);
            let kh = k.col_block(h * dk, dk);
            let vh = v.col_block(h * dk, dk);
            let mut scores = qh.matmul_t(&kh)?.scale(scale);
            if let Some(b) = bias.score_bias {
                scores.add_assign(b);
            }
            let plain = softmax_rows(&scores)?;
            let w = match (bias.mask, bias.mode) {
                (None, _) => plain.clone(),
                (Some(m), BiasMode::Multiplicative) => mask_and_renormalize(&plain, m)?,
                (Some(m), BiasMode::Additive) => {
                    let shifted = scores.zip_map(&m.cast(), |s, b| s + b)?;
                    softmax_rows(&shifted)?
                }
            };
            merged.set_col_block(h * dk, &w.matmul(&vh)?);
            raw.push(plain);
            weights.push(w);
        }
        let out = self.output.forward(&merged)?;
        let cache = AttentionCache {
            q_in: queries.clone(),
            kv_in: keys_values.clone(),
            q,
            k,
            v,
            merged,
            raw,
            weights,
            mask: bias.mask.cloned(),
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grads`.
    pub fn backward(&self, cache: &AttentionCache<F>, d_out: &Matrix<F>, grads: &mut Self) -> AttentionGrads<F> {
        let d_merged = self.output.backward(&cache.merged, d_out, &mut grads.output);
        let dk = self.head_dim();
        let scale = F::one() / F::of(dk as f64).sqrt();
        let (t_q, t_k) = (cache.q.rows(), cache.k.rows());
        let mut dq = Matrix::zeros(t_q, self.width());
        let mut dkm = Matrix::zeros(t_k, self.width());
        let mut dv = Matrix::zeros(t_k, self.width());
        let mut d_score_bias = Matrix::zeros(t_q, t_k);
        for h in 0..self.heads {
            let w = &cache.weights[h];
            let qh = cache.q.col_block(h * dk, dk);
            let kh = cache.k.col_block(h * dk, dk);
            let vh = cache.v.col_block(h * dk, dk);
            let d_oh = d_merged.col_block(h * dk, dk);
            let dw = d_oh.matmul_t(&vh).expect("shapes");
            dv.add_col_block(h * dk, &w.t_matmul(&d_oh).expect("shapes"));
            // Masked-and-renormalized weights equal softmax(s + ln m), so the
            // softmax Jacobian at the final weights applies in every mode.
            let ds = softmax_rows_backward(w, &dw);
            d_score_bias.add_assign(&ds);
            let ds = ds.scale(scale);
            dq.add_col_block(h * dk, &ds.matmul(&kh).expect("shapes"));
            dkm.add_col_block(h * dk, &ds.t_matmul(&qh).expect("shapes"));
        }
        let d_queries = self.query.backward(&cache.q_in, &dq, &mut grads.query);
        grads.key.add_assign(&cache.kv_in.t_matmul(&dkm).expect("shapes"));
        let mut d_keys_values = dkm.matmul_t(&self.key).expect("shapes");
        d_keys_values.add_assign(&self.value.backward(&cache.kv_in, &dv, &mut grads.value));
        AttentionGrads {
            d_queries,
            d_keys_values,
            d_score_bias,
        }
    }
}

/// Mask over `[β0; X]` keys: the conditioning column is left at 1.
pub fn self_attention_mask(core: &Matrix<f64>, with_beta0: bool) -> Matrix<f64> {
    if with_beta0 {
        Matrix::filled(core.rows(), 1, 1.0).hstack(core).expect("same rows")
    } else {
        core.clone()
    }
}

/// Mask over `[A; H]` keys: the audio block and the hidden block each get
/// their own alignment mask.
pub fn cross_attention_mask(audio_block: &Matrix<f64>, hidden_block: &Matrix<f64>) -> Result<Matrix<f64>> {
    audio_block.hstack(hidden_block)
}

/// Self-attention with the conditioning row prepended to keys and values.
/// Returns the output (without residual) and the cache.
pub fn biased_self_attention<F: Real>(
    x: &Matrix<F>,
    beta0: Option<&Matrix<F>>,
    params: &AttentionParams<F>,
    mask: Option<&Matrix<f64>>,
    mode: BiasMode,
) -> Result<(Matrix<F>, AttentionCache<F>)> {
    let kv = match beta0 {
        Some(b) => b.vstack(x)?,
        None => x.clone(),
    };
    let full = mask.map(|m| self_attention_mask(m, beta0.is_some()));
    let bias = AttentionBias {
        mask: full.as_ref(),
        mode,
        score_bias: None,
    };
    params.forward(x, &kv, &bias)
}

/// Cross-attention over the audio latents prepended to the hidden sequence.
/// `mask`, when present, covers the full `T × (T_a + T)` key axis.
pub fn biased_cross_attention<F: Real>(
    h: &Matrix<F>,
    audio: &Matrix<F>,
    params: &AttentionParams<F>,
    mask: Option<&Matrix<f64>>,
    mode: BiasMode,
) -> Result<(Matrix<F>, AttentionCache<F>)> {
    let kv = audio.vstack(h)?;
    let bias = AttentionBias {
        mask,
        mode,
        score_bias: None,
    };
    params.forward(h, &kv, &bias)
}
