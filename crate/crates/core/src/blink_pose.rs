//! Blink fusion and binned pose heads over windows of expression
//! coefficients, plus linear face-shape assembly on a toy basis.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::error::{shape_err, ModitError, Result};
use crate::numeric::ops::{leaky_relu, leaky_relu_backward, softmax_rows, Linear, LEAKY_SLOPE};
use crate::numeric::{Matrix, Real};
use crate::param_tree;
use crate::params::ParamTree;
use crate::rng::stream;
use crate::synth::blink_track;
use crate::training::{AdamW, AdamWConfig};

/// Per-frame eye closure in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlinkTrack(Vec<f64>);

impl BlinkTrack {
    /// Clamps every entry into `[0, 1]`.
    pub fn new(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ModitError::NonFinite("blink track".into()));
        }
        Ok(Self(v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()))
    }

    pub fn constant(frames: usize, intensity: f64) -> Self {
        Self(vec![intensity.clamp(0.0, 1.0); frames])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for AngleRange {
    fn default() -> Self {
        Self {
            lo: -FRAC_PI_2,
            hi: FRAC_PI_2,
        }
    }
}

impl AngleRange {
    /// Centers of `bins` equal-width bins.
    pub fn centers(&self, bins: usize) -> Vec<f64> {
        let width = (self.hi - self.lo) / bins as f64;
        (0..bins).map(|k| self.lo + (k as f64 + 0.5) * width).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlinkPoseConfig {
    pub coeff_dim: usize,
    pub channels: usize,
    pub stages: usize,
    pub kernel: usize,
    pub bins: usize,
    pub range: AngleRange,
}

impl Default for BlinkPoseConfig {
    fn default() -> Self {
        Self {
            coeff_dim: 64,
            channels: 32,
            stages: 3,
            kernel: 3,
            bins: 66,
            range: AngleRange::default(),
        }
    }
}

impl BlinkPoseConfig {
    /// Small shapes for gradient checks.
    pub fn reduced() -> Self {
        Self {
            coeff_dim: 4,
            channels: 5,
            stages: 2,
            kernel: 3,
            bins: 6,
            range: AngleRange::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ModitError::InvalidArgument(msg.to_string()));
        if self.coeff_dim == 0 || self.channels == 0 || self.stages == 0 {
            return bad("blink/pose dimensions must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("conv kernel must be odd");
        }
        if self.bins < 2 {
            return bad("pose heads need at least 2 bins");
        }
        if !(self.range.lo < self.range.hi) {
            return bad("angle range must satisfy lo < hi");
        }
        Ok(())
    }
}

/// 1-D convolution over frames with zero "same" padding. `weight` is
/// `(kernel · in) × out`, tap-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<F> {
    pub weight: Matrix<F>,
    pub bias: Matrix<F>,
    pub kernel: usize,
}

param_tree!(Conv1d { weight, bias });

impl<F: Real> Conv1d<F> {
    pub fn init(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let lin = Linear::init(kernel * in_ch, out_ch, rng);
        Self {
            weight: lin.weight,
            bias: lin.bias,
            kernel,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Matrix::zeros(kernel * in_ch, out_ch),
            bias: Matrix::zeros(1, out_ch),
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.rows() / self.kernel
    }

    fn unfold(&self, x: &Matrix<F>) -> Matrix<F> {
        let (frames, ch) = x.shape();
        let r = self.kernel / 2;
        let mut cols = Matrix::zeros(frames, self.kernel * ch);
        for i in 0..frames {
            for k in 0..self.kernel {
                let Some(src) = (i + k).checked_sub(r).filter(|&s| s < frames) else {
                    continue;
                };
                cols.row_mut(i)[k * ch..(k + 1) * ch].copy_from_slice(x.row(src));
            }
        }
        cols
    }

    /// Returns the output and the unfolded input kept for backward.
    pub fn forward(&self, x: &Matrix<F>) -> Result<(Matrix<F>, Matrix<F>)> {
        if x.cols() != self.in_channels() {
            return Err(shape_err("conv1d", format!("{} channels", self.in_channels()), x.cols().to_string()));
        }
        let cols = self.unfold(x);
        let y = cols.matmul(&self.weight)?.add_row_broadcast(&self.bias)?;
        Ok((y, cols))
    }

    pub fn backward(&self, cols: &Matrix<F>, dy: &Matrix<F>, grad: &mut Self) -> Matrix<F> {
        grad.weight.add_assign(&cols.t_matmul(dy).expect("conv backward shapes"));
        grad.bias.add_assign(&dy.sum_rows());
        let dcols = dy.matmul_t(&self.weight).expect("conv backward shapes");
        let frames = dy.rows();
        let ch = self.in_channels();
        let r = self.kernel / 2;
        let mut dx = Matrix::zeros(frames, ch);
        for i in 0..frames {
            for k in 0..self.kernel {
                let Some(src) = (i + k).checked_sub(r).filter(|&s| s < frames) else {
                    continue;
                };
                let d = &dcols.row(i)[k * ch..(k + 1) * ch];
                for (o, v) in dx.row_mut(src).iter_mut().zip(d) {
                    *o += *v;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlinkPoseParams<F> {
    pub stages: Vec<Conv1d<F>>,
    pub yaw: Linear<F>,
    pub pitch: Linear<F>,
    pub roll: Linear<F>,
    pub translation: Linear<F>,
    pub delta: Linear<F>,
}

param_tree!(BlinkPoseParams {
    stages,
    yaw,
    pitch,
    roll,
    translation,
    delta,
});

impl<F: Real> BlinkPoseParams<F> {
    pub fn init(cfg: &BlinkPoseConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stages = (0..cfg.stages)
            .map(|s| {
                let in_ch = if s == 0 { cfg.coeff_dim + 1 } else { c };
                Conv1d::init(in_ch, c, cfg.kernel, rng)
            })
            .collect();
        Ok(Self {
            stages,
            yaw: Linear::init(c, cfg.bins, rng),
            pitch: Linear::init(c, cfg.bins, rng),
            roll: Linear::init(c, cfg.bins, rng),
            translation: Linear::init(c, 3, rng),
            delta: Linear::init(c, cfg.coeff_dim, rng),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FuseCache<F> {
    cols: Vec<Matrix<F>>,
    pre: Vec<Matrix<F>>,
}

fn fuse_input<F: Real>(beta_window: &Matrix<F>, blink: &BlinkTrack, cfg: &BlinkPoseConfig) -> Result<Matrix<F>> {
    let frames = beta_window.rows();
    if frames < 3 {
        return Err(ModitError::InsufficientSequence { len: frames, min: 3 });
    }
    if beta_window.cols() != cfg.coeff_dim {
        return Err(shape_err("blink_fuse", format!("{} coefficients", cfg.coeff_dim), beta_window.cols().to_string()));
    }
    if blink.len() != frames {
        return Err(shape_err("blink_fuse", format!("{frames} blink frames"), blink.len().to_string()));
    }
    let column = Matrix::from_fn(frames, 1, |i, _| F::of(blink.as_slice()[i]));
    beta_window.hstack(&column)
}

/// Concatenates the blink channel to the window and runs the conv stages.
pub fn blink_fuse<F: Real>(
    beta_window: &Matrix<F>,
    blink: &BlinkTrack,
    params: &BlinkPoseParams<F>,
    cfg: &BlinkPoseConfig,
) -> Result<(Matrix<F>, FuseCache<F>)> {
    let mut x = fuse_input(beta_window, blink, cfg)?;
    let slope = F::of(LEAKY_SLOPE);
    let mut cache = FuseCache {
        cols: Vec::with_capacity(params.stages.len()),
        pre: Vec::with_capacity(params.stages.len()),
    };
    for conv in &params.stages {
        let (pre, cols) = conv.forward(&x)?;
        x = leaky_relu(&pre, slope);
        cache.cols.push(cols);
        cache.pre.push(pre);
    }
    Ok((x, cache))
}

/// Returns `dL/d(beta_window)`.
pub fn blink_fuse_backward<F: Real>(
    cache: &FuseCache<F>,
    params: &BlinkPoseParams<F>,
    d_features: &Matrix<F>,
    grads: &mut BlinkPoseParams<F>,
) -> Matrix<F> {
    let slope = F::of(LEAKY_SLOPE);
    let mut d = d_features.clone();
    for (s, conv) in params.stages.iter().enumerate().rev() {
        let d_pre = leaky_relu_backward(&cache.pre[s], &d, slope);
        d = conv.backward(&cache.cols[s], &d_pre, &mut grads.stages[s]);
    }
    d.col_block(0, d.cols() - 1)
}

/// One frame of head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseOutput<F> {
    pub yaw: F,
    pub pitch: F,
    pub roll: F,
    pub tr_prime: [F; 3],
    pub delta_prime: Vec<F>,
}

/// Head outputs for a whole window; also used as the gradient container
/// for those outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence<F> {
    pub yaw: Vec<F>,
    pub pitch: Vec<F>,
    pub roll: Vec<F>,
    pub translation: Matrix<F>,
    pub delta: Matrix<F>,
}

impl<F: Real> PoseSequence<F> {
    pub fn frames(&self) -> usize {
        self.yaw.len()
    }

    pub fn frame(&self, i: usize) -> PoseOutput<F> {
        let tr = self.translation.row(i);
        PoseOutput {
            yaw: self.yaw[i],
            pitch: self.pitch[i],
            roll: self.roll[i],
            tr_prime: [tr[0], tr[1], tr[2]],
            delta_prime: self.delta.row(i).to_vec(),
        }
    }

    pub fn zeros(frames: usize, coeff_dim: usize) -> Self {
        Self {
            yaw: vec![F::zero(); frames],
            pitch: vec![F::zero(); frames],
            roll: vec![F::zero(); frames],
            translation: Matrix::zeros(frames, 3),
            delta: Matrix::zeros(frames, coeff_dim),
        }
    }

    /// Sum of elementwise products over every output.
    pub fn dot(&self, other: &Self) -> F {
        let vec_dot = |a: &[F], b: &[F]| a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + *x * *y);
        vec_dot(&self.yaw, &other.yaw)
            + vec_dot(&self.pitch, &other.pitch)
            + vec_dot(&self.roll, &other.roll)
            + vec_dot(self.translation.as_slice(), other.translation.as_slice())
            + vec_dot(self.delta.as_slice(), other.delta.as_slice())
    }
}

/// Expected bin center under the row softmax of `logits`, plus the
/// probabilities.
pub fn binned_expectation<F: Real>(logits: &Matrix<F>, centers: &[f64]) -> Result<(Vec<F>, Matrix<F>)> {
    if logits.cols() != centers.len() {
        return Err(shape_err("binned_expectation", format!("{} bins", centers.len()), logits.cols().to_string()));
    }
    let probs = softmax_rows(logits)?;
    let values = (0..probs.rows())
        .map(|i| probs.row(i).iter().zip(centers).fold(F::zero(), |acc, (p, c)| acc + *p * F::of(*c)))
        .collect();
    Ok((values, probs))
}

pub fn binned_expectation_backward<F: Real>(probs: &Matrix<F>, values: &[F], centers: &[f64], d_values: &[F]) -> Matrix<F> {
    Matrix::from_fn(probs.rows(), probs.cols(), |i, k| {
        probs[(i, k)] * (F::of(centers[k]) - values[i]) * d_values[i]
    })
}

#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    features: Matrix<F>,
    angles: [(Vec<F>, Matrix<F>); 3],
}

/// Angle heads are binned softmax expectations; translation and the
/// expression adjustment are plain linear maps.
pub fn pose_head<F: Real>(
    features: &Matrix<F>,
    params: &BlinkPoseParams<F>,
    cfg: &BlinkPoseConfig,
) -> Result<(PoseSequence<F>, HeadCache<F>)> {
    let centers = cfg.range.centers(cfg.bins);
    let head = |lin: &Linear<F>| -> Result<(Vec<F>, Matrix<F>)> { binned_expectation(&lin.forward(features)?, &centers) };
    let yaw = head(&params.yaw)?;
    let pitch = head(&params.pitch)?;
    let roll = head(&params.roll)?;
    let out = PoseSequence {
        yaw: yaw.0.clone(),
        pitch: pitch.0.clone(),
        roll: roll.0.clone(),
        translation: params.translation.forward(features)?,
        delta: params.delta.forward(features)?,
    };
    Ok((
        out,
        HeadCache {
            features: features.clone(),
            angles: [yaw, pitch, roll],
        },
    ))
}

/// Returns `dL/d(features)`.
pub fn pose_head_backward<F: Real>(
    cache: &HeadCache<F>,
    params: &BlinkPoseParams<F>,
    cfg: &BlinkPoseConfig,
    d_out: &PoseSequence<F>,
    grads: &mut BlinkPoseParams<F>,
) -> Matrix<F> {
    let centers = cfg.range.centers(cfg.bins);
    let x = &cache.features;
    let mut dx = params.translation.backward(x, &d_out.translation, &mut grads.translation);
    dx.add_assign(&params.delta.backward(x, &d_out.delta, &mut grads.delta));
    let [yaw, pitch, roll] = &cache.angles;
    for ((lin, grad), ((values, probs), d)) in [
        (&params.yaw, &mut grads.yaw),
        (&params.pitch, &mut grads.pitch),
        (&params.roll, &mut grads.roll),
    ]
    .into_iter()
    .zip([(yaw, &d_out.yaw), (pitch, &d_out.pitch), (roll, &d_out.roll)])
    {
        let d_logits = binned_expectation_backward(probs, values, &centers, d);
        dx.add_assign(&lin.backward(x, &d_logits, grad));
    }
    dx
}

#[derive(Debug, Clone)]
pub struct BlinkPoseCache<F> {
    pub fuse: FuseCache<F>,
    pub head: HeadCache<F>,
}

/// Fused features feed every head in parallel.
pub fn blink_pose_forward<F: Real>(
    beta_window: &Matrix<F>,
    blink: &BlinkTrack,
    params: &BlinkPoseParams<F>,
    cfg: &BlinkPoseConfig,
) -> Result<(PoseSequence<F>, BlinkPoseCache<F>)> {
    let (features, fuse) = blink_fuse(beta_window, blink, params, cfg)?;
    let (out, head) = pose_head(&features, params, cfg)?;
    Ok((out, BlinkPoseCache { fuse, head }))
}

pub fn blink_pose_backward<F: Real>(
    cache: &BlinkPoseCache<F>,
    params: &BlinkPoseParams<F>,
    cfg: &BlinkPoseConfig,
    d_out: &PoseSequence<F>,
    grads: &mut BlinkPoseParams<F>,
) -> Matrix<F> {
    let d_features = pose_head_backward(&cache.head, params, cfg, d_out, grads);
    blink_fuse_backward(&cache.fuse, params, &d_features, grads)
}

/// Index of the expression coefficient that closes the eye on the
/// constructed basis.
pub const EYELID_COEFF: usize = 0;

/// Mean squared error of the expression adjustment against a target that
/// is the blink intensity on [`EYELID_COEFF`] and zero elsewhere. Returns
/// the loss and `dL/d(delta)`.
pub fn blink_delta_loss<F: Real>(delta: &Matrix<F>, blink: &BlinkTrack) -> Result<(F, Matrix<F>)> {
    if delta.rows() != blink.len() || delta.cols() <= EYELID_COEFF {
        return Err(shape_err("blink_delta_loss", format!("{} frames", blink.len()), delta.rows().to_string()));
    }
    let n = F::of(delta.len() as f64);
    let diff = Matrix::from_fn(delta.rows(), delta.cols(), |i, j| {
        let target = if j == EYELID_COEFF { blink.as_slice()[i] } else { 0.0 };
        delta[(i, j)] - F::of(target)
    });
    let loss = diff.sum_squares() / n;
    Ok((loss, diff.scale(F::of(2.0) / n)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlinkTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub frames: usize,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for BlinkTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            frames: 12,
            seed: 0,
            adam: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Draws a blink track for slot `slot` of step `step`: alternately a
/// constant intensity or raised-cosine pulses scaled by a random peak.
fn training_track(seed: u64, step: u64, slot: usize, frames: usize) -> BlinkTrack {
    let mut rng = stream(seed, &[30, step, slot as u64]);
    if slot % 2 == 0 {
        BlinkTrack::constant(frames, rng.random_range(0.0..=1.0))
    } else {
        let peak: f64 = rng.random_range(0.5..=1.0);
        BlinkTrack(blink_track(frames, &mut rng).into_iter().map(|v| v * peak).collect())
    }
}

/// Supervised training of the fusion stages and the adjustment head on
/// synthetic blink tracks. `windows` supplies expression context; slots
/// cycle through it. Returns the mean loss of the final step.
pub fn train_blink_head(
    params: &mut BlinkPoseParams<f64>,
    cfg: &BlinkPoseConfig,
    windows: &[Matrix<f64>],
    train: &BlinkTrainConfig,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(ModitError::InvalidArgument("blink training needs at least one window".into()));
    }
    if let Some(w) = windows.iter().find(|w| w.rows() != train.frames) {
        return Err(shape_err("train_blink_head", format!("{} frames", train.frames), w.rows().to_string()));
    }
    let mut opt = AdamW::new(params, train.adam);
    let mut last = f64::NAN;
    for step in 0..train.steps {
        let mut grads = params.zeros_like();
        let mut total = 0.0;
        for slot in 0..train.batch_size {
            let window = &windows[(step as usize * train.batch_size + slot) % windows.len()];
            let blink = training_track(train.seed, step, slot, train.frames);
            let (out, cache) = blink_pose_forward(window, &blink, params, cfg)?;
            let (loss, d_delta) = blink_delta_loss(&out.delta, &blink)?;
            let mut d_out = PoseSequence::zeros(train.frames, cfg.coeff_dim);
            d_out.delta = d_delta;
            blink_pose_backward(&cache, params, cfg, &d_out, &mut grads);
            total += loss;
        }
        grads.scale_all(1.0 / train.batch_size as f64);
        if !total.is_finite() {
            return Err(ModitError::NonFinite(format!("blink loss at step {step}")));
        }
        opt.update(params, &grads);
        last = total / train.batch_size as f64;
    }
    Ok(last)
}

/// Linear face model: a mean shape plus identity and expression
/// displacement fields. Row `k` of `identity`/`expression` holds component
/// `k` as a flattened `V × 3` field.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFaceBasis {
    pub mean: Matrix<f64>,
    pub identity: Matrix<f64>,
    pub expression: Matrix<f64>,
}

/// Upper and lower eyelid vertices of the constructed basis.
pub const EYELID_PAIR: (usize, usize) = (0, 1);
/// Lid separation of the constructed neutral face. Full closure moves the
/// upper lid by 1, leaving a small gap.
pub const OPEN_EYE_GAP: f64 = 1.1;

impl ToyFaceBasis {
    pub fn vertices(&self) -> usize {
        self.mean.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertices();
        if v < 4 || self.mean.cols() != 3 {
            return Err(ModitError::InvalidArgument(format!("basis needs at least 4 vertices in 3-D, got {v}")));
        }
        for (name, m) in [("identity", &self.identity), ("expression", &self.expression)] {
            if m.cols() != 3 * v {
                return Err(shape_err("face basis", format!("{name} with {} columns", 3 * v), m.cols().to_string()));
            }
            for k in 0..m.rows() {
                let norm: f64 = m.row(k).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(ModitError::InvalidArgument(format!("{name} component {k} has norm {norm}")));
                }
            }
        }
        Ok(())
    }

    /// Basis whose expression component [`EYELID_COEFF`] moves only the
    /// upper lid, by `(0, 0, 1)` toward the lower lid. Every other component
    /// leaves both lids fixed.
    pub fn constructed(vertices: usize, id_dim: usize, exp_dim: usize, seed: u64) -> Result<Self> {
        if vertices < 4 {
            return Err(ModitError::InvalidArgument(format!("basis needs at least 4 vertices, got {vertices}")));
        }
        let mut rng = stream(seed, &[40]);
        let mut mean = Matrix::from_fn(vertices, 3, |_, _| rng.random_range(-1.0..1.0));
        mean.row_mut(EYELID_PAIR.0).copy_from_slice(&[0.0, 0.0, 0.0]);
        mean.row_mut(EYELID_PAIR.1).copy_from_slice(&[0.0, 0.0, OPEN_EYE_GAP]);
        let field = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut row: Vec<f64> = (0..3 * vertices).map(|_| rng.random_range(-1.0..1.0)).collect();
            row[..6].fill(0.0);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let identity = Matrix::from_rows(&(0..id_dim).map(|_| field(&mut rng)).collect::<Vec<_>>())?;
        let mut exp_rows: Vec<Vec<f64>> = (0..exp_dim).map(|_| field(&mut rng)).collect();
        if let Some(lid) = exp_rows.get_mut(EYELID_COEFF) {
            lid.fill(0.0);
            lid[3 * EYELID_PAIR.0 + 2] = 1.0;
        }
        let basis = Self {
            mean,
            identity,
            expression: Matrix::from_rows(&exp_rows)?,
        };
        basis.validate()?;
        Ok(basis)
    }
}

/// `S = S̄ + α·U_id + β·U_exp`, returned as `V × 3`.
pub fn assemble_shape(alpha_id: &[f64], beta_exp: &[f64], basis: &ToyFaceBasis) -> Result<Matrix<f64>> {
    if alpha_id.len() != basis.identity.rows() {
        return Err(shape_err("assemble_shape", format!("{} identity coefficients", basis.identity.rows()), alpha_id.len().to_string()));
    }
    if beta_exp.len() != basis.expression.rows() {
        return Err(shape_err("assemble_shape", format!("{} expression coefficients", basis.expression.rows()), beta_exp.len().to_string()));
    }
    let mut shape = basis.mean.as_slice().to_vec();
    for (coeffs, fields) in [(alpha_id, &basis.identity), (beta_exp, &basis.expression)] {
        for (k, &c) in coeffs.iter().enumerate() {
            for (s, f) in shape.iter_mut().zip(fields.row(k)) {
                *s += c * f;
            }
        }
    }
    Matrix::from_vec(basis.vertices(), 3, shape)
}

/// Euclidean distance between two vertices.
pub fn eye_closure_distance(vertices: &Matrix<f64>, pair: (usize, usize)) -> Result<f64> {
    let limit = vertices.rows();
    for index in [pair.0, pair.1] {
        if index >= limit {
            return Err(ModitError::IndexOutOfRange { index, limit });
        }
    }
    let (a, b) = (vertices.row(pair.0), vertices.row(pair.1));
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Eyelid distance for each intensity, using the trained head's adjustment
/// at the middle frame of a constant-intensity window on top of `window`.
pub fn blink_distance_curve(
    params: &BlinkPoseParams<f64>,
    cfg: &BlinkPoseConfig,
    window: &Matrix<f64>,
    basis: &ToyFaceBasis,
    intensities: &[f64],
) -> Result<Vec<f64>> {
    let frames = window.rows();
    let alpha = vec![0.0; basis.identity.rows()];
    intensities
        .iter()
        .map(|&c| {
            let (out, _) = blink_pose_forward(window, &BlinkTrack::constant(frames, c), params, cfg)?;
            let shape = assemble_shape(&alpha, out.delta.row(frames / 2), basis)?;
            eye_closure_distance(&shape, EYELID_PAIR)
        })
        .collect()
}
