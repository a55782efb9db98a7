//! Forward and hand-written backward kernels shared by every layer.

use rand::Rng;

use crate::error::{shape_err, ModitError, Result};
use crate::numeric::{Matrix, Real};
use crate::param_tree;

/// Row-wise softmax. `-inf` entries act as hard masks; a row that is masked
/// everywhere is rejected.
pub fn softmax_rows<F: Real>(scores: &Matrix<F>) -> Result<Matrix<F>> {
    let mut out = scores.clone();
    for i in 0..scores.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        if max == F::neg_infinity() {
            return Err(ModitError::DegenerateMask { row: i });
        }
        if !max.is_finite() {
            return Err(ModitError::NonFinite(format!("softmax row {i}")));
        }
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Gradient of a row-softmax given its output `w` and upstream `dw`:
/// `ds = w ⊙ (dw − rowsum(w ⊙ dw))`.
pub fn softmax_rows_backward<F: Real>(w: &Matrix<F>, dw: &Matrix<F>) -> Matrix<F> {
    let mut ds = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let wr = w.row(i);
        let dr = dw.row(i);
        let dot: F = wr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for (o, (&a, &b)) in ds.row_mut(i).iter_mut().zip(wr.iter().zip(dr)) {
            *o = a * (b - dot);
        }
    }
    ds
}

/// `y = x·W + b` with `b` broadcast over rows.
pub fn linear_forward<F: Real>(x: &Matrix<F>, w: &Matrix<F>, b: &[F]) -> Result<Matrix<F>> {
    if b.len() != w.cols() {
        return Err(shape_err("linear_forward bias", w.cols().to_string(), b.len().to_string()));
    }
    x.matmul(w)?.add_row_broadcast(&Matrix::row_vector(b))
}

/// Fully connected layer. `weight` is `in × out`, `bias` is `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Matrix<F>,
    pub bias: Matrix<F>,
}

param_tree!(Linear { weight, bias });

impl<F: Real> Linear<F> {
    /// Uniform initialization in `±1/√fan_in` for both weight and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |_, _| F::of(rng.random_range(-bound..bound));
        let weight = Matrix::from_fn(fan_in, fan_out, &mut draw);
        let bias = Matrix::from_fn(1, fan_out, &mut draw);
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        linear_forward(x, &self.weight, self.bias.as_slice())
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix<F>, dy: &Matrix<F>, grad: &mut Self) -> Matrix<F> {
        grad.weight.add_assign(&x.t_matmul(dy).expect("linear backward shapes"));
        grad.bias.add_assign(&dy.sum_rows());
        dy.matmul_t(&self.weight).expect("linear backward shapes")
    }
}

/// Per-row normalization with learned gain and shift (`1 × cols` each).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Matrix<F>,
    pub shift: Matrix<F>,
}

param_tree!(LayerNorm { gain, shift });

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    normalized: Matrix<F>,
    inv_std: Vec<F>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<F: Real> LayerNorm<F> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Matrix::filled(1, width, F::one()),
            shift: Matrix::zeros(1, width),
        }
    }

    pub fn forward(&self, x: &Matrix<F>) -> Result<(Matrix<F>, LayerNormCache<F>)> {
        layer_norm_cached(x, self.gain.as_slice(), self.shift.as_slice(), F::of(LAYER_NORM_EPS))
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Matrix<F>, grad: &mut Self) -> Matrix<F> {
        let n = F::of(dy.cols() as f64);
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        for i in 0..dy.rows() {
            let xhat = cache.normalized.row(i);
            let dyr = dy.row(i);
            let mut dxhat = vec![F::zero(); dy.cols()];
            for j in 0..dy.cols() {
                grad.gain[(0, j)] += dyr[j] * xhat[j];
                grad.shift[(0, j)] += dyr[j];
                dxhat[j] = dyr[j] * self.gain[(0, j)];
            }
            let mean_d: F = dxhat.iter().copied().sum::<F>() / n;
            let mean_dx: F = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<F>() / n;
            let inv = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        dx
    }
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + shift`, row by row.
pub fn layer_norm<F: Real>(x: &Matrix<F>, gain: &[F], shift: &[F], eps: F) -> Result<Matrix<F>> {
    layer_norm_cached(x, gain, shift, eps).map(|(y, _)| y)
}

fn layer_norm_cached<F: Real>(
    x: &Matrix<F>,
    gain: &[F],
    shift: &[F],
    eps: F,
) -> Result<(Matrix<F>, LayerNormCache<F>)> {
    let c = x.cols();
    if gain.len() != c || shift.len() != c {
        return Err(shape_err(
            "layer_norm",
            format!("gain/shift of length {c}"),
            format!("{}/{}", gain.len(), shift.len()),
        ));
    }
    let n = F::of(c as f64);
    let mut y = Matrix::zeros(x.rows(), c);
    let mut normalized = Matrix::zeros(x.rows(), c);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            normalized[(i, j)] = h;
            y[(i, j)] = gain[j] * h + shift[j];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<F: Real>(x: &Matrix<F>, slope: F) -> Matrix<F> {
    x.map(|v| if v > F::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<F: Real>(x: &Matrix<F>, dy: &Matrix<F>, slope: F) -> Matrix<F> {
    x.zip_map(dy, |v, d| if v > F::zero() { d } else { slope * d })
        .expect("leaky_relu backward shapes")
}

/// `x · sigmoid(x)`.
pub fn silu<F: Real>(x: &Matrix<F>) -> Matrix<F> {
    x.map(|v| v / (F::one() + (-v).exp()))
}

pub fn silu_backward<F: Real>(x: &Matrix<F>, dy: &Matrix<F>) -> Matrix<F> {
    x.zip_map(dy, |v, d| {
        let s = F::one() / (F::one() + (-v).exp());
        d * (s + v * s * (F::one() - s))
    })
    .expect("silu backward shapes")
}

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: &Matrix<F>) -> Matrix<F> {
    let (c, k) = gelu_consts::<F>();
    let half = F::of(0.5);
    x.map(|v| half * v * (F::one() + (c * (v + k * v * v * v)).tanh()))
}

pub fn gelu_backward<F: Real>(x: &Matrix<F>, dy: &Matrix<F>) -> Matrix<F> {
    let (c, k) = gelu_consts::<F>();
    let half = F::of(0.5);
    let three = F::of(3.0);
    x.zip_map(dy, |v, d| {
        let u = c * (v + k * v * v * v);
        let th = u.tanh();
        let du = c * (F::one() + three * k * v * v);
        d * (half * (F::one() + th) + half * v * (F::one() - th * th) * du)
    })
    .expect("gelu backward shapes")
}

fn gelu_consts<F: Real>() -> (F, F) {
    (F::of((2.0 / std::f64::consts::PI).sqrt()), F::of(0.044715))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{gradient_check, DEFAULT_STEP};
    use crate::params::ParamTree;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Matrix<f64> {
        Matrix::row_vector(v)
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&row(&[0.0, 0.0, 0.0])).unwrap();
        for &v in s.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log_two() {
        let s = softmax_rows(&row(&[0.0, 2f64.ln()])).unwrap();
        assert!((s[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_entry() {
        let s = softmax_rows(&row(&[5.0, f64::NEG_INFINITY])).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let scores = Matrix::from_rows(&[vec![0.0, 1.0], vec![f64::NEG_INFINITY; 2]]).unwrap();
        assert_eq!(softmax_rows(&scores), Err(ModitError::DegenerateMask { row: 1 }));
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::<f64>::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = linear_forward(&x, &Matrix::identity(4), &[0.0; 4]).unwrap();
        assert_eq!(y, x);

        let w = Matrix::<f64>::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let y = linear_forward(&Matrix::zeros(3, 4), &w, &[1.5, -2.0]).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), &[1.5, -2.0]);
        }
    }

    #[test]
    fn linear_hand_arithmetic() {
        let y = linear_forward(&row(&[1.0, 2.0]), &Matrix::identity(2), &[3.0, 4.0]).unwrap();
        assert_eq!(y.as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_dimension_mismatch() {
        assert!(linear_forward(&row(&[1.0, 2.0]), &Matrix::identity(3), &[0.0; 3]).is_err());
        assert!(linear_forward(&row(&[1.0, 2.0]), &Matrix::identity(2), &[0.0; 3]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&row(&[4.0, 4.0, 4.0]), &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(&row(&[-1.0, 1.0]), &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((y[(0, 0)] + 1.0).abs() < 1e-12 && (y[(0, 1)] - 1.0).abs() < 1e-12);

        // mean 1, std 1: normalized [-1, 1] → 2·[-1, 1] + 1
        let y = layer_norm(&row(&[0.0, 2.0]), &[2.0; 2], &[1.0; 2], 1e-14).unwrap();
        assert!((y[(0, 0)] + 1.0).abs() < 1e-12 && (y[(0, 1)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_bad_gain() {
        assert!(layer_norm(&row(&[0.0, 1.0]), &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    /// Loss `Σ R ⊙ f(x)` with a fixed random projection `R`, differentiated
    /// with respect to `x` through each activation kernel.
    fn check_activation(
        f: impl Fn(&Matrix<f64>) -> Matrix<f64>,
        df: impl Fn(&Matrix<f64>, &Matrix<f64>) -> Matrix<f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::<f64>::from_fn(3, 5, |_, _| rng.random_range(-2.0..2.0));
        let r = Matrix::<f64>::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let analytic = df(&x, &r);
        let report = gradient_check(
            &x,
            |p: &Matrix<f64>| Ok(f(p).hadamard(&r).unwrap().sum()),
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn activation_gradients() {
        check_activation(|x| leaky_relu(x, 0.2), |x, d| leaky_relu_backward(x, d, 0.2));
        check_activation(silu, silu_backward);
        check_activation(gelu, gelu_backward);
    }

    #[test]
    fn linear_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::<f64>::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let r = Matrix::<f64>::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let lin = Linear::<f64>::init(6, 3, &mut rng);
        let mut grad = lin.zeros_like();
        lin.backward(&x, &r, &mut grad);
        let report = gradient_check(
            &lin,
            |p: &Linear<f64>| Ok(p.forward(&x)?.hadamard(&r)?.sum()),
            &grad,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");

        let mut ln = LayerNorm::<f64>::new(6);
        ln.gain = Matrix::from_fn(1, 6, |_, _| rng.random_range(0.5..1.5));
        ln.shift = Matrix::from_fn(1, 6, |_, _| rng.random_range(-0.5..0.5));
        let r6 = Matrix::<f64>::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let (_, cache) = ln.forward(&x).unwrap();
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &r6, &mut g);
        let report = gradient_check(
            &ln,
            |p: &LayerNorm<f64>| Ok(p.forward(&x)?.0.hadamard(&r6)?.sum()),
            &g,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        let report = gradient_check(
            &x,
            |p: &Matrix<f64>| Ok(ln.forward(p)?.0.hadamard(&r6)?.sum()),
            &dx,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    proptest! {
        #[test]
        fn softmax_is_row_stochastic(
            rows in 1usize..5,
            cols in 1usize..7,
            seed in any::<u64>(),
            scale in 0.1f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Matrix::<f64>::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0));
            let w = softmax_rows(&s).unwrap();
            for i in 0..rows {
                let total: f64 = w.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                prop_assert!(w.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn linear_is_additive(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_m = |r, c| Matrix::<f64>::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0));
            let x1 = rand_m(3, 4);
            let x2 = rand_m(3, 4);
            let w = rand_m(4, 5);
            let b = rand_m(1, 5);
            let lhs = linear_forward(&x1.add(&x2).unwrap(), &w, b.as_slice()).unwrap();
            let rhs = linear_forward(&x1, &w, b.as_slice()).unwrap()
                .add(&linear_forward(&x2, &w, b.as_slice()).unwrap()).unwrap();
            let rhs = rhs.sub(&Matrix::zeros(3, 5).add_row_broadcast(&b).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
