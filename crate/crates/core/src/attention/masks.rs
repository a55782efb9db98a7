//! Bias masks and the two-phase switching rule used during sampling.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, ModitError, Result};
use crate::numeric::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Diagonal,
    Dispersed,
}

/// Nonnegative `T_q × T_k` multiplier over attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMask {
    pub kind: MaskKind,
    pub values: Matrix<f64>,
    /// Bandwidth for diagonal masks, σ for dispersed ones.
    pub width: f64,
}

/// Position of key `j` on the query axis.
fn aligned(j: usize, t_q: usize, t_k: usize) -> f64 {
    j as f64 * t_q as f64 / t_k as f64
}

/// Banded mask: 1 where `|i − round(j·T_q/T_k)| ≤ bandwidth`, `floor` elsewhere.
pub fn build_diagonal_bias(t_q: usize, t_k: usize, bandwidth: usize, floor: f64) -> BiasMask {
    let values = Matrix::from_fn(t_q, t_k, |i, j| {
        let center = aligned(j, t_q, t_k).round();
        if (i as f64 - center).abs() <= bandwidth as f64 {
            1.0
        } else {
            floor
        }
    });
    BiasMask {
        kind: MaskKind::Diagonal,
        values,
        width: bandwidth as f64,
    }
}

/// Gaussian profile `exp(−(i − j·T_q/T_k)² / 2σ²)`; strictly positive.
pub fn build_dispersed_bias(t_q: usize, t_k: usize, sigma: f64) -> Result<BiasMask> {
    if !(sigma > 0.0) {
        return Err(ModitError::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let values = Matrix::from_fn(t_q, t_k, |i, j| {
        let d = i as f64 - aligned(j, t_q, t_k);
        (-d * d / (2.0 * sigma * sigma)).exp()
    });
    Ok(BiasMask {
        kind: MaskKind::Dispersed,
        values,
        width: sigma,
    })
}

/// Which end of the reverse process gets the diagonal (lip-sync) mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhaseOrder {
    /// `t < t_T`: `M_D + M_E`; `t ≥ t_T`: `M_E`.
    #[default]
    AlgorithmLiteral,
    /// Branches swapped: the diagonal mask is active at high noise.
    ProseOrder,
}

impl FromStr for PhaseOrder {
    type Err = ModitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algorithm_literal" => Ok(Self::AlgorithmLiteral),
            "prose_order" => Ok(Self::ProseOrder),
            other => Err(ModitError::InvalidArgument(format!("unknown phase order {other:?}"))),
        }
    }
}

impl fmt::Display for PhaseOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AlgorithmLiteral => "algorithm_literal",
            Self::ProseOrder => "prose_order",
        })
    }
}

/// How a mask enters attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasMode {
    /// Post-softmax elementwise product followed by row renormalization.
    #[default]
    Multiplicative,
    /// Mask values added to the pre-softmax scores.
    Additive,
}

impl FromStr for BiasMode {
    type Err = ModitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(Self::Multiplicative),
            "additive" => Ok(Self::Additive),
            other => Err(ModitError::InvalidArgument(format!("unknown bias mode {other:?}"))),
        }
    }
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Multiplicative => "multiplicative",
            Self::Additive => "additive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiasTargets {
    pub self_attn: bool,
    pub cross: bool,
    pub temporal: bool,
}

impl Default for BiasTargets {
    fn default() -> Self {
        Self {
            self_attn: false,
            cross: true,
            temporal: false,
        }
    }
}

impl FromStr for BiasTargets {
    type Err = ModitError;

    /// Comma-separated subset of `self,cross,temporal`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Self {
            self_attn: false,
            cross: false,
            temporal: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "self" => t.self_attn = true,
                "cross" => t.cross = true,
                "temporal" => t.temporal = true,
                other => {
                    return Err(ModitError::InvalidArgument(format!("unknown bias target {other:?}")))
                }
            }
        }
        Ok(t)
    }
}

impl fmt::Display for BiasTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.self_attn {
            parts.push("self");
        }
        if self.cross {
            parts.push("cross");
        }
        if self.temporal {
            parts.push("temporal");
        }
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub t_threshold: usize,
    pub order: PhaseOrder,
    pub targets: BiasTargets,
    pub mode: BiasMode,
    pub diag_bandwidth: usize,
    pub diag_floor: f64,
    pub dispersed_sigma: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            t_threshold: 500,
            order: PhaseOrder::AlgorithmLiteral,
            targets: BiasTargets::default(),
            mode: BiasMode::Multiplicative,
            diag_bandwidth: 1,
            diag_floor: 0.0,
            dispersed_sigma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseBranch {
    /// Dispersed mask only.
    Express,
    /// Diagonal plus dispersed mask.
    LipSync,
}

impl PhaseConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_threshold == 0 || self.t_threshold > steps {
            return Err(ModitError::InvalidArgument(format!(
                "t_threshold {} outside 1..={steps}",
                self.t_threshold
            )));
        }
        if !(self.dispersed_sigma > 0.0) || self.diag_floor < 0.0 {
            return Err(ModitError::InvalidArgument("invalid mask parameters".into()));
        }
        Ok(())
    }

    /// `t == t_threshold` falls in the `t ≥ t_T` branch.
    pub fn branch(&self, t: usize) -> PhaseBranch {
        let late = t < self.t_threshold;
        match (self.order, late) {
            (PhaseOrder::AlgorithmLiteral, true) | (PhaseOrder::ProseOrder, false) => PhaseBranch::LipSync,
            _ => PhaseBranch::Express,
        }
    }

    pub fn diagonal(&self, t_q: usize, t_k: usize) -> BiasMask {
        build_diagonal_bias(t_q, t_k, self.diag_bandwidth, self.diag_floor)
    }

    pub fn dispersed(&self, t_q: usize, t_k: usize) -> BiasMask {
        build_dispersed_bias(t_q, t_k, self.dispersed_sigma).expect("sigma validated")
    }

    /// Effective multiplier at timestep `t` for a `t_q × t_k` block.
    pub fn mask_at(&self, t: usize, t_q: usize, t_k: usize) -> Matrix<f64> {
        phase_mask(t, self, &self.diagonal(t_q, t_k), &self.dispersed(t_q, t_k))
            .expect("masks built with matching shapes")
    }
}

/// The multiplier selected by the phase rule: `M_E` or `M_D + M_E`.
pub fn phase_mask(t: usize, cfg: &PhaseConfig, diag: &BiasMask, dispersed: &BiasMask) -> Result<Matrix<f64>> {
    match cfg.branch(t) {
        PhaseBranch::Express => Ok(dispersed.values.clone()),
        PhaseBranch::LipSync => diag.values.add(&dispersed.values),
    }
}

/// `renorm(weights ⊙ mask)`; a row with no surviving mass is an error.
pub fn mask_and_renormalize<F: Real>(weights: &Matrix<F>, mask: &Matrix<f64>) -> Result<Matrix<F>> {
    if weights.shape() != mask.shape() {
        return Err(shape_err(
            "mask_and_renormalize",
            format!("{:?}", weights.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    let mut out = weights.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut total = F::zero();
        for (w, &m) in row.iter_mut().zip(mask.row(i)) {
            *w *= F::of(m);
            total += *w;
        }
        if !(total > F::zero()) {
            return Err(ModitError::DegenerateMask { row: i });
        }
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    Ok(out)
}

/// Applies the phase-selected mask to row-stochastic `weights` and
/// renormalizes.
pub fn apply_phase_bias<F: Real>(
    weights: &Matrix<F>,
    t: usize,
    cfg: &PhaseConfig,
    diag: &BiasMask,
    dispersed: &BiasMask,
) -> Result<Matrix<F>> {
    let mask = phase_mask(t, cfg, diag, dispersed)?;
    mask_and_renormalize(weights, &mask)
}
