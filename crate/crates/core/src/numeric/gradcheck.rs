//! Central-difference verification of hand-written backward passes.

use std::fmt;

use crate::error::{ModitError, Result};
use crate::numeric::Real;
use crate::params::ParamTree;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold for gradient checks in 64-bit mode.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCoord {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub count: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: Option<ParamCoord>,
    pub analytic: f64,
    pub numeric: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.worst_parameter {
            Some(p) => write!(
                f,
                "max_rel={:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                self.max_relative_error, p.name, p.index, self.analytic, self.numeric
            ),
            None => write!(f, "max_rel={:.3e} (no parameters)", self.max_relative_error),
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, entry by entry.
pub fn gradient_check<F: Real, P: ParamTree<F>>(
    params: &P,
    loss: impl Fn(&P) -> Result<F>,
    analytic: &P,
    step: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(ModitError::InvalidArgument("gradient_check step must be > 0".into()));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(ModitError::NonFinite("gradient_check loss".into()));
    }
    let analytic_blocks: Vec<(String, Vec<f64>)> = analytic
        .named()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().iter().map(|v| v.as_f64()).collect()))
        .collect();
    let sizes: Vec<usize> = params.named().iter().map(|(_, m)| m.len()).collect();
    if sizes != analytic_blocks.iter().map(|(_, v)| v.len()).collect::<Vec<_>>() {
        return Err(ModitError::InvalidArgument(
            "analytic gradient does not mirror the parameter set".into(),
        ));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: None,
        analytic: 0.0,
        numeric: 0.0,
        blocks: Vec::with_capacity(sizes.len()),
    };
    let h = F::of(step);
    for (b, (name, grads)) in analytic_blocks.iter().enumerate() {
        let mut block_max = 0.0f64;
        for (k, &a) in grads.iter().enumerate() {
            let original = entry(&mut work, b, k, None);
            entry(&mut work, b, k, Some(original + h));
            let plus = loss(&work)?;
            entry(&mut work, b, k, Some(original - h));
            let minus = loss(&work)?;
            entry(&mut work, b, k, Some(original));
            if !plus.is_finite() || !minus.is_finite() {
                return Err(ModitError::NonFinite(format!("gradient_check loss at {name}[{k}]")));
            }
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * step);
            let err = relative_error(a, numeric);
            block_max = block_max.max(err);
            if err > report.max_relative_error || report.worst_parameter.is_none() {
                report.max_relative_error = err;
                report.worst_parameter = Some(ParamCoord {
                    name: name.clone(),
                    index: k,
                });
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.blocks.push(BlockError {
            name: name.clone(),
            count: grads.len(),
            max_relative_error: block_max,
        });
    }
    Ok(report)
}

/// Reads entry `k` of tensor `block`, optionally overwriting it first.
fn entry<F: Real, P: ParamTree<F>>(p: &mut P, block: usize, k: usize, set: Option<F>) -> F {
    let mut named = p.named_mut();
    let slot = &mut named[block].1.as_mut_slice()[k];
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}
