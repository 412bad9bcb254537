//! Between-subject response functions `f(Y_i1, Y_i2)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{check_dim, input, Result};

/// Relative abundances: strictly positive, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    values: Vec<f64>,
    pseudocount_applied: bool,
}

impl Composition {
    /// Closes `values` to sum one. Entries must already be strictly positive.
    pub fn close(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return input("composition needs at least two parts");
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return input("composition entries must be finite and strictly positive");
        }
        let total: f64 = values.iter().sum();
        Ok(Self { values: values.iter().map(|v| v / total).collect(), pseudocount_applied: false })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pseudocount_applied(&self) -> bool {
        self.pseudocount_applied
    }

    /// Centered log-ratio transform.
    pub fn clr(&self) -> Vec<f64> {
        clr(&self.values)
    }
}

/// Zero handling applied to raw counts before closure.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PseudocountPolicy {
    /// Zeros become half the smallest positive entry of the same vector.
    #[default]
    HalfMinPositive,
    /// `eps` is added to every entry.
    Additive(f64),
}

pub fn apply_pseudocount(raw: &[f64], policy: PseudocountPolicy) -> Result<Composition> {
    if raw.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return input("abundances must be finite and nonnegative");
    }
    let min_pos = raw.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    if !min_pos.is_finite() {
        return input("abundance vector has no positive entry");
    }
    let mut applied = false;
    let filled: Vec<f64> = match policy {
        PseudocountPolicy::HalfMinPositive => raw
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    applied = true;
                    0.5 * min_pos
                } else {
                    v
                }
            })
            .collect(),
        PseudocountPolicy::Additive(eps) => {
            if !(eps >= 0.0) {
                return input(format!("pseudocount {eps} is negative"));
            }
            applied = eps > 0.0;
            raw.iter().map(|v| v + eps).collect()
        }
    };
    let mut comp = Composition::close(&filled)?;
    comp.pseudocount_applied = applied;
    Ok(comp)
}

fn clr(values: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.into_iter().map(|l| l - mean_log).collect()
}

/// Aitchison distance: Euclidean distance between clr transforms. Inputs
/// need not be closed; the clr is invariant to rescaling.
pub fn aitchison_distance(y1: &[f64], y2: &[f64]) -> Result<f64> {
    check_dim(y1.len(), y2.len())?;
    if y1.len() < 2 {
        return input("Aitchison distance needs at least two parts");
    }
    if y1.iter().chain(y2).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return input("Aitchison distance needs strictly positive entries; apply a pseudocount first");
    }
    let (c1, c2) = (clr(y1), clr(y2));
    Ok(c1.iter().zip(&c2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Tie convention for the rank indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// `I(y1 <= y2)`: ties score 1.
    #[default]
    Inclusive,
    /// Ties score 1/2.
    Midrank,
}

pub fn mww_indicator(y1: f64, y2: f64) -> f64 {
    mww_indicator_with(y1, y2, TieRule::Inclusive)
}

pub fn mww_indicator_with(y1: f64, y2: f64, ties: TieRule) -> f64 {
    if y1 < y2 {
        1.0
    } else if y1 > y2 {
        0.0
    } else {
        match ties {
            TieRule::Inclusive => 1.0,
            TieRule::Midrank => 0.5,
        }
    }
}

/// ICC pair responses: half squared difference of rating means, and the
/// rater-averaged half squared differences.
pub fn icc_pair_kernel(r1: &[f64], r2: &[f64]) -> Result<[f64; 2]> {
    check_dim(r1.len(), r2.len())?;
    let k = r1.len();
    if k < 2 {
        return input("ICC kernel needs at least two ratings per subject");
    }
    let kf = k as f64;
    let m1 = r1.iter().sum::<f64>() / kf;
    let m2 = r2.iter().sum::<f64>() / kf;
    let f1 = 0.5 * (m1 - m2) * (m1 - m2);
    let f2 = r1.iter().zip(r2).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>() / kf;
    Ok([f1, f2])
}

pub type KernelFn = dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync;

/// Caller-supplied kernel. The function must be pure and reentrant.
#[derive(Clone)]
pub struct CustomKernel {
    pub func: Arc<KernelFn>,
    pub output_dim: usize,
    pub symmetric: bool,
}

impl fmt::Debug for CustomKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomKernel")
            .field("output_dim", &self.output_dim)
            .field("symmetric", &self.symmetric)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Kernel {
    Aitchison,
    MwwIndicator(TieRule),
    /// `||y1 - y2||^2 / 2`.
    SqHalfDiff,
    /// `y1[0] - y2[0]`, the exogenous difference response.
    Difference,
    IccPair(usize),
    Custom(CustomKernel),
}

impl Kernel {
    pub fn output_dim(&self) -> usize {
        match self {
            Kernel::IccPair(_) => 2,
            Kernel::Custom(c) => c.output_dim,
            _ => 1,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            Kernel::MwwIndicator(_) | Kernel::Difference => false,
            Kernel::Custom(c) => c.symmetric,
            _ => true,
        }
    }

    pub fn eval_into(&self, y1: &[f64], y2: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(y1.len(), y2.len())?;
        check_dim(self.output_dim(), out.len())?;
        match self {
            Kernel::Aitchison => out[0] = aitchison_distance(y1, y2)?,
            Kernel::MwwIndicator(ties) => out[0] = mww_indicator_with(y1[0], y2[0], *ties),
            Kernel::SqHalfDiff => out[0] = 0.5 * y1.iter().zip(y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            Kernel::Difference => out[0] = y1[0] - y2[0],
            Kernel::IccPair(k) => {
                check_dim(*k, y1.len())?;
                out.copy_from_slice(&icc_pair_kernel(y1, y2)?);
            }
            Kernel::Custom(c) => {
                let v = (c.func)(y1, y2)?;
                check_dim(c.output_dim, v.len())?;
                out.copy_from_slice(&v);
            }
        }
        Ok(())
    }

    pub fn eval(&self, y1: &[f64], y2: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(y1, y2, &mut out)?;
        Ok(out)
    }
}
