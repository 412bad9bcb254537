//! Domain types for functional response models: subject records, pairwise
//! covariate constructions, links, working variances, and the per-pair
//! evaluations (residual, mean derivative, variance) consumed by the solver.

use std::sync::Arc;

use libm::erfc;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, input, FrmError, Result};

/// One subject's raw data: outcome vector `y` (length m ≥ 1) and covariates `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, y: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if y.is_empty() {
            return input(format!("subject {id}: outcome vector is empty"));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return input(format!("subject {id}: non-finite value"));
        }
        Ok(Self { id, y, x })
    }
}

/// Checks that all records share the same outcome and covariate dimensions
/// and returns `(m, p)`.
pub fn validate_subjects(subjects: &[SubjectRecord]) -> Result<(usize, usize)> {
    let first = subjects.first().ok_or_else(|| FrmError::Input("dataset has no subjects".into()))?;
    let (m, p) = (first.y.len(), first.x.len());
    for s in subjects {
        if s.y.len() != m || s.x.len() != p {
            return input(format!(
                "subject {}: dims ({}, {}) differ from dataset dims ({m}, {p})",
                s.id,
                s.y.len(),
                s.x.len()
            ));
        }
        if s.y.iter().chain(s.x.iter()).any(|v| !v.is_finite()) {
            return input(format!("subject {}: non-finite value", s.id));
        }
    }
    Ok((m, p))
}

/// How two subjects' covariates are combined into the pair covariate `X_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairTransform {
    Difference,
    Sum,
    Concatenate,
    /// Single categorical covariate with levels `1..=K`, encoded over
    /// unordered level pairs.
    OneHot(usize),
}

impl PairTransform {
    /// Pair covariate dimension for subject covariates of dimension `p`.
    pub fn output_dim(&self, p: usize) -> Result<usize> {
        match *self {
            PairTransform::Difference | PairTransform::Sum => Ok(p),
            PairTransform::Concatenate => Ok(2 * p),
            PairTransform::OneHot(k) => {
                if p != 1 {
                    return input(format!("one-hot pair encoding needs exactly one covariate, got {p}"));
                }
                if k == 0 {
                    return input("one-hot pair encoding needs K >= 1");
                }
                Ok(onehot_len(k))
            }
        }
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim(x1.len())?];
        self.eval_into(x1, x2, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, x1: &[f64], x2: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(x1.len(), x2.len())?;
        check_dim(self.output_dim(x1.len())?, out.len())?;
        match *self {
            PairTransform::Difference => {
                for ((o, a), b) in out.iter_mut().zip(x1).zip(x2) {
                    *o = a - b;
                }
            }
            PairTransform::Sum => {
                for ((o, a), b) in out.iter_mut().zip(x1).zip(x2) {
                    *o = a + b;
                }
            }
            PairTransform::Concatenate => {
                let p = x1.len();
                out[..p].copy_from_slice(x1);
                out[p..].copy_from_slice(x2);
            }
            PairTransform::OneHot(k) => {
                let l1 = category_level(x1[0], k)?;
                let l2 = category_level(x2[0], k)?;
                out.iter_mut().for_each(|v| *v = 0.0);
                out[onehot_slot(l1, l2, k)] = 1.0;
            }
        }
        Ok(())
    }
}

fn category_level(v: f64, k: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 1.0 || v > k as f64 {
        return input(format!("categorical level {v} outside 1..={k}"));
    }
    Ok(v as usize)
}

/// Number of unordered level pairs with repetition: `K + K(K-1)/2`.
pub fn onehot_len(k: usize) -> usize {
    k + k * (k.saturating_sub(1)) / 2
}

/// Slot of the unordered pair `{l1, l2}` (levels 1-based) in row-major order
/// over `k1 <= k2`: (1,1), (1,2), .., (1,K), (2,2), .., (K,K).
pub fn onehot_slot(l1: usize, l2: usize, k: usize) -> usize {
    let (a, b) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
    // rows 1..a-1 hold K, K-1, .., K-a+2 slots
    let before: usize = (1..a).map(|r| k - r + 1).sum();
    before + (b - a)
}

/// Indicator vector of the unordered level pair `{x1, x2}`.
pub fn encode_pair_onehot(x1: usize, x2: usize, k: usize) -> Result<Vec<f64>> {
    if k == 0 || x1 == 0 || x2 == 0 || x1 > k || x2 > k {
        return input(format!("levels ({x1}, {x2}) outside 1..={k}"));
    }
    let mut out = vec![0.0; onehot_len(k)];
    out[onehot_slot(x1, x2, k)] = 1.0;
    Ok(out)
}

/// Linear predictors above this make the exp link fail instead of overflowing.
pub const EXP_ETA_MAX: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Identity,
    Exp,
    Expit,
    /// `h(eta) = Phi(-eta)`, the probit-type mean of a rank indicator.
    ProbitComplement,
}

impl Link {
    /// Mean and its derivative with respect to the linear predictor.
    pub fn eval(&self, eta: f64) -> Result<(f64, f64)> {
        match self {
            Link::Identity => Ok((eta, 1.0)),
            Link::Exp => {
                if eta > EXP_ETA_MAX {
                    return Err(FrmError::LinkOverflow { eta });
                }
                let h = eta.exp();
                Ok((h, h))
            }
            Link::Expit => {
                let h = if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                };
                Ok((h, h * (1.0 - h)))
            }
            Link::ProbitComplement => Ok((std_normal_cdf(-eta), -std_normal_pdf(eta))),
        }
    }

    pub fn mean(&self, eta: f64) -> Result<f64> {
        self.eval(eta).map(|(h, _)| h)
    }
}

/// Standard normal CDF through the complementary error function, accurate
/// to a few ulps including the far tails.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Working variance `V_i` used as the weight in the estimating equation.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkingVariance {
    Constant(f64),
    Poisson,
    /// `V = tau2 * h`.
    ProportionalToMean(f64),
    /// `V = h (1 + h / tau)`; `tau = +inf` reduces to Poisson.
    NegBinomial(f64),
    Bernoulli,
    /// Caller-supplied variance per pair, in pair enumeration order.
    UserFixed(Arc<[f64]>),
    /// Another working variance multiplied by a positive constant.
    Scaled(Box<WorkingVariance>, f64),
}

impl WorkingVariance {
    pub fn evaluate(&self, h: f64, pair: usize) -> std::result::Result<f64, String> {
        let v = match self {
            WorkingVariance::Constant(c) => *c,
            WorkingVariance::Poisson => h,
            WorkingVariance::ProportionalToMean(tau2) => tau2 * h,
            WorkingVariance::NegBinomial(tau) => {
                if tau.is_infinite() {
                    h
                } else {
                    h * (1.0 + h / tau)
                }
            }
            WorkingVariance::Bernoulli => {
                if !(h > 0.0 && h < 1.0) {
                    return Err(format!("Bernoulli variance needs mean in (0,1), got {h}"));
                }
                h * (1.0 - h)
            }
            WorkingVariance::UserFixed(v) => {
                *v.get(pair).ok_or_else(|| format!("no fixed variance for pair {pair}"))?
            }
            WorkingVariance::Scaled(inner, c) => c * inner.evaluate(h, pair)?,
        };
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(format!("working variance {v} is not positive"))
        }
    }

    /// Whether the adaptive loop has a nuisance parameter to estimate.
    pub fn has_nuisance(&self) -> bool {
        if let WorkingVariance::Scaled(inner, _) = self {
            return inner.has_nuisance();
        }
        matches!(
            self,
            WorkingVariance::Constant(_) | WorkingVariance::ProportionalToMean(_) | WorkingVariance::NegBinomial(_)
        )
    }

    /// Same kind with the nuisance parameter replaced.
    pub fn with_nuisance(&self, value: f64) -> Self {
        match self {
            WorkingVariance::Constant(_) => WorkingVariance::Constant(value),
            WorkingVariance::ProportionalToMean(_) => WorkingVariance::ProportionalToMean(value),
            WorkingVariance::NegBinomial(_) => WorkingVariance::NegBinomial(value),
            WorkingVariance::Scaled(inner, c) => WorkingVariance::Scaled(Box::new(inner.with_nuisance(value)), *c),
            other => other.clone(),
        }
    }

    pub fn nuisance(&self) -> Option<f64> {
        match self {
            WorkingVariance::Constant(c) => Some(*c),
            WorkingVariance::ProportionalToMean(t) => Some(*t),
            WorkingVariance::NegBinomial(t) => Some(*t),
            WorkingVariance::Scaled(inner, _) => inner.nuisance(),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WorkingVariance::Constant(_) => "const",
            WorkingVariance::Poisson => "poisson",
            WorkingVariance::ProportionalToMean(_) => "propmean",
            WorkingVariance::NegBinomial(_) => "nb",
            WorkingVariance::Bernoulli => "bernoulli",
            WorkingVariance::UserFixed(_) => "fixed",
            WorkingVariance::Scaled(inner, _) => inner.name(),
        }
    }

    /// Multiplies every evaluated variance by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        WorkingVariance::Scaled(Box::new(self.clone()), c)
    }

    /// Strips any `Scaled` wrappers.
    pub fn base(&self) -> &WorkingVariance {
        match self {
            WorkingVariance::Scaled(inner, _) => inner.base(),
            other => other,
        }
    }
}

/// Per-pair quantities the estimating equation needs: residual `S_i`
/// (length d), mean derivative `D_i` (d x q, row-major) and the diagonal of
/// the working variance `V_i`.
#[derive(Debug, Clone)]
pub struct PairEval {
    pub residual: Vec<f64>,
    pub jacobian: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PairEval {
    pub fn new(d: usize, q: usize) -> Self {
        Self { residual: vec![0.0; d], jacobian: vec![0.0; d * q], variance: vec![0.0; d] }
    }
}

/// A model for the conditional mean of a pairwise response.
pub trait PairModel: Sync {
    /// Parameter dimension q.
    fn n_params(&self) -> usize;
    /// Dimension of the pairwise response in the data.
    fn response_dim(&self) -> usize;
    /// Number of residual components d in `S_i`.
    fn equation_dim(&self) -> usize {
        self.response_dim()
    }
    /// Pair covariate dimension this model expects.
    fn covariate_dim(&self) -> usize;
    /// Fills `out` for pair `k` with response `f` and covariate `x` at `beta`.
    fn evaluate(
        &self,
        k: usize,
        f: &[f64],
        x: &[f64],
        beta: &[f64],
        out: &mut PairEval,
    ) -> std::result::Result<(), String>;
    /// Predicted mean for a pair covariate, used for nuisance estimation.
    fn mean(&self, x: &[f64], beta: &[f64]) -> Result<Vec<f64>>;
    fn param_names(&self) -> Vec<String>;
}

/// Scalar FRM: `E(f | X) = link(beta' X)` with optional intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct FrmModel {
    pub link: Link,
    pub intercept: bool,
    pub covariate_dim: usize,
    pub working_variance: WorkingVariance,
}

impl FrmModel {
    pub fn new(link: Link, intercept: bool, covariate_dim: usize, working_variance: WorkingVariance) -> Self {
        Self { link, intercept, covariate_dim, working_variance }
    }

    pub fn with_variance(&self, working_variance: WorkingVariance) -> Self {
        Self { working_variance, ..self.clone() }
    }

    fn linear_predictor(&self, x: &[f64], beta: &[f64]) -> f64 {
        let (b0, slopes) = if self.intercept { (beta[0], &beta[1..]) } else { (0.0, beta) };
        b0 + slopes.iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Mean `h` and gradient `D = dh/dbeta` of a scalar FRM at one pair covariate.
pub fn mean_and_gradient(model: &FrmModel, pair_x: &[f64], beta: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim(model.covariate_dim, pair_x.len())?;
    check_dim(model.n_params(), beta.len())?;
    if beta.iter().any(|b| !b.is_finite()) {
        return input("non-finite coefficient");
    }
    let eta = model.linear_predictor(pair_x, beta);
    let (h, dh) = model.link.eval(eta)?;
    let mut grad = Vec::with_capacity(beta.len());
    if model.intercept {
        grad.push(dh);
    }
    grad.extend(pair_x.iter().map(|x| dh * x));
    Ok((h, grad))
}

impl PairModel for FrmModel {
    fn n_params(&self) -> usize {
        self.covariate_dim + usize::from(self.intercept)
    }

    fn response_dim(&self) -> usize {
        1
    }

    fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    fn evaluate(
        &self,
        k: usize,
        f: &[f64],
        x: &[f64],
        beta: &[f64],
        out: &mut PairEval,
    ) -> std::result::Result<(), String> {
        let eta = self.linear_predictor(x, beta);
        let (h, dh) = self.link.eval(eta).map_err(|e| e.to_string())?;
        if !h.is_finite() {
            return Err(format!("non-finite mean at eta {eta}"));
        }
        out.residual[0] = f[0] - h;
        let mut j = 0;
        if self.intercept {
            out.jacobian[0] = dh;
            j = 1;
        }
        for (slot, xv) in out.jacobian[j..].iter_mut().zip(x) {
            *slot = dh * xv;
        }
        out.variance[0] = self.working_variance.evaluate(h, k)?;
        Ok(())
    }

    fn mean(&self, x: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.link.mean(self.linear_predictor(x, beta))?])
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("b0".to_string());
        }
        let off = usize::from(self.intercept);
        names.extend((0..self.covariate_dim).map(|j| format!("b{}", j + off)));
        names
    }
}

/// Mean map of the intraclass-correlation model and its Jacobian with
/// respect to `(tau2, rho)`.
pub fn icc_mean_map(tau2: f64, rho: f64, k: usize) -> Result<([f64; 2], [[f64; 2]; 2])> {
    if !(tau2 > 0.0) || !tau2.is_finite() {
        return input(format!("tau2 must be positive, got {tau2}"));
    }
    if k < 2 {
        return input("ICC model needs K >= 2 raters");
    }
    let kf = k as f64;
    let h1 = (1.0 + (kf - 1.0) * rho) * tau2 / kf;
    let jac = [[(1.0 + (kf - 1.0) * rho) / kf, (kf - 1.0) * tau2 / kf], [1.0, 0.0]];
    Ok(([h1, tau2], jac))
}

/// Bivariate FRM for rater agreement: parameter `(tau2, rho)`, response
/// `(f1, f2)` from the ICC pair kernel, diagonal working variance.
#[derive(Debug, Clone, PartialEq)]
pub struct IccModel {
    pub raters: usize,
    pub variance: [f64; 2],
}

impl PairModel for IccModel {
    fn n_params(&self) -> usize {
        2
    }

    fn response_dim(&self) -> usize {
        2
    }

    fn covariate_dim(&self) -> usize {
        0
    }

    fn evaluate(
        &self,
        _k: usize,
        f: &[f64],
        _x: &[f64],
        beta: &[f64],
        out: &mut PairEval,
    ) -> std::result::Result<(), String> {
        let (h, jac) = icc_mean_map(beta[0], beta[1], self.raters).map_err(|e| e.to_string())?;
        for r in 0..2 {
            out.residual[r] = f[r] - h[r];
            out.jacobian[2 * r] = jac[r][0];
            out.jacobian[2 * r + 1] = jac[r][1];
            if !(self.variance[r] > 0.0) {
                return Err(format!("working variance {} is not positive", self.variance[r]));
            }
            out.variance[r] = self.variance[r];
        }
        Ok(())
    }

    fn mean(&self, _x: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        Ok(icc_mean_map(beta[0], beta[1], self.raters)?.0.to_vec())
    }

    fn param_names(&self) -> Vec<String> {
        vec!["tau2".into(), "rho".into()]
    }
}

/// Endogenous location/scale model for a scalar pairwise response:
/// `S_i = (f - mu, (f - mu)^2 - sigma2)`, `D_i = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentModel {
    pub variance: [f64; 2],
}

impl PairModel for MomentModel {
    fn n_params(&self) -> usize {
        2
    }

    fn response_dim(&self) -> usize {
        1
    }

    fn equation_dim(&self) -> usize {
        2
    }

    fn covariate_dim(&self) -> usize {
        0
    }

    fn evaluate(
        &self,
        _k: usize,
        f: &[f64],
        _x: &[f64],
        beta: &[f64],
        out: &mut PairEval,
    ) -> std::result::Result<(), String> {
        let c = f[0] - beta[0];
        out.residual[0] = c;
        out.residual[1] = c * c - beta[1];
        out.jacobian.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        out.variance.copy_from_slice(&self.variance);
        Ok(())
    }

    fn mean(&self, _x: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![beta[0]])
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu".into(), "sigma2".into()]
    }
}
