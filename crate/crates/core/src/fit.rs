//! Solving the U-statistics-based estimating equation
//! `sum_i D_i' V_i^-1 (f_i - h_i) = 0` by Fisher scoring, its sandwich
//! covariance, and the adaptive working-variance loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, input, FrmError, Result};
use crate::kernels::Kernel;
use crate::model::{FrmModel, IccModel, Link, MomentModel, PairEval, PairModel, SubjectRecord, WorkingVariance};
use crate::ustat::{
    accumulate_scores, pair_count, projection_variance, reduce_pairs, Exec, PairData, PairScoreTable, ScoreMoments,
};

/// Condition number above which the information matrix counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Upper bound of the negative-binomial dispersion search; estimates at the
/// bound are reported as `+inf` (Poisson-like variance).
pub const TAU_MAX: f64 = 1e8;

/// How `Var(beta_hat)` is estimated from the pair scores at the solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovarianceEstimator {
    /// `B^-1 Sigma_U B^-1 / n` with `Sigma_U` the empirical variance of the
    /// Hájek scores.
    FirstOrder,
    /// Unbiased two-term variance of a second-order U-statistic,
    /// `4(n-2)/(n(n-1)) zeta1 + 2/(n(n-1)) zeta2`, mapped through `B^-1` and
    /// projected onto the PSD cone.
    Hoeffding,
    /// As `Hoeffding`, but the first-order component is kept only when its
    /// estimate exceeds `threshold` standard errors; otherwise the scores are
    /// treated as first-order degenerate and only the pair-level term remains.
    DegeneracyAdaptive { threshold: f64 },
}

impl Default for CovarianceEstimator {
    fn default() -> Self {
        CovarianceEstimator::DegeneracyAdaptive { threshold: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Starting value; `None` picks a link-dependent default.
    pub init_beta: Option<Vec<f64>>,
    pub tol_step: f64,
    pub tol_eq: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub adaptive_max_rounds: usize,
    pub adaptive_tol: f64,
    pub covariance: CovarianceEstimator,
    pub exec: Exec,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            init_beta: None,
            tol_step: 1e-8,
            tol_eq: 1e-8,
            max_iter: 100,
            max_halvings: 20,
            adaptive_max_rounds: 25,
            adaptive_tol: 1e-6,
            covariance: CovarianceEstimator::default(),
            exec: Exec::default(),
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol_step > 0.0) || !(self.tol_eq > 0.0) || !(self.adaptive_tol > 0.0) {
            return input("tolerances must be positive");
        }
        if self.max_iter == 0 {
            return input("max_iter must be at least 1");
        }
        Ok(())
    }
}

/// Sandwich pieces at a solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    /// Covariance of `beta_hat` (already divided by n).
    pub cov: DMatrix<f64>,
    /// `B = C(n,2)^-1 sum D' V^-1 D`.
    pub bread: DMatrix<f64>,
    /// Empirical variance of the Hájek scores.
    pub sigma_u: DMatrix<f64>,
    /// Centered second moment of the pair scores.
    pub pair_variance: DMatrix<f64>,
    /// Unbiased estimate of the first-order (projection) covariance of the scores.
    pub first_order: DMatrix<f64>,
    /// Standardized size of the first-order component; `None` when not computed.
    pub degeneracy_z: Option<f64>,
    pub first_order_retained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub param_names: Vec<String>,
    pub cov: DMatrix<f64>,
    pub bread: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub pair_variance: DMatrix<f64>,
    pub first_order_retained: bool,
    pub degeneracy_z: Option<f64>,
    /// Final nuisance parameter of the working variance, if any.
    pub nuisance: Option<f64>,
    /// Nuisance values visited by the adaptive loop.
    pub nuisance_trace: Vec<f64>,
    pub adaptive_rounds: usize,
    pub iterations: usize,
    pub converged: bool,
    pub eq_norm: f64,
    /// True when some step was accepted after exhausting the halvings.
    pub halving_exhausted: bool,
    pub n: usize,
    pub n_pairs: usize,
}

impl FitResult {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|i| self.cov[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Rows of (name, estimate, se, Wald z, two-sided p).
    pub fn inference(&self) -> Vec<Coefficient> {
        self.beta
            .iter()
            .zip(self.std_errors())
            .zip(&self.param_names)
            .map(|((&est, se), name)| {
                let z = est / se;
                let p = if z.is_finite() {
                    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
                } else if z.is_nan() {
                    f64::NAN
                } else {
                    0.0
                };
                Coefficient { name: name.clone(), estimate: est, std_error: se, z, p_value: p }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Estimating function and Fisher-scoring matrix summed over pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub u: DVector<f64>,
    pub j: DMatrix<f64>,
}

fn check_data<M: PairModel + ?Sized>(model: &M, data: &PairData) -> Result<()> {
    check_dim(model.response_dim(), data.d)?;
    check_dim(model.covariate_dim(), data.r)
}

/// Per-pair score `D' V^-1 S` written into `out`; also adds `D' V^-1 D` into
/// `info` when given.
fn pair_score<M: PairModel + ?Sized>(
    model: &M,
    data: &PairData,
    k: usize,
    beta: &[f64],
    ev: &mut PairEval,
    out: &mut [f64],
    info: Option<&mut [f64]>,
) -> std::result::Result<(), String> {
    let q = out.len();
    model.evaluate(k, data.response(k), data.covariate(k), beta, ev)?;
    out.iter_mut().for_each(|v| *v = 0.0);
    let d = ev.residual.len();
    for r in 0..d {
        let w = 1.0 / ev.variance[r];
        if !w.is_finite() || !ev.residual[r].is_finite() {
            return Err(format!(
                "non-finite weighted residual (variance {}, residual {})",
                ev.variance[r], ev.residual[r]
            ));
        }
        let row = &ev.jacobian[r * q..(r + 1) * q];
        let wr = w * ev.residual[r];
        for (o, dj) in out.iter_mut().zip(row) {
            *o += dj * wr;
        }
    }
    if let Some(info) = info {
        for r in 0..d {
            let w = 1.0 / ev.variance[r];
            let row = &ev.jacobian[r * q..(r + 1) * q];
            for a in 0..q {
                for b in 0..q {
                    info[a * q + b] += row[a] * w * row[b];
                }
            }
        }
    }
    Ok(())
}

/// `U = sum_i D_i' V_i^-1 (f_i - h_i)` and `J = sum_i D_i' V_i^-1 D_i` at `beta`.
pub fn assemble_ugee<M: PairModel + ?Sized>(model: &M, data: &PairData, beta: &[f64], exec: Exec) -> Result<Assembly> {
    check_data(model, data)?;
    let q = model.n_params();
    check_dim(q, beta.len())?;
    let d = model.equation_dim();
    let init = || (vec![0.0; q], vec![0.0; q * q], PairEval::new(d, q), vec![0.0; q]);
    let (u, j, _, _) = reduce_pairs(
        data.n,
        exec,
        init,
        |(u, j, ev, s), k, pair| {
            pair_score(model, data, k, beta, ev, s, Some(j))
                .map_err(|reason| FrmError::PairEvaluation { pair, reason })?;
            for (a, b) in u.iter_mut().zip(s.iter()) {
                *a += b;
            }
            Ok(())
        },
        |(u, j, _, _), (u2, j2, _, _)| {
            for (a, b) in u.iter_mut().zip(&u2) {
                *a += b;
            }
            for (a, b) in j.iter_mut().zip(&j2) {
                *a += b;
            }
        },
    )?;
    Ok(Assembly { u: DVector::from_vec(u), j: DMatrix::from_row_slice(q, q, &j) })
}

/// Materializes the per-pair scores `D_i' V_i^-1 S_i` at `beta`.
pub fn pair_score_table<M: PairModel + ?Sized>(model: &M, data: &PairData, beta: &[f64]) -> Result<PairScoreTable> {
    check_data(model, data)?;
    let q = model.n_params();
    let mut ev = PairEval::new(model.equation_dim(), q);
    let mut scores = vec![0.0; data.n_pairs() * q];
    for (k, pair) in crate::ustat::PairIter::new(data.n).enumerate() {
        pair_score(model, data, k, beta, &mut ev, &mut scores[k * q..(k + 1) * q], None)
            .map_err(|reason| FrmError::PairEvaluation { pair, reason })?;
    }
    PairScoreTable::new(data.n, q, scores)
}

fn condition_number(j: &DMatrix<f64>) -> f64 {
    let sym = (j + j.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let condition = condition_number(m);
    if condition > MAX_CONDITION {
        return Err(FrmError::SingularInformation { condition });
    }
    m.clone().try_inverse().ok_or(FrmError::SingularInformation { condition })
}

fn solve_system(j: &DMatrix<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let condition = condition_number(j);
    if condition > MAX_CONDITION {
        return Err(FrmError::SingularInformation { condition });
    }
    if let Some(ch) = j.clone().cholesky() {
        return Ok(ch.solve(u));
    }
    j.clone().lu().solve(u).ok_or(FrmError::SingularInformation { condition })
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn psd_projection(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    // exact symmetry
    for a in 0..out.nrows() {
        for b in 0..a {
            let v = 0.5 * (out[(a, b)] + out[(b, a)]);
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

fn default_init<M: PairModel + ?Sized>(model: &M, data: &PairData, link: Option<(Link, bool)>) -> Vec<f64> {
    let q = model.n_params();
    let mut beta = vec![0.0; q];
    if let Some((Link::Exp, true)) = link {
        if let Some(start) = log_scale_start(data, q) {
            return start;
        }
        let mean = data.f.iter().sum::<f64>() / data.f.len() as f64;
        if mean > 0.0 {
            beta[0] = mean.ln();
        }
    }
    beta
}

/// Least squares of `ln f` on `(1, X)`, with nonpositive responses set to
/// half the smallest positive one.
fn log_scale_start(data: &PairData, q: usize) -> Option<Vec<f64>> {
    if data.d != 1 || q != data.r + 1 {
        return None;
    }
    let floor = 0.5 * data.f.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return None;
    }
    let mut xtx = DMatrix::<f64>::zeros(q, q);
    let mut xty = DVector::<f64>::zeros(q);
    let mut z = DVector::<f64>::zeros(q);
    for k in 0..data.n_pairs() {
        z[0] = 1.0;
        z.rows_mut(1, data.r).copy_from_slice(data.covariate(k));
        let y = data.f[k].max(floor).ln();
        xtx += &z * z.transpose();
        xty += &z * y;
    }
    if condition_number(&xtx) > MAX_CONDITION {
        return None;
    }
    let beta = xtx.cholesky()?.solve(&xty);
    beta.iter().all(|v| v.is_finite()).then(|| beta.as_slice().to_vec())
}

/// Sandwich covariance of `beta_hat` from the pair scores at `beta`.
pub fn sandwich_variance<M: PairModel + ?Sized>(
    model: &M,
    data: &PairData,
    beta: &[f64],
    estimator: CovarianceEstimator,
    exec: Exec,
) -> Result<Sandwich> {
    let asm = assemble_ugee(model, data, beta, exec)?;
    let total = data.n_pairs() as f64;
    let bread = asm.j / total;
    let bread_inv = checked_inverse(&bread)?;
    sandwich_from_bread(model, data, beta, estimator, exec, bread, &bread_inv)
}

fn sandwich_from_bread<M: PairModel + ?Sized>(
    model: &M,
    data: &PairData,
    beta: &[f64],
    estimator: CovarianceEstimator,
    exec: Exec,
    bread: DMatrix<f64>,
    bread_inv: &DMatrix<f64>,
) -> Result<Sandwich> {
    let q = model.n_params();
    let d = model.equation_dim();
    let adaptive = matches!(estimator, CovarianceEstimator::DegeneracyAdaptive { .. });
    let moments = accumulate_scores(data.n, q, exec, adaptive, adaptive.then_some(bread_inv), |k, pair, out| {
        let mut ev = PairEval::new(d, q);
        pair_score(model, data, k, beta, &mut ev, out, None).map_err(|reason| FrmError::PairEvaluation { pair, reason })
    })?;
    let parts = ScoreVariance::from_moments(&moments);
    let n = data.n as f64;
    let sigma_u = projection_variance(&moments.hajek());
    let first_order_cov = bread_inv * &sigma_u * bread_inv / n;
    let (c1, c2) = (4.0 * (n - 2.0) / (n * (n - 1.0)), 2.0 / (n * (n - 1.0)));

    let (cov, z, retained) = match estimator {
        CovarianceEstimator::FirstOrder => (first_order_cov, None, true),
        CovarianceEstimator::Hoeffding => {
            let meat = &parts.first_order * c1 + &parts.pair_variance * c2;
            (psd_projection(&(bread_inv * meat * bread_inv)), None, true)
        }
        CovarianceEstimator::DegeneracyAdaptive { threshold } => {
            let z = parts.degeneracy_z(&moments, bread_inv);
            let retained = z > threshold;
            let mut meat = &parts.pair_variance * c2;
            if retained {
                meat += &parts.first_order * c1;
            }
            (psd_projection(&(bread_inv * meat * bread_inv)), Some(z), retained)
        }
    };
    Ok(Sandwich {
        cov,
        bread,
        sigma_u,
        pair_variance: parts.pair_variance,
        first_order: parts.first_order,
        degeneracy_z: z,
        first_order_retained: retained,
    })
}

/// Variance components of a degree-2 U-statistic built from pair scores.
struct ScoreVariance {
    /// `zeta1`: covariance of two scores sharing one subject.
    first_order: DMatrix<f64>,
    /// `zeta2`: variance of a single pair score.
    pair_variance: DMatrix<f64>,
    /// `sum_j sum_{k != l} s_jk s_jl'`.
    triple_sum: DMatrix<f64>,
}

impl ScoreVariance {
    fn from_moments(m: &ScoreMoments) -> Self {
        let (n, q) = (m.n, m.q);
        let total = pair_count(n) as f64;
        let outer = DMatrix::from_row_slice(q, q, &m.outer);
        let mean = DVector::from_column_slice(&m.sum) / total;
        let pair_variance = &outer / total - &mean * mean.transpose();
        let mut triple = -2.0 * &outer;
        for j in 0..n {
            let a = DVector::from_column_slice(&m.subject_sums[j * q..(j + 1) * q]);
            triple += &a * a.transpose();
        }
        let first_order = if n >= 3 {
            let nf = n as f64;
            &triple / (nf * (nf - 1.0) * (nf - 2.0))
        } else {
            DMatrix::zeros(q, q)
        };
        Self { first_order, pair_variance, triple_sum: triple }
    }

    /// `tr(M T M') / sd`, where `sd` is the standard deviation of the triple
    /// sum's trace when all cross products are uncorrelated (first-order
    /// degenerate scores).
    fn degeneracy_z(&self, m: &ScoreMoments, metric: &DMatrix<f64>) -> f64 {
        let q = m.q;
        let trace = (metric * &self.triple_sum * metric.transpose()).trace();
        let (Some(g), Some(quart)) = (m.subject_outer.as_ref(), m.subject_quartic.as_ref()) else {
            return f64::INFINITY;
        };
        let mut var = 0.0;
        for j in 0..m.n {
            let gj = DMatrix::from_row_slice(q, q, &g[j * q * q..(j + 1) * q * q]);
            let t = metric * gj * metric.transpose();
            var += t.iter().map(|v| v * v).sum::<f64>() - quart[j];
        }
        var *= 2.0;
        if var > 0.0 {
            trace / var.sqrt()
        } else if trace > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Fisher-scoring solution of the estimating equation with step halving,
/// followed by the sandwich covariance.
pub fn solve_ugee<M: PairModel + ?Sized>(model: &M, data: &PairData, config: &FitConfig) -> Result<FitResult> {
    solve_with_init(model, data, config, None)
}

fn solve_with_init<M: PairModel + ?Sized>(
    model: &M,
    data: &PairData,
    config: &FitConfig,
    link: Option<(Link, bool)>,
) -> Result<FitResult> {
    config.validate()?;
    check_data(model, data)?;
    let q = model.n_params();
    if data.n < q + 1 {
        return input(format!("need at least {} subjects for {q} parameters, got {}", q + 1, data.n));
    }
    let mut beta = match &config.init_beta {
        Some(b) => {
            check_dim(q, b.len())?;
            b.clone()
        }
        None => default_init(model, data, link),
    };
    let total = data.n_pairs() as f64;
    let exec = config.exec;
    let mut asm = assemble_ugee(model, data, &beta, exec)?;
    let mut iterations = 0;
    let mut step_norm = f64::INFINITY;
    let mut halving_exhausted = false;

    loop {
        let eq_norm = sup_norm(asm.u.as_slice()) / total;
        if eq_norm <= config.tol_eq {
            let bread = &asm.j / total;
            let bread_inv = checked_inverse(&bread)?;
            let sw = sandwich_from_bread(model, data, &beta, config.covariance, exec, bread, &bread_inv)?;
            return Ok(FitResult {
                param_names: model.param_names(),
                beta,
                cov: sw.cov,
                bread: sw.bread,
                sigma_u: sw.sigma_u,
                pair_variance: sw.pair_variance,
                first_order_retained: sw.first_order_retained,
                degeneracy_z: sw.degeneracy_z,
                nuisance: None,
                nuisance_trace: Vec::new(),
                adaptive_rounds: 0,
                iterations,
                converged: true,
                eq_norm,
                halving_exhausted,
                n: data.n,
                n_pairs: data.n_pairs(),
            });
        }
        if iterations >= config.max_iter {
            return Err(FrmError::NonConvergence { iterations, beta, eq_norm, step_norm });
        }
        let step = solve_system(&asm.j, &asm.u)?;
        let current = asm.u.norm();
        let mut scale = 1.0;
        let mut accepted = None;
        let mut fallback = None;
        for _ in 0..=config.max_halvings {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            if let Ok(next) = assemble_ugee(model, data, &cand, exec) {
                if next.u.norm() <= current {
                    accepted = Some((cand, next));
                    break;
                }
                fallback = Some((cand, next));
            }
            scale *= 0.5;
        }
        let (cand, next) = match accepted {
            Some(a) => a,
            None => {
                halving_exhausted = true;
                fallback.ok_or(FrmError::NonConvergence { iterations, beta: beta.clone(), eq_norm, step_norm })?
            }
        };
        step_norm = beta.iter().zip(&cand).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        beta = cand;
        asm = next;
        iterations += 1;
        if step_norm <= config.tol_step * 1e-6 && sup_norm(asm.u.as_slice()) / total > config.tol_eq {
            // stalled: further steps cannot reduce the equation norm
            return Err(FrmError::NonConvergence {
                iterations,
                beta,
                eq_norm: sup_norm(asm.u.as_slice()) / total,
                step_norm,
            });
        }
    }
}

/// Least-squares estimate of a working-variance nuisance parameter from the
/// residuals at `beta`.
pub fn estimate_nuisance(model: &FrmModel, data: &PairData, beta: &[f64], exec: Exec) -> Result<f64> {
    check_data(model, data)?;
    let kind = model.working_variance.base();
    if let WorkingVariance::Constant(_) = kind {
        return Ok(pairwise_variance(data, 0));
    }
    if !matches!(kind, WorkingVariance::ProportionalToMean(_) | WorkingVariance::NegBinomial(_)) {
        return input(format!("working variance '{}' has no nuisance parameter", kind.name()));
    }
    check_dim(model.n_params(), beta.len())?;
    // [sum r^2 h, sum h^2, sum (r^2 - h) h^2, sum h^4]
    let sums = reduce_pairs(
        data.n,
        exec,
        || [0.0f64; 4],
        |acc, k, pair| {
            let h = model
                .mean(data.covariate(k), beta)
                .map_err(|e| FrmError::PairEvaluation { pair, reason: e.to_string() })?[0];
            let r = data.response(k)[0] - h;
            let (h2, r2) = (h * h, r * r);
            acc[0] += r2 * h;
            acc[1] += h2;
            acc[2] += (r2 - h) * h2;
            acc[3] += h2 * h2;
            Ok(())
        },
        |a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        },
    )?;
    match kind {
        WorkingVariance::ProportionalToMean(_) => {
            if !(sums[1] > 0.0) {
                return input("cannot estimate tau2: all fitted means are zero");
            }
            Ok(sums[0] / sums[1])
        }
        _ => {
            // minimize sum (r^2 - h - u h^2)^2 over u = 1/tau in [1/TAU_MAX, inf)
            if !(sums[3] > 0.0) {
                return input("cannot estimate tau: all fitted means are zero");
            }
            let u = sums[2] / sums[3];
            if u <= 1.0 / TAU_MAX {
                Ok(f64::INFINITY)
            } else {
                Ok(1.0 / u)
            }
        }
    }
}

/// Sample variance (denominator N - 1) of response component `c` over pairs.
pub fn pairwise_variance(data: &PairData, c: usize) -> f64 {
    let total = data.n_pairs();
    let mean = (0..total).map(|k| data.response(k)[c]).sum::<f64>() / total as f64;
    let ss = (0..total).map(|k| (data.response(k)[c] - mean).powi(2)).sum::<f64>();
    if total > 1 {
        ss / (total as f64 - 1.0)
    } else {
        0.0
    }
}

fn nuisance_close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol * a.abs().max(1.0)
}

/// Fits a scalar FRM, alternating nuisance estimation and the estimating
/// equation until the working-variance parameter settles.
pub fn adaptive_fit(model: &FrmModel, data: &PairData, config: &FitConfig) -> Result<FitResult> {
    let link = Some((model.link, model.intercept));
    match model.working_variance.base() {
        WorkingVariance::Constant(_) => {
            let c = pairwise_variance(data, 0);
            if !(c > 0.0) {
                return input("pairwise responses are constant; constant working variance is zero");
            }
            let fixed = model.with_variance(model.working_variance.with_nuisance(c));
            let mut fit = solve_with_init(&fixed, data, config, link)?;
            fit.nuisance = Some(c);
            fit.nuisance_trace = vec![c];
            fit.adaptive_rounds = 1;
            Ok(fit)
        }
        WorkingVariance::ProportionalToMean(_) | WorkingVariance::NegBinomial(_) => {
            let mut nu = model.working_variance.nuisance().unwrap_or(1.0);
            let mut trace = Vec::new();
            let mut cfg = config.clone();
            for round in 1..=config.adaptive_max_rounds {
                let current = model.with_variance(model.working_variance.with_nuisance(nu));
                let mut fit = solve_with_init(&current, data, &cfg, link)?;
                let next = estimate_nuisance(&current, data, &fit.beta, config.exec)?;
                trace.push(next);
                if nuisance_close(nu, next, config.adaptive_tol) {
                    fit.nuisance = Some(nu);
                    fit.nuisance_trace = trace;
                    fit.adaptive_rounds = round;
                    return Ok(fit);
                }
                cfg.init_beta = Some(fit.beta);
                nu = next;
            }
            Err(FrmError::AdaptiveNonConvergence { rounds: config.adaptive_max_rounds, trace })
        }
        _ => solve_with_init(model, data, config, link),
    }
}

/// Rater-agreement fit: `(tau2, rho)` from the ICC pair kernel, with the
/// diagonal working variance estimated from the pairwise sample and
/// refreshed once from the residuals at the first solution.
pub fn fit_icc(subjects: &[SubjectRecord], config: &FitConfig) -> Result<FitResult> {
    let k = subjects.first().map(|s| s.y.len()).unwrap_or(0);
    let data = PairData::responses_only(subjects, &Kernel::IccPair(k))?;
    let var = [pairwise_variance(&data, 0), pairwise_variance(&data, 1)];
    if !(var[0] > 0.0 && var[1] > 0.0) {
        return input("ICC pair responses have zero variance");
    }
    let total = data.n_pairs() as f64;
    let mean_f2 = (0..data.n_pairs()).map(|i| data.response(i)[1]).sum::<f64>() / total;
    let mut cfg = config.clone();
    if cfg.init_beta.is_none() {
        cfg.init_beta = Some(vec![mean_f2.max(f64::MIN_POSITIVE), 0.0]);
    }
    let model = IccModel { raters: k, variance: var };
    let first = solve_ugee(&model, &data, &cfg)?;
    let (h, _) = crate::model::icc_mean_map(first.beta[0], first.beta[1], k)?;
    let mut refreshed = [0.0; 2];
    for i in 0..data.n_pairs() {
        let f = data.response(i);
        refreshed[0] += (f[0] - h[0]).powi(2) / total;
        refreshed[1] += (f[1] - h[1]).powi(2) / total;
    }
    cfg.init_beta = Some(first.beta.clone());
    let mut fit = solve_ugee(&IccModel { raters: k, variance: refreshed }, &data, &cfg)?;
    fit.adaptive_rounds = 1;
    fit.nuisance_trace = vec![refreshed[0], refreshed[1]];
    Ok(fit)
}

/// Location/scale fit `(mu, sigma2)` of a scalar pairwise response with
/// plug-in diagonal working variance.
pub fn fit_moments(data: &PairData, config: &FitConfig) -> Result<FitResult> {
    check_dim(1, data.d)?;
    let total = data.n_pairs() as f64;
    let mean = data.f.iter().sum::<f64>() / total;
    let var_f = pairwise_variance(data, 0);
    let m2 = data.f.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / total;
    let var_sq = data.f.iter().map(|f| ((f - mean).powi(2) - m2).powi(2)).sum::<f64>() / total;
    if !(var_f > 0.0 && var_sq > 0.0) {
        return input("pairwise responses are degenerate");
    }
    let model = MomentModel { variance: [var_f, var_sq] };
    let data0 = PairData { r: 0, x: Vec::new(), ..data.clone() };
    let mut cfg = config.clone();
    if cfg.init_beta.is_none() {
        cfg.init_beta = Some(vec![0.0, 1.0]);
    }
    solve_ugee(&model, &data0, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Link;
    use approx::assert_relative_eq;

    fn exact_identity_data(n: usize, beta: f64) -> PairData {
        let x: Vec<f64> = (0..crate::ustat::pair_count(n)).map(|k| ((k * 7) % 11) as f64 - 5.0).collect();
        let f: Vec<f64> = x.iter().map(|v| v * beta).collect();
        PairData::new(n, 1, 1, f, x).unwrap()
    }

    #[test]
    fn exact_data_zero_equation() {
        let data = exact_identity_data(6, 1.7);
        let model = FrmModel::new(Link::Identity, false, 1, WorkingVariance::Constant(1.0));
        let asm = assemble_ugee(&model, &data, &[1.7], Exec::serial()).unwrap();
        assert!(asm.u[0].abs() < 1e-12);
        let sx2: f64 = data.x.iter().map(|v| v * v).sum();
        assert_relative_eq!(asm.j[(0, 0)], sx2, max_relative = 1e-14);
    }

    #[test]
    fn identity_link_converges_fast_on_exact_data() {
        let data = exact_identity_data(8, -0.4);
        let model = FrmModel::new(Link::Identity, false, 1, WorkingVariance::Constant(1.0));
        let fit = solve_ugee(&model, &data, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
        assert_relative_eq!(fit.beta[0], -0.4, max_relative = 1e-12);
        assert!(fit.cov[(0, 0)].abs() < 1e-20);
    }

    #[test]
    fn constant_covariate_with_intercept_is_singular() {
        let n = 5;
        let x = vec![1.0; crate::ustat::pair_count(n)];
        let f: Vec<f64> = (0..x.len()).map(|k| k as f64).collect();
        let data = PairData::new(n, 1, 1, f, x).unwrap();
        let model = FrmModel::new(Link::Identity, true, 1, WorkingVariance::Constant(1.0));
        assert!(matches!(solve_ugee(&model, &data, &FitConfig::default()), Err(FrmError::SingularInformation { .. })));
    }

    #[test]
    fn too_few_subjects() {
        let data = exact_identity_data(2, 1.0);
        let model = FrmModel::new(Link::Identity, true, 1, WorkingVariance::Constant(1.0));
        assert!(matches!(solve_ugee(&model, &data, &FitConfig::default()), Err(FrmError::Input(_))));
    }

    #[test]
    fn max_iter_reports_nonconvergence() {
        let n = 10;
        let x: Vec<f64> = (0..crate::ustat::pair_count(n)).map(|k| (k % 5) as f64 * 0.1).collect();
        let f: Vec<f64> = x.iter().map(|v| (1.0 + 2.0 * v).exp()).collect();
        let data = PairData::new(n, 1, 1, f, x).unwrap();
        let model = FrmModel::new(Link::Exp, true, 1, WorkingVariance::Poisson);
        let cfg = FitConfig { max_iter: 1, init_beta: Some(vec![0.0, 0.0]), ..FitConfig::default() };
        match solve_ugee(&model, &data, &cfg) {
            Err(FrmError::NonConvergence { iterations, beta, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(beta.len(), 2);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn nuisance_without_overdispersion() {
        // r^2 = h exactly: tau2 = 1
        let n = 4;
        let x = vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5];
        let f: Vec<f64> = x
            .iter()
            .map(|v: &f64| {
                let h = v.exp();
                h + h.sqrt()
            })
            .collect();
        let data = PairData::new(n, 1, 1, f, x).unwrap();
        let model = FrmModel::new(Link::Exp, false, 1, WorkingVariance::ProportionalToMean(1.0));
        let tau2 = estimate_nuisance(&model, &data, &[1.0], Exec::serial()).unwrap();
        assert_relative_eq!(tau2, 1.0, max_relative = 1e-12);
        let nb = FrmModel::new(Link::Exp, false, 1, WorkingVariance::NegBinomial(1.0));
        assert_eq!(estimate_nuisance(&nb, &data, &[1.0], Exec::serial()).unwrap(), f64::INFINITY);
        let pois = FrmModel::new(Link::Exp, false, 1, WorkingVariance::Poisson);
        assert!(estimate_nuisance(&pois, &data, &[1.0], Exec::serial()).is_err());
    }

    #[test]
    fn constant_nuisance_is_pair_variance() {
        let data = exact_identity_data(5, 2.0);
        let model = FrmModel::new(Link::Identity, false, 1, WorkingVariance::Constant(1.0));
        let c = estimate_nuisance(&model, &data, &[0.0], Exec::serial()).unwrap();
        let mean = data.f.iter().sum::<f64>() / 10.0;
        let var = data.f.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 9.0;
        assert_relative_eq!(c, var, max_relative = 1e-14);
    }

    #[test]
    fn psd_projection_clips() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_projection(&m);
        let eig = p.symmetric_eigenvalues();
        assert!(eig.iter().all(|v| *v > -1e-12));
        assert_relative_eq!(p[(0, 0)], 1.5, max_relative = 1e-12);
    }
}
