//! Data generators for the worked examples, the negative-binomial
//! working-likelihood benchmark, and a reproducible Monte Carlo harness.

use std::collections::BTreeMap;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::brent::BrentOpt;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{input, FrmError, Result};
use crate::fit::{adaptive_fit, fit_icc, FitConfig, TAU_MAX};
use crate::kernels::{Kernel, TieRule};
use crate::model::{FrmModel, Link, PairTransform, SubjectRecord, WorkingVariance};
use crate::ustat::{pair_count, Exec, PairData, PairIter};

/// Generator for one dataset. Every generator is a pure function of its seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of replicate `r`, independent of execution order.
pub fn child_seed(seed: u64, replicate: u64) -> u64 {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    g.set_stream(replicate);
    g.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbParams {
    pub tau: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for NbParams {
    fn default() -> Self {
        Self { tau: 10.0, beta0: 3.0, beta1: 3.0, a: 0.0, b: 1.0 }
    }
}

/// Negative-binomial draw with mean `mu` and Gamma shape `tau`.
pub fn sample_nb<R: Rng + ?Sized>(rng: &mut R, mu: f64, tau: f64) -> Result<f64> {
    if !(mu >= 0.0) || !(tau > 0.0) {
        return input(format!("invalid negative binomial parameters mu={mu}, tau={tau}"));
    }
    if mu == 0.0 {
        return Ok(0.0);
    }
    let gamma = Gamma::new(tau, mu / tau).map_err(|e| FrmError::Input(e.to_string()))?;
    let lambda = gamma.sample(rng);
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    let poisson = Poisson::new(lambda).map_err(|e| FrmError::Input(e.to_string()))?;
    Ok(poisson.sample(rng))
}

/// Count pairs: subject covariates `U(a, b)`, pair covariate the sum, one
/// negative-binomial response per unordered pair with mean
/// `exp(beta0 + beta1 * x)`.
pub fn gen_nb_scenario(n: usize, seed: u64, params: &NbParams) -> Result<PairData> {
    if !(params.tau > 0.0) || !(params.b > params.a) {
        return input("negative binomial scenario needs tau > 0 and b > a");
    }
    if n < 2 {
        return input("need at least two subjects");
    }
    let mut rng = rng_from_seed(seed);
    let unif = Uniform::new(params.a, params.b).map_err(|e| FrmError::Input(e.to_string()))?;
    let xs: Vec<f64> = (0..n).map(|_| unif.sample(&mut rng)).collect();
    let mut f = Vec::with_capacity(pair_count(n));
    let mut x = Vec::with_capacity(pair_count(n));
    for pair in PairIter::new(n) {
        let xp = xs[pair.i1] + xs[pair.i2];
        let mu = (params.beta0 + params.beta1 * xp).exp();
        f.push(sample_nb(&mut rng, mu, params.tau)?);
        x.push(xp);
    }
    PairData::new(n, 1, 1, f, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub beta: f64,
    pub sigma_x: f64,
    /// Residual standard deviation.
    pub sigma_eps: f64,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self { beta: 1.0, sigma_x: 1.0, sigma_eps: 1.0 }
    }
}

impl LinearParams {
    /// Information bound for `n * Var(beta_hat)`.
    pub fn cr_target(&self) -> f64 {
        self.sigma_eps.powi(2) / self.sigma_x.powi(2)
    }
}

/// `Y = X beta + eps` with `X ~ N(0, sigma_x^2)`, `eps ~ N(0, sigma_eps^2)`.
pub fn gen_linear_exogenous(n: usize, seed: u64, params: &LinearParams) -> Result<Vec<SubjectRecord>> {
    if !(params.sigma_x > 0.0) || !(params.sigma_eps > 0.0) {
        return input("linear scenario needs positive standard deviations");
    }
    let mut rng = rng_from_seed(seed);
    let nx = normal(0.0, params.sigma_x)?;
    let ne = normal(0.0, params.sigma_eps)?;
    (0..n)
        .map(|i| {
            let x = nx.sample(&mut rng);
            let y = x * params.beta + ne.sample(&mut rng);
            SubjectRecord::new(format!("s{i}"), vec![y], vec![x])
        })
        .collect()
}

fn normal(mean: f64, sd: f64) -> Result<Normal<f64>> {
    Normal::new(mean, sd).map_err(|e| FrmError::Input(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccParams {
    pub mu: f64,
    pub sigma_b2: f64,
    pub sigma_bg2: f64,
    pub sigma_e2: f64,
    /// Rater effects; their length is the number of raters and they sum to zero.
    pub gamma: Vec<f64>,
}

impl Default for IccParams {
    fn default() -> Self {
        Self { mu: 5.0, sigma_b2: 1.0, sigma_bg2: 0.3, sigma_e2: 0.7, gamma: vec![-0.3, -0.1, 0.1, 0.3] }
    }
}

impl IccParams {
    pub fn raters(&self) -> usize {
        self.gamma.len()
    }

    pub fn true_rho(&self) -> f64 {
        let k = self.raters() as f64;
        (self.sigma_b2 - self.sigma_bg2 / (k - 1.0)) / (self.sigma_b2 + self.sigma_bg2 + self.sigma_e2)
    }

    fn validate(&self) -> Result<()> {
        if self.raters() < 2 {
            return input("ICC scenario needs at least two raters");
        }
        if [self.sigma_b2, self.sigma_bg2, self.sigma_e2].iter().any(|v| !(*v >= 0.0)) {
            return input("ICC variance components must be nonnegative");
        }
        let scale = self.gamma.iter().map(|g| g.abs()).sum::<f64>().max(1.0);
        if self.gamma.iter().sum::<f64>().abs() > 1e-12 * scale {
            return input("rater effects must sum to zero");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IccDataset {
    pub subjects: Vec<SubjectRecord>,
    pub true_rho: f64,
}

/// Two-way mixed-effects ratings
/// `Y_ik = mu + b_i + g_k + (bg)_ik + e_ik`.
/// The interaction is centered within each subject and scaled so that each
/// entry keeps marginal variance `sigma_bg2` after centering.
pub fn gen_icc_ratings(n: usize, seed: u64, params: &IccParams) -> Result<IccDataset> {
    params.validate()?;
    let k = params.raters();
    let kf = k as f64;
    let mut rng = rng_from_seed(seed);
    let nb = normal(0.0, params.sigma_b2.sqrt())?;
    let nbg = normal(0.0, (params.sigma_bg2 * kf / (kf - 1.0)).sqrt())?;
    let ne = normal(0.0, params.sigma_e2.sqrt())?;
    let mut subjects = Vec::with_capacity(n);
    let mut inter = vec![0.0; k];
    for i in 0..n {
        let b = nb.sample(&mut rng);
        inter.iter_mut().for_each(|v| *v = nbg.sample(&mut rng));
        let center = inter.iter().sum::<f64>() / kf;
        let y = (0..k).map(|j| params.mu + b + params.gamma[j] + (inter[j] - center) + ne.sample(&mut rng)).collect();
        subjects.push(SubjectRecord::new(format!("s{i}"), y, Vec::new())?);
    }
    Ok(IccDataset { subjects, true_rho: params.true_rho() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwwParams {
    pub beta: f64,
}

impl Default for MwwParams {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

/// `Y = beta X + eps`, `X ~ N(0, 1)`, `eps ~ N(0, 1/2)`, so that
/// `Pr(Y_1 <= Y_2 | X) = Phi(-beta (X_1 - X_2))`.
pub fn gen_mww_probit(n: usize, seed: u64, params: &MwwParams) -> Result<Vec<SubjectRecord>> {
    let mut rng = rng_from_seed(seed);
    let nx = normal(0.0, 1.0)?;
    let ne = normal(0.0, 0.5f64.sqrt())?;
    (0..n)
        .map(|i| {
            let x = nx.sample(&mut rng);
            SubjectRecord::new(format!("s{i}"), vec![params.beta * x + ne.sample(&mut rng)], vec![x])
        })
        .collect()
}

/// Negative-binomial likelihood fit treating all pairs as independent.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingMle {
    pub beta: Vec<f64>,
    /// Inverse observed information for `beta`.
    pub cov: DMatrix<f64>,
    /// Dispersion; `+inf` when the search hits its upper bound.
    pub tau: f64,
    pub iterations: usize,
}

/// Log-likelihood gap below which a dispersion counts as infinite.
const PROFILE_FLAT: f64 = 1e-3;
const LOG_TAU_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3

fn nb_loglik(f: &[f64], mu: &[f64], tau: f64) -> f64 {
    f.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            libm::lgamma(y + tau) - libm::lgamma(tau) - libm::lgamma(y + 1.0)
                + tau * (tau / (tau + m)).ln()
                + if y > 0.0 { y * (m / (tau + m)).ln() } else { 0.0 }
        })
        .sum()
}

struct TauProfile<'a> {
    f: &'a [f64],
    mu: &'a [f64],
}

impl CostFunction for TauProfile<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, log_tau: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-nb_loglik(self.f, self.mu, log_tau.exp()))
    }
}

fn nb_means(data: &PairData, beta: &[f64]) -> Result<Vec<f64>> {
    data.x
        .iter()
        .map(|x| {
            let eta = beta[0] + beta[1] * x;
            Link::Exp.mean(eta)
        })
        .collect()
}

/// NB weight `mu tau / (mu + tau)`; Poisson weight when `tau` is infinite.
fn nb_weight(mu: f64, tau: f64) -> f64 {
    if tau.is_infinite() {
        mu
    } else {
        mu * tau / (mu + tau)
    }
}

/// Alternates Fisher scoring on `beta` (log link with intercept, scalar
/// pair covariate) with a Brent search on `ln tau`.
pub fn nb_working_mle(data: &PairData) -> Result<WorkingMle> {
    if data.d != 1 || data.r != 1 {
        return input("working NB likelihood expects scalar responses and covariates");
    }
    if data.f.iter().any(|v| !(*v >= 0.0)) {
        return input("working NB likelihood needs nonnegative counts");
    }
    let mean = data.f.iter().sum::<f64>() / data.f.len() as f64;
    if !(mean > 0.0) {
        return input("all counts are zero");
    }
    let log_tau_max = TAU_MAX.ln();
    let mut beta = vec![mean.ln(), 0.0];
    let mut tau = 1.0;
    for iteration in 1..=200 {
        // scoring on beta at fixed tau
        for _ in 0..50 {
            let mu = nb_means(data, &beta)?;
            let mut score = DVector::<f64>::zeros(2);
            let mut info = DMatrix::<f64>::zeros(2, 2);
            for ((&y, &m), &x) in data.f.iter().zip(&mu).zip(&data.x) {
                let w = nb_weight(m, tau);
                let z = [1.0, x];
                for a in 0..2 {
                    score[a] += z[a] * (y - m) * w / m;
                    for b in 0..2 {
                        info[(a, b)] += z[a] * z[b] * w;
                    }
                }
            }
            let step = info.lu().solve(&score).ok_or(FrmError::SingularInformation { condition: f64::INFINITY })?;
            beta[0] += step[0];
            beta[1] += step[1];
            if step.amax() <= 1e-12 * (1.0 + beta[0].abs().max(beta[1].abs())) {
                break;
            }
        }
        let mu = nb_means(data, &beta)?;
        let solver = BrentOpt::new(LOG_TAU_MIN, log_tau_max).set_tolerance(1e-10, 1e-10);
        let res = Executor::new(TauProfile { f: &data.f, mu: &mu }, solver)
            .configure(|s| s.max_iters(500))
            .run()
            .map_err(|e| FrmError::Input(format!("dispersion search failed: {e}")))?;
        let log_tau =
            *res.state().get_best_param().ok_or_else(|| FrmError::Input("dispersion search failed".into()))?;
        let best = -nb_loglik(&data.f, &mu, log_tau.exp());
        let at_bound = -nb_loglik(&data.f, &mu, TAU_MAX);
        // indistinguishable from the bound: no evidence of overdispersion
        let next = if log_tau >= log_tau_max - 1e-3 || at_bound - best <= PROFILE_FLAT {
            f64::INFINITY
        } else {
            log_tau.exp()
        };
        let settled =
            if next.is_infinite() || tau.is_infinite() { next == tau } else { (next - tau).abs() <= 1e-7 * tau };
        tau = next;
        if settled {
            let mu = nb_means(data, &beta)?;
            let mut obs = DMatrix::<f64>::zeros(2, 2);
            for ((&y, &m), &x) in data.f.iter().zip(&mu).zip(&data.x) {
                let w = if tau.is_infinite() { m } else { tau * m * (tau + y) / (m + tau).powi(2) };
                let z = [1.0, x];
                for a in 0..2 {
                    for b in 0..2 {
                        obs[(a, b)] += z[a] * z[b] * w;
                    }
                }
            }
            let cov = obs.try_inverse().ok_or(FrmError::SingularInformation { condition: f64::INFINITY })?;
            return Ok(WorkingMle { beta, cov, tau, iterations: iteration });
        }
    }
    Err(FrmError::NonConvergence { iterations: 200, beta, eq_norm: f64::NAN, step_norm: f64::NAN })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    NbCount(NbParams),
    LinearExogenous(LinearParams),
    IccRatings(IccParams),
    MwwProbit(MwwParams),
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::NbCount(_) => "nb",
            Scenario::LinearExogenous(_) => "linear",
            Scenario::IccRatings(_) => "icc",
            Scenario::MwwProbit(_) => "mww",
        }
    }

    /// Methods compared by default for this scenario.
    pub fn default_methods(&self) -> Vec<Method> {
        match self {
            Scenario::NbCount(_) => vec![
                Method::Ugee(VarianceKind::NegBinomial),
                Method::Ugee(VarianceKind::Poisson),
                Method::Ugee(VarianceKind::Constant),
                Method::WorkingMle,
            ],
            Scenario::LinearExogenous(_) | Scenario::IccRatings(_) => vec![Method::Ugee(VarianceKind::Constant)],
            Scenario::MwwProbit(_) => vec![Method::Ugee(VarianceKind::Bernoulli)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceKind {
    Constant,
    Poisson,
    ProportionalToMean,
    NegBinomial,
    Bernoulli,
}

impl VarianceKind {
    /// Starting working variance; nuisance parameters are re-estimated.
    pub fn initial(&self) -> WorkingVariance {
        match self {
            VarianceKind::Constant => WorkingVariance::Constant(1.0),
            VarianceKind::Poisson => WorkingVariance::Poisson,
            VarianceKind::ProportionalToMean => WorkingVariance::ProportionalToMean(1.0),
            VarianceKind::NegBinomial => WorkingVariance::NegBinomial(1.0),
            VarianceKind::Bernoulli => WorkingVariance::Bernoulli,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            VarianceKind::Constant => "Const",
            VarianceKind::Poisson => "Pois",
            VarianceKind::ProportionalToMean => "PropMean",
            VarianceKind::NegBinomial => "NB",
            VarianceKind::Bernoulli => "Bern",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Ugee(VarianceKind),
    WorkingMle,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Ugee(v) => format!("UGEE-{}", v.label()),
            Method::WorkingMle => "Working-MLE".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    /// Settings for each individual fit. Replicates already run in
    /// parallel, so fits default to serial execution.
    pub fit: FitConfig,
}

impl McConfig {
    pub fn new(scenario: Scenario, n: usize, replicates: usize, seed: u64) -> Self {
        Self {
            n,
            replicates,
            seed,
            methods: scenario.default_methods(),
            scenario,
            fit: FitConfig { exec: Exec::serial(), ..FitConfig::default() },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return input(format!("Monte Carlo needs n >= 10, got {}", self.n));
        }
        if self.replicates == 0 {
            return input("Monte Carlo needs at least one replicate");
        }
        if self.methods.is_empty() {
            return input("no methods to compare");
        }
        for m in &self.methods {
            let ok = match (&self.scenario, m) {
                (Scenario::NbCount(_), _) => true,
                (Scenario::IccRatings(_), Method::Ugee(VarianceKind::Constant)) => true,
                (_, Method::WorkingMle) | (Scenario::IccRatings(_), _) => false,
                _ => true,
            };
            if !ok {
                return input(format!("method {} is not available for scenario {}", m.label(), self.scenario.name()));
            }
        }
        Ok(())
    }
}

/// One method's outcome on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub method: String,
    pub estimates: Option<Vec<f64>>,
    /// Diagonal of the reported covariance.
    pub variances: Option<Vec<f64>>,
    pub nuisance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub scenario: String,
    pub n: usize,
    pub method: String,
    pub param: String,
    pub est: f64,
    pub asy: f64,
    /// Absent with fewer than two successful replicates.
    pub emp: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub scenario: String,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub rows: Vec<McRow>,
    /// Scenario-specific reference quantities (true values, bounds).
    pub summary: BTreeMap<String, f64>,
    /// True when some method failed on more than 10% of replicates.
    pub invalid: bool,
    pub outcomes: Vec<ReplicateOutcome>,
}

impl McReport {
    pub fn row(&self, method: &str, param: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.method == method && r.param == param)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FrmError::Input(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| FrmError::Input(e.to_string()))
    }

    /// Fixed-width summary with one line per method and parameter.
    pub fn table(&self) -> String {
        let mut out = format!(
            "scenario {} (n = {}, M = {}){}\n{:<14} {:<8} {:>12} {:>12} {:>12} {:>8}\n",
            self.scenario,
            self.n,
            self.replicates,
            if self.invalid { " INVALID" } else { "" },
            "method",
            "param",
            "Est.",
            "Asy.",
            "Emp.",
            "failed"
        );
        for r in &self.rows {
            let emp = r.emp.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<14} {:<8} {:>12.6} {:>12.4e} {:>12} {:>8}\n",
                r.method, r.param, r.est, r.asy, emp, r.failures
            ));
        }
        for (k, v) in &self.summary {
            out.push_str(&format!("{k} = {v:.6}\n"));
        }
        out
    }
}

struct Fitted {
    names: Vec<String>,
    est: Vec<f64>,
    var: Vec<f64>,
    nuisance: Option<f64>,
}

fn fit_method(scenario: &Scenario, method: Method, n: usize, seed: u64, cfg: &FitConfig) -> Result<Fitted> {
    let from_fit = |fit: crate::fit::FitResult| Fitted {
        var: fit.std_errors().iter().map(|s| s * s).collect(),
        names: fit.param_names,
        est: fit.beta,
        nuisance: fit.nuisance,
    };
    match scenario {
        Scenario::NbCount(p) => {
            let data = gen_nb_scenario(n, seed, p)?;
            match method {
                Method::WorkingMle => {
                    let mle = nb_working_mle(&data)?;
                    Ok(Fitted {
                        names: vec!["b0".into(), "b1".into()],
                        var: vec![mle.cov[(0, 0)], mle.cov[(1, 1)]],
                        est: mle.beta,
                        nuisance: Some(mle.tau),
                    })
                }
                Method::Ugee(kind) => {
                    let model = FrmModel::new(Link::Exp, true, 1, kind.initial());
                    adaptive_fit(&model, &data, cfg).map(from_fit)
                }
            }
        }
        Scenario::LinearExogenous(p) => {
            let subjects = gen_linear_exogenous(n, seed, p)?;
            let data = PairData::from_subjects(&subjects, &Kernel::Difference, PairTransform::Difference)?;
            let Method::Ugee(kind) = method else { return input("working likelihood needs count data") };
            adaptive_fit(&FrmModel::new(Link::Identity, false, 1, kind.initial()), &data, cfg).map(from_fit)
        }
        Scenario::IccRatings(p) => {
            let ds = gen_icc_ratings(n, seed, p)?;
            fit_icc(&ds.subjects, cfg).map(from_fit)
        }
        Scenario::MwwProbit(p) => {
            let subjects = gen_mww_probit(n, seed, p)?;
            let data = PairData::from_subjects(
                &subjects,
                &Kernel::MwwIndicator(TieRule::Inclusive),
                PairTransform::Difference,
            )?;
            let Method::Ugee(kind) = method else { return input("working likelihood needs count data") };
            adaptive_fit(&FrmModel::new(Link::ProbitComplement, false, 1, kind.initial()), &data, cfg).map(from_fit)
        }
    }
}

fn run_replicate(config: &McConfig, r: usize) -> (Vec<ReplicateOutcome>, Vec<String>) {
    let seed = child_seed(config.seed, r as u64);
    let mut names = Vec::new();
    let outcomes = config
        .methods
        .iter()
        .map(|&m| match fit_method(&config.scenario, m, config.n, seed, &config.fit) {
            Ok(f) => {
                let ok = f.est.iter().chain(&f.var).all(|v| v.is_finite());
                if names.is_empty() {
                    names = f.names.clone();
                }
                ReplicateOutcome {
                    replicate: r,
                    method: m.label(),
                    estimates: ok.then(|| f.est.clone()),
                    variances: ok.then(|| f.var.clone()),
                    nuisance: f.nuisance,
                    error: (!ok).then(|| "non-finite estimate or variance".to_string()),
                }
            }
            Err(e) => ReplicateOutcome {
                replicate: r,
                method: m.label(),
                estimates: None,
                variances: None,
                nuisance: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    (outcomes, names)
}

#[cfg(feature = "parallel")]
fn run_all(config: &McConfig) -> Vec<(Vec<ReplicateOutcome>, Vec<String>)> {
    use rayon::prelude::*;
    (0..config.replicates).into_par_iter().map(|r| run_replicate(config, r)).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all(config: &McConfig) -> Vec<(Vec<ReplicateOutcome>, Vec<String>)> {
    (0..config.replicates).map(|r| run_replicate(config, r)).collect()
}

/// Runs all replicates (in parallel when enabled) and aggregates in
/// replicate order, so the report does not depend on scheduling.
pub fn run_monte_carlo(config: &McConfig) -> Result<McReport> {
    config.validate()?;
    let results = run_all(config);
    let names = results.iter().find(|(_, names)| !names.is_empty()).map(|(_, names)| names.clone()).unwrap_or_default();
    let outcomes: Vec<ReplicateOutcome> = results.into_iter().flat_map(|(o, _)| o).collect();
    let mut rows = Vec::new();
    let mut invalid = false;
    for method in &config.methods {
        let label = method.label();
        let ok: Vec<&ReplicateOutcome> =
            outcomes.iter().filter(|o| o.method == label && o.estimates.is_some()).collect();
        let failures = config.replicates - ok.len();
        invalid |= failures * 10 > config.replicates;
        for (p, name) in names.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|o| o.estimates.as_ref().unwrap()[p]).collect();
            let asy: Vec<f64> = ok.iter().map(|o| o.variances.as_ref().unwrap()[p]).collect();
            rows.push(McRow {
                scenario: config.scenario.name().to_string(),
                n: config.n,
                method: label.clone(),
                param: name.clone(),
                est: mean(&est),
                asy: mean(&asy),
                emp: sample_variance(&est),
                failures,
            });
        }
    }
    let mut summary = BTreeMap::new();
    match &config.scenario {
        Scenario::LinearExogenous(p) => {
            summary.insert("cr_target".to_string(), p.cr_target());
            if let Some(row) = rows.first() {
                if let Some(emp) = row.emp {
                    summary.insert("n_emp".to_string(), config.n as f64 * emp);
                }
                summary.insert("n_asy".to_string(), config.n as f64 * row.asy);
            }
        }
        Scenario::IccRatings(p) => {
            summary.insert("true_rho".to_string(), p.true_rho());
        }
        Scenario::NbCount(p) => {
            summary.insert("true_b0".to_string(), p.beta0);
            summary.insert("true_b1".to_string(), p.beta1);
            if let Some(frac) = ordering_fraction(&outcomes, config.replicates, 1) {
                summary.insert("ordering_fraction_b1".to_string(), frac);
            }
        }
        Scenario::MwwProbit(p) => {
            summary.insert("true_beta".to_string(), p.beta);
        }
    }
    Ok(McReport {
        scenario: config.scenario.name().to_string(),
        n: config.n,
        replicates: config.replicates,
        seed: config.seed,
        rows,
        summary,
        invalid,
        outcomes,
    })
}

/// Fraction of replicates (where all three fits succeeded) with reported
/// variances ordered NB <= Pois <= Const for parameter `p`.
pub fn ordering_fraction(outcomes: &[ReplicateOutcome], replicates: usize, p: usize) -> Option<f64> {
    let labels = ["UGEE-NB", "UGEE-Pois", "UGEE-Const"].map(String::from);
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in 0..replicates {
        let v: Option<Vec<f64>> = labels
            .iter()
            .map(|l| {
                outcomes
                    .iter()
                    .find(|o| o.replicate == r && &o.method == l)
                    .and_then(|o| o.variances.as_ref())
                    .and_then(|v| v.get(p).copied())
            })
            .collect();
        if let Some(v) = v {
            total += 1;
            if v[0] <= v[1] && v[1] <= v[2] {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generators_are_seed_deterministic() {
        let a = gen_nb_scenario(12, 5, &NbParams::default()).unwrap();
        let b = gen_nb_scenario(12, 5, &NbParams::default()).unwrap();
        assert_eq!(a, b);
        let c = gen_nb_scenario(12, 6, &NbParams::default()).unwrap();
        assert_ne!(a.f, c.f);
        assert_eq!(a.n_pairs(), 66);
        assert!(a.x.iter().all(|x| (0.0..2.0).contains(x)));
    }

    #[test]
    fn child_seeds_differ() {
        let s: Vec<u64> = (0..5).map(|r| child_seed(7, r)).collect();
        for i in 0..5 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(child_seed(7, 3), s[3]);
    }

    #[test]
    fn icc_true_rho() {
        assert_relative_eq!(IccParams::default().true_rho(), 0.45, max_relative = 1e-14);
        let p = IccParams { sigma_bg2: 0.0, sigma_e2: 0.0, ..IccParams::default() };
        assert_eq!(p.true_rho(), 1.0);
        let p = IccParams { sigma_b2: 0.0, sigma_bg2: 0.0, ..IccParams::default() };
        assert_eq!(p.true_rho(), 0.0);
        let p = IccParams { gamma: vec![1.0, 1.0], ..IccParams::default() };
        assert!(gen_icc_ratings(10, 1, &p).is_err());
    }

    #[test]
    fn icc_interaction_rows_center() {
        let p = IccParams { mu: 0.0, sigma_b2: 0.0, sigma_e2: 0.0, gamma: vec![0.0; 4], ..IccParams::default() };
        let ds = gen_icc_ratings(20, 3, &p).unwrap();
        for s in &ds.subjects {
            assert!(s.y.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(gen_nb_scenario(10, 1, &NbParams { tau: 0.0, ..NbParams::default() }).is_err());
        assert!(gen_nb_scenario(10, 1, &NbParams { a: 1.0, b: 1.0, ..NbParams::default() }).is_err());
        assert!(gen_linear_exogenous(10, 1, &LinearParams { sigma_x: 0.0, ..LinearParams::default() }).is_err());
        let cfg = McConfig::new(Scenario::NbCount(NbParams::default()), 5, 1, 1);
        assert!(run_monte_carlo(&cfg).is_err());
    }

    #[test]
    fn single_replicate_has_no_emp() {
        let cfg = McConfig::new(Scenario::LinearExogenous(LinearParams::default()), 20, 1, 9);
        let rep = run_monte_carlo(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert!(rep.rows[0].emp.is_none());
        assert!(!rep.invalid);
    }

    #[test]
    fn working_mle_poisson_boundary() {
        // equidispersed pseudo-data: counts equal to their means
        let n = 8;
        let x: Vec<f64> = (0..pair_count(n)).map(|k| (k % 4) as f64 * 0.25).collect();
        let f: Vec<f64> = x.iter().map(|v| (2.0 + v).exp().round()).collect();
        let data = PairData::new(n, 1, 1, f, x).unwrap();
        let mle = nb_working_mle(&data).unwrap();
        assert!(mle.tau.is_infinite());
        // the Poisson score equations coincide with the Poisson-weighted UGEE
        let model = FrmModel::new(Link::Exp, true, 1, WorkingVariance::Poisson);
        let fit = adaptive_fit(&model, &data, &FitConfig::default()).unwrap();
        assert_relative_eq!(mle.beta[0], fit.beta[0], max_relative = 1e-8);
        assert_relative_eq!(mle.beta[1], fit.beta[1], max_relative = 1e-8);
    }
}
