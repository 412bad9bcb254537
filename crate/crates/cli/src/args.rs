//! Argument definitions. Every flag can also be set through an environment
//! variable named `FRM_<FLAG>` (for example `FRM_MAX_ITER=50`); an explicit
//! flag wins over the environment.

use clap::{Args, Parser, Subcommand, ValueEnum};
use frm_core::fit::{CovarianceEstimator, FitConfig};
use frm_core::model::{Link, PairTransform};
use frm_core::simulate::VarianceKind;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "frm", version, about = "Functional response models fitted by U-statistic estimating equations")]
pub struct Cli {
    /// Worker threads; 0 uses all available cores.
    #[arg(long, global = true, default_value_t = 0, env = "FRM_THREADS")]
    pub threads: usize,

    /// Fixed-order chunked reductions, bitwise reproducible across thread
    /// counts. `--deterministic false` switches to a faster tree reduction.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set, env = "FRM_DETERMINISTIC")]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a pairwise regression model and write coefficients as JSON.
    Fit(FitArgs),
    /// Aitchison distances between all rows of an abundance table.
    Distance(DistanceArgs),
    /// Monte Carlo comparison of estimators on a built-in scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    /// `id`, response columns `y*`, covariate columns `x*`.
    Subjects,
    /// `i1`, `i2` (0-based, i1 < i2), response columns `f*`, pair covariates `x*`.
    Pairs,
    /// `id`, count columns, optional covariate columns `x*`.
    Abundance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Aitchison,
    Mww,
    Sqhalfdiff,
    /// `y1 - y2` on the first response.
    Difference,
    Icc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkArg {
    Identity,
    Exp,
    Expit,
    Probitc,
}

impl From<LinkArg> for Link {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Identity => Link::Identity,
            LinkArg::Exp => Link::Exp,
            LinkArg::Expit => Link::Expit,
            LinkArg::Probitc => Link::ProbitComplement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VarianceArg {
    Const,
    Poisson,
    Propmean,
    Nb,
    Bernoulli,
}

impl From<VarianceArg> for VarianceKind {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Const => VarianceKind::Constant,
            VarianceArg::Poisson => VarianceKind::Poisson,
            VarianceArg::Propmean => VarianceKind::ProportionalToMean,
            VarianceArg::Nb => VarianceKind::NegBinomial,
            VarianceArg::Bernoulli => VarianceKind::Bernoulli,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CovarianceArg {
    /// Drop the first-order term when the scores look degenerate.
    Adaptive,
    Hoeffding,
    FirstOrder,
}

impl From<CovarianceArg> for CovarianceEstimator {
    fn from(c: CovarianceArg) -> Self {
        match c {
            CovarianceArg::Adaptive => CovarianceEstimator::default(),
            CovarianceArg::Hoeffding => CovarianceEstimator::Hoeffding,
            CovarianceArg::FirstOrder => CovarianceEstimator::FirstOrder,
        }
    }
}

/// Parses `diff`, `sum`, `concat` or `onehot:K`.
pub fn parse_pair(s: &str) -> Result<PairTransform, String> {
    match s {
        "diff" => Ok(PairTransform::Difference),
        "sum" => Ok(PairTransform::Sum),
        "concat" => Ok(PairTransform::Concatenate),
        _ => {
            let k = s.strip_prefix("onehot:").ok_or_else(|| format!("unknown pair transform '{s}'"))?;
            match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(PairTransform::OneHot(k)),
                _ => Err(format!("onehot level count must be a positive integer, got '{k}'")),
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, env = "FRM_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, env = "FRM_LAYOUT")]
    pub layout: Layout,
    /// Pair kernel; required unless the layout is `pairs`. Defaults to
    /// `aitchison` for abundance tables.
    #[arg(long, value_enum, env = "FRM_KERNEL")]
    pub kernel: Option<KernelArg>,
    #[arg(long, value_enum, default_value = "identity", env = "FRM_LINK")]
    pub link: LinkArg,
    /// Pair covariate transform: diff, sum, concat or onehot:K.
    #[arg(long, default_value = "diff", value_parser = parse_pair, env = "FRM_PAIR")]
    pub pair: PairTransform,
    #[arg(long, value_enum, default_value = "const", env = "FRM_WORKING_VARIANCE")]
    pub working_variance: VarianceArg,
    /// Add an intercept column to the pair covariates.
    #[arg(long, default_value_t = false, env = "FRM_INTERCEPT")]
    pub intercept: bool,
    #[arg(long, value_enum, default_value = "adaptive", env = "FRM_COVARIANCE")]
    pub covariance: CovarianceArg,
    /// Convergence tolerance for both the step size and the equation norm.
    #[arg(long, default_value_t = FitConfig::default().tol_eq, env = "FRM_TOL")]
    pub tol: f64,
    #[arg(long, default_value_t = FitConfig::default().max_iter, env = "FRM_MAX_ITER")]
    pub max_iter: usize,
    /// Output JSON path; printed to stdout when absent.
    #[arg(long, env = "FRM_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    /// Abundance table (`id` plus count columns).
    #[arg(long, env = "FRM_DATA")]
    pub data: PathBuf,
    /// Full symmetric matrix instead of the strict lower triangle.
    #[arg(long, default_value_t = false, env = "FRM_FULL")]
    pub full: bool,
    /// Output CSV path; printed to stdout when absent.
    #[arg(long, env = "FRM_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Nb,
    Linear,
    Icc,
    Mww,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, env = "FRM_SCENARIO")]
    pub scenario: ScenarioArg,
    /// Subjects per replicate.
    #[arg(long, default_value_t = 100, env = "FRM_N")]
    pub n: usize,
    /// Monte Carlo replicates.
    #[arg(long, default_value_t = 200, env = "FRM_M")]
    pub m: usize,
    #[arg(long, default_value_t = 1, env = "FRM_SEED")]
    pub seed: u64,
    /// Output stem; writes `<out>.csv` and `<out>.json`. Only the table is
    /// printed when absent.
    #[arg(long, env = "FRM_OUT")]
    pub out: Option<PathBuf>,
}
