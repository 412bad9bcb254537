use crate::args::{Cli, Command, DistanceArgs, FitArgs, KernelArg, Layout, ScenarioArg, SimulateArgs};
use crate::io::{self, Dataset};
use crate::{input_err, CliError, Result};
use frm_core::fit::{adaptive_fit, fit_icc, FitConfig, FitResult};
use frm_core::kernels::{aitchison_distance, Kernel, TieRule};
use frm_core::model::{FrmModel, SubjectRecord};
use frm_core::simulate::{run_monte_carlo, McConfig, McReport, Scenario, VarianceKind};
use frm_core::ustat::{Exec, PairData};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::Write;
use std::path::Path;

/// Runs one command inside a thread pool of the requested size.
pub fn run(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Input(format!("cannot start thread pool: {e}")))?;
    let exec = if cli.deterministic { Exec::parallel() } else { Exec::tree() };
    pool.install(|| match &cli.command {
        Command::Fit(a) => run_fit(a, exec),
        Command::Distance(a) => run_distance(a),
        Command::Simulate(a) => run_simulate(a),
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    let res = match path {
        Some(p) => create(p)?.write_all(bytes),
        None => std::io::stdout().lock().write_all(bytes),
    };
    res.map_err(|source| CliError::Io { path: path.map_or("<stdout>".into(), |p| p.display().to_string()), source })
}

/// Seventeen significant digits, enough to reproduce any f64.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serialized fit result. Non-finite Wald statistics (zero standard error)
/// are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<Option<f64>>,
    pub p: Vec<Option<f64>>,
    pub cov: Vec<Vec<f64>>,
    pub working_variance: String,
    pub nuisance: Option<f64>,
    pub iterations: usize,
    pub adaptive_rounds: usize,
    pub converged: bool,
    pub eq_norm: f64,
    pub first_order_retained: bool,
    pub n: usize,
    pub n_pairs: usize,
}

impl FitReport {
    pub fn new(fit: &FitResult, working_variance: &str) -> Self {
        let inf = fit.inference();
        let finite = |v: f64| v.is_finite().then_some(v);
        let q = fit.beta.len();
        Self {
            params: fit.param_names.clone(),
            beta: fit.beta.clone(),
            se: inf.iter().map(|c| c.std_error).collect(),
            z: inf.iter().map(|c| finite(c.z)).collect(),
            p: inf.iter().map(|c| finite(c.p_value)).collect(),
            cov: (0..q).map(|a| (0..q).map(|b| fit.cov[(a, b)]).collect()).collect(),
            working_variance: working_variance.to_owned(),
            nuisance: fit.nuisance,
            iterations: fit.iterations,
            adaptive_rounds: fit.adaptive_rounds,
            converged: fit.converged,
            eq_norm: fit.eq_norm,
            first_order_retained: fit.first_order_retained,
            n: fit.n,
            n_pairs: fit.n_pairs,
        }
    }
}

fn kernel_for(args: &FitArgs) -> Result<Option<KernelArg>> {
    match (args.layout, args.kernel) {
        (Layout::Pairs, None) => Ok(None),
        (Layout::Pairs, Some(_)) => {
            input_err("--kernel does not apply to pair tables; responses are read from the f columns")
        }
        (Layout::Abundance, None | Some(KernelArg::Aitchison)) => Ok(Some(KernelArg::Aitchison)),
        (Layout::Abundance, Some(k)) => input_err(format!("kernel {k:?} cannot be used with an abundance table")),
        (Layout::Subjects, Some(KernelArg::Aitchison)) => input_err("the aitchison kernel needs --layout abundance"),
        (Layout::Subjects, None) => input_err("--kernel is required with --layout subjects"),
        (Layout::Subjects, k) => Ok(k),
    }
}

fn pair_data(subjects: &[SubjectRecord], kernel: KernelArg, args: &FitArgs) -> Result<PairData> {
    let kernel = match kernel {
        KernelArg::Aitchison => Kernel::Aitchison,
        KernelArg::Mww => Kernel::MwwIndicator(TieRule::Inclusive),
        KernelArg::Sqhalfdiff => Kernel::SqHalfDiff,
        KernelArg::Difference => Kernel::Difference,
        KernelArg::Icc => unreachable!("ICC fits do not build a generic pair table"),
    };
    Ok(PairData::from_subjects(subjects, &kernel, args.pair)?)
}

/// Loads data, fits, and returns the report. Non-convergence is an error.
pub fn fit(args: &FitArgs, exec: Exec) -> Result<FitReport> {
    let config = FitConfig {
        tol_eq: args.tol,
        tol_step: args.tol,
        max_iter: args.max_iter,
        covariance: args.covariance.into(),
        exec,
        ..FitConfig::default()
    };
    let kernel = kernel_for(args)?;
    let dataset = io::load(&args.data, args.layout)?;
    let variance = VarianceKind::from(args.working_variance).initial();
    let data = match (dataset, kernel) {
        (Dataset::Subjects(s), Some(KernelArg::Icc)) => {
            return Ok(FitReport::new(&fit_icc(&s, &config)?, "icc-diagonal"))
        }
        (Dataset::Subjects(s), Some(k)) => pair_data(&s, k, args)?,
        (Dataset::Subjects(_), None) => unreachable!("kernel_for requires a kernel for subject data"),
        (Dataset::Pairs(data), _) => data,
    };
    let model = FrmModel::new(args.link.into(), args.intercept, data.r, variance.clone());
    let fit = adaptive_fit(&model, &data, &config)?;
    Ok(FitReport::new(&fit, variance.name()))
}

fn run_fit(args: &FitArgs, exec: Exec) -> Result<()> {
    let report = fit(args, exec)?;
    let mut json = serde_json::to_string_pretty(&report).expect("fit report serializes");
    json.push('\n');
    write_output(args.out.as_deref(), json.as_bytes())?;
    if report.converged {
        Ok(())
    } else {
        Err(CliError::Failed("fit did not converge".into()))
    }
}

/// Aitchison distances between all subject rows. Row `i` holds the
/// distances to subjects `0..i`.
pub fn lower_distances(subjects: &[SubjectRecord]) -> Result<Vec<Vec<f64>>> {
    (0..subjects.len())
        .into_par_iter()
        .map(|i| (0..i).map(|j| aitchison_distance(&subjects[i].y, &subjects[j].y)).collect())
        .collect::<frm_core::Result<_>>()
        .map_err(CliError::from)
}

pub fn distance_csv(subjects: &[SubjectRecord], full: bool) -> Result<Vec<u8>> {
    let lower = lower_distances(subjects)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Failed(format!("writing CSV: {e}"));
    if full {
        let header = std::iter::once("id").chain(subjects.iter().map(|s| s.id.as_str()));
        w.write_record(header).map_err(csv_err)?;
        for (i, s) in subjects.iter().enumerate() {
            let row = (0..subjects.len()).map(|j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => num(lower[i][j]),
                std::cmp::Ordering::Less => num(lower[j][i]),
                std::cmp::Ordering::Equal => num(0.0),
            });
            w.write_record(std::iter::once(s.id.clone()).chain(row)).map_err(csv_err)?;
        }
    } else {
        w.write_record(["id1", "id2", "distance"]).map_err(csv_err)?;
        for (i, row) in lower.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                w.write_record([subjects[i].id.as_str(), subjects[j].id.as_str(), &num(*d)]).map_err(csv_err)?;
            }
        }
    }
    w.into_inner().map_err(|e| CliError::Failed(format!("writing CSV: {e}")))
}

fn run_distance(args: &DistanceArgs) -> Result<()> {
    let file =
        File::open(&args.data).map_err(|source| CliError::Io { path: args.data.display().to_string(), source })?;
    let subjects = io::read_abundance(file, &args.data.display().to_string())?;
    write_output(args.out.as_deref(), &distance_csv(&subjects, args.full)?)
}

pub fn scenario(arg: ScenarioArg) -> Scenario {
    match arg {
        ScenarioArg::Nb => Scenario::NbCount(Default::default()),
        ScenarioArg::Linear => Scenario::LinearExogenous(Default::default()),
        ScenarioArg::Icc => Scenario::IccRatings(Default::default()),
        ScenarioArg::Mww => Scenario::MwwProbit(Default::default()),
    }
}

/// Report rows as CSV: scenario, n, method, param, est, asy, emp, failures.
/// An empty `emp` cell means fewer than two successful replicates.
pub fn report_csv(report: &McReport) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Failed(format!("writing CSV: {e}"));
    w.write_record(["scenario", "n", "method", "param", "est", "asy", "emp", "failures"]).map_err(csv_err)?;
    for r in &report.rows {
        let emp = r.emp.map(num).unwrap_or_default();
        w.write_record([
            &r.scenario,
            &r.n.to_string(),
            &r.method,
            &r.param,
            &num(r.est),
            &num(r.asy),
            &emp,
            &r.failures.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Failed(format!("writing CSV: {e}")))
}

pub fn simulate(args: &SimulateArgs) -> Result<McReport> {
    let config = McConfig::new(scenario(args.scenario), args.n, args.m, args.seed);
    Ok(run_monte_carlo(&config)?)
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let report = simulate(args)?;
    let mut text = report.table();
    if let (Some(e), Some(cr)) = (report.summary.get("n_emp"), report.summary.get("cr_target")) {
        text.push_str(&format!("n*Emp = {e:.6}   CR target = {cr:.6}\n"));
    }
    print!("{text}");
    if let Some(stem) = &args.out {
        let mut json = report.to_json()?;
        json.push('\n');
        write_output(Some(&stem.with_extension("json")), json.as_bytes())?;
        write_output(Some(&stem.with_extension("csv")), &report_csv(&report)?)?;
    }
    if report.invalid {
        return Err(CliError::Failed("report flagged invalid: a method failed on more than 10% of replicates".into()));
    }
    Ok(())
}
