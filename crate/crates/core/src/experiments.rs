//! End-to-end experiments: configuration, orchestration and output files.
//!
//! Every CSV written here starts with a `#` line carrying the fully resolved
//! configuration, so a result file is enough to rerun it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::amp::{amp_run, check_fixed_point, write_trace_csv, AmpOptions, FixedPointResidual, TauSchedule, TraceRow};
use crate::datagen::{child_seed, generate, BetaPrior, Noise, Synthetic, SyntheticSpec};
use crate::diagnostics::{discrepancy_sweep, spectrum_check, tail_bound, trace_concentration, LooRidgeGamma, Spectrum, Sweep};
use crate::error::{Error, Result};
use crate::families::FamilyKind;
use crate::model::PenalizedModel;
use crate::risk::{
    alo_risk, amp_risk, kfold_risk, loocv_risk_from_fit, oracle_risk_gaussian, CurvatureProfile, RiskReport, REPORT_FOLDS,
    REPORT_HEADER,
};
use crate::solver::{fit, SolverConfig};
use crate::svg::{line_plot, Axes, Series};

/// Largest tolerated fraction of failed cells before an experiment aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Figure1,
    Rates,
    AmpTrace,
    Diagnostics,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::Figure1 => "figure1",
            ExperimentKind::Rates => "rates",
            ExperimentKind::AmpTrace => "amp_trace",
            ExperimentKind::Diagnostics => "diagnostics",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "figure1" => Ok(ExperimentKind::Figure1),
            "rates" => Ok(ExperimentKind::Rates),
            "amp_trace" => Ok(ExperimentKind::AmpTrace),
            "diagnostics" => Ok(ExperimentKind::Diagnostics),
            other => Err(Error::Parse(format!("unknown experiment `{other}`"))),
        }
    }
}

/// `count` points log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count).map(|k| 10f64.powf(a + (b - a) * k as f64 / (count - 1) as f64)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub lambda_grid: Vec<f64>,
    pub reps: usize,
    pub n: usize,
    pub p: usize,
    pub loss_spec: String,
    pub reg_spec: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Sample sizes for `rates`; the aspect ratio is `n / p`.
    pub n_grid: Vec<usize>,
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Parse(format!("`{s}` is not a valid entry for `{key}`"))))
        .collect()
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parse(format!("`{}` is not a valid value for `{key}`", value.trim())))
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let base = Self {
            experiment,
            lambda_grid: vec![1.0],
            reps: 10,
            n: 200,
            p: 100,
            loss_spec: "pseudo_huber:mu=1".into(),
            reg_spec: "ridge".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            n_grid: vec![200, 400, 800],
        };
        match experiment {
            ExperimentKind::Figure1 => Self {
                lambda_grid: log_grid(0.01, 10.0, 15),
                reps: 20,
                n: 500,
                p: 400,
                loss_spec: "squared".into(),
                ..base
            },
            ExperimentKind::Rates => base,
            ExperimentKind::AmpTrace => Self { reps: 1, ..base },
            ExperimentKind::Diagnostics => Self { reps: 20, n: 1000, p: 500, loss_spec: "squared".into(), ..base },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => {
                let kind: ExperimentKind = value.parse()?;
                if kind != self.experiment {
                    return Err(Error::Parse(format!("config is for `{kind}`, running `{}`", self.experiment)));
                }
            }
            "lambda_grid" => self.lambda_grid = list(key, value)?,
            "reps" => self.reps = scalar(key, value)?,
            "n" => self.n = scalar(key, value)?,
            "p" => self.p = scalar(key, value)?,
            "loss_spec" => self.loss_spec = value.trim().to_string(),
            "reg_spec" => self.reg_spec = value.trim().to_string(),
            "seed" => self.seed = scalar(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "n_grid" => self.n_grid = list(key, value)?,
            other => return Err(Error::Parse(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() || self.n_grid.is_empty() {
            return Err(Error::InvalidParameter("lambda_grid and n_grid must be nonempty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter("lambda_grid entries must be positive".into()));
        }
        if self.reps < 1 || self.n < 2 || self.p < 1 {
            return Err(Error::InvalidParameter("need reps >= 1, n >= 2, p >= 1".into()));
        }
        self.model(self.lambda_grid[0]).map(|_| ())
    }

    pub fn model(&self, lambda: f64) -> Result<PenalizedModel> {
        PenalizedModel::new(self.loss_spec.parse()?, self.reg_spec.parse()?, lambda)
    }

    /// The resolved configuration as a single `#` comment line.
    pub fn header_comment(&self) -> String {
        format!(
            "# experiment={} lambda_grid={} reps={} n={} p={} loss_spec={} reg_spec={} seed={} output_dir={} n_grid={}",
            self.experiment,
            join(&self.lambda_grid),
            self.reps,
            self.n,
            self.p,
            self.loss_spec,
            self.reg_spec,
            self.seed,
            self.output_dir.display(),
            join(&self.n_grid)
        )
    }

    /// `beta* ~ N(0, 4 I)`, unit noise, at this config's `(n, p)`.
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            p: self.p,
            beta_prior: BetaPrior::Gaussian { variance: 4.0 },
            noise: Noise::Gaussian { sd: 1.0 },
            seed,
        }
    }

    fn rep_seed(&self, rep: usize) -> u64 {
        child_seed(self.seed, "rep", rep as u64)
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, fs::File)> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let file = fs::File::create(&path)?;
    Ok((path, file))
}

fn check_failures(failed: usize, total: usize, first: Option<String>) -> Result<()> {
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::ExperimentFailed { failed, total, first: first.unwrap_or_default() });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Figure1Rep {
    pub rep: usize,
    pub seed: u64,
    pub lambda: f64,
    pub report: RiskReport,
}

#[derive(Clone, Debug)]
pub struct Figure1Output {
    pub reps: Vec<Figure1Rep>,
    /// One mean report per grid point.
    pub means: Vec<(f64, RiskReport)>,
    pub failures: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// All estimates of one `(lambda, rep)` cell, on the scale of the squared
/// prediction error `(y - x' beta)^2`, i.e. twice the loss `r^2 / 2`.
fn figure1_cell(model: &PenalizedModel, s: &Synthetic, kfold_seed: u64, cfg: &SolverConfig) -> Result<RiskReport> {
    let data = &s.data;
    let full = fit(model, data, None, cfg)?;
    let lo = loocv_risk_from_fit(model, data, &full, cfg)?;
    let alo = alo_risk(model, data, &full)?;
    let amp = amp_risk(model, data, &full, data.aspect_ratio())?;
    let mut kfold = std::collections::BTreeMap::new();
    for k in REPORT_FOLDS {
        kfold.insert(k, 2.0 * kfold_risk(model, data, k, kfold_seed, cfg)?);
    }
    Ok(RiskReport {
        lo: Some(2.0 * lo.risk),
        alo: Some(2.0 * alo.risk),
        amp: Some(2.0 * amp.risk),
        kfold,
        oracle: Some(oracle_risk_gaussian(&full, &s.beta_star, 1.0, data.n())?),
        tau_hat: Some(amp.tau_hat),
        theta_hat: Some(amp.theta_hat),
        leverages: None,
    })
}

fn mean_report(reports: &[&RiskReport]) -> RiskReport {
    let avg = |f: &dyn Fn(&RiskReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut kfold = std::collections::BTreeMap::new();
    for k in REPORT_FOLDS {
        if let Some(m) = avg(&|r| r.kfold.get(&k).copied()) {
            kfold.insert(k, m);
        }
    }
    RiskReport {
        lo: avg(&|r| r.lo),
        alo: avg(&|r| r.alo),
        amp: avg(&|r| r.amp),
        kfold,
        oracle: avg(&|r| r.oracle),
        tau_hat: avg(&|r| r.tau_hat),
        theta_hat: avg(&|r| r.theta_hat),
        leverages: None,
    }
}

/// K-fold comparison on ridge regression: every estimator and the oracle at
/// each grid point, averaged over repetitions. The same `reps` datasets are
/// reused for every `lambda`.
///
/// Writes `fig1_reps.csv`, `fig1_means.csv` and `fig1.svg`.
pub fn run_figure1(cfg: &ExperimentConfig) -> Result<Figure1Output> {
    cfg.validate()?;
    let probe = cfg.model(1.0)?;
    if probe.loss().kind() != FamilyKind::Squared || probe.regularizer().kind() != FamilyKind::Ridge {
        return Err(Error::InvalidParameter("figure1 needs loss_spec = squared and reg_spec = ridge".into()));
    }
    let solver = SolverConfig::default();
    let data: Vec<(u64, Synthetic)> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.rep_seed(r);
            generate(&cfg.spec(seed)).map(|s| (seed, s))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..cfg.lambda_grid.len()).flat_map(|l| (0..cfg.reps).map(move |r| (l, r))).collect();
    let results: Vec<Result<RiskReport>> = cells
        .par_iter()
        .map(|&(l, r)| {
            let model = cfg.model(cfg.lambda_grid[l])?;
            figure1_cell(&model, &data[r].1, data[r].0, &solver)
        })
        .collect();

    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for (&(l, r), res) in cells.iter().zip(results) {
        match res {
            Ok(report) => reps.push(Figure1Rep { rep: r, seed: data[r].0, lambda: cfg.lambda_grid[l], report }),
            Err(e) => {
                let msg = format!("lambda={} rep={r}: {e}", cfg.lambda_grid[l]);
                eprintln!("figure1: cell failed: {msg}");
                failures.push(msg);
            }
        }
    }
    check_failures(failures.len(), cells.len(), failures.first().cloned())?;

    let means: Vec<(f64, RiskReport)> = cfg
        .lambda_grid
        .iter()
        .map(|&lambda| {
            let at: Vec<&RiskReport> = reps.iter().filter(|r| r.lambda == lambda).map(|r| &r.report).collect();
            (lambda, mean_report(&at))
        })
        .collect();

    let header = cfg.header_comment();
    let (reps_path, mut f) = create(&cfg.output_dir, "fig1_reps.csv")?;
    writeln!(f, "{header} scale=squared_prediction_error")?;
    writeln!(f, "rep,seed,{REPORT_HEADER}")?;
    for r in &reps {
        writeln!(f, "{},{},{}", r.rep, r.seed, r.report.csv_row(r.lambda))?;
    }
    let (means_path, mut f) = create(&cfg.output_dir, "fig1_means.csv")?;
    writeln!(f, "{header} scale=squared_prediction_error")?;
    writeln!(f, "{REPORT_HEADER}")?;
    for (lambda, m) in &means {
        writeln!(f, "{}", m.csv_row(*lambda))?;
    }

    let curve = |name: &str, get: &dyn Fn(&RiskReport) -> Option<f64>| {
        Series::new(name, means.iter().filter_map(|(l, m)| get(m).map(|v| (*l, v))).collect())
    };
    let mut series = vec![
        curve("oracle", &|m| m.oracle),
        curve("LOOCV", &|m| m.lo),
        curve("ALO", &|m| m.alo),
        curve("AMP", &|m| m.amp),
    ];
    for k in REPORT_FOLDS {
        series.push(curve(&format!("{k}-fold"), &|m| m.kfold.get(&k).copied()));
    }
    let title = format!("n={}, p={}, {} reps", cfg.n, cfg.p, cfg.reps);
    let svg = line_plot(&title, "lambda", "prediction error", &series, Axes { log_x: true, log_y: false });
    let (svg_path, mut f) = create(&cfg.output_dir, "fig1.svg")?;
    f.write_all(svg.as_bytes())?;

    Ok(Figure1Output { reps, means, failures, files: vec![reps_path, means_path, svg_path] })
}

#[derive(Clone, Debug)]
pub struct RatesOutput {
    pub sweep: Sweep,
    pub files: Vec<PathBuf>,
}

/// `|LO - ALO|`, `|LO - AMP|` and the residual gap over `n_grid` at the
/// aspect ratio `n / p`, with `lambda = lambda_grid[0]`.
///
/// Writes `rates.csv` and `rates.svg`.
pub fn run_rates(cfg: &ExperimentConfig) -> Result<RatesOutput> {
    cfg.validate()?;
    let model = cfg.model(cfg.lambda_grid[0])?;
    let seeds: Vec<u64> = (0..cfg.reps).map(|r| cfg.rep_seed(r)).collect();
    let sweep = discrepancy_sweep(&model, &cfg.spec(0), &cfg.n_grid, &seeds, &SolverConfig::default())?;
    for fail in &sweep.failures {
        eprintln!("rates: cell n={} seed={} failed: {}", fail.n, fail.seed, fail.error);
    }
    let total = sweep.rows.len() + sweep.failures.len();
    check_failures(sweep.failures.len(), total, sweep.failures.first().map(|f| f.error.clone()))?;

    let (csv_path, mut f) = create(&cfg.output_dir, "rates.csv")?;
    writeln!(f, "{}", cfg.header_comment())?;
    sweep.write_csv(&mut f)?;

    let curve = |name: &str, get: fn(&crate::diagnostics::SweepRow) -> f64| {
        let pts = cfg.n_grid.iter().filter_map(|&n| sweep.median_at(n, get).map(|m| (n as f64, m))).collect();
        Series::new(name, pts)
    };
    let series = [
        curve("|LO-ALO|", |r| r.d_lo_alo),
        curve("|LO-AMP|", |r| r.d_lo_amp),
        curve("sup resid gap", |r| r.sup_resid_gap),
    ];
    let title = format!("medians over {} seeds, delta={}", cfg.reps, cfg.n as f64 / cfg.p as f64);
    let svg = line_plot(&title, "n", "discrepancy", &series, Axes { log_x: true, log_y: true });
    let (svg_path, mut f) = create(&cfg.output_dir, "rates.svg")?;
    f.write_all(svg.as_bytes())?;
    Ok(RatesOutput { sweep, files: vec![csv_path, svg_path] })
}

#[derive(Clone, Debug)]
pub struct AmpTraceOutput {
    pub trace: Vec<TraceRow>,
    pub residual: FixedPointResidual,
    pub files: Vec<PathBuf>,
}

/// AMP from `beta = 0` with `tau_t` fixed at the calibrated `tau_hat`.
///
/// Writes `amp_trace.csv` and `amp_trace.svg`, also when AMP fails to
/// converge; the error is returned after the files are written.
pub fn run_amp_trace(cfg: &ExperimentConfig) -> Result<AmpTraceOutput> {
    cfg.validate()?;
    let model = cfg.model(cfg.lambda_grid[0])?;
    let s = generate(&cfg.spec(cfg.rep_seed(0)))?;
    let delta = s.data.aspect_ratio();
    let full = fit(&model, &s.data, None, &SolverConfig::default())?;
    let cal = CurvatureProfile::at_fit(&model, &full, delta)?.calibrate()?;
    let run = amp_run(&model, &s.data, &TauSchedule::Constant(cal.tau_hat), None, &AmpOptions::default());
    let (trace, state) = match run {
        Ok(r) => (r.trace, Some(r.state)),
        Err(Error::NonConvergence { trace }) => (trace, None),
        Err(e) => return Err(e),
    };
    let residual = match &state {
        Some(st) => Some(check_fixed_point(st, &model, &s.data, delta)?),
        None => None,
    };

    let (csv_path, mut f) = create(&cfg.output_dir, "amp_trace.csv")?;
    writeln!(f, "{}", cfg.header_comment())?;
    write!(f, "# tau_hat={:e} theta_hat={:e}", cal.tau_hat, cal.theta_hat)?;
    if let (Some(st), Some(res)) = (&state, &residual) {
        write!(
            f,
            " beta_gap_inf={:e} stationarity={:e} tau_eq={:e} theta_eq={:e} z_eq={:e}",
            (&st.beta - &full.beta_hat).amax(),
            res.stationarity,
            res.tau_eq,
            res.theta_eq,
            res.z_eq
        )?;
    } else {
        write!(f, " converged=false")?;
    }
    writeln!(f)?;
    write_trace_csv(&trace, &mut f)?;

    let pts = trace.iter().map(|r| (r.t as f64, r.delta_beta_inf)).collect();
    let svg = line_plot("AMP with constant tau_hat", "t", "|beta^{t+1} - beta^t|_inf", &[Series::new("step", pts)], Axes {
        log_x: false,
        log_y: true,
    });
    let (svg_path, mut f) = create(&cfg.output_dir, "amp_trace.svg")?;
    f.write_all(svg.as_bytes())?;

    let Some(residual) = residual else {
        return Err(Error::NonConvergence { trace });
    };
    Ok(AmpTraceOutput { trace, residual, files: vec![csv_path, svg_path] })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentrationRow {
    pub seed: u64,
    pub spectrum: Spectrum,
    pub sigma_max_bound: f64,
    pub tail_dev: f64,
    pub tail_bound: f64,
}

impl ConcentrationRow {
    pub fn spectrum_ok(&self) -> bool {
        self.spectrum.sigma_min >= self.spectrum.sigma_delta_bound && self.spectrum.sigma_max <= self.sigma_max_bound
    }

    pub fn tail_ok(&self) -> bool {
        self.tail_dev <= self.tail_bound
    }
}

pub const CONCENTRATION_HEADER: &str = "seed,sigma_min,sigma_max,sigma_delta_bound,sigma_max_bound,tail_dev,tail_bound";

/// Extreme eigenvalues of `X'X` and the quadratic-form deviation with
/// `Gamma_i = (X_{-i}' X_{-i} + I)^{-1}` on one Gaussian design.
pub fn concentration_row(n: usize, p: usize, seed: u64) -> Result<ConcentrationRow> {
    let s = generate(&SyntheticSpec::figure1(n, p, seed))?;
    let spectrum = spectrum_check(s.data.x())?;
    let gammas = LooRidgeGamma::new(&s.data)?;
    let tail_dev = trace_concentration(&s.data, &gammas)?;
    let delta = n as f64 / p as f64;
    Ok(ConcentrationRow {
        seed,
        spectrum,
        sigma_max_bound: Spectrum::sigma_max_bound(delta),
        tail_dev,
        tail_bound: tail_bound(n, crate::diagnostics::GammaProvider::eigen_bound(&gammas)),
    })
}

#[derive(Clone, Debug)]
pub struct DiagnosticsOutput {
    pub rows: Vec<ConcentrationRow>,
    pub files: Vec<PathBuf>,
}

/// Spectrum and concentration checks over `reps` designs. Writes `diagnostics.csv`.
pub fn run_diagnostics(cfg: &ExperimentConfig) -> Result<DiagnosticsOutput> {
    cfg.validate()?;
    let rows: Vec<ConcentrationRow> =
        (0..cfg.reps).into_par_iter().map(|r| concentration_row(cfg.n, cfg.p, cfg.rep_seed(r))).collect::<Result<_>>()?;
    let (path, mut f) = create(&cfg.output_dir, "diagnostics.csv")?;
    writeln!(f, "{}", cfg.header_comment())?;
    writeln!(f, "{CONCENTRATION_HEADER}")?;
    for r in &rows {
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.seed, r.spectrum.sigma_min, r.spectrum.sigma_max, r.spectrum.sigma_delta_bound, r.sigma_max_bound, r.tail_dev, r.tail_bound
        )?;
    }
    Ok(DiagnosticsOutput { rows, files: vec![path] })
}

/// Runs the configured experiment and returns the files it wrote.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    Ok(match cfg.experiment {
        ExperimentKind::Figure1 => run_figure1(cfg)?.files,
        ExperimentKind::Rates => run_rates(cfg)?.files,
        ExperimentKind::AmpTrace => run_amp_trace(cfg)?.files,
        ExperimentKind::Diagnostics => run_diagnostics(cfg)?.files,
    })
}
