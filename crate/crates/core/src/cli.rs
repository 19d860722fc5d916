//! Command-line front end. Exit codes: 0 success, 1 usage or input error,
//! 2 numerical failure.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::amp::{amp_run, check_fixed_point, write_trace_csv, AmpOptions, TauSchedule};
use crate::datagen::{generate, BetaPrior, Noise, SyntheticSpec};
use crate::diagnostics::{spectrum_check, sup_loo_linearization_error, tail_bound, trace_concentration, GammaProvider, LooRidgeGamma};
use crate::error::{Error, Result};
use crate::experiments::{run_experiment, ExperimentConfig, ExperimentKind};
use crate::model::{Dataset, PenalizedModel};
use crate::risk::{risk_report, CurvatureProfile, ReportOptions, REPORT_HEADER};
use crate::solver::{fit, SolverConfig};

#[derive(Parser, Debug)]
#[command(name = "hdrisk", version, about = "Out-of-sample risk estimates for penalized regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Dataset CSV: header `y,x1,...,xp`, one observation per row
    #[arg(long)]
    data: PathBuf,
    /// Loss family, e.g. `squared` or `pseudo_huber:mu=1`
    #[arg(long, default_value = "squared")]
    loss: String,
    /// Regularizer family, e.g. `ridge` or `elastic_smoothed:mu=0.01,mix=0.5`
    #[arg(long, default_value = "ridge")]
    reg: String,
    #[arg(long)]
    lambda: f64,
}

impl ModelArgs {
    fn load(&self) -> Result<(PenalizedModel, Dataset)> {
        let model = PenalizedModel::new(self.loss.parse()?, self.reg.parse()?, self.lambda)?;
        Ok((model, Dataset::load_csv(&self.data)?))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the penalized estimator and print its coefficients
    Fit {
        #[command(flatten)]
        model: ModelArgs,
        /// Also write the coefficients to this CSV file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print LO, ALO, AMP and K-fold risk estimates as one CSV row
    Risk {
        #[command(flatten)]
        model: ModelArgs,
        /// Fold counts for K-fold CV
        #[arg(long, value_delimiter = ',', default_value = "2,3,5")]
        folds: Vec<usize>,
        /// Seed for the K-fold partitions
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run AMP with tau fixed at the calibrated value and print its trace
    Amp {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 0.0)]
        damping: f64,
        /// Use tau_t = tau_hat (1 + c 0.9^t) instead of a constant
        #[arg(long)]
        geometric: Option<f64>,
    },
    /// Run a named experiment: figure1, rates, amp_trace or diagnostics
    Experiment {
        name: String,
        /// Plain-text `key = value` config file
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectrum, concentration and leave-one-out linearization checks on a dataset
    Diagnose {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write a synthetic Gaussian dataset
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        beta_var: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_sd: f64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write beta*
        #[arg(long)]
        beta_out: Option<PathBuf>,
    },
}

fn write_vector(out: &mut dyn Write, name: &str, v: &nalgebra::DVector<f64>) -> Result<()> {
    writeln!(out, "j,{name}")?;
    for (j, b) in v.iter().enumerate() {
        writeln!(out, "{j},{b:e}")?;
    }
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = SolverConfig::default();
    match cmd {
        Command::Fit { model, out: path } => {
            let (m, d) = model.load()?;
            let f = fit(&m, &d, None, &cfg)?;
            writeln!(err, "iterations={} grad_inf_norm={:e} objective={:e}", f.iterations, f.grad_inf_norm, f.objective)?;
            write_vector(out, "beta_hat", &f.beta_hat)?;
            if let Some(path) = path {
                write_vector(&mut fs::File::create(path)?, "beta_hat", &f.beta_hat)?;
            }
        }
        Command::Risk { model, folds, seed } => {
            let (m, d) = model.load()?;
            let opts = ReportOptions { folds, kfold_seed: seed, ..ReportOptions::default() };
            let report = risk_report(&m, &d, &opts, &cfg)?;
            writeln!(out, "{REPORT_HEADER}")?;
            writeln!(out, "{}", report.csv_row(m.lambda()))?;
        }
        Command::Amp { model, max_iter, tol, damping, geometric } => {
            let (m, d) = model.load()?;
            let delta = d.aspect_ratio();
            let f = fit(&m, &d, None, &cfg)?;
            let cal = CurvatureProfile::at_fit(&m, &f, delta)?.calibrate()?;
            let schedule = match geometric {
                Some(c) => TauSchedule::Geometric { tau_hat: cal.tau_hat, c },
                None => TauSchedule::Constant(cal.tau_hat),
            };
            writeln!(err, "tau_hat={:e} theta_hat={:e}", cal.tau_hat, cal.theta_hat)?;
            match amp_run(&m, &d, &schedule, None, &AmpOptions { max_iter, tol, damping }) {
                Ok(run) => {
                    write_trace_csv(&run.trace, &mut *out)?;
                    let res = check_fixed_point(&run.state, &m, &d, delta)?;
                    writeln!(
                        err,
                        "beta_gap_inf={:e} stationarity={:e} tau_eq={:e} theta_eq={:e} z_eq={:e}",
                        (&run.state.beta - &f.beta_hat).amax(),
                        res.stationarity,
                        res.tau_eq,
                        res.theta_eq,
                        res.z_eq
                    )?;
                }
                Err(Error::NonConvergence { trace }) => {
                    write_trace_csv(&trace, &mut *out)?;
                    return Err(Error::NonConvergence { trace });
                }
                Err(e) => return Err(e),
            }
        }
        Command::Experiment { name, config, seed, out: dir } => {
            let kind: ExperimentKind = name.parse()?;
            let mut c = ExperimentConfig::defaults(kind);
            if let Some(path) = config {
                c.apply_text(&fs::read_to_string(path)?)?;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(d) = dir {
                c.output_dir = d;
            }
            for path in run_experiment(&c)? {
                writeln!(out, "{}", path.display())?;
            }
        }
        Command::Diagnose { model } => {
            let (m, d) = model.load()?;
            if d.n() >= d.p() {
                let s = spectrum_check(d.x())?;
                writeln!(out, "sigma_min={:e}\nsigma_max={:e}\nsigma_delta_bound={:e}", s.sigma_min, s.sigma_max, s.sigma_delta_bound)?;
            }
            let gammas = LooRidgeGamma::new(&d)?;
            writeln!(out, "tail_dev={:e}", trace_concentration(&d, &gammas)?)?;
            writeln!(out, "tail_bound={:e}", tail_bound(d.n(), gammas.eigen_bound()))?;
            writeln!(out, "sup_loo_linearization_error={:e}", sup_loo_linearization_error(&m, &d, &cfg)?)?;
        }
        Command::Generate { n, p, seed, beta_var, noise_sd, out: path, beta_out } => {
            let spec = SyntheticSpec {
                n,
                p,
                beta_prior: BetaPrior::Gaussian { variance: beta_var },
                noise: Noise::Gaussian { sd: noise_sd },
                seed,
            };
            let s = generate(&spec)?;
            s.data.write_csv(fs::File::create(&path)?)?;
            if let Some(b) = beta_out {
                write_vector(&mut fs::File::create(b)?, "beta_star", &s.beta_star)?;
            }
            writeln!(out, "{}", path.display())?;
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) with explicit output streams.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
