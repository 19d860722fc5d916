//! Out-of-sample risk estimators and the oracle they are measured against.

pub mod amp;
pub mod kfold;
pub mod loo;
pub mod oracle;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DVector;

pub use amp::{amp_risk, corrected_risk, solve_tau_hat, solve_theta_hat, AmpCalibration, AmpRisk, CurvatureProfile};
pub use kfold::{kfold_partition, kfold_risk};
pub use loo::{alo_leverages, alo_risk, alo_risk_with_leverages, loocv_risk, loocv_risk_from_fit, AloRisk, LooRisk};
pub use oracle::{oracle_risk_gaussian, oracle_risk_mc};

use crate::error::Result;
use crate::model::{Dataset, PenalizedModel};
use crate::solver::{fit, SolverConfig};

/// Fold counts that get their own CSV column.
pub const REPORT_FOLDS: [usize; 3] = [2, 3, 5];

pub const REPORT_HEADER: &str = "lambda,lo,alo,amp,kfold2,kfold3,kfold5,oracle,tau_hat,theta_hat";

/// Every risk number available for one `(model, data)` pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RiskReport {
    pub lo: Option<f64>,
    pub alo: Option<f64>,
    pub amp: Option<f64>,
    pub kfold: BTreeMap<usize, f64>,
    pub oracle: Option<f64>,
    pub tau_hat: Option<f64>,
    pub theta_hat: Option<f64>,
    pub leverages: Option<DVector<f64>>,
}

fn field(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v:e}");
    }
}

impl RiskReport {
    /// One CSV row in [`REPORT_HEADER`] order; absent values are empty fields.
    pub fn csv_row(&self, lambda: f64) -> String {
        let mut out = format!("{lambda:e}");
        field(&mut out, self.lo);
        field(&mut out, self.alo);
        field(&mut out, self.amp);
        for k in REPORT_FOLDS {
            field(&mut out, self.kfold.get(&k).copied());
        }
        field(&mut out, self.oracle);
        field(&mut out, self.tau_hat);
        field(&mut out, self.theta_hat);
        out
    }
}

/// Which estimators [`risk_report`] should run.
#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub lo: bool,
    pub alo: bool,
    pub amp: bool,
    pub folds: Vec<usize>,
    pub kfold_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { lo: true, alo: true, amp: true, folds: REPORT_FOLDS.to_vec(), kfold_seed: 0 }
    }
}

/// Fits once and runs the requested estimators on the fit.
///
/// The oracle is left empty; it needs `beta*`, which real data never has.
pub fn risk_report(model: &PenalizedModel, data: &Dataset, opts: &ReportOptions, cfg: &SolverConfig) -> Result<RiskReport> {
    let full = fit(model, data, None, cfg)?;
    let mut report = RiskReport::default();
    if opts.lo {
        report.lo = Some(loocv_risk_from_fit(model, data, &full, cfg)?.risk);
    }
    if opts.alo {
        let alo = alo_risk(model, data, &full)?;
        report.alo = Some(alo.risk);
        report.leverages = Some(alo.leverages);
    }
    if opts.amp {
        let amp = amp_risk(model, data, &full, data.aspect_ratio())?;
        report.amp = Some(amp.risk);
        report.tau_hat = Some(amp.tau_hat);
        report.theta_hat = Some(amp.theta_hat);
    }
    for &k in &opts.folds {
        report.kfold.insert(k, kfold_risk(model, data, k, opts.kfold_seed, cfg)?);
    }
    Ok(report)
}
