//! Numerical checks behind the risk estimators: how far a leave-one-out fit
//! is from its one-step linearization, concentration of quadratic forms,
//! extreme eigenvalues of the design, and LO / ALO / AMP discrepancy sweeps.

use std::io::Write;

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;

use crate::datagen::{generate, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Dataset, FitResult, PenalizedModel};
use crate::risk::{alo_risk, amp_risk, loocv_risk_from_fit};
use crate::solver::{fit, LooSolver, SolverConfig};

/// `eps_i = beta_tilde_i - beta_hat + l'(y_i - x_i' beta_hat) A_i^{-1} x_i`,
/// where `A_i` is the Hessian of the problem without row `i`, taken at
/// `beta_tilde_i`. Returns `(|eps_i|_2, eps_i)`.
///
/// `fit_i` may come from the reduced data; only its `beta_hat` is used.
pub fn loo_linearization_error(
    model: &PenalizedModel,
    data: &Dataset,
    i: usize,
    fit: &FitResult,
    fit_i: &FitResult,
) -> Result<(f64, DVector<f64>)> {
    if i >= data.n() {
        return Err(Error::InvalidParameter(format!("index {i} out of range for n = {}", data.n())));
    }
    if fit.beta_hat.len() != data.p() || fit_i.beta_hat.len() != data.p() {
        return Err(Error::DimensionMismatch("fits must have length p".into()));
    }
    let beta_i = &fit_i.beta_hat;
    let r_tilde = data.residuals(beta_i);
    let xi = data.row(i).into_owned();
    let mut a = model.hessian_at(data, &r_tilde, beta_i);
    a.ger(-model.loss().d2(r_tilde[i]), &xi, &xi, 1.0);
    let chol = nalgebra::Cholesky::new(a).ok_or(Error::SingularHessian)?;
    let r_hat = data.y()[i] - xi.dot(&fit.beta_hat);
    let eps = beta_i - &fit.beta_hat + chol.solve(&xi) * model.loss().d1(r_hat);
    Ok((eps.norm(), eps))
}

/// `sup_i |eps_i|_2` over every leave-one-out refit.
pub fn sup_loo_linearization_error(model: &PenalizedModel, data: &Dataset, cfg: &SolverConfig) -> Result<f64> {
    let full = fit(model, data, None, cfg)?;
    let solver = LooSolver::new(model, data, &full, cfg)?;
    let norms: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let fi = solver.fit(i).map_err(|e| Error::LooFailed { index: i, source: Box::new(e) })?;
            Ok(loo_linearization_error(model, data, i, &full, &fi.fit)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

/// Supplies the matrix `Gamma_i` paired with row `x_i`, through the two
/// numbers the concentration check needs.
///
/// Each `Gamma_i` should not depend on `x_i`; that is on the caller.
pub trait GammaProvider: Sync {
    fn dim(&self) -> usize;
    /// `(x_i' Gamma_i x_i, Tr Gamma_i)`.
    fn quad_and_trace(&self, i: usize, x_i: DVectorView<'_, f64>) -> Result<(f64, f64)>;
    /// Upper bound on the largest eigenvalue of every `Gamma_i`.
    fn eigen_bound(&self) -> f64;
}

pub struct IdentityGamma(pub usize);

impl GammaProvider for IdentityGamma {
    fn dim(&self) -> usize {
        self.0
    }
    fn quad_and_trace(&self, _: usize, x: DVectorView<'_, f64>) -> Result<(f64, f64)> {
        Ok((x.norm_squared(), self.0 as f64))
    }
    fn eigen_bound(&self) -> f64 {
        1.0
    }
}

pub struct ZeroGamma(pub usize);

impl GammaProvider for ZeroGamma {
    fn dim(&self) -> usize {
        self.0
    }
    fn quad_and_trace(&self, _: usize, _: DVectorView<'_, f64>) -> Result<(f64, f64)> {
        Ok((0.0, 0.0))
    }
    fn eigen_bound(&self) -> f64 {
        0.0
    }
}

/// One explicit symmetric matrix per row.
pub struct DenseGamma(pub Vec<DMatrix<f64>>);

impl GammaProvider for DenseGamma {
    fn dim(&self) -> usize {
        self.0.first().map_or(0, |m| m.nrows())
    }
    fn quad_and_trace(&self, i: usize, x: DVectorView<'_, f64>) -> Result<(f64, f64)> {
        let g = self.0.get(i).ok_or_else(|| Error::DimensionMismatch(format!("no matrix for row {i}")))?;
        if g.nrows() != x.len() || g.ncols() != x.len() {
            return Err(Error::DimensionMismatch(format!("matrix {i} is not {0}x{0}", x.len())));
        }
        Ok(((x.transpose() * g * x)[0], g.trace()))
    }
    fn eigen_bound(&self) -> f64 {
        self.0.iter().map(|g| g.clone().symmetric_eigenvalues().amax()).fold(0.0, f64::max)
    }
}

/// `Gamma_i = (X_{-i}' X_{-i} + I)^{-1}`, from a single inverse of
/// `A = X'X + I` by Sherman-Morrison: with `h = x_i' A^{-1} x_i`,
/// `x_i' Gamma_i x_i = h / (1 - h)` and `Tr Gamma_i = Tr A^{-1} + |A^{-1} x_i|^2 / (1 - h)`.
pub struct LooRidgeGamma {
    a_inv: DMatrix<f64>,
    trace: f64,
}

impl LooRidgeGamma {
    pub fn new(data: &Dataset) -> Result<Self> {
        let mut a = crate::model::weighted_gram(data, &DVector::from_element(data.n(), 1.0));
        for j in 0..data.p() {
            a[(j, j)] += 1.0;
        }
        let a_inv = nalgebra::Cholesky::new(a).ok_or(Error::SingularHessian)?.inverse();
        let trace = a_inv.trace();
        Ok(Self { a_inv, trace })
    }
}

impl GammaProvider for LooRidgeGamma {
    fn dim(&self) -> usize {
        self.a_inv.nrows()
    }
    fn quad_and_trace(&self, _: usize, x: DVectorView<'_, f64>) -> Result<(f64, f64)> {
        let u = &self.a_inv * x;
        let h = x.dot(&u);
        Ok((h / (1.0 - h), self.trace + u.norm_squared() / (1.0 - h)))
    }
    fn eigen_bound(&self) -> f64 {
        1.0
    }
}

/// `sup_i |x_i' Gamma_i x_i - Tr(Gamma_i) / n|`.
pub fn trace_concentration(data: &Dataset, gammas: &dyn GammaProvider) -> Result<f64> {
    if gammas.dim() != data.p() {
        return Err(Error::DimensionMismatch(format!("matrices are {0}x{0}, p = {1}", gammas.dim(), data.p())));
    }
    let n = data.n() as f64;
    (0..data.n()).try_fold(0.0f64, |sup, i| {
        let (q, tr) = gammas.quad_and_trace(i, data.row(i))?;
        Ok(sup.max((q - tr / n).abs()))
    })
}

/// `4 C ln n / sqrt n`, the tail bound for [`trace_concentration`] with
/// eigenvalue bound `C`.
pub fn tail_bound(n: usize, eigen_bound: f64) -> f64 {
    let n = n as f64;
    4.0 * eigen_bound * n.ln() / n.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spectrum {
    /// Extreme eigenvalues of `X'X`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `(1/2) min{(1 - sqrt(1/delta))^2, 1/delta}` with `delta = n / p`.
    pub sigma_delta_bound: f64,
}

impl Spectrum {
    /// Upper bound `9 delta^2` on `sigma_max` for the same design scale.
    pub fn sigma_max_bound(delta: f64) -> f64 {
        9.0 * delta * delta
    }
}

pub fn sigma_delta(delta: f64) -> f64 {
    let r = (1.0 / delta).sqrt();
    0.5 * ((1.0 - r) * (1.0 - r)).min(1.0 / delta)
}

pub fn spectrum_check(x: &DMatrix<f64>) -> Result<Spectrum> {
    let (n, p) = x.shape();
    if p == 0 || n < p {
        return Err(Error::InvalidParameter(format!("need n >= p >= 1, got {n}x{p}")));
    }
    let eig = (x.transpose() * x).symmetric_eigenvalues();
    Ok(Spectrum { sigma_min: eig.min(), sigma_max: eig.max(), sigma_delta_bound: sigma_delta(n as f64 / p as f64) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub lo: f64,
    pub alo: f64,
    pub amp: f64,
    pub d_lo_alo: f64,
    pub d_lo_amp: f64,
    /// `max_i |z_hat_i - (y_i - x_i' beta_tilde_i)|`.
    pub sup_resid_gap: f64,
}

pub const SWEEP_HEADER: &str = "n,p,seed,lo,alo,amp,d_lo_alo,d_lo_amp,sup_resid_gap";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.n, self.p, self.seed, self.lo, self.alo, self.amp, self.d_lo_alo, self.d_lo_amp, self.sup_resid_gap
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepFailure {
    pub n: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl Sweep {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SWEEP_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }

    /// Median of `f` over the rows with sample size `n`.
    pub fn median_at(&self, n: usize, f: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        median(self.rows.iter().filter(|r| r.n == n).map(f).collect())
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn sweep_cell(model: &PenalizedModel, spec: &SyntheticSpec, cfg: &SolverConfig) -> Result<SweepRow> {
    let s = generate(spec)?;
    let full = fit(model, &s.data, None, cfg)?;
    let lo = loocv_risk_from_fit(model, &s.data, &full, cfg)?;
    let alo = alo_risk(model, &s.data, &full)?;
    let amp = amp_risk(model, &s.data, &full, s.data.aspect_ratio())?;
    let sup_resid_gap = (&amp.corrected_residuals - &lo.residuals).amax();
    Ok(SweepRow {
        n: spec.n,
        p: spec.p,
        seed: spec.seed,
        lo: lo.risk,
        alo: alo.risk,
        amp: amp.risk,
        d_lo_alo: (lo.risk - alo.risk).abs(),
        d_lo_amp: (lo.risk - amp.risk).abs(),
        sup_resid_gap,
    })
}

/// LO, ALO and AMP risk for every `(n, seed)`, keeping the aspect ratio
/// `gen.n / gen.p` and the priors of `gen`. A failing cell is recorded and
/// the sweep moves on.
pub fn discrepancy_sweep(
    model: &PenalizedModel,
    gen: &SyntheticSpec,
    n_grid: &[usize],
    seeds: &[u64],
    cfg: &SolverConfig,
) -> Result<Sweep> {
    gen.validate()?;
    if n_grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidParameter("sweep grids must be nonempty".into()));
    }
    let mut cells = Vec::new();
    for &n in n_grid {
        if (n * gen.p) % gen.n != 0 {
            return Err(Error::InvalidParameter(format!("p = n / delta is not an integer at n = {n}")));
        }
        let p = n * gen.p / gen.n;
        for &seed in seeds {
            cells.push(SyntheticSpec { n, p, seed, ..*gen });
        }
    }
    let results: Vec<(SyntheticSpec, Result<SweepRow>)> =
        cells.into_par_iter().map(|spec| (spec, sweep_cell(model, &spec, cfg))).collect();
    let mut sweep = Sweep::default();
    for (spec, res) in results {
        match res {
            Ok(row) => sweep.rows.push(row),
            Err(e) => sweep.failures.push(SweepFailure { n: spec.n, seed: spec.seed, error: e.to_string() }),
        }
    }
    Ok(sweep)
}
