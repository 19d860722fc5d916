//! Approximate message passing for penalized M-estimation.
//!
//! One iteration, with `eta(., tau)` the prox of `tau R`, `psi(z, theta) =
//! z - eta_l(z, theta)` and `<.>` the entry mean:
//!
//! ```text
//! z^t       = y - X beta^t + psi(z^{t-1}, theta^{t-1})
//! theta^t   : <psi'(z^t, theta)> = (1/delta) <eta'(beta^t + X' psi(z^t, theta) / <psi'(z^t, theta)>, tau_t)>
//! beta^{t+1} = eta(beta^t + X' psi(z^t, theta^t) / <psi'(z^t, theta^t)>, tau_t)
//! ```

use std::io::Write;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{Dataset, FitResult, PenalizedModel};
use crate::risk::amp::{AmpCalibration, CurvatureProfile};

/// Floor on the Onsager denominator `<psi'>`.
pub const MIN_ONSAGER: f64 = 1e-12;

const THETA_SCAN_START: f64 = 1e-12;
const THETA_SCAN_END: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct AmpState {
    pub t: usize,
    pub beta: DVector<f64>,
    pub z: DVector<f64>,
    pub theta: f64,
    /// Threshold used by the next step.
    pub tau: f64,
    /// `psi(z^{t-1}, theta^{t-1})`.
    pub psi_prev: DVector<f64>,
}

impl AmpState {
    /// `beta^0 = 0` and no Onsager memory. `theta` is a placeholder until
    /// the first step solves for it.
    pub fn new(n: usize, p: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { t: 0, beta: DVector::zeros(p), z: DVector::zeros(n), theta: 1.0, tau, psi_prev: DVector::zeros(n) })
    }

    /// The state AMP would reach at a fixed point sitting on `fit`:
    /// `z = r + theta_hat l'(r)` and Onsager memory `theta_hat l'(r)`.
    pub fn at_estimate(model: &PenalizedModel, data: &Dataset, fit: &FitResult, cal: AmpCalibration) -> Result<Self> {
        if fit.beta_hat.len() != data.p() {
            return Err(Error::DimensionMismatch("fit and data disagree on p".into()));
        }
        let r = data.residuals(&fit.beta_hat);
        let psi_prev = r.map(|ri| cal.theta_hat * model.loss().d1(ri));
        Ok(Self {
            t: 0,
            beta: fit.beta_hat.clone(),
            z: &r + &psi_prev,
            theta: cal.theta_hat,
            tau: cal.tau_hat,
            psi_prev,
        })
    }
}

/// Per-iteration summary of [`amp_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub delta_beta_inf: f64,
    pub theta_t: f64,
    pub tau_t: f64,
    /// Mean loss at `beta^{t+1}`.
    pub train_risk: f64,
}

pub const TRACE_HEADER: &str = "t,delta_beta_inf,theta_t,tau_t,train_risk";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e},{:e},{:e}", r.t, r.delta_beta_inf, r.theta_t, r.tau_t, r.train_risk)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum TauSchedule {
    Constant(f64),
    /// `tau_hat (1 + c 0.9^t)`.
    Geometric { tau_hat: f64, c: f64 },
    /// Used in order; the last value repeats.
    Explicit(Vec<f64>),
}

impl TauSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            TauSchedule::Constant(tau) => *tau,
            TauSchedule::Geometric { tau_hat, c } => tau_hat * (1.0 + c * 0.9f64.powi(t.min(i32::MAX as usize) as i32)),
            TauSchedule::Explicit(v) => v[t.min(v.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            TauSchedule::Constant(tau) => *tau > 0.0 && tau.is_finite(),
            TauSchedule::Geometric { tau_hat, c } => *tau_hat > 0.0 && tau_hat.is_finite() && *c > -1.0 && c.is_finite(),
            TauSchedule::Explicit(v) => !v.is_empty() && v.iter().all(|t| *t > 0.0 && t.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("tau schedule must stay positive and finite".into()))
        }
    }
}

/// `(psi, psi')` over all observations, and `<psi'>`.
fn psi_all(model: &PenalizedModel, z: &DVector<f64>, theta: f64) -> (DVector<f64>, f64) {
    let loss = model.loss();
    let mut psi = DVector::zeros(z.len());
    let mut slope = 0.0;
    for (i, &zi) in z.iter().enumerate() {
        let (v, d) = loss.psi(zi, theta);
        psi[i] = v;
        slope += d;
    }
    (psi, slope / z.len() as f64)
}

/// `beta + X' psi / <psi'>`, the argument of the regularizer prox.
fn prox_argument(data: &Dataset, beta: &DVector<f64>, psi: &DVector<f64>, onsager: f64) -> DVector<f64> {
    if onsager > 0.0 {
        beta + data.xt() * psi / onsager
    } else {
        beta.clone()
    }
}

/// `<psi'(z, theta)> - (1/delta) <eta'(beta + X' psi / <psi'>, tau)>`.
fn theta_gap(model: &PenalizedModel, data: &Dataset, z: &DVector<f64>, beta: &DVector<f64>, tau: f64, delta: f64, theta: f64) -> f64 {
    let (psi, lhs) = psi_all(model, z, theta);
    let reg = model.regularizer();
    let rhs = if reg.is_unit_quadratic() {
        1.0 / (1.0 + tau)
    } else {
        let v = prox_argument(data, beta, &psi, lhs);
        v.iter().map(|&vj| reg.prox_derivative(vj, tau)).sum::<f64>() / v.len() as f64
    };
    lhs - rhs / delta
}

/// Smallest positive `theta` solving the `theta^t` equation.
///
/// The gap is negative near zero. The scan doubles `theta` from `1e-12`
/// until the gap turns nonnegative, then bisects to adjacent floats. Two
/// roots closer than a factor of two can be merged by the scan.
pub fn solve_theta_t(
    model: &PenalizedModel,
    data: &Dataset,
    z: &DVector<f64>,
    beta: &DVector<f64>,
    tau: f64,
    delta: f64,
) -> Result<f64> {
    if z.len() != data.n() || beta.len() != data.p() {
        return Err(Error::DimensionMismatch("z must have length n and beta length p".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) || !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("need tau, delta > 0, got {tau}, {delta}")));
    }
    let gap = |theta: f64| theta_gap(model, data, z, beta, tau, delta, theta);
    let mut lo = THETA_SCAN_START;
    if gap(lo) >= 0.0 {
        return Err(Error::ThetaBracketFailure);
    }
    let mut hi = lo * 2.0;
    loop {
        let g = gap(hi);
        if !g.is_finite() {
            return Err(Error::ThetaBracketFailure);
        }
        if g >= 0.0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > THETA_SCAN_END {
            return Err(Error::ThetaBracketFailure);
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // whichever end has the smaller gap
    Ok(if gap(lo).abs() <= gap(hi).abs() { lo } else { hi })
}

/// One AMP iteration using `state.tau` as `tau_t`.
pub fn amp_step(model: &PenalizedModel, data: &Dataset, state: &AmpState) -> Result<AmpState> {
    let (n, p) = (data.n(), data.p());
    if state.beta.len() != p || state.z.len() != n || state.psi_prev.len() != n {
        return Err(Error::DimensionMismatch("AMP state does not match the data".into()));
    }
    let z = data.residuals(&state.beta) + &state.psi_prev;
    let theta = solve_theta_t(model, data, &z, &state.beta, state.tau, data.aspect_ratio())?;
    let (psi, onsager) = psi_all(model, &z, theta);
    if !(onsager > MIN_ONSAGER) {
        return Err(Error::DegenerateOnsager(onsager));
    }
    let reg = model.regularizer();
    let beta = prox_argument(data, &state.beta, &psi, onsager).map(|v| reg.prox(v, state.tau));
    Ok(AmpState { t: state.t + 1, beta, z, theta, tau: state.tau, psi_prev: psi })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmpOptions {
    pub max_iter: usize,
    /// Stop once `|beta^{t+1} - beta^t|_inf <= tol`.
    pub tol: f64,
    /// `beta^{t+1} <- (1 - d) beta^{t+1} + d beta^t`; `0` is plain AMP.
    pub damping: f64,
}

impl Default for AmpOptions {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-10, damping: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct AmpRun {
    pub state: AmpState,
    pub trace: Vec<TraceRow>,
}

/// Iterates [`amp_step`] from `init` (or `beta^0 = 0`) until the update
/// falls below `opts.tol`.
pub fn amp_run(
    model: &PenalizedModel,
    data: &Dataset,
    schedule: &TauSchedule,
    init: Option<AmpState>,
    opts: &AmpOptions,
) -> Result<AmpRun> {
    schedule.validate()?;
    if !(0.0..1.0).contains(&opts.damping) || !(opts.tol >= 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("need damping in [0, 1), tol >= 0, max_iter >= 1".into()));
    }
    let mut state = match init {
        Some(s) => s,
        None => AmpState::new(data.n(), data.p(), schedule.at(0))?,
    };
    let mut trace = Vec::new();
    for _ in 0..opts.max_iter {
        let t = state.t;
        state.tau = schedule.at(t);
        let mut next = amp_step(model, data, &state)?;
        if opts.damping > 0.0 {
            next.beta = &next.beta * (1.0 - opts.damping) + &state.beta * opts.damping;
        }
        let delta_beta_inf = (&next.beta - &state.beta).amax();
        trace.push(TraceRow {
            t,
            delta_beta_inf,
            theta_t: next.theta,
            tau_t: next.tau,
            train_risk: model.mean_loss(&data.residuals(&next.beta)),
        });
        state = next;
        if !delta_beta_inf.is_finite() {
            break;
        }
        if delta_beta_inf <= opts.tol {
            return Ok(AmpRun { state, trace });
        }
    }
    Err(Error::NonConvergence { trace })
}

/// Residuals of the four fixed-point equations, with `gamma = lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointResidual {
    /// `|-X' l'(y - X beta) + lambda R'(beta)|_inf`.
    pub stationarity: f64,
    /// `|lambda - <a / (1/tau + (1/(delta lambda)) <1/(1 + tau b)> a)>|`.
    pub tau_eq: f64,
    /// `|theta - (1/(delta lambda)) <tau / (1 + tau b)>|`.
    pub theta_eq: f64,
    /// `|z - (y - X beta) - theta l'(y - X beta)|_inf`.
    pub z_eq: f64,
}

impl FixedPointResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.tau_eq).max(self.theta_eq).max(self.z_eq)
    }
}

pub fn check_fixed_point(state: &AmpState, model: &PenalizedModel, data: &Dataset, delta: f64) -> Result<FixedPointResidual> {
    if state.beta.len() != data.p() || state.z.len() != data.n() {
        return Err(Error::DimensionMismatch("AMP state does not match the data".into()));
    }
    let r = data.residuals(&state.beta);
    let stationarity = model.gradient_at(data, &r, &state.beta).amax();
    let loss = r.iter().map(|&ri| model.loss().d2(ri)).collect();
    let reg = state.beta.iter().map(|&b| model.regularizer().d2(b)).collect();
    let profile = CurvatureProfile::new(loss, reg, model.lambda(), delta)?;
    let z_eq = r
        .iter()
        .zip(state.z.iter())
        .map(|(&ri, &zi)| (zi - ri - state.theta * model.loss().d1(ri)).abs())
        .fold(0.0, f64::max);
    Ok(FixedPointResidual {
        stationarity,
        tau_eq: profile.tau_residual(state.tau).abs(),
        theta_eq: (state.theta - profile.theta_from_tau(state.tau)).abs(),
        z_eq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use crate::families::ScalarFamily;
    use crate::solver::{fit, SolverConfig};
    use nalgebra::DMatrix;

    fn huber_ridge() -> PenalizedModel {
        PenalizedModel::new(ScalarFamily::pseudo_huber(1.0).unwrap(), ScalarFamily::ridge(), 1.0).unwrap()
    }

    fn squared_ridge(lambda: f64) -> PenalizedModel {
        PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), lambda).unwrap()
    }

    fn calibrated(m: &PenalizedModel, d: &Dataset) -> (FitResult, AmpCalibration) {
        let f = fit(m, d, None, &SolverConfig::default()).unwrap();
        let cal = CurvatureProfile::at_fit(m, &f, d.aspect_ratio()).unwrap().calibrate().unwrap();
        (f, cal)
    }

    #[test]
    fn estimate_is_a_fixed_point_of_one_step() {
        let s = generate(&SyntheticSpec::figure1(200, 100, 4)).unwrap();
        let m = huber_ridge();
        let (f, cal) = calibrated(&m, &s.data);
        let st = AmpState::at_estimate(&m, &s.data, &f, cal).unwrap();
        let next = amp_step(&m, &s.data, &st).unwrap();
        assert!((&next.beta - &f.beta_hat).amax() < 1e-9);
        assert!((next.theta - cal.theta_hat).abs() < 1e-9);
        let res = check_fixed_point(&st, &m, &s.data, 2.0).unwrap();
        assert!(res.max() <= 1e-8, "{res:?}");
    }

    #[test]
    fn theta_closed_form_for_squared_ridge() {
        // RHS = (1/2) / (1 + 1) = 1/4 and theta / (1 + theta) = 1/4
        let s = generate(&SyntheticSpec::figure1(40, 20, 1)).unwrap();
        let m = squared_ridge(1.0);
        let beta = DVector::zeros(20);
        let theta = solve_theta_t(&m, &s.data, s.data.y(), &beta, 1.0, 2.0).unwrap();
        assert!((theta - 1.0 / 3.0).abs() < 1e-14, "{theta}");
        let gap = theta_gap(&m, &s.data, s.data.y(), &beta, 1.0, 2.0, theta);
        assert!(gap.abs() <= 1e-12);
        let tiny = solve_theta_t(&m, &s.data, s.data.y(), &beta, 1.0, 1e9).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-9);
    }

    #[test]
    fn onsager_mean_within_unit_over_delta() {
        let s = generate(&SyntheticSpec::figure1(60, 20, 9)).unwrap();
        let m = huber_ridge();
        let z = s.data.y().clone();
        let beta = DVector::from_element(20, 0.3);
        let theta = solve_theta_t(&m, &s.data, &z, &beta, 0.7, 3.0).unwrap();
        let (psi, onsager) = psi_all(&m, &z, theta);
        assert!(onsager >= 0.0 && onsager <= 1.0 / 3.0 + 1e-12);
        for i in 0..60 {
            let eta = m.loss().prox(z[i], theta);
            assert!((z[i] - psi[i] - eta).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_squared_loss_oracle() {
        let s = generate(&SyntheticSpec::figure1(50, 25, 2)).unwrap();
        let m = squared_ridge(1.0);
        let tau0 = 0.8;
        let next = amp_step(&m, &s.data, &AmpState::new(50, 25, tau0).unwrap()).unwrap();
        let rhs = 0.5 / (1.0 + tau0);
        assert!((next.theta - rhs / (1.0 - rhs)).abs() < 1e-14);
        assert_eq!(next.z, *s.data.y());
        let expected = s.data.xt() * s.data.y() / (1.0 + tau0);
        assert!((&next.beta - expected).amax() < 1e-12);
    }

    #[test]
    fn zero_design_is_a_prox_iteration() {
        let d = Dataset::new(DMatrix::zeros(6, 3), DVector::from_vec(vec![1.0, -1.0, 2.0, 0.5, 0.0, 3.0])).unwrap();
        let m = huber_ridge();
        let mut st = AmpState::new(6, 3, 0.5).unwrap();
        st.beta = DVector::from_vec(vec![1.0, -2.0, 4.0]);
        let next = amp_step(&m, &d, &st).unwrap();
        assert!((&next.beta - &st.beta / 1.5).amax() < 1e-15);
        let run = amp_run(&m, &d, &TauSchedule::Constant(0.5), None, &AmpOptions::default()).unwrap();
        assert!(run.trace.len() <= 2);
        assert_eq!(run.state.beta, DVector::zeros(3));
    }

    #[test]
    fn constant_tau_hat_recovers_ridge_estimate() {
        let s = generate(&SyntheticSpec::figure1(200, 100, 7)).unwrap();
        let m = squared_ridge(1.0);
        let (f, cal) = calibrated(&m, &s.data);
        let run = amp_run(&m, &s.data, &TauSchedule::Constant(cal.tau_hat), None, &AmpOptions::default()).unwrap();
        assert!((&run.state.beta - &f.beta_hat).amax() < 1e-6);
        let res = check_fixed_point(&run.state, &m, &s.data, 2.0).unwrap();
        assert!(res.max() <= 1e-6, "{res:?}");
        // eventually decreasing steps
        let tail = &run.trace[run.trace.len() / 2..];
        assert!(tail.windows(2).all(|w| w[1].delta_beta_inf <= w[0].delta_beta_inf * (1.0 + 1e-6)));
    }

    #[test]
    fn perturbation_and_permutation() {
        let s = generate(&SyntheticSpec::figure1(40, 20, 3)).unwrap();
        let m = huber_ridge();
        let (f, cal) = calibrated(&m, &s.data);
        let st = AmpState::at_estimate(&m, &s.data, &f, cal).unwrap();
        let base = check_fixed_point(&st, &m, &s.data, 2.0).unwrap();

        let mut bumped = st.clone();
        bumped.beta[0] += 0.1;
        assert!(check_fixed_point(&bumped, &m, &s.data, 2.0).unwrap().stationarity > base.stationarity);

        let order: Vec<usize> = (0..40).rev().collect();
        let perm = s.data.select(&order).unwrap();
        let mut pst = st.clone();
        pst.z = DVector::from_iterator(40, order.iter().map(|&i| st.z[i]));
        pst.psi_prev = DVector::from_iterator(40, order.iter().map(|&i| st.psi_prev[i]));
        let res = check_fixed_point(&pst, &m, &perm, 2.0).unwrap();
        assert!((res.max() - base.max()).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_keeps_trace() {
        let s = generate(&SyntheticSpec::figure1(30, 15, 1)).unwrap();
        let m = squared_ridge(1.0);
        let opts = AmpOptions { max_iter: 3, tol: 0.0, damping: 0.0 };
        match amp_run(&m, &s.data, &TauSchedule::Constant(1.0), None, &opts) {
            Err(Error::NonConvergence { trace }) => assert_eq!(trace.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(TauSchedule::Constant(2.0).at(7), 2.0);
        let g = TauSchedule::Geometric { tau_hat: 1.0, c: 1.0 };
        assert_eq!(g.at(0), 2.0);
        assert!((g.at(1) - 1.9).abs() < 1e-15);
        let e = TauSchedule::Explicit(vec![3.0, 2.0]);
        assert_eq!((e.at(0), e.at(1), e.at(9)), (3.0, 2.0, 2.0));
        assert!(TauSchedule::Explicit(vec![]).validate().is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow { t: 0, delta_beta_inf: 0.5, theta_t: 0.25, tau_t: 1.0, train_risk: 2.0 }];
        let mut out = Vec::new();
        write_trace_csv(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,delta_beta_inf,theta_t,tau_t,train_risk\n0,5e-1,2.5e-1,1e0,2e0\n");
    }
}
