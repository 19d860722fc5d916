//! AMP-based risk: calibration of the scalars `(tau_hat, theta_hat)` from a
//! fitted model, and the corrected residuals `r_i + theta_hat l'(r_i)`.
//!
//! With `<.>` the mean over entries, `a_i = l''(r_i)`, `b_j = R''(beta_hat_j)`:
//!
//! ```text
//! tau:    lambda = < a / (1/tau + (1/(delta lambda)) <1/(1 + tau b)> a) >
//! theta:  theta  = (1/(delta lambda)) < tau / (1 + tau b) >
//! G:      G(theta) = <1/(1 + theta a)> + (1/delta) <1/(1 + lambda <a/(1 + theta a)>^{-1} b)>,  G(theta_hat) = 1
//! link:   tau = lambda / <a / (1 + theta a)>
//! ```
//!
//! `tau_hat` is the unique root of the first equation, and `G` is strictly
//! decreasing with `G(0) > 1`, so both roots are found by bracketing
//! bisection. [`CurvatureProfile::calibrate`] solves for `theta_hat`
//! through `G` and checks the answer against the direct `tau` route.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{Dataset, FitResult, PenalizedModel};

/// Relative tolerance for agreement of the two calibration routes.
pub const ROUTE_AGREEMENT: f64 = 1e-9;

const TAU_LO: f64 = 1e-8;
const TAU_LO_FLOOR: f64 = 1e-12;
const BRACKET_CAP: f64 = 1e12;
const MAX_DOUBLINGS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmpCalibration {
    pub tau_hat: f64,
    pub theta_hat: f64,
}

/// Loss curvatures at the residuals and regularizer curvatures at the
/// coefficients: everything the calibration equations depend on.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureProfile {
    loss: Vec<f64>,
    reg: Vec<f64>,
    lambda: f64,
    delta: f64,
}

fn mean(it: impl Iterator<Item = f64>, len: usize) -> f64 {
    it.sum::<f64>() / len as f64
}

impl CurvatureProfile {
    pub fn new(loss: Vec<f64>, reg: Vec<f64>, lambda: f64, delta: f64) -> Result<Self> {
        if loss.is_empty() || reg.is_empty() {
            return Err(Error::InvalidParameter("curvature profile needs n, p >= 1".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) || !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("need lambda, delta > 0, got {lambda}, {delta}")));
        }
        if loss.iter().chain(reg.iter()).any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidParameter("curvatures must be finite and nonnegative".into()));
        }
        Ok(Self { loss, reg, lambda, delta })
    }

    /// Profile at a fitted model.
    pub fn at_fit(model: &PenalizedModel, fit: &FitResult, delta: f64) -> Result<Self> {
        let loss = fit.residuals.iter().map(|&r| model.loss().d2(r)).collect();
        let reg = fit.beta_hat.iter().map(|&b| model.regularizer().d2(b)).collect();
        Self::new(loss, reg, model.lambda(), delta)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `<1/(1 + tau b)>`.
    fn reg_shrink(&self, tau: f64) -> f64 {
        mean(self.reg.iter().map(|&b| 1.0 / (1.0 + tau * b)), self.reg.len())
    }

    /// `<a / (1 + theta a)>`.
    fn loss_shrink(&self, theta: f64) -> f64 {
        mean(self.loss.iter().map(|&a| a / (1.0 + theta * a)), self.loss.len())
    }

    /// `lambda - < a / (1/tau + (1/(delta lambda)) <1/(1 + tau b)> a) >`, positive
    /// below `tau_hat` and negative above it.
    pub fn tau_residual(&self, tau: f64) -> f64 {
        let c = self.reg_shrink(tau) / (self.delta * self.lambda);
        let rhs = mean(self.loss.iter().map(|&a| a / (1.0 / tau + c * a)), self.loss.len());
        self.lambda - rhs
    }

    pub fn g(&self, theta: f64) -> f64 {
        let first = mean(self.loss.iter().map(|&a| 1.0 / (1.0 + theta * a)), self.loss.len());
        let k = self.lambda / self.loss_shrink(theta);
        let second = mean(self.reg.iter().map(|&b| 1.0 / (1.0 + k * b)), self.reg.len());
        first + second / self.delta
    }

    pub fn theta_from_tau(&self, tau: f64) -> f64 {
        tau * self.reg_shrink(tau) / (self.delta * self.lambda)
    }

    pub fn tau_from_theta(&self, theta: f64) -> f64 {
        self.lambda / self.loss_shrink(theta)
    }

    /// Root of [`Self::tau_residual`]: bracket `[1e-8, 1]`, lower end shrunk
    /// to `1e-12` and upper end doubled (at most 200 times, capped at `1e12`)
    /// until the sign changes.
    pub fn solve_tau(&self) -> Result<f64> {
        let mut lo = TAU_LO;
        while self.tau_residual(lo) <= 0.0 {
            lo *= 0.1;
            if lo < TAU_LO_FLOOR {
                return Err(Error::BracketFailure("tau_hat (lower end)"));
            }
        }
        let mut hi = 1.0;
        let mut doublings = 0;
        while self.tau_residual(hi) > 0.0 {
            hi *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS || hi > BRACKET_CAP {
                return Err(Error::BracketFailure("tau_hat (upper end)"));
            }
        }
        Ok(bisect(lo, hi, |t| self.tau_residual(t) > 0.0))
    }

    /// Root of `G(theta) = 1` on `(0, inf)`.
    pub fn solve_theta(&self) -> Result<f64> {
        if !(self.g(0.0) > 1.0) {
            return Err(Error::BracketFailure("theta_hat (G(0) <= 1)"));
        }
        let mut hi = 1.0;
        let mut doublings = 0;
        while self.g(hi) > 1.0 {
            hi *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS || hi > BRACKET_CAP {
                return Err(Error::BracketFailure("theta_hat (upper end)"));
            }
        }
        Ok(bisect(0.0, hi, |t| self.g(t) > 1.0))
    }

    /// Solve through `G`, derive `tau_hat` from the link, and require the
    /// direct `tau` bisection to agree to [`ROUTE_AGREEMENT`].
    pub fn calibrate(&self) -> Result<AmpCalibration> {
        let theta_hat = self.solve_theta()?;
        let via_theta = self.tau_from_theta(theta_hat);
        let direct = self.solve_tau()?;
        if (via_theta - direct).abs() > ROUTE_AGREEMENT * direct {
            return Err(Error::CalibrationMismatch { direct, via_theta });
        }
        Ok(AmpCalibration { tau_hat: direct, theta_hat })
    }
}

/// Bisection on `[lo, hi]` where `below(lo)` holds and `below(hi)` does not,
/// down to adjacent floating-point values.
fn bisect(mut lo: f64, mut hi: f64, below: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn solve_tau_hat(fit: &FitResult, model: &PenalizedModel, delta: f64) -> Result<f64> {
    CurvatureProfile::at_fit(model, fit, delta)?.solve_tau()
}

pub fn solve_theta_hat(fit: &FitResult, model: &PenalizedModel, delta: f64) -> Result<f64> {
    CurvatureProfile::at_fit(model, fit, delta)?.solve_theta()
}

#[derive(Clone, Debug)]
pub struct AmpRisk {
    pub risk: f64,
    pub tau_hat: f64,
    pub theta_hat: f64,
    /// `r_i + theta_hat l'(r_i)`.
    pub corrected_residuals: DVector<f64>,
}

/// `(1/n) sum_i l(r_i + theta_hat l'(r_i))` with calibrated `theta_hat`.
pub fn amp_risk(model: &PenalizedModel, data: &Dataset, fit: &FitResult, delta: f64) -> Result<AmpRisk> {
    if fit.residuals.len() != data.n() || fit.beta_hat.len() != data.p() {
        return Err(Error::DimensionMismatch("fit does not belong to this dataset".into()));
    }
    let cal = CurvatureProfile::at_fit(model, fit, delta)?.calibrate()?;
    let (risk, corrected_residuals) = corrected_risk(model, fit, cal.theta_hat);
    Ok(AmpRisk { risk, tau_hat: cal.tau_hat, theta_hat: cal.theta_hat, corrected_residuals })
}

/// Mean loss of `r + theta l'(r)` for a given `theta`.
pub fn corrected_risk(model: &PenalizedModel, fit: &FitResult, theta: f64) -> (f64, DVector<f64>) {
    let z = fit.residuals.map(|r| r + theta * model.loss().d1(r));
    (model.mean_loss(&z), z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use crate::families::ScalarFamily;
    use crate::solver::{fit, SolverConfig};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn unit_profile(n: usize, p: usize, lambda: f64, delta: f64) -> CurvatureProfile {
        CurvatureProfile::new(vec![1.0; n], vec![1.0; p], lambda, delta).unwrap()
    }

    #[test]
    fn constant_curvature_closed_form() {
        // 1/tau + 1/(2(1 + tau)) = 1  <=>  2 tau^2 - tau - 2 = 0
        let tau_exact = (1.0 + 17f64.sqrt()) / 4.0;
        let theta_exact = tau_exact / (2.0 * (1.0 + tau_exact));
        let prof = unit_profile(10, 5, 1.0, 2.0);
        let tau = prof.solve_tau().unwrap();
        let theta = prof.solve_theta().unwrap();
        assert!((tau - tau_exact).abs() <= 1e-10);
        assert!((theta - theta_exact).abs() <= 1e-10);
        assert!((prof.tau_from_theta(theta) - tau).abs() <= 1e-9);
        assert!((prof.theta_from_tau(tau) - theta).abs() <= 1e-9);
        assert!((prof.g(0.280776) - 1.0).abs() < 1e-6);
        assert!(prof.tau_residual(tau).abs() <= 1e-12);
        assert!((prof.g(theta) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn tau_tends_to_lambda_for_large_delta() {
        let prof = unit_profile(10, 5, 1.0, 1e9);
        assert!((prof.solve_tau().unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn g_at_zero_exceeds_one_and_decreases() {
        let prof = CurvatureProfile::new(vec![0.3, 1.0, 2.5, 0.01], vec![1.0, 0.2, 4.0], 0.7, 1.5).unwrap();
        assert!(prof.g(0.0) > 1.0);
        let grid: Vec<f64> = (0..200).map(|k| 0.05 * k as f64).collect();
        for w in grid.windows(2) {
            assert!(prof.g(w[0]) > prof.g(w[1]));
        }
    }

    #[test]
    fn routes_agree_on_fitted_models() {
        let s = generate(&SyntheticSpec::figure1(120, 60, 4)).unwrap();
        let m = PenalizedModel::new(ScalarFamily::pseudo_huber(1.0).unwrap(), ScalarFamily::elastic_smoothed(0.1, 0.5).unwrap(), 0.8).unwrap();
        let f = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let prof = CurvatureProfile::at_fit(&m, &f, 2.0).unwrap();
        let cal = prof.calibrate().unwrap();
        assert_relative_eq!(prof.tau_from_theta(cal.theta_hat), cal.tau_hat, max_relative = 1e-9);
        assert_relative_eq!(prof.theta_from_tau(cal.tau_hat), cal.theta_hat, max_relative = 1e-9);
    }

    #[test]
    fn forced_zero_theta_gives_training_risk() {
        let s = generate(&SyntheticSpec::figure1(30, 10, 1)).unwrap();
        let m = PenalizedModel::new(ScalarFamily::pseudo_huber(1.0).unwrap(), ScalarFamily::ridge(), 1.0).unwrap();
        let f = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        assert_eq!(corrected_risk(&m, &f, 0.0).0, m.mean_loss(&f.residuals));
    }

    #[test]
    fn squared_loss_scales_residuals() {
        let s = generate(&SyntheticSpec::figure1(40, 20, 6)).unwrap();
        let m = PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), 0.5).unwrap();
        let f = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let a = amp_risk(&m, &s.data, &f, 2.0).unwrap();
        let t = a.theta_hat;
        assert_relative_eq!(a.corrected_residuals, &f.residuals * (1.0 + t), epsilon = 1e-14);
        let expect = (1.0 + t).powi(2) * f.residuals.norm_squared() / 2.0 / 40.0;
        assert_relative_eq!(a.risk, expect, max_relative = 1e-13);
    }

    #[test]
    fn theta_tracks_trace_of_inverse_hessian() {
        let (n, p, lambda) = (800, 400, 1.0);
        let s = generate(&SyntheticSpec::figure1(n, p, 21)).unwrap();
        let m = PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), lambda).unwrap();
        let f = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let theta = solve_theta_hat(&f, &m, n as f64 / p as f64).unwrap();
        let h = s.data.x().transpose() * s.data.x() + DMatrix::identity(p, p) * lambda;
        let tr = h.cholesky().unwrap().inverse().trace() / n as f64;
        assert!((theta - tr).abs() <= 2e-2 * tr, "theta {theta} vs trace {tr}");
    }

    #[test]
    fn rejects_bad_profiles() {
        assert!(CurvatureProfile::new(vec![], vec![1.0], 1.0, 1.0).is_err());
        assert!(CurvatureProfile::new(vec![1.0], vec![1.0], 0.0, 1.0).is_err());
        assert!(CurvatureProfile::new(vec![-1.0], vec![1.0], 1.0, 1.0).is_err());
    }
}
