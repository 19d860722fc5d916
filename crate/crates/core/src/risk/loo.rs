//! Exact leave-one-out and its leverage-based approximation.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dataset, FitResult, PenalizedModel};
use crate::solver::{fit, LooSolver, SolverConfig};

/// Leverages at or above `1 - LEVERAGE_MARGIN` are rejected.
pub const LEVERAGE_MARGIN: f64 = 1e-8;
/// Smallest loss curvature accepted by the ALO correction.
pub const MIN_CURVATURE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LooRisk {
    pub risk: f64,
    /// `y_i - x_i' beta_tilde_i` for every `i`.
    pub residuals: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct AloRisk {
    pub risk: f64,
    /// `r_i + (l'(r_i) / l''(r_i)) H_ii / (1 - H_ii)`.
    pub residuals: DVector<f64>,
    pub leverages: DVector<f64>,
}

/// Exact leave-one-out risk `(1/n) sum_i l(y_i - x_i' beta_tilde_i)`.
pub fn loocv_risk(model: &PenalizedModel, data: &Dataset, cfg: &SolverConfig) -> Result<LooRisk> {
    let full = fit(model, data, None, cfg)?;
    loocv_risk_from_fit(model, data, &full, cfg)
}

/// As [`loocv_risk`], reusing an existing full-data fit as warm start.
pub fn loocv_risk_from_fit(model: &PenalizedModel, data: &Dataset, full: &FitResult, cfg: &SolverConfig) -> Result<LooRisk> {
    let solver = LooSolver::new(model, data, full, cfg)?;
    let held_out: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            solver
                .fit(i)
                .map(|r| r.loo_residual)
                .map_err(|e| Error::LooFailed { index: i, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let residuals = DVector::from_vec(held_out);
    Ok(LooRisk { risk: model.mean_loss(&residuals), residuals })
}

/// Diagonal of `X (X' D_l X + lambda D_R)^{-1} X' D_l` at the fit.
///
/// Uses one Cholesky factorization `L L'` of the Hessian: `H_ii = l''(r_i) |L^{-1} x_i|^2`.
pub fn alo_leverages(model: &PenalizedModel, data: &Dataset, fit: &FitResult) -> Result<DVector<f64>> {
    let h = model.hessian(data, &fit.beta_hat)?;
    let chol = nalgebra::Cholesky::new(h).ok_or(Error::SingularHessian)?;
    let w = chol.l().solve_lower_triangular(data.xt()).ok_or(Error::SingularHessian)?;
    let r = data.residuals(&fit.beta_hat);
    let lev = DVector::from_iterator(
        data.n(),
        w.column_iter().zip(r.iter()).map(|(col, &ri)| model.loss().d2(ri) * col.norm_squared()),
    );
    if let Some((index, &value)) = lev.iter().enumerate().find(|(_, &v)| !(v >= 0.0 && v < 1.0 - LEVERAGE_MARGIN)) {
        return Err(Error::LeverageOutOfRange { index, value });
    }
    Ok(lev)
}

/// Approximate leave-one-out risk from the leverages.
pub fn alo_risk(model: &PenalizedModel, data: &Dataset, fit: &FitResult) -> Result<AloRisk> {
    let leverages = alo_leverages(model, data, fit)?;
    alo_risk_with_leverages(model, data, fit, leverages)
}

pub fn alo_risk_with_leverages(
    model: &PenalizedModel,
    data: &Dataset,
    fit: &FitResult,
    leverages: DVector<f64>,
) -> Result<AloRisk> {
    if leverages.len() != data.n() {
        return Err(Error::DimensionMismatch("one leverage per observation required".into()));
    }
    let loss = model.loss();
    let r = data.residuals(&fit.beta_hat);
    let mut corrected = DVector::zeros(data.n());
    for i in 0..data.n() {
        let h = leverages[i];
        if !(h >= 0.0 && h < 1.0 - LEVERAGE_MARGIN) {
            return Err(Error::LeverageOutOfRange { index: i, value: h });
        }
        let c = loss.d2(r[i]);
        if !(c >= MIN_CURVATURE) {
            return Err(Error::ZeroCurvature { index: i, value: c });
        }
        corrected[i] = r[i] + loss.d1(r[i]) / c * h / (1.0 - h);
    }
    Ok(AloRisk { risk: model.mean_loss(&corrected), residuals: corrected, leverages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use crate::families::ScalarFamily;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn ridge(lambda: f64) -> PenalizedModel {
        PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), lambda).unwrap()
    }

    #[test]
    fn two_point_hand_example() {
        let d = Dataset::from_rows(&[vec![1.0], vec![1.0]], &[0.0, 2.0]).unwrap();
        let lo = loocv_risk(&ridge(1.0), &d, &SolverConfig::default()).unwrap();
        assert_relative_eq!(lo.risk, 1.25, epsilon = 1e-12);
        assert_relative_eq!(lo.residuals[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(lo.residuals[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_duplicates_give_zero_risk() {
        // y = 0 everywhere: the ridge solution is 0 with or without any row
        let rows: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, -0.5]).collect();
        let d = Dataset::from_rows(&rows, &[0.0; 5]).unwrap();
        let lo = loocv_risk(&ridge(0.3), &d, &SolverConfig::default()).unwrap();
        assert_eq!(lo.risk, 0.0);
    }

    #[test]
    fn loo_exceeds_training_risk() {
        for seed in 0..4 {
            let s = generate(&SyntheticSpec::figure1(60, 30, seed)).unwrap();
            let m = PenalizedModel::new(ScalarFamily::pseudo_huber(1.0).unwrap(), ScalarFamily::ridge(), 0.5).unwrap();
            let cfg = SolverConfig::default();
            let full = fit(&m, &s.data, None, &cfg).unwrap();
            let lo = loocv_risk_from_fit(&m, &s.data, &full, &cfg).unwrap();
            assert!(lo.risk >= m.mean_loss(&full.residuals));
        }
    }

    #[test]
    fn leverages_match_svd_oracle() {
        let s = generate(&SyntheticSpec::figure1(40, 25, 2)).unwrap();
        let lambda = 0.8;
        let m = ridge(lambda);
        let full = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let lev = alo_leverages(&m, &s.data, &full).unwrap();
        let a = s.data.x().transpose() * s.data.x() + DMatrix::identity(25, 25) * lambda;
        let ainv = a.try_inverse().unwrap();
        for i in 0..40 {
            let xi = s.data.row(i);
            assert_relative_eq!(lev[i], (xi.transpose() * &ainv * xi)[0], epsilon = 1e-12);
        }
        let svd_sum: f64 = s.data.x().clone().svd(false, false).singular_values.iter().map(|sv| sv * sv / (sv * sv + lambda)).sum();
        assert_relative_eq!(lev.sum(), svd_sum, epsilon = 1e-10);
    }

    #[test]
    fn identity_design_has_half_leverage() {
        let d = Dataset::new(DMatrix::identity(4, 4), DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0])).unwrap();
        let m = ridge(1.0);
        let full = fit(&m, &d, None, &SolverConfig::default()).unwrap();
        let lev = alo_leverages(&m, &d, &full).unwrap();
        assert!(lev.iter().all(|&h| (h - 0.5).abs() < 1e-15));
    }

    #[test]
    fn huge_lambda_kills_leverage() {
        let s = generate(&SyntheticSpec::figure1(30, 10, 4)).unwrap();
        let m = ridge(1e9);
        let full = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        assert!(alo_leverages(&m, &s.data, &full).unwrap().amax() < 1e-8);
    }

    #[test]
    fn alo_is_exact_for_ridge() {
        for seed in 0..3 {
            let s = generate(&SyntheticSpec::figure1(50, 30, 10 + seed)).unwrap();
            let m = ridge(0.5);
            let cfg = SolverConfig::default();
            let full = fit(&m, &s.data, None, &cfg).unwrap();
            let lo = loocv_risk_from_fit(&m, &s.data, &full, &cfg).unwrap();
            let alo = alo_risk(&m, &s.data, &full).unwrap();
            assert!((alo.risk - lo.risk).abs() <= 1e-10 * (1.0 + lo.risk));
            assert_relative_eq!(alo.residuals, lo.residuals, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_leverage_means_training_risk() {
        let s = generate(&SyntheticSpec::figure1(20, 5, 1)).unwrap();
        let m = PenalizedModel::new(ScalarFamily::pseudo_huber(1.0).unwrap(), ScalarFamily::ridge(), 1.0).unwrap();
        let full = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let alo = alo_risk_with_leverages(&m, &s.data, &full, DVector::zeros(20)).unwrap();
        assert_relative_eq!(alo.risk, m.mean_loss(&full.residuals), epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_leverage_and_flat_loss() {
        let s = generate(&SyntheticSpec::figure1(20, 5, 1)).unwrap();
        let m = ridge(1.0);
        let full = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let mut lev = DVector::zeros(20);
        lev[3] = 1.0;
        assert!(matches!(
            alo_risk_with_leverages(&m, &s.data, &full, lev),
            Err(Error::LeverageOutOfRange { index: 3, .. })
        ));
        // pseudo-Huber with tiny mu has vanishing curvature at large residuals
        let flat = PenalizedModel::new(ScalarFamily::pseudo_huber(1e-6).unwrap(), ScalarFamily::ridge(), 1e3).unwrap();
        let f = fit(&flat, &s.data, None, &SolverConfig::default()).unwrap();
        assert!(matches!(
            alo_risk_with_leverages(&flat, &s.data, &f, DVector::zeros(20)),
            Err(Error::ZeroCurvature { .. })
        ));
    }
}
