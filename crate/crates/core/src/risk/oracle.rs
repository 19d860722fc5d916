//! True out-of-sample error, computable only when `beta*` and the noise law
//! are known.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::datagen::{stream, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{FitResult, PenalizedModel};

/// `E[(y_new - x_new' beta_hat)^2 | data] = sd^2 + |beta_hat - beta*|^2 / n`
/// for `x_new ~ N(0, I/n)`.
///
/// This is the mean squared prediction error. Under the squared loss
/// `l(r) = r^2 / 2` the out-of-sample loss is half of it.
pub fn oracle_risk_gaussian(fit: &FitResult, beta_star: &DVector<f64>, noise_sd: f64, n: usize) -> Result<f64> {
    if beta_star.len() != fit.beta_hat.len() {
        return Err(Error::DimensionMismatch("beta* and beta_hat differ in length".into()));
    }
    if n == 0 || !(noise_sd >= 0.0) {
        return Err(Error::InvalidParameter("need n >= 1 and noise sd >= 0".into()));
    }
    Ok(noise_sd * noise_sd + (&fit.beta_hat - beta_star).norm_squared() / n as f64)
}

/// Monte Carlo estimate of `E[l(y_new - x_new' beta_hat) | data]` over `m`
/// fresh draws from `spec`'s law, with its standard error.
///
/// Draws are streamed row by row from the same streams as
/// [`crate::datagen::generate_test`], so no `m x p` matrix is held.
pub fn oracle_risk_mc(
    fit: &FitResult,
    model: &PenalizedModel,
    spec: &SyntheticSpec,
    beta_star: &DVector<f64>,
    m: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    spec.validate()?;
    if m < 100 {
        return Err(Error::InvalidParameter(format!("need m >= 100 Monte Carlo draws, got {m}")));
    }
    let p = spec.p;
    if beta_star.len() != p || fit.beta_hat.len() != p {
        return Err(Error::DimensionMismatch("beta vectors must have length p".into()));
    }
    let diff = beta_star - &fit.beta_hat;
    let scale = 1.0 / (spec.n as f64).sqrt();
    let sd = spec.noise_sd();
    let mut design = stream(seed, "test_design", 0);
    let mut noise = stream(seed, "test_noise", 0);
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..m {
        let mut signal = 0.0;
        for j in 0..p {
            let z: f64 = StandardNormal.sample(&mut design);
            signal += scale * z * diff[j];
        }
        let w: f64 = StandardNormal.sample(&mut noise);
        let v = model.loss().value(signal + sd * w);
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (m - 1) as f64;
    Ok((mean, (var / m as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, generate_test};
    use crate::families::ScalarFamily;
    use crate::solver::{fit, SolverConfig};

    fn dummy_fit(beta: DVector<f64>) -> FitResult {
        FitResult { beta_hat: beta, residuals: DVector::zeros(2), grad_inf_norm: 0.0, iterations: 0, objective: 0.0 }
    }

    #[test]
    fn gaussian_formula_examples() {
        let b = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(oracle_risk_gaussian(&dummy_fit(b.clone()), &b, 1.5, 10).unwrap(), 2.25);
        // |beta_hat - beta*|^2 = n
        let n = 4;
        let f = dummy_fit(DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(oracle_risk_gaussian(&f, &DVector::zeros(2), 1.0, n).unwrap(), 2.0);
    }

    #[test]
    fn mc_agrees_with_formula() {
        let spec = SyntheticSpec::figure1(60, 20, 3);
        let s = generate(&spec).unwrap();
        let m = PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), 1.0).unwrap();
        let f = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let (est, se) = oracle_risk_mc(&f, &m, &spec, &s.beta_star, 1_000_000, 11).unwrap();
        let exact = oracle_risk_gaussian(&f, &s.beta_star, 1.0, 60).unwrap();
        // squared loss is half the squared prediction error
        assert!((2.0 * est - exact).abs() <= 3.0 * 2.0 * se, "{} vs {exact} (se {se})", 2.0 * est);
        assert!(est >= 0.0);
    }

    #[test]
    fn mc_streams_match_generate_test() {
        let spec = SyntheticSpec::figure1(30, 5, 0);
        let s = generate(&spec).unwrap();
        let m = PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), 1.0).unwrap();
        let f = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let (x, y) = generate_test(&spec, &s.beta_star, 200, 5).unwrap();
        let direct = (y - x * &f.beta_hat).iter().map(|r| 0.5 * r * r).sum::<f64>() / 200.0;
        let (est, _) = oracle_risk_mc(&f, &m, &spec, &s.beta_star, 200, 5).unwrap();
        assert!((est - direct).abs() < 1e-12);
    }

    #[test]
    fn standard_error_scales_with_root_m() {
        let spec = SyntheticSpec::figure1(40, 10, 1);
        let s = generate(&spec).unwrap();
        let m = PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), 1.0).unwrap();
        let f = fit(&m, &s.data, None, &SolverConfig::default()).unwrap();
        let (_, se1) = oracle_risk_mc(&f, &m, &spec, &s.beta_star, 50_000, 2).unwrap();
        let (_, se2) = oracle_risk_mc(&f, &m, &spec, &s.beta_star, 100_000, 2).unwrap();
        let ratio = se2 / se1;
        assert!((ratio * 2f64.sqrt() - 1.0).abs() < 0.2, "{ratio}");
        assert!(oracle_risk_mc(&f, &m, &spec, &s.beta_star, 99, 2).is_err());
    }
}
