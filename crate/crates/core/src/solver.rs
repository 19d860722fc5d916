//! Damped Newton minimization of the penalized objective, for the full
//! data, with one observation deleted, and on arbitrary row subsets.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{Dataset, FitResult, PenalizedModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Convergence threshold on `|grad|_inf` of the summed objective.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Backtracking step shrink factor.
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    /// Largest `p` accepted by the dense factorization.
    pub max_dim: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-10, max_iter: 200, shrink: 0.5, sufficient_decrease: 1e-4, max_dim: 4000 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || self.max_iter < 1 || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidParameter(format!("invalid solver config {self:?}")));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 0.5) {
            return Err(Error::InvalidParameter("sufficient-decrease constant must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// `X' diag(l''(r)) X + lambda diag(R''(beta))` at `beta`.
pub fn hessian(model: &PenalizedModel, data: &Dataset, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.hessian(data, beta)
}

fn factor(h: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(h).ok_or(Error::SingularHessian)
}

/// Backtracking line search. Accepts a step whose objective does not exceed
/// the Armijo bound by more than rounding in the objective itself.
fn line_search(f0: f64, slope: f64, cfg: &SolverConfig, mut eval: impl FnMut(f64) -> f64) -> Option<(f64, f64)> {
    let slack = 8.0 * f64::EPSILON * f0.abs().max(1.0);
    let mut t = 1.0;
    for _ in 0..60 {
        let ft = eval(t);
        if ft.is_finite() && ft <= f0 + cfg.sufficient_decrease * t * slope + slack {
            return Some((t, ft));
        }
        t *= cfg.shrink;
    }
    None
}

/// Minimize the penalized objective on `data`, starting from `init`
/// (zero when absent).
pub fn fit(model: &PenalizedModel, data: &Dataset, init: Option<&DVector<f64>>, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    if data.p() > cfg.max_dim {
        return Err(Error::InvalidParameter(format!("p = {} exceeds the dense solver cap {}", data.p(), cfg.max_dim)));
    }
    let mut beta = match init {
        Some(b) if b.len() != data.p() => {
            return Err(Error::DimensionMismatch(format!("init has {} entries, p = {}", b.len(), data.p())))
        }
        Some(b) => b.clone(),
        None => DVector::zeros(data.p()),
    };
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial beta".into()));
    }
    let mut r = data.residuals(&beta);
    let mut f = model.objective_at(&r, &beta);
    let mut iterations = 0;
    loop {
        let g = model.gradient_at(data, &r, &beta);
        let gnorm = g.amax();
        if !gnorm.is_finite() || !f.is_finite() {
            return Err(Error::NonFinite("objective or gradient during Newton iterations".into()));
        }
        if gnorm <= cfg.grad_tol {
            return Ok(FitResult { beta_hat: beta, residuals: r, grad_inf_norm: gnorm, iterations, objective: f });
        }
        if iterations >= cfg.max_iter {
            return Err(max_iter_error(beta, r, gnorm, iterations, f));
        }
        let chol = factor(model.hessian_at(data, &r, &beta))?;
        let step = -chol.solve(&g);
        let slope = g.dot(&step);
        let accepted = line_search(f, slope, cfg, |t| {
            let b = &beta + &step * t;
            model.objective_at(&data.residuals(&b), &b)
        });
        let Some((t, ft)) = accepted else {
            // no representable decrease left along the Newton direction
            return Err(max_iter_error(beta, r, gnorm, iterations, f));
        };
        beta.axpy(t, &step, 1.0);
        r = data.residuals(&beta);
        f = ft;
        iterations += 1;
    }
}

fn max_iter_error(beta: DVector<f64>, residuals: DVector<f64>, gnorm: f64, iterations: usize, objective: f64) -> Error {
    Error::MaxIterExceeded {
        iterations,
        grad_inf_norm: gnorm,
        best: Box::new(FitResult { beta_hat: beta, residuals, grad_inf_norm: gnorm, iterations, objective }),
    }
}

/// Shared state for refitting with one observation deleted.
///
/// All refits start at the full-data minimizer. The first direction uses
/// the full-data Hessian downdated by the deleted row,
/// `H - l''(r_i) x_i x_i'`, applied through Sherman-Morrison on a single
/// Cholesky factor; for quadratic problems that step is already exact.
/// While it keeps halving the gradient the same frozen matrix is reused;
/// otherwise the refit switches to exact Newton steps on the reduced data.
pub struct LooSolver<'a> {
    model: &'a PenalizedModel,
    data: &'a Dataset,
    warm: &'a FitResult,
    chol: Cholesky<f64, Dyn>,
    curvature: DVector<f64>,
    cfg: SolverConfig,
}

/// Result of a single leave-one-out refit.
#[derive(Clone, Debug)]
pub struct LooFit {
    pub index: usize,
    /// Fit on the data with row `index` removed; `residuals` has `n - 1` entries.
    pub fit: FitResult,
    /// Held-out residual `y_i - x_i' beta_tilde_i`.
    pub loo_residual: f64,
}

impl<'a> LooSolver<'a> {
    pub fn new(model: &'a PenalizedModel, data: &'a Dataset, warm: &'a FitResult, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        if data.n() < 2 {
            return Err(Error::InvalidParameter("leave-one-out needs n >= 2".into()));
        }
        if warm.beta_hat.len() != data.p() {
            return Err(Error::DimensionMismatch("warm start does not match p".into()));
        }
        let r = data.residuals(&warm.beta_hat);
        let chol = factor(model.hessian_at(data, &r, &warm.beta_hat))?;
        let curvature = r.map(|v| model.loss().d2(v));
        Ok(Self { model, data, warm, chol, curvature, cfg: *cfg })
    }

    /// Cholesky factor of the full-data Hessian at the warm start.
    pub fn hessian_factor(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    fn reduced_state(&self, i: usize, beta: &DVector<f64>) -> (DVector<f64>, f64, DVector<f64>) {
        let r = self.data.residuals(beta);
        let ri = r[i];
        let loss = self.model.loss();
        let f = self.model.objective_at(&r, beta) - loss.value(ri);
        let mut g = self.model.gradient_at(self.data, &r, beta);
        g.axpy(loss.d1(ri), &self.data.row(i), 1.0);
        (r, f, g)
    }

    pub fn fit(&self, i: usize) -> Result<LooFit> {
        let n = self.data.n();
        if i >= n {
            return Err(Error::InvalidParameter(format!("index {i} out of range for n = {n}")));
        }
        let xi = self.data.row(i).into_owned();
        let u = self.chol.solve(&xi);
        let ci = self.curvature[i];
        let denom = 1.0 - ci * xi.dot(&u);

        let mut beta = self.warm.beta_hat.clone();
        let (mut r, mut f, mut g) = self.reduced_state(i, &beta);
        let mut gnorm = g.amax();
        let mut iterations = 0;
        let mut frozen = denom > 1e-8;
        while gnorm > self.cfg.grad_tol {
            if !gnorm.is_finite() {
                return Err(Error::NonFinite("leave-one-out gradient".into()));
            }
            if iterations >= self.cfg.max_iter {
                let reduced_r = drop_entry(&r, i);
                return Err(max_iter_error(beta, reduced_r, gnorm, iterations, f));
            }
            let step = if frozen {
                let v = self.chol.solve(&g);
                let corr = ci * xi.dot(&v) / denom;
                -(v + &u * corr)
            } else {
                let reduced = self.data.without_row(i)?;
                let rr = drop_entry(&r, i);
                -factor(self.model.hessian_at(&reduced, &rr, &beta))?.solve(&g)
            };
            let slope = g.dot(&step);
            let accepted = if slope < 0.0 {
                line_search(f, slope, &self.cfg, |t| {
                    let b = &beta + &step * t;
                    self.reduced_state_value(i, &b)
                })
            } else {
                None
            };
            let Some((t, _)) = accepted else {
                if frozen {
                    frozen = false;
                    continue;
                }
                let reduced_r = drop_entry(&r, i);
                return Err(max_iter_error(beta, reduced_r, gnorm, iterations, f));
            };
            beta.axpy(t, &step, 1.0);
            let prev = gnorm;
            (r, f, g) = self.reduced_state(i, &beta);
            gnorm = g.amax();
            iterations += 1;
            if frozen && gnorm > 0.5 * prev {
                frozen = false;
            }
        }
        let loo_residual = r[i];
        let residuals = drop_entry(&r, i);
        Ok(LooFit {
            index: i,
            fit: FitResult { beta_hat: beta, residuals, grad_inf_norm: gnorm, iterations, objective: f },
            loo_residual,
        })
    }

    fn reduced_state_value(&self, i: usize, beta: &DVector<f64>) -> f64 {
        let r = self.data.residuals(beta);
        self.model.objective_at(&r, beta) - self.model.loss().value(r[i])
    }
}

fn drop_entry(v: &DVector<f64>, i: usize) -> DVector<f64> {
    DVector::from_iterator(v.len() - 1, v.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &x)| x))
}

/// Minimizer with observation `i` deleted, warm-started at `warm.beta_hat`.
///
/// Factorizes the full Hessian on every call; use [`LooSolver`] directly
/// when refitting many indices.
pub fn fit_loo(model: &PenalizedModel, data: &Dataset, i: usize, warm: &FitResult, cfg: &SolverConfig) -> Result<FitResult> {
    Ok(LooSolver::new(model, data, warm, cfg)?.fit(i)?.fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::ScalarFamily;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_data(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n as f64).sqrt();
        let x = DMatrix::from_fn(n, p, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); scale * z });
        let beta = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let noise = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let y = &x * beta + noise;
        Dataset::new(x, y).unwrap()
    }

    fn ridge(lambda: f64) -> PenalizedModel {
        PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), lambda).unwrap()
    }

    fn huber_ridge(lambda: f64) -> PenalizedModel {
        PenalizedModel::new(ScalarFamily::pseudo_huber(1.0).unwrap(), ScalarFamily::ridge(), lambda).unwrap()
    }

    #[test]
    fn ridge_matches_closed_form() {
        for seed in 0..5 {
            let d = random_data(20, 10, seed);
            let lambda = 0.3 + seed as f64;
            let fit = fit(&ridge(lambda), &d, None, &SolverConfig::default()).unwrap();
            let a = d.x().transpose() * d.x() + DMatrix::identity(10, 10) * lambda;
            let exact = a.lu().solve(&(d.x().transpose() * d.y())).unwrap();
            assert_relative_eq!(fit.beta_hat, exact, epsilon = 1e-8);
            assert!(fit.grad_inf_norm <= 1e-10);
            assert_eq!(fit.residuals, d.residuals(&fit.beta_hat));
            // gradient vanishes at the closed-form solution
            assert!(ridge(lambda).gradient(&d, &exact).unwrap().amax() < 1e-12);
        }
    }

    #[test]
    fn interpolates_noiseless_data() {
        let mut d = random_data(30, 5, 7);
        let beta0 = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0]);
        d = Dataset::new(d.x().clone(), d.x() * &beta0).unwrap();
        let fit = fit(&ridge(1e-10), &d, None, &SolverConfig::default()).unwrap();
        assert_relative_eq!(fit.beta_hat, beta0, epsilon = 1e-5);
    }

    #[test]
    fn exact_init_needs_no_iterations() {
        let d = random_data(40, 10, 3);
        let m = huber_ridge(0.5);
        let cfg = SolverConfig::default();
        let first = fit(&m, &d, None, &cfg).unwrap();
        let again = fit(&m, &d, Some(&first.beta_hat), &cfg).unwrap();
        assert!(again.iterations <= 1);
    }

    #[test]
    fn newton_objective_is_monotone() {
        let d = random_data(60, 30, 11);
        let m = PenalizedModel::new(ScalarFamily::logistic_residual(5.0).unwrap(), ScalarFamily::smoothed_absolute(0.1).unwrap(), 0.2).unwrap();
        let cfg = SolverConfig::default();
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let c = SolverConfig { max_iter: k, ..cfg };
            let f = match fit(&m, &d, None, &c) {
                Ok(r) => r.objective,
                Err(Error::MaxIterExceeded { best, .. }) => best.objective,
                Err(e) => panic!("{e}"),
            };
            assert!(f <= prev + 1e-12 * prev.abs().max(1.0));
            prev = f;
        }
    }

    #[test]
    fn max_iter_carries_best_iterate() {
        let d = random_data(40, 10, 5);
        let err = fit(&huber_ridge(1.0), &d, None, &SolverConfig { max_iter: 1, grad_tol: 1e-300, ..Default::default() }).unwrap_err();
        match err {
            Error::MaxIterExceeded { best, iterations, .. } => {
                assert_eq!(iterations, best.iterations);
                assert_eq!(best.beta_hat.len(), 10);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn loo_matches_scalar_closed_form() {
        let d = Dataset::from_rows(&[vec![1.0], vec![2.0], vec![-0.5]], &[1.0, 0.5, 2.0]).unwrap();
        let lambda = 0.4;
        let m = ridge(lambda);
        let cfg = SolverConfig::default();
        let full = fit(&m, &d, None, &cfg).unwrap();
        for i in 0..3 {
            let (num, den) = (0..3).filter(|&j| j != i).fold((0.0, lambda), |(a, b), j| {
                let xj = d.x()[(j, 0)];
                (a + xj * d.y()[j], b + xj * xj)
            });
            let loo = fit_loo(&m, &d, i, &full, &cfg).unwrap();
            assert_relative_eq!(loo.beta_hat[0], num / den, epsilon = 1e-12);
            assert_eq!(loo.residuals.len(), 2);
        }
    }

    #[test]
    fn loo_agrees_with_cold_refit() {
        let d = random_data(80, 30, 9);
        let m = huber_ridge(0.7);
        let cfg = SolverConfig::default();
        let full = fit(&m, &d, None, &cfg).unwrap();
        let solver = LooSolver::new(&m, &d, &full, &cfg).unwrap();
        for i in [0, 17, 79] {
            let warm = solver.fit(i).unwrap();
            let reduced = d.without_row(i).unwrap();
            let cold = fit(&m, &reduced, None, &cfg).unwrap();
            assert_relative_eq!(warm.fit.beta_hat, cold.beta_hat, epsilon = 1e-9);
            assert!(warm.fit.objective <= m.objective(&reduced, &full.beta_hat).unwrap() + 1e-12);
            let held = d.y()[i] - d.row(i).dot(&warm.fit.beta_hat);
            assert_relative_eq!(warm.loo_residual, held, epsilon = 1e-12);
        }
    }

    #[test]
    fn loo_with_duplicate_row() {
        let mut rows: Vec<Vec<f64>> = (0..6).map(|k| vec![1.0 + k as f64 * 0.1, (k as f64).sin()]).collect();
        rows.push(rows[2].clone());
        let y: Vec<f64> = (0..7).map(|k| (k as f64 * 0.7).cos()).collect();
        let d = Dataset::from_rows(&rows, &y).unwrap();
        let m = huber_ridge(0.3);
        let cfg = SolverConfig::default();
        let full = fit(&m, &d, None, &cfg).unwrap();
        let loo = fit_loo(&m, &d, 6, &full, &cfg).unwrap();
        let reduced = d.without_row(6).unwrap();
        let direct = fit(&m, &reduced, None, &cfg).unwrap();
        assert_relative_eq!(loo.beta_hat, direct.beta_hat, epsilon = 1e-9);
        assert!(loo.objective <= m.objective(&reduced, &full.beta_hat).unwrap());
    }

    #[test]
    fn hessian_min_eigenvalue_bound() {
        for seed in 0..3 {
            let d = random_data(50, 20, 100 + seed);
            let beta = DVector::from_fn(20, |j, _| 0.05 * j as f64);
            // working radius just covers the residuals
            let radius = d.residuals(&beta).amax() + 0.1;
            let m = PenalizedModel::new(ScalarFamily::logistic_residual(radius).unwrap(), ScalarFamily::ridge(), 1e-6).unwrap();
            let h = hessian(&m, &d, &beta).unwrap();
            let kappa = m.loss().curvature_lower();
            let gram_min = (d.x().transpose() * d.x()).symmetric_eigenvalues().min();
            let h_min = h.symmetric_eigenvalues().min();
            assert!(h_min >= kappa * gram_min - 1e-12);
        }
    }
}
