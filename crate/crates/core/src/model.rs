//! Datasets, penalized models and fit results.
//!
//! The objective is kept in summed form,
//!
//! ```text
//! f(beta) = sum_i l(y_i - x_i' beta) + lambda * sum_j R(beta_j),
//! ```
//!
//! which is the averaged form `n <l(y - X beta)> + lambda p <R(beta)>`
//! written out; both have the same minimizer for the same `lambda`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::families::ScalarFamily;

/// Design matrix and response. `xt` caches `X'` so that rows of `X` are
/// contiguous columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    xt: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        Self::with_min_rows(x, y, 2)
    }

    fn with_min_rows(x: DMatrix<f64>, y: DVector<f64>, min_rows: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("X has {} rows but y has {} entries", x.nrows(), y.len())));
        }
        if x.nrows() < min_rows {
            return Err(Error::InvalidParameter(format!("need n >= {min_rows} observations, got {}", x.nrows())));
        }
        if x.ncols() < 1 {
            return Err(Error::InvalidParameter("need p >= 1 predictors".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        let xt = x.transpose();
        Ok(Self { x, xt, y })
    }

    /// Build from row-major data.
    pub fn from_rows(rows: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("rows of X have unequal length".into()));
        }
        let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(x, DVector::from_column_slice(y))
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `delta = n / p`.
    pub fn aspect_ratio(&self) -> f64 {
        self.n() as f64 / self.p() as f64
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// `X'`, whose column `i` is the observation `x_i`.
    pub fn xt(&self) -> &DMatrix<f64> {
        &self.xt
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn row(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.xt.column(i)
    }

    /// Dataset restricted to the given observations, in the given order.
    /// Training subsets may consist of a single row.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidParameter(format!("row {bad} out of range for n = {}", self.n())));
        }
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        Self::with_min_rows(x, y, 1)
    }

    /// Dataset with observation `i` deleted.
    pub fn without_row(&self, i: usize) -> Result<Self> {
        if i >= self.n() {
            return Err(Error::InvalidParameter(format!("row {i} out of range for n = {}", self.n())));
        }
        let keep: Vec<usize> = (0..self.n()).filter(|&j| j != i).collect();
        self.select(&keep)
    }

    /// `y - X beta`.
    pub fn residuals(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut r = self.y.clone();
        r.gemv(-1.0, &self.x, beta, 1.0);
        r
    }

    /// Reads the CSV layout `y,x1,...,xp` with a header line.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("y") {
            return Err(Error::Parse("first CSV column must be `y`".into()));
        }
        let p = headers.len().saturating_sub(1);
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != p + 1 {
                return Err(Error::Parse(format!("record {} has {} fields, expected {}", line + 1, rec.len(), p + 1)));
            }
            let mut vals = rec.iter().map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse(format!("record {}: `{s}` is not a number", line + 1)))
            });
            ys.push(vals.next().expect("non-empty record")?);
            for v in vals {
                xs.push(v?);
            }
        }
        let n = ys.len();
        let x = DMatrix::from_row_slice(n, p, &xs);
        Self::new(x, DVector::from_vec(ys))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("y".to_string()).chain((1..=self.p()).map(|j| format!("x{j}"))).collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.n() {
            write!(out, "{:e}", self.y[i])?;
            for j in 0..self.p() {
                write!(out, ",{:e}", self.x[(i, j)])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Loss, regularizer and penalty level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenalizedModel {
    loss: ScalarFamily,
    regularizer: ScalarFamily,
    lambda: f64,
}

impl PenalizedModel {
    pub fn new(loss: ScalarFamily, regularizer: ScalarFamily, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        if loss.curvature_lower() == 0.0 && regularizer.curvature_lower() <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "loss {loss} has no curvature lower bound, so the regularizer must be strongly convex (got {regularizer})"
            )));
        }
        Ok(Self { loss, regularizer, lambda })
    }

    pub fn loss(&self) -> &ScalarFamily {
        &self.loss
    }

    pub fn regularizer(&self) -> &ScalarFamily {
        &self.regularizer
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.loss, self.regularizer, lambda)
    }

    fn check(&self, data: &Dataset, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != data.p() {
            return Err(Error::DimensionMismatch(format!("beta has {} entries, data has p = {}", beta.len(), data.p())));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("beta".into()));
        }
        Ok(())
    }

    pub fn penalty(&self, beta: &DVector<f64>) -> f64 {
        self.lambda * beta.iter().map(|&b| self.regularizer.value(b)).sum::<f64>()
    }

    /// Objective from precomputed residuals.
    pub(crate) fn objective_at(&self, residuals: &DVector<f64>, beta: &DVector<f64>) -> f64 {
        residuals.iter().map(|&r| self.loss.value(r)).sum::<f64>() + self.penalty(beta)
    }

    /// `-X' l'(r) + lambda R'(beta)` from precomputed residuals.
    pub(crate) fn gradient_at(&self, data: &Dataset, residuals: &DVector<f64>, beta: &DVector<f64>) -> DVector<f64> {
        let dl = residuals.map(|r| self.loss.d1(r));
        let mut g = beta.map(|b| self.lambda * self.regularizer.d1(b));
        g.gemv(-1.0, data.xt(), &dl, 1.0);
        g
    }

    /// `sum_i l(y_i - x_i' beta) + lambda sum_j R(beta_j)`.
    pub fn objective(&self, data: &Dataset, beta: &DVector<f64>) -> Result<f64> {
        self.check(data, beta)?;
        let v = self.objective_at(&data.residuals(beta), beta);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("objective".into()))
        }
    }

    pub fn gradient(&self, data: &Dataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(data, beta)?;
        let g = self.gradient_at(data, &data.residuals(beta), beta);
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::NonFinite("gradient".into()))
        }
    }

    /// `X' diag(l''(r)) X + lambda diag(R''(beta))`.
    pub fn hessian(&self, data: &Dataset, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(data, beta)?;
        Ok(self.hessian_at(data, &data.residuals(beta), beta))
    }

    pub(crate) fn hessian_at(&self, data: &Dataset, residuals: &DVector<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
        let w = residuals.map(|r| self.loss.d2(r));
        let mut h = weighted_gram(data, &w);
        for j in 0..data.p() {
            h[(j, j)] += self.lambda * self.regularizer.d2(beta[j]);
        }
        h
    }

    /// Mean loss of residuals, `(1/n) sum_i l(r_i)`.
    pub fn mean_loss(&self, residuals: &DVector<f64>) -> f64 {
        residuals.iter().map(|&r| self.loss.value(r)).sum::<f64>() / residuals.len() as f64
    }
}

/// `X' diag(w) X`, symmetric by construction.
pub(crate) fn weighted_gram(data: &Dataset, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = data.xt().clone();
    for (i, mut col) in scaled.column_iter_mut().enumerate() {
        col *= w[i];
    }
    let mut h = &scaled * data.x();
    // symmetrize against rounding in the product
    let p = h.nrows();
    for a in 0..p {
        for b in (a + 1)..p {
            let v = 0.5 * (h[(a, b)] + h[(b, a)]);
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

/// Minimizer returned by the solver.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    /// `y - X beta_hat` for the data the fit was computed on.
    pub residuals: DVector<f64>,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub objective: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ridge_model(lambda: f64) -> PenalizedModel {
        PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), lambda).unwrap()
    }

    #[test]
    fn objective_examples() {
        let d = Dataset::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(ridge_model(1.0).objective(&d, &DVector::zeros(2)).unwrap(), 1.0);

        let d1 = Dataset::from_rows(&[vec![1.0], vec![1.0]], &[1.0, 1.0]).unwrap();
        let one = DVector::from_element(1, 1.0);
        assert_eq!(ridge_model(2.0).objective(&d1, &one).unwrap(), 1.0);

        let d2 = Dataset::from_rows(&[vec![1.0], vec![0.0]], &[3.0, 0.0]).unwrap();
        let ph = PenalizedModel::new(ScalarFamily::pseudo_huber(1.0).unwrap(), ScalarFamily::ridge(), 1.0).unwrap();
        assert_relative_eq!(ph.objective(&d2, &DVector::zeros(1)).unwrap(), 10f64.sqrt() - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn gradient_at_zero_is_minus_xty() {
        let d = Dataset::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]], &[1.0, 2.0, -1.0]).unwrap();
        let g = ridge_model(0.7).gradient(&d, &DVector::zeros(2)).unwrap();
        let expect = -(d.x().transpose() * d.y());
        assert_relative_eq!(g, expect, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Dataset::from_rows(&[vec![1.0], vec![2.0]], &[1.0, 2.0]).unwrap();
        assert!(ridge_model(1.0).objective(&d, &DVector::zeros(2)).is_err());
        assert!(ridge_model(1.0).objective(&d, &DVector::from_element(1, f64::NAN)).is_err());
        assert!(Dataset::from_rows(&[vec![1.0]], &[1.0]).is_err());
        assert!(Dataset::from_rows(&[vec![1.0], vec![f64::INFINITY]], &[1.0, 1.0]).is_err());
        assert!(Dataset::new(DMatrix::zeros(3, 2), DVector::zeros(2)).is_err());
        assert!(PenalizedModel::new(ScalarFamily::squared(), ScalarFamily::ridge(), 0.0).is_err());
        let ph = ScalarFamily::pseudo_huber(1.0).unwrap();
        let sa = ScalarFamily::smoothed_absolute(0.1).unwrap();
        assert!(PenalizedModel::new(ph, sa, 1.0).is_err());
        assert!(PenalizedModel::new(ph, ScalarFamily::ridge(), 1.0).is_ok());
    }

    #[test]
    fn hessian_is_gram_plus_lambda_for_ridge() {
        let d = Dataset::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]], &[1.0, 2.0, -1.0]).unwrap();
        let h = ridge_model(2.5).hessian(&d, &DVector::from_vec(vec![0.3, -1.0])).unwrap();
        let expect = d.x().transpose() * d.x() + DMatrix::identity(2, 2) * 2.5;
        assert_relative_eq!(h, expect, epsilon = 1e-14);
        assert_eq!(h.clone() - h.transpose(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let d = Dataset::from_rows(&[vec![1.0, 2.5], vec![-1.0, 0.125]], &[0.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("y,x1,x2\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), d);

        assert!(Dataset::read_csv("x1,y\n1,2\n3,4\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("y,x1\n1,nan\n3,4\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("y,x1\n1,abc\n3,4\n".as_bytes()).is_err());
    }
}
