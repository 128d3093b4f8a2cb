//! Linear and quantile regression with the inference used to compare the
//! nested delay models.

mod inference;
mod ols;
mod quantile;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use inference::{
    between_quantile_test, bootstrap_draws, bootstrap_se, hall_sheather_bandwidth, nested_wald_from_draws,
    nested_wald_test, ols_nested_wald_test, sparsity, BootstrapDraws, TestResult, DEFAULT_BOOTSTRAP_REPS,
    MIN_BOOTSTRAP_REPS,
};
pub use ols::{hc_covariance, ols_fit, HcVariant};
pub use quantile::{check_loss, lasso_objective, qr_fit, qr_fit_with, qr_lasso_fit, qr_objective, SolverOptions};

/// The quantile grid used throughout the analysis.
pub const DEFAULT_TAUS: [f64; 4] = [0.25, 0.5, 0.75, 0.9];

#[derive(Debug, thiserror::Error)]
pub enum RegressError {
    #[error("design is rank deficient; collinear columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },
    #[error("need more observations than columns (n = {n}, k = {k})")]
    TooFewObservations { n: usize, k: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quantile must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("penalty must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("interior point did not converge; final duality gap {gap:e}")]
    NoConvergence { gap: f64 },
    #[error("zero residual loss; the likelihood surrogate is unbounded")]
    ZeroLoss,
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("bandwidth {h} around tau {tau} leaves (0, 1)")]
    Bandwidth { tau: f64, h: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, RegressError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "QR")]
    Qr,
    #[serde(rename = "QR-LASSO")]
    QrLasso,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: Method,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Gaussian log-likelihood for OLS, asymmetric-Laplace surrogate for QR.
    pub loglik: f64,
    pub aic: f64,
    pub r2: Option<f64>,
    pub adj_r2: Option<f64>,
    /// Residual sum of squares (OLS) or check loss (QR, without penalty).
    pub loss: f64,
    pub n: usize,
    pub k: usize,
}

impl FitResult {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Two-sided p-values: Student t with n - k df for OLS, normal otherwise.
    pub fn p_values(&self, se: &DVector<f64>) -> DVector<f64> {
        use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
        let df = (self.n - self.k) as f64;
        let t = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid df");
        let z = Normal::standard();
        DVector::from_iterator(
            self.k,
            self.coefficients.iter().zip(se.iter()).map(|(&b, &s)| {
                if s <= 0.0 || !s.is_finite() {
                    return f64::NAN;
                }
                let stat = (b / s).abs();
                let tail = match self.method {
                    Method::Ols => t.sf(stat),
                    _ => z.sf(stat),
                };
                (2.0 * tail).min(1.0)
            }),
        )
    }
}

/// The fit's AIC; a perfect fit has no finite value.
pub fn aic(fit: &FitResult) -> Result<f64> {
    if fit.aic.is_finite() {
        Ok(fit.aic)
    } else {
        Err(RegressError::ZeroLoss)
    }
}

pub(crate) fn check_dims(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(RegressError::Dimension(format!("X has {} rows, y has {}", x.nrows(), y.len())));
    }
    if x.nrows() <= x.ncols() {
        return Err(RegressError::TooFewObservations { n: x.nrows(), k: x.ncols() });
    }
    Ok(())
}

/// Columns that are (numerically) linear combinations of earlier columns,
/// found by modified Gram-Schmidt.
pub fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        // second pass for stability
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0.max(1.0) {
            dependent.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

pub(crate) fn require_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let columns = collinear_columns(x);
    if columns.is_empty() {
        Ok(())
    } else {
        Err(RegressError::RankDeficient { columns })
    }
}

/// (X'X)^-1 through a Cholesky factorization.
pub(crate) fn xtx_inverse(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xtx = x.tr_mul(x);
    xtx.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| RegressError::RankDeficient { columns: collinear_columns(x) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_collinear_columns() {
        let x = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, 1.0, 2.0,
            1.0, 1.0, 0.0, 2.0,
            1.0, 0.0, 1.0, 2.0,
            1.0, 1.0, 0.0, 2.0,
        ]);
        assert_eq!(collinear_columns(&x), vec![2, 3]);
        let ok = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(collinear_columns(&ok).is_empty());
    }

    #[test]
    fn zero_column_is_collinear() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(collinear_columns(&x), vec![1]);
    }
}
