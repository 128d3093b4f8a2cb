use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_dims, require_full_rank, xtx_inverse, FitResult, Method, RegressError, Result};

/// Heteroskedasticity-consistent covariance variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HcVariant {
    Hc0,
    Hc1,
    Hc2,
    #[default]
    Hc3,
}

impl FromStr for HcVariant {
    type Err = RegressError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HC0" => Ok(HcVariant::Hc0),
            "HC1" => Ok(HcVariant::Hc1),
            "HC2" => Ok(HcVariant::Hc2),
            "HC3" => Ok(HcVariant::Hc3),
            _ => Err(RegressError::InvalidArgument(format!("unknown HC variant {s:?}"))),
        }
    }
}

/// Least squares with an HC covariance of the chosen variant.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>, variant: HcVariant) -> Result<FitResult> {
    check_dims(x, y)?;
    require_full_rank(x)?;
    let (n, k) = x.shape();

    let qr = x.clone().qr();
    let qty = qr.q().tr_mul(y);
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| RegressError::RankDeficient { columns: super::collinear_columns(x) })?;
    let residuals = y - x * &beta;
    let rss = residuals.norm_squared();

    let nf = n as f64;
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let (r2, adj_r2) = if tss > 0.0 {
        let r2 = 1.0 - rss / tss;
        (Some(r2), Some(1.0 - (1.0 - r2) * (nf - 1.0) / (nf - k as f64)))
    } else {
        (None, None)
    };
    let loglik = -0.5 * nf * ((2.0 * std::f64::consts::PI).ln() + (rss / nf).ln() + 1.0);

    let mut fit = FitResult {
        method: Method::Ols,
        tau: None,
        lambda: None,
        coefficients: beta,
        residuals,
        covariance: DMatrix::zeros(k, k),
        loglik,
        aic: -2.0 * loglik + 2.0 * k as f64,
        r2,
        adj_r2,
        loss: rss,
        n,
        k,
    };
    fit.covariance = hc_covariance(&fit, x, variant)?;
    Ok(fit)
}

/// Sandwich (X'X)^-1 X' diag(w_i e_i^2) X (X'X)^-1. HC1 is computed as
/// HC0 times n / (n - k), so the two agree exactly up to that factor.
pub fn hc_covariance(fit: &FitResult, x: &DMatrix<f64>, variant: HcVariant) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    if fit.residuals.len() != n {
        return Err(RegressError::Dimension(format!(
            "{} residuals for {n} rows",
            fit.residuals.len()
        )));
    }
    let bread = xtx_inverse(x)?;
    let xb = x * &bread;
    let leverage = |i: usize| xb.row(i).dot(&x.row(i));
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let e2 = fit.residuals[i].powi(2);
            match variant {
                HcVariant::Hc0 | HcVariant::Hc1 => e2,
                HcVariant::Hc2 => e2 / (1.0 - leverage(i)),
                HcVariant::Hc3 => e2 / (1.0 - leverage(i)).powi(2),
            }
        })
        .collect();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for (i, w) in weights.iter().enumerate() {
        let xi = x.row(i);
        meat.ger(*w, &xi.transpose(), &xi.transpose(), 1.0);
    }
    let v = &bread * meat * &bread;
    let v = (&v + v.transpose()) * 0.5;
    Ok(match variant {
        HcVariant::Hc1 => v * (n as f64 / (n - k) as f64),
        _ => v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hand_case() -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { (i + 1) as f64 });
        let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0, 4.0]);
        (x, y)
    }

    // (X'X)^-1 = [[1.1, -0.3], [-0.3, 0.1]], beta = (0.6, 0.8),
    // residuals (-0.4, 0.8, -1.0, 1.2, -0.6), leverages (0.6, 0.3, 0.2, 0.3, 0.6).
    fn sandwich_by_hand(w: [f64; 5]) -> [f64; 3] {
        let e2 = [0.16, 0.64, 1.0, 1.44, 0.36];
        let (mut m00, mut m01, mut m11) = (0.0, 0.0, 0.0);
        for i in 0..5 {
            let xi = (i + 1) as f64;
            m00 += w[i] * e2[i];
            m01 += w[i] * e2[i] * xi;
            m11 += w[i] * e2[i] * xi * xi;
        }
        let (b00, b01, b11) = (1.1, -0.3, 0.1);
        let v00 = b00 * b00 * m00 + 2.0 * b00 * b01 * m01 + b01 * b01 * m11;
        let v01 = b00 * b01 * m00 + (b00 * b11 + b01 * b01) * m01 + b01 * b11 * m11;
        let v11 = b01 * b01 * m00 + 2.0 * b01 * b11 * m01 + b11 * b11 * m11;
        [v00, v01, v11]
    }

    fn assert_cov(v: &DMatrix<f64>, want: [f64; 3]) {
        assert_relative_eq!(v[(0, 0)], want[0], epsilon = 1e-12);
        assert_relative_eq!(v[(0, 1)], want[1], epsilon = 1e-12);
        assert_relative_eq!(v[(1, 0)], want[1], epsilon = 1e-12);
        assert_relative_eq!(v[(1, 1)], want[2], epsilon = 1e-12);
    }

    #[test]
    fn hand_computed_sandwiches() {
        let (x, y) = hand_case();
        let fit = ols_fit(&x, &y, HcVariant::Hc0).unwrap();
        assert_relative_eq!(fit.coefficients[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(fit.coefficients[1], 0.8, epsilon = 1e-12);
        assert_cov(&fit.covariance, [0.3744, -0.1008, 0.0416]);

        let h = [0.6, 0.3, 0.2, 0.3, 0.6];
        let hc1 = hc_covariance(&fit, &x, HcVariant::Hc1).unwrap();
        assert_cov(&hc1, sandwich_by_hand([5.0 / 3.0; 5]));
        let hc2 = hc_covariance(&fit, &x, HcVariant::Hc2).unwrap();
        assert_cov(&hc2, sandwich_by_hand(h.map(|h| 1.0 / (1.0 - h))));
        let hc3 = hc_covariance(&fit, &x, HcVariant::Hc3).unwrap();
        assert_cov(&hc3, sandwich_by_hand(h.map(|h| 1.0 / ((1.0 - h) * (1.0 - h)))));
        assert_cov(&fit.covariance, sandwich_by_hand([1.0; 5]));
    }

    #[test]
    fn noiseless_recovery_and_fit_summaries() {
        let x = DMatrix::from_fn(6, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => ((i * i) % 5) as f64,
        });
        let truth = DVector::from_vec(vec![2.0, -1.0, 0.5]);
        let y = &x * &truth;
        let fit = ols_fit(&x, &y, HcVariant::Hc3).unwrap();
        assert!((fit.coefficients - truth).amax() < 1e-12);
        assert!(fit.residuals.amax() < 1e-12);
    }

    #[test]
    fn adjusted_r2_and_aic_definition() {
        let (x, y) = hand_case();
        let fit = ols_fit(&x, &y, HcVariant::Hc3).unwrap();
        // RSS 3.6, TSS 10
        assert_relative_eq!(fit.r2.unwrap(), 0.64, epsilon = 1e-12);
        assert_relative_eq!(fit.adj_r2.unwrap(), 1.0 - 0.36 * 4.0 / 3.0, epsilon = 1e-12);
        let n = 5.0f64;
        let aic = n * (3.6f64 / n).ln() + 4.0 + n * ((2.0 * std::f64::consts::PI).ln() + 1.0);
        assert_relative_eq!(fit.aic, aic, epsilon = 1e-10);
        assert!(fit.adj_r2.unwrap() <= fit.r2.unwrap());
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let x = DMatrix::from_fn(6, 3, |i, j| if j == 2 { 2.0 * i as f64 } else if j == 1 { i as f64 } else { 1.0 });
        let y = DVector::from_fn(6, |i, _| i as f64);
        match ols_fit(&x, &y, HcVariant::Hc3) {
            Err(RegressError::RankDeficient { columns }) => assert_eq!(columns, vec![2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_element(2, 2, 1.0);
        let y = DVector::from_element(2, 1.0);
        assert!(matches!(ols_fit(&x, &y, HcVariant::Hc0), Err(RegressError::TooFewObservations { .. })));
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!("hc1".parse::<HcVariant>().unwrap(), HcVariant::Hc1);
        assert!("HC4".parse::<HcVariant>().is_err());
    }
}
