use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, FisherSnedecor, Normal};

use super::ols::{hc_covariance, ols_fit, HcVariant};
use super::quantile::{solve_qr, SolverOptions};
use super::{collinear_columns, xtx_inverse, FitResult, RegressError, Result};

pub const DEFAULT_BOOTSTRAP_REPS: usize = 200;
pub const MIN_BOOTSTRAP_REPS: usize = 50;
const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df1: f64,
    /// Denominator degrees of freedom for F references.
    pub df2: Option<f64>,
    pub replicates: Option<usize>,
    pub p_value: f64,
    pub description: String,
}

/// Hall-Sheather bandwidth for sparsity estimation at quantile `tau`,
/// with a 95% confidence level.
pub fn hall_sheather_bandwidth(n: usize, tau: f64) -> f64 {
    let normal = Normal::standard();
    let x = normal.inverse_cdf(tau);
    let z = normal.inverse_cdf(0.975);
    let phi = normal.pdf(x);
    (n as f64).powf(-1.0 / 3.0) * z.powf(2.0 / 3.0) * (1.5 * phi * phi / (2.0 * x * x + 1.0)).powf(1.0 / 3.0)
}

// Inverse of the empirical distribution function on sorted data.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((n as f64 * p).ceil() as usize).clamp(1, n);
    sorted[idx - 1]
}

// The k residuals a vertex fit interpolates are exactly zero; when k is a
// sizeable share of n they would fill the whole tau +/- h window, so they are
// left out.
fn difference_quotient(residuals: &DVector<f64>, tau: f64, h: f64) -> f64 {
    let mut sorted: Vec<f64> = residuals.iter().copied().filter(|&r| r != 0.0).collect();
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.sort_by(f64::total_cmp);
    (empirical_quantile(&sorted, tau + h) - empirical_quantile(&sorted, tau - h)) / (2.0 * h)
}

/// Sparsity 1/f(F^-1(tau)) of the errors, from residual quantiles at
/// tau +/- h with the Hall-Sheather h.
pub fn sparsity(residuals: &DVector<f64>, tau: f64) -> Result<f64> {
    let h = hall_sheather_bandwidth(residuals.len(), tau);
    if tau - h <= 0.0 || tau + h >= 1.0 {
        return Err(RegressError::Bandwidth { tau, h });
    }
    Ok(difference_quotient(residuals, tau, h))
}

/// As [`sparsity`], shrinking the bandwidth when it would leave (0, 1).
pub(crate) fn sparsity_for_fit(residuals: &DVector<f64>, tau: f64) -> f64 {
    let h = hall_sheather_bandwidth(residuals.len(), tau).min(0.999 * tau.min(1.0 - tau));
    difference_quotient(residuals, tau, h)
}

fn bootstrap_coefficients(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if reps < MIN_BOOTSTRAP_REPS {
        return Err(RegressError::InvalidArgument(format!(
            "at least {MIN_BOOTSTRAP_REPS} bootstrap replicates required, got {reps}"
        )));
    }
    let n = x.nrows();
    let opts = SolverOptions::default();
    (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            for _ in 0..=MAX_REDRAWS {
                let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                let xb = x.select_rows(&rows);
                if !collinear_columns(&xb).is_empty() {
                    continue;
                }
                let yb = DVector::from_fn(n, |i, _| y[rows[i]]);
                if let Ok(sol) = solve_qr(&xb, &yb, tau, &opts) {
                    return Ok(sol.beta);
                }
            }
            Err(RegressError::InvalidArgument(format!(
                "bootstrap replicate {rep} stayed degenerate after {MAX_REDRAWS} redraws"
            )))
        })
        .collect()
}

fn sample_covariance(draws: &[DVector<f64>], cols: &[usize]) -> DMatrix<f64> {
    let b = draws.len() as f64;
    let q = cols.len();
    let mean = DVector::from_fn(q, |j, _| draws.iter().map(|d| d[cols[j]]).sum::<f64>() / b);
    let mut cov = DMatrix::<f64>::zeros(q, q);
    for d in draws {
        let dev = DVector::from_fn(q, |j, _| d[cols[j]] - mean[j]);
        cov.ger(1.0, &dev, &dev, 1.0);
    }
    cov / (b - 1.0)
}

/// Coefficient vectors from a pairs bootstrap of one quantile fit. The same
/// draws serve for standard errors and for nested tests of that model.
#[derive(Debug, Clone)]
pub struct BootstrapDraws {
    pub tau: f64,
    pub seed: u64,
    pub draws: Vec<DVector<f64>>,
}

impl BootstrapDraws {
    pub fn covariance(&self, cols: &[usize]) -> DMatrix<f64> {
        sample_covariance(&self.draws, cols)
    }

    pub fn standard_errors(&self) -> DVector<f64> {
        let k = self.draws.first().map_or(0, |d| d.len());
        let cols: Vec<usize> = (0..k).collect();
        self.covariance(&cols).diagonal().map(f64::sqrt)
    }
}

/// Runs `reps` pairs-bootstrap replicates. Replicate `r` draws from its own
/// ChaCha stream, so results depend only on `seed`, not on thread scheduling.
pub fn bootstrap_draws(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, reps: usize, seed: u64) -> Result<BootstrapDraws> {
    Ok(BootstrapDraws {
        tau,
        seed,
        draws: bootstrap_coefficients(x, y, tau, reps, seed)?,
    })
}

/// Pairs-bootstrap standard errors of quantile regression coefficients.
pub fn bootstrap_se(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, reps: usize, seed: u64) -> Result<DVector<f64>> {
    Ok(bootstrap_draws(x, y, tau, reps, seed)?.standard_errors())
}

fn prefix_columns(small: &DMatrix<f64>, large: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (ks, kl) = (small.ncols(), large.ncols());
    if small.nrows() != large.nrows() || ks >= kl || large.columns(0, ks) != small.columns(0, ks) {
        return Err(RegressError::InvalidArgument(
            "the small model's columns must be a strict prefix of the large model's".into(),
        ));
    }
    Ok((ks..kl).collect())
}

fn wald(b: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov.clone().cholesky().ok_or(RegressError::SingularCovariance)?;
    Ok(b.dot(&chol.solve(b)))
}

fn f_test(w: f64, q: usize, df2: usize, replicates: Option<usize>, description: String) -> Result<TestResult> {
    let (q, d2) = (q as f64, df2.max(1) as f64);
    let f = w / q;
    let dist = FisherSnedecor::new(q, d2).map_err(|e| RegressError::InvalidArgument(e.to_string()))?;
    Ok(TestResult {
        statistic: f,
        df1: q,
        df2: Some(d2),
        replicates,
        p_value: dist.sf(f).clamp(0.0, 1.0),
        description,
    })
}

/// Joint test that the coefficients added by the larger quantile model are
/// zero, with their covariance from a pairs bootstrap of the larger model.
/// The statistic is W / q, referred to F(q, n - k).
pub fn nested_wald_test(
    x_small: &DMatrix<f64>,
    x_large: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    reps: usize,
    seed: u64,
) -> Result<TestResult> {
    prefix_columns(x_small, x_large)?;
    let fit = super::quantile::qr_fit(x_large, y, tau)?;
    let draws = bootstrap_draws(x_large, y, tau, reps, seed)?;
    nested_wald_from_draws(&fit, &draws, x_small.ncols())
}

/// [`nested_wald_test`] for a fitted larger model whose first `k_small`
/// columns form the smaller model, reusing existing bootstrap draws.
pub fn nested_wald_from_draws(fit_large: &FitResult, draws: &BootstrapDraws, k_small: usize) -> Result<TestResult> {
    let tau = fit_large.tau.ok_or_else(|| RegressError::InvalidArgument("nested QR test needs a quantile fit".into()))?;
    if draws.draws.first().is_some_and(|d| d.len() != fit_large.k) || (tau - draws.tau).abs() > 1e-12 {
        return Err(RegressError::Dimension("bootstrap draws do not belong to this fit".into()));
    }
    if k_small == 0 || k_small >= fit_large.k {
        return Err(RegressError::InvalidArgument(
            "the small model's columns must be a strict prefix of the large model's".into(),
        ));
    }
    let added: Vec<usize> = (k_small..fit_large.k).collect();
    let cov = draws.covariance(&added);
    let b = DVector::from_fn(added.len(), |j, _| fit_large.coefficients[added[j]]);
    let w = wald(&b, &cov)?;
    f_test(
        w,
        added.len(),
        fit_large.n - fit_large.k,
        Some(draws.draws.len()),
        format!("QR tau={tau}: {} added coefficients, bootstrap covariance", added.len()),
    )
}

/// Nested OLS comparison using the larger model's HC covariance.
pub fn ols_nested_wald_test(
    x_small: &DMatrix<f64>,
    x_large: &DMatrix<f64>,
    y: &DVector<f64>,
    variant: HcVariant,
) -> Result<TestResult> {
    let added = prefix_columns(x_small, x_large)?;
    let fit = ols_fit(x_large, y, variant)?;
    let cov = hc_covariance(&fit, x_large, variant)?.select_rows(&added).select_columns(&added);
    let b = DVector::from_fn(added.len(), |j, _| fit.coefficients[added[j]]);
    let w = wald(&b, &cov)?;
    f_test(
        w,
        added.len(),
        fit.n - fit.k,
        None,
        format!("OLS: {} added coefficients, {variant:?} covariance", added.len()),
    )
}

/// Wald test that coefficient `coef` is equal across the quantiles of `fits`
/// (all estimated on `x`). Uses the joint iid covariance
/// (min(ti, tj) - ti tj) s_i s_j [(X'X)^-1]_cc and successive differences,
/// referred to chi-square with |fits| - 1 df.
pub fn between_quantile_test(x: &DMatrix<f64>, fits: &[FitResult], coef: usize) -> Result<TestResult> {
    if fits.len() < 2 {
        return Err(RegressError::InvalidArgument("need at least two quantile fits".into()));
    }
    if coef >= x.ncols() {
        return Err(RegressError::InvalidArgument(format!("coefficient {coef} out of range")));
    }
    let mut taus = Vec::with_capacity(fits.len());
    let mut sparsities = Vec::with_capacity(fits.len());
    for f in fits {
        let tau = f
            .tau
            .ok_or_else(|| RegressError::InvalidArgument("between-quantile test needs quantile fits".into()))?;
        if f.residuals.len() != x.nrows() || f.k != x.ncols() {
            return Err(RegressError::Dimension("fits must share the design".into()));
        }
        if taus.iter().any(|&t: &f64| (t - tau).abs() < 1e-12) {
            return Err(RegressError::InvalidArgument(format!("quantile {tau} appears twice")));
        }
        taus.push(tau);
        sparsities.push(sparsity(&f.residuals, tau)?);
    }
    let xtx_inv = xtx_inverse(x)?;
    let m = fits.len();
    let omega = DMatrix::from_fn(m, m, |i, j| {
        (taus[i].min(taus[j]) - taus[i] * taus[j]) * sparsities[i] * sparsities[j] * xtx_inv[(coef, coef)]
    });
    let contrast = DMatrix::from_fn(m - 1, m, |l, i| {
        if i == l + 1 {
            1.0
        } else if i == l {
            -1.0
        } else {
            0.0
        }
    });
    let beta = DVector::from_fn(m, |i, _| fits[i].coefficients[coef]);
    let d = &contrast * beta;
    let cov = &contrast * omega * contrast.transpose();
    let w = wald(&d, &cov)?;
    let df = (m - 1) as f64;
    let chi = ChiSquared::new(df).map_err(|e| RegressError::InvalidArgument(e.to_string()))?;
    Ok(TestResult {
        statistic: w,
        df1: df,
        df2: None,
        replicates: None,
        p_value: chi.sf(w).clamp(0.0, 1.0),
        description: format!("equality of coefficient {coef} across tau {taus:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::qr_fit;
    use rand_distr::{Distribution, Exp, StandardNormal};

    #[test]
    fn bandwidth_is_symmetric_and_shrinks() {
        let a = hall_sheather_bandwidth(500, 0.25);
        let b = hall_sheather_bandwidth(500, 0.75);
        assert!((a - b).abs() < 1e-12);
        assert!(hall_sheather_bandwidth(5000, 0.5) < hall_sheather_bandwidth(500, 0.5));
        // tiny samples in the tails cannot support the bandwidth
        let r = DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(sparsity(&r, 0.9), Err(RegressError::Bandwidth { .. })));
    }

    #[test]
    fn bootstrap_is_deterministic_and_matches_median_se() {
        let exp = Exp::new(1.0).unwrap();
        let n = 2000;
        let x = DMatrix::from_element(n, 1, 1.0);
        // the bootstrap SE of a median is noisy in any one sample, so average
        // over independent samples
        let mut total = 0.0;
        for s in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + s);
            let y = DVector::from_fn(n, |_, _| exp.sample(&mut rng));
            let a = bootstrap_se(&x, &y, 0.5, 200, 9).unwrap();
            if s == 0 {
                assert_eq!(a, bootstrap_se(&x, &y, 0.5, 200, 9).unwrap());
                assert!(bootstrap_se(&x, &y, 0.5, 10, 9).is_err());
            }
            total += a[0];
        }
        // 1 / (2 f(m) sqrt(n)) with f(ln 2) = 1/2
        let analytic = 1.0 / (n as f64).sqrt();
        let mean = total / 6.0;
        assert!((mean - analytic).abs() / analytic < 0.15, "{mean} vs {analytic}");
    }

    fn design(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 3, |_, j| match j {
            0 => 1.0,
            _ => StandardNormal.sample(rng),
        })
    }

    #[test]
    fn nested_test_detects_strong_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200;
        let x = design(&mut rng, n);
        let y = DVector::from_fn(n, |i, _| 1.0 + x[(i, 1)] + 2.0 * x[(i, 2)] + { let e: f64 = StandardNormal.sample(&mut rng); e });
        let small = x.columns(0, 2).into_owned();
        let t = nested_wald_test(&small, &x, &y, 0.5, 100, 1).unwrap();
        assert!(t.p_value < 0.01);
        let o = ols_nested_wald_test(&small, &x, &y, HcVariant::Hc3).unwrap();
        assert!(o.p_value < 0.01);
        assert!(nested_wald_test(&x, &small, &y, 0.5, 100, 1).is_err());
    }

    #[test]
    fn between_quantile_detects_scale_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2000;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.gen_range(0.0..2.0) });
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(i, 1)] + (1.0 + 2.0 * x[(i, 1)]) * e
        });
        let fits: Vec<FitResult> = [0.25, 0.5, 0.75, 0.9].iter().map(|&t| qr_fit(&x, &y, t).unwrap()).collect();
        let t = between_quantile_test(&x, &fits, 1).unwrap();
        assert_eq!(t.df1, 3.0);
        assert!(t.p_value < 0.01);
        assert!(between_quantile_test(&x, &fits[..1], 1).is_err());
        let dup = vec![fits[0].clone(), fits[0].clone()];
        assert!(between_quantile_test(&x, &dup, 1).is_err());
    }
}
