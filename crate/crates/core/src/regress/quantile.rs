//! Quantile regression by a primal-dual (Frisch-Newton) interior point method
//! followed by a move to an optimal vertex.

use nalgebra::{DMatrix, DVector};

use super::inference::sparsity_for_fit;
use super::{check_dims, require_full_rank, xtx_inverse, FitResult, Method, RegressError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative duality gap at which the interior point stops.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-7,
            max_iter: 100,
        }
    }
}

/// Sum of rho_tau(r) = r (tau - 1[r < 0]).
pub fn check_loss(residuals: &DVector<f64>, tau: f64) -> f64 {
    residuals.iter().map(|&r| rho(r, tau)).sum()
}

fn rho(r: f64, tau: f64) -> f64 {
    if r < 0.0 {
        r * (tau - 1.0)
    } else {
        r * tau
    }
}

pub fn qr_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, tau: f64) -> f64 {
    check_loss(&(y - x * beta), tau)
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(RegressError::InvalidTau(tau))
    }
}

struct Ipm {
    beta: DVector<f64>,
    /// Dual point; feasible for the dual of the check-loss problem.
    dual: DVector<f64>,
    gap: f64,
    converged: bool,
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c.solve(rhs));
    }
    m.clone().lu().solve(rhs)
}

// Largest step keeping v + t dv >= 0.
fn bound(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&a, &d)| -a / d)
        .fold(1e20, f64::min)
}

/// Solves min c'x s.t. X'x = (1 - tau) X'1, 0 <= x <= 1 with c = -y; the
/// coefficients are the negated equality multipliers.
fn interior_point(x_mat: &DMatrix<f64>, y: &DVector<f64>, tau: f64, opts: &SolverOptions) -> Result<Ipm> {
    const STEP: f64 = 0.99995;
    let n = x_mat.nrows();
    let nf = n as f64;
    let c = -y;
    let mut x = DVector::from_element(n, 1.0 - tau);
    let b = x_mat.tr_mul(&x);
    let mut s = DVector::from_element(n, 1.0) - &x;

    let qr = x_mat.clone().qr();
    let mut yd = qr
        .r()
        .solve_upper_triangular(&qr.q().tr_mul(&c))
        .ok_or_else(|| RegressError::RankDeficient { columns: super::collinear_columns(x_mat) })?;
    let mut r = &c - x_mat * &yd;
    r.apply(|v| {
        if *v == 0.0 {
            *v = 0.001
        }
    });
    let mut z = r.map(|v| v.max(0.0));
    let mut w = &z - &r;
    let gap_of = |x: &DVector<f64>, yd: &DVector<f64>, w: &DVector<f64>| c.dot(x) - yd.dot(&b) + w.sum();
    let mut gap = gap_of(&x, &yd, &w);

    let mut it = 0;
    let converged = |gap: f64, x: &DVector<f64>| gap <= opts.tolerance * (1.0 + c.dot(x).abs());
    while !converged(gap, &x) && it < opts.max_iter {
        it += 1;
        let q = DVector::from_fn(n, |i, _| 1.0 / (z[i] / x[i] + w[i] / s[i]));
        let r = &z - &w;
        let xq = DMatrix::from_fn(n, x_mat.ncols(), |i, j| x_mat[(i, j)] * q[i]);
        let aqa = x_mat.tr_mul(&xq);
        let mut rhs = xq.tr_mul(&r);
        let Some(mut dy) = solve_spd(&aqa, &rhs) else { break };
        let mut dx = (x_mat * &dy - &r).component_mul(&q);
        let mut ds = -&dx;
        let mut dz = -z.component_mul(&(dx.component_div(&x).add_scalar(1.0)));
        let mut dw = -w.component_mul(&(ds.component_div(&s).add_scalar(1.0)));

        let steps = |dx: &DVector<f64>, ds: &DVector<f64>, dz: &DVector<f64>, dw: &DVector<f64>| {
            let fp = (STEP * bound(&x, dx).min(bound(&s, ds))).min(1.0);
            let fd = (STEP * bound(&w, dw).min(bound(&z, dz))).min(1.0);
            (fp, fd)
        };
        let (mut fp, mut fd) = steps(&dx, &ds, &dz, &dw);

        if fp.min(fd) < 1.0 {
            // Mehrotra corrector
            let mu0 = z.dot(&x) + w.dot(&s);
            let g = (&z + &dz * fd).dot(&(&x + &dx * fp)) + (&w + &dw * fd).dot(&(&s + &ds * fp));
            let mu = mu0 * (g / mu0).powi(3) / (2.0 * nf);
            let dxdz = dx.component_mul(&dz);
            let dsdw = ds.component_mul(&dw);
            let xinv = x.map(|v| 1.0 / v);
            let sinv = s.map(|v| 1.0 / v);
            let xi = (&xinv - &sinv) * mu;
            rhs += x_mat.tr_mul(&(&dxdz - &dsdw - &xi).component_mul(&q));
            let Some(dy2) = solve_spd(&aqa, &rhs) else { break };
            dy = dy2;
            dx = (x_mat * &dy + &xi - &r - &dxdz + &dsdw).component_mul(&q);
            ds = -&dx;
            dz = xinv.map(|v| mu * v) - &z - xinv.component_mul(&z).component_mul(&dx) - &dxdz;
            dw = sinv.map(|v| mu * v) - &w - sinv.component_mul(&w).component_mul(&ds) - &dsdw;
            (fp, fd) = steps(&dx, &ds, &dz, &dw);
        }

        x += &dx * fp;
        s += &ds * fp;
        yd += &dy * fd;
        w += &dw * fd;
        z += &dz * fd;
        gap = gap_of(&x, &yd, &w);
        if !gap.is_finite() {
            break;
        }
    }
    log::trace!("interior point: {it} iterations, gap {gap:e}");
    Ok(Ipm {
        beta: -yd,
        converged: converged(gap, &x),
        dual: x,
        gap,
    })
}

fn zero_tol(yi: f64) -> f64 {
    1e-10 * (1.0 + yi.abs())
}

/// Picks `k` linearly independent rows, smallest |r| first.
fn initial_basis(x: &DMatrix<f64>, r: &DVector<f64>) -> Option<Vec<usize>> {
    let k = x.ncols();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    let mut basis = Vec::with_capacity(k);
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(k);
    for i in order {
        let row = x.row(i).transpose();
        let norm0 = row.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row;
        for _ in 0..2 {
            for q in &ortho {
                let p = q.dot(&v);
                v.axpy(-p, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 * norm0 {
            ortho.push(v / norm);
            basis.push(i);
            if basis.len() == k {
                return Some(basis);
            }
        }
    }
    None
}

// One-sided derivative of rho_tau(r - t a) at t = 0+.
fn slope(r: f64, a: f64, tau: f64, ztol: f64) -> f64 {
    if r > ztol {
        -tau * a
    } else if r < -ztol {
        (1.0 - tau) * a
    } else if a > 0.0 {
        (1.0 - tau) * a
    } else {
        -tau * a
    }
}

struct Vertex {
    basis: Vec<usize>,
    beta: DVector<f64>,
    residuals: DVector<f64>,
    a: DMatrix<f64>,
}

fn vertex(x: &DMatrix<f64>, y: &DVector<f64>, basis: Vec<usize>) -> Option<Vertex> {
    let xh = x.select_rows(&basis);
    let dirs = xh.try_inverse()?;
    let yh = DVector::from_fn(basis.len(), |j, _| y[basis[j]]);
    let beta = &dirs * yh;
    let mut residuals = y - x * &beta;
    for &h in &basis {
        residuals[h] = 0.0;
    }
    let a = x * &dirs;
    Some(Vertex { basis, beta, residuals, a })
}

/// Steepest edge with negative directional derivative, as (column, sign, slope).
fn descent_edge(v: &Vertex, y: &DVector<f64>, tau: f64) -> Option<(usize, f64, f64)> {
    let (n, k) = v.a.shape();
    let mut best: Option<(usize, f64, f64)> = None;
    for j in 0..k {
        for sign in [1.0, -1.0] {
            let mut g = 0.0;
            let mut scale = 1.0;
            for i in 0..n {
                let a = sign * v.a[(i, j)];
                g += slope(v.residuals[i], a, tau, zero_tol(y[i]));
                scale += a.abs();
            }
            if g < -1e-11 * scale && best.is_none_or(|(_, _, bg)| g < bg) {
                best = Some((j, sign, g));
            }
        }
    }
    best
}

/// Moves from the interior point estimate to an optimal vertex by descending
/// along edges, each line search ending at the breakpoint where the slope of
/// the check loss turns non-negative. Returns the vertex and whether no edge
/// of the final basis descends.
fn polish(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, start: &DVector<f64>) -> Option<(Vertex, bool)> {
    let n = x.nrows();
    let basis = initial_basis(x, &(y - x * start))?;
    let mut v = vertex(x, y, basis)?;
    let max_steps = 50 * (n + x.ncols());
    let mut swaps = 0usize;
    for _ in 0..max_steps {
        let Some((j, sign, g)) = descent_edge(&v, y, tau) else {
            // A degenerate vertex can hide descent behind another basis.
            match swap_degenerate(x, y, tau, &v, &mut swaps) {
                Some(next) => {
                    v = next;
                    continue;
                }
                None => return Some((v, true)),
            }
        };
        let mut breaks: Vec<(f64, usize, f64)> = (0..n)
            .filter_map(|i| {
                let a = sign * v.a[(i, j)];
                let r = v.residuals[i];
                (r.abs() > zero_tol(y[i]) && r * a > 0.0).then(|| (r / a, i, a.abs()))
            })
            .collect();
        breaks.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        let mut sl = g;
        let entering = breaks.iter().find_map(|&(_, i, inc)| {
            sl += inc;
            (sl >= 0.0).then_some(i)
        })?;
        let mut basis = v.basis.clone();
        basis[j] = entering;
        v = vertex(x, y, basis)?;
    }
    log::warn!("vertex search hit its step limit");
    Some((v, false))
}

fn swap_degenerate(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, v: &Vertex, budget_used: &mut usize) -> Option<Vertex> {
    const BUDGET: usize = 200;
    let zeros: Vec<usize> = (0..x.nrows())
        .filter(|i| !v.basis.contains(i) && v.residuals[*i].abs() <= zero_tol(y[*i]))
        .collect();
    for &i in &zeros {
        for j in 0..v.basis.len() {
            if v.a[(i, j)].abs() < 1e-12 {
                continue;
            }
            if *budget_used >= BUDGET {
                return None;
            }
            *budget_used += 1;
            let mut basis = v.basis.clone();
            basis[j] = i;
            if let Some(cand) = vertex(x, y, basis) {
                if descent_edge(&cand, y, tau).is_some() {
                    return Some(cand);
                }
            }
        }
    }
    None
}

pub(crate) struct QrSolution {
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// Check-loss minimizer without any inference.
pub(crate) fn solve_qr(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, opts: &SolverOptions) -> Result<QrSolution> {
    let ipm = interior_point(x, y, tau, opts)?;
    let ipm_obj = qr_objective(x, y, &ipm.beta, tau);
    let polished = polish(x, y, tau, &ipm.beta);

    let beta = match polished {
        Some((v, _)) if !ipm.converged || qr_objective(x, y, &v.beta, tau) <= ipm_obj + 1e-9 * (1.0 + ipm_obj.abs()) => {
            v.beta
        }
        _ if ipm.converged => {
            log::debug!("vertex search stalled above the interior point objective");
            ipm.beta
        }
        _ => return Err(RegressError::NoConvergence { gap: ipm.gap }),
    };
    let lower = y.dot(&ipm.dual) - (1.0 - tau) * y.sum();
    let obj = qr_objective(x, y, &beta, tau);
    if ipm.converged && obj - lower > 1e-6 * (1.0 + obj.abs()) {
        log::debug!("quantile fit objective {obj} exceeds dual bound {lower}");
    }
    let mut residuals = y - x * &beta;
    for (r, yi) in residuals.iter_mut().zip(y.iter()) {
        if r.abs() <= zero_tol(*yi) {
            *r = 0.0;
        }
    }
    Ok(QrSolution { beta, residuals })
}

fn laplace_loglik(loss: f64, n: usize, tau: f64) -> Result<f64> {
    if loss <= 0.0 {
        return Err(RegressError::ZeroLoss);
    }
    let nf = n as f64;
    Ok(nf * (tau * (1.0 - tau)).ln() - nf - nf * (loss / nf).ln())
}

/// tau(1 - tau) s^2 (X'X)^-1 with the sparsity s estimated from residuals.
pub(crate) fn iid_covariance(x: &DMatrix<f64>, residuals: &DVector<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let s = sparsity_for_fit(residuals, tau);
    Ok(xtx_inverse(x)? * (tau * (1.0 - tau) * s * s))
}

pub fn qr_fit(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> Result<FitResult> {
    qr_fit_with(x, y, tau, &SolverOptions::default())
}

pub fn qr_fit_with(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, opts: &SolverOptions) -> Result<FitResult> {
    validate_tau(tau)?;
    check_dims(x, y)?;
    require_full_rank(x)?;
    let sol = solve_qr(x, y, tau, opts)?;
    let (n, k) = x.shape();
    let loss = check_loss(&sol.residuals, tau);
    let (loglik, aic) = match laplace_loglik(loss, n, tau) {
        Ok(l) => (l, -2.0 * l + 2.0 * k as f64),
        Err(_) => (f64::INFINITY, f64::NEG_INFINITY),
    };
    Ok(FitResult {
        method: Method::Qr,
        tau: Some(tau),
        lambda: None,
        covariance: iid_covariance(x, &sol.residuals, tau)?,
        coefficients: sol.beta,
        residuals: sol.residuals,
        loglik,
        aic,
        r2: None,
        adj_r2: None,
        loss,
        n,
        k,
    })
}

/// Minimizes the check loss plus `lambda` times the L1 norm of every
/// coefficient except an all-ones intercept column.
///
/// Each penalized coefficient contributes two pseudo-observations with
/// response 0 and regressors `lambda e_j` and `-lambda e_j`; their check
/// losses add up to exactly `lambda |beta_j|`.
pub fn qr_lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, lambda: f64) -> Result<FitResult> {
    validate_tau(tau)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(RegressError::InvalidLambda(lambda));
    }
    if lambda == 0.0 {
        let mut fit = qr_fit(x, y, tau)?;
        fit.method = Method::QrLasso;
        fit.lambda = Some(0.0);
        return Ok(fit);
    }
    if x.nrows() != y.len() {
        return Err(RegressError::Dimension(format!("X has {} rows, y has {}", x.nrows(), y.len())));
    }
    let (n, k) = x.shape();
    let penalized: Vec<usize> = (0..k).filter(|&j| !x.column(j).iter().all(|&v| v == 1.0)).collect();
    let m = n + 2 * penalized.len();
    let mut xa = DMatrix::<f64>::zeros(m, k);
    xa.rows_mut(0, n).copy_from(x);
    let mut ya = DVector::<f64>::zeros(m);
    ya.rows_mut(0, n).copy_from(y);
    for (p, &j) in penalized.iter().enumerate() {
        xa[(n + 2 * p, j)] = lambda;
        xa[(n + 2 * p + 1, j)] = -lambda;
    }
    require_full_rank(&xa)?;
    let sol = solve_qr(&xa, &ya, tau, &SolverOptions::default())?;
    let residuals = y - x * &sol.beta;
    let loss = check_loss(&residuals, tau);
    let active = sol.beta.iter().filter(|b| b.abs() > 1e-8).count();
    let (loglik, aic) = match laplace_loglik(loss, n, tau) {
        Ok(l) => (l, -2.0 * l + 2.0 * active as f64),
        Err(_) => (f64::INFINITY, f64::NEG_INFINITY),
    };
    let covariance = iid_covariance(x, &residuals, tau).unwrap_or_else(|_| DMatrix::from_element(k, k, f64::NAN));
    Ok(FitResult {
        method: Method::QrLasso,
        tau: Some(tau),
        lambda: Some(lambda),
        coefficients: sol.beta,
        residuals,
        covariance,
        loglik,
        aic,
        r2: None,
        adj_r2: None,
        loss,
        n,
        k,
    })
}

/// Penalized objective of [`qr_lasso_fit`] at `beta`.
pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, tau: f64, lambda: f64) -> f64 {
    let penalty: f64 = (0..x.ncols())
        .filter(|&j| !x.column(j).iter().all(|&v| v == 1.0))
        .map(|j| beta[j].abs())
        .sum();
    qr_objective(x, y, beta, tau) + lambda * penalty
}
