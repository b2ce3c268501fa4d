//! Selection procedures and their polyhedral selection events `{y : A y <= b}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Procedure that produced a selection event.
#[derive(Debug, Clone, PartialEq)]
pub enum EventMeta {
    Unconstrained,
    Lasso { lambda: f64, group: usize },
    MarginalScreen { i_star: usize, sign: f64, tie: bool },
    Stacked { parts: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionEvent {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub meta: EventMeta,
}

impl SelectionEvent {
    /// The whole space `R^n` (no rows).
    pub fn unconstrained(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            meta: EventMeta::Unconstrained,
        }
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// `b - A y`.
    pub fn slack(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * y
    }

    pub fn min_slack(&self, y: &DVector<f64>) -> f64 {
        self.slack(y).iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        self.rows() == 0 || self.min_slack(y) >= -tol
    }

    /// Intersection of events by row concatenation.
    pub fn stack(events: &[SelectionEvent]) -> Result<Self> {
        let n = events.first().map(SelectionEvent::n).ok_or_else(|| invalid("nothing to stack"))?;
        if events.iter().any(|e| e.n() != n) {
            return Err(Error::DimensionMismatch("events on different dimensions".into()));
        }
        let q: usize = events.iter().map(SelectionEvent::rows).sum();
        let mut a = DMatrix::zeros(q, n);
        let mut b = DVector::zeros(q);
        let mut at = 0;
        for e in events {
            a.view_mut((at, 0), (e.rows(), n)).copy_from(&e.a);
            b.rows_mut(at, e.rows()).copy_from(&e.b);
            at += e.rows();
        }
        Ok(Self {
            a,
            b,
            meta: EventMeta::Stacked { parts: events.len() },
        })
    }
}

/// Lasso outcome on one group: active columns (local indices) and their signs.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoSelection {
    pub group: usize,
    pub lambda: f64,
    pub active: Vec<usize>,
    pub signs: Vec<f64>,
    pub beta: DVector<f64>,
}

impl LassoSelection {
    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `0.5 ||y - X beta||^2 + lambda ||beta||_1`.
pub fn lasso_cd(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, warm: Option<&DVector<f64>>) -> DVector<f64> {
    let p = x.ncols();
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm_squared()).collect();
    let mut beta = warm.cloned().unwrap_or_else(|| DVector::zeros(p));
    let mut r = y - x * &beta;
    for _ in 0..100_000 {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let xj = x.column(j);
            let old = beta[j];
            let z = xj.dot(&r) + norms[j] * old;
            let new = soft(z, lambda) / norms[j];
            if new != old {
                r.axpy(old - new, &xj, 1.0);
                beta[j] = new;
                max_delta = max_delta.max((new - old).abs());
            }
        }
        if max_delta < 1e-10 {
            break;
        }
    }
    beta
}

/// Lasso at a fixed penalty on the columns of one group.
pub fn lasso_fixed_lambda(x_sub: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, group: usize) -> Result<LassoSelection> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("lasso lambda must be positive, got {lambda}")));
    }
    if x_sub.nrows() != y.len() {
        return Err(Error::DimensionMismatch("design rows differ from response length".into()));
    }
    let beta = lasso_cd(x_sub, y, lambda, None);
    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    let signs = active.iter().map(|&j| beta[j].signum()).collect();
    Ok(LassoSelection {
        group,
        lambda,
        active,
        signs,
        beta,
    })
}

/// Polyhedral event for `(active set, signs)` of a lasso fit. An empty active
/// set yields the event `|X^T y| <= lambda`.
pub fn lasso_event(sel: &LassoSelection, x_sub: &DMatrix<f64>, lambda: f64) -> Result<SelectionEvent> {
    let n = x_sub.nrows();
    let p = x_sub.ncols();
    let m = sel.active.len();
    let inactive: Vec<usize> = (0..p).filter(|j| !sel.active.contains(j)).collect();
    let q = m + 2 * inactive.len();
    let mut a = DMatrix::zeros(q, n);
    let mut b = DVector::zeros(q);
    let meta = EventMeta::Lasso {
        lambda,
        group: sel.group,
    };
    if m == 0 {
        for (r, &j) in inactive.iter().enumerate() {
            let xj = x_sub.column(j);
            a.row_mut(2 * r).copy_from(&(xj.transpose() / lambda));
            a.row_mut(2 * r + 1).copy_from(&(-xj.transpose() / lambda));
            b[2 * r] = 1.0;
            b[2 * r + 1] = 1.0;
        }
        return Ok(SelectionEvent { a, b, meta });
    }
    let xm = x_sub.select_columns(&sel.active);
    let gram = xm.tr_mul(&xm);
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-10 * hi) {
        return Err(Error::DegenerateActiveSet(format!(
            "active columns {:?} are collinear (eigenvalue ratio {:e})",
            sel.active,
            lo / hi
        )));
    }
    let chol = gram.cholesky().ok_or_else(|| Error::DegenerateActiveSet("X_M^T X_M not positive definite".into()))?;
    let s = DVector::from_vec(sel.signs.clone());
    let pinv = chol.solve(&xm.transpose()); // m x n
    let gs = chol.solve(&s);
    for i in 0..m {
        a.row_mut(i).copy_from(&(-pinv.row(i) * s[i]));
        b[i] = -lambda * s[i] * gs[i];
    }
    for (r, &j) in inactive.iter().enumerate() {
        let xj = x_sub.column(j).into_owned();
        // x_j^T (I - P_M) = x_j^T - (x_j^T X_M) pinv
        let proj = (xm.tr_mul(&xj)).transpose() * &pinv;
        let row = (xj.transpose() - proj) / lambda;
        let shift = xj.dot(&(&xm * &gs));
        a.row_mut(m + 2 * r).copy_from(&row);
        b[m + 2 * r] = 1.0 - shift;
        a.row_mut(m + 2 * r + 1).copy_from(&(-row));
        b[m + 2 * r + 1] = 1.0 + shift;
    }
    Ok(SelectionEvent { a, b, meta })
}

/// Marginal screening: `i* = argmax_i |x_i^T y|` with its sign, as the event
/// `A y <= 0`. Ties go to the lowest index and are flagged in the metadata.
pub fn marginal_screen_event(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(usize, SelectionEvent)> {
    let p = x.ncols();
    if p == 0 {
        return Err(invalid("marginal screening needs at least one column"));
    }
    let scores = x.tr_mul(y);
    let mut i_star = 0;
    let mut tie = false;
    for j in 1..p {
        if scores[j].abs() > scores[i_star].abs() {
            i_star = j;
            tie = false;
        } else if scores[j].abs() == scores[i_star].abs() {
            tie = true;
        }
    }
    let sign = if scores[i_star] < 0.0 { -1.0 } else { 1.0 };
    let n = x.nrows();
    let q = 2 * (p - 1) + 1;
    let mut a = DMatrix::zeros(q, n);
    let xi = x.column(i_star).transpose() * sign;
    let mut r = 0;
    for j in (0..p).filter(|&j| j != i_star) {
        let xj = x.column(j).transpose();
        a.row_mut(r).copy_from(&(&xj - &xi));
        a.row_mut(r + 1).copy_from(&(-&xj - &xi));
        r += 2;
    }
    a.row_mut(r).copy_from(&(-xi));
    Ok((
        i_star,
        SelectionEvent {
            a,
            b: DVector::zeros(q),
            meta: EventMeta::MarginalScreen { i_star, sign, tie },
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedLambda {
    pub lambda: f64,
    pub mean_active: f64,
    /// Whether the mean active-set size came within one of the target.
    pub reached: bool,
}

/// Find a fixed `lambda` whose mean active-set size over pilot null responses
/// `N(0, sigma2 I)` is closest to `target_count`, by bisection in `log lambda`.
pub fn calibrate_lambda(
    x_sub: &DMatrix<f64>,
    target_count: usize,
    sigma2: f64,
    trials: usize,
    seed: u64,
) -> Result<CalibratedLambda> {
    let m = x_sub.ncols();
    if target_count < 1 || target_count > m {
        return Err(invalid(format!("target count {target_count} outside [1, {m}]")));
    }
    if trials == 0 || !(sigma2 > 0.0) {
        return Err(invalid("calibration needs trials > 0 and sigma2 > 0"));
    }
    let n = x_sub.nrows();
    let sigma = sigma2.sqrt();
    let pilots: Vec<DVector<f64>> = (0..trials)
        .map(|t| {
            let mut r = rng::stream(seed, &[rng::tag("lambda-pilot"), t as u64]);
            DVector::from_fn(n, |_, _| sigma * rng::normal(&mut r))
        })
        .collect();
    let mean_active = |lambda: f64| -> f64 {
        let total: usize = pilots
            .iter()
            .map(|y| lasso_cd(x_sub, y, lambda, None).iter().filter(|&&b| b != 0.0).count())
            .sum();
        total as f64 / trials as f64
    };
    let lmax = pilots.iter().map(|y| x_sub.tr_mul(y).amax()).fold(0.0, f64::max);
    let target = target_count as f64;
    let mut lo = (lmax * 1e-6).ln();
    let mut hi = lmax.ln();
    let mut best = (f64::INFINITY, lmax, 0.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let lam = mid.exp();
        let avg = mean_active(lam);
        let err = (avg - target).abs();
        if err < best.0 {
            best = (err, lam, avg);
        }
        if avg > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    Ok(CalibratedLambda {
        lambda: best.1,
        mean_active: best.2,
        reached: best.0 <= 1.0,
    })
}
