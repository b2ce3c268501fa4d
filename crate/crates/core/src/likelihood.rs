//! Prototype-model log-likelihood and its Newton maximizer.
//!
//! With `G(theta) = I - sum_k theta_k H_k` the model `y = mu 1 + sum_k theta_k H_k y + eps`
//! has log-likelihood (up to constants)
//!
//! `l(theta, mu) = log|G(theta)| - ||G(theta) y - mu 1||^2 / (2 sigma^2)`.
//!
//! The fit minimizes the negative log-likelihood, a convex function on the cone
//! `G(theta) >= 0`, with `mu` profiled out in closed form.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::{HatOperator, InverseStrategy, LogDetEngine, StackedBasis};

/// Sufficient statistics of `y` for the quadratic part of the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStats {
    /// `Yhat^T Yhat`.
    pub gram: DMatrix<f64>,
    /// `Yhat^T y`.
    pub cross: DVector<f64>,
    /// `y^T y`.
    pub yy: f64,
    /// `1^T y`.
    pub sum_y: f64,
    /// `1^T Yhat`.
    pub sum_yhat: DVector<f64>,
    pub n: usize,
}

impl QuadraticStats {
    /// Direct computation from the prototypes `H_k y`.
    pub fn from_response(hats: &[HatOperator], y: &DVector<f64>) -> Self {
        let k = hats.len();
        let protos: Vec<DVector<f64>> = hats.iter().map(|h| h.apply(y)).collect();
        let gram = DMatrix::from_fn(k, k, |a, b| protos[a].dot(&protos[b]));
        let cross = DVector::from_fn(k, |a, _| protos[a].dot(y));
        let sum_yhat = DVector::from_fn(k, |a, _| protos[a].sum());
        Self {
            gram,
            cross,
            yy: y.norm_squared(),
            sum_y: y.sum(),
            sum_yhat,
            n: y.len(),
        }
    }

    /// Same statistics from `c = U^T y` in `O(s^2)`.
    pub fn from_coords(basis: &StackedBasis, c: &DVector<f64>, yy: f64, sum_y: f64, n: usize) -> Self {
        let k = basis.k();
        let a = c.component_mul(basis.weights());
        let cmat = basis.gram();
        let mut gram = DMatrix::zeros(k, k);
        let mut cross = DVector::zeros(k);
        let mut sum_yhat = DVector::zeros(k);
        let ones = basis.ones();
        for (g, r) in basis.ranges().iter().enumerate() {
            for i in r.clone() {
                cross[g] += a[i] * c[i];
                sum_yhat[g] += a[i] * ones[i];
            }
        }
        for (g, rg) in basis.ranges().iter().enumerate() {
            for (h, rh) in basis.ranges().iter().enumerate().skip(g) {
                let mut acc = 0.0;
                for i in rg.clone() {
                    for j in rh.clone() {
                        acc += a[i] * cmat[(i, j)] * a[j];
                    }
                }
                gram[(g, h)] = acc;
                gram[(h, g)] = acc;
            }
        }
        Self {
            gram,
            cross,
            yy,
            sum_y,
            sum_yhat,
            n,
        }
    }

    pub fn from_basis(basis: &StackedBasis, y: &DVector<f64>) -> Self {
        let c = basis.u().tr_mul(y);
        Self::from_coords(basis, &c, y.norm_squared(), y.sum(), y.len())
    }

    /// Statistics after centring `y` and every prototype.
    pub fn centered(&self) -> Self {
        let n = self.n as f64;
        let m = &self.sum_yhat;
        Self {
            gram: &self.gram - m * m.transpose() / n,
            cross: &self.cross - m * (self.sum_y / n),
            yy: self.yy - self.sum_y * self.sum_y / n,
            sum_y: 0.0,
            sum_yhat: DVector::zeros(m.len()),
            n: self.n,
        }
    }

    /// `||y - Yhat theta||^2`.
    pub fn rss(&self, theta: &DVector<f64>) -> f64 {
        self.yy - 2.0 * theta.dot(&self.cross) + theta.dot(&(&self.gram * theta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub max_halvings: usize,
    pub armijo: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
            max_halvings: 50,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: DVector<f64>,
    pub mu_hat: f64,
    pub loglik_at_opt: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm_final: f64,
    pub loglik_trace: Vec<f64>,
}

/// Negative (profiled) log-likelihood with its derivatives.
struct Objective<'a> {
    engine: &'a LogDetEngine,
    stats: &'a QuadraticStats,
    sigma2: f64,
}

impl Objective<'_> {
    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        let ld = self.engine.log_det(theta)?;
        Ok(-ld + self.stats.rss(theta) / (2.0 * self.sigma2))
    }

    fn full(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let t = self.engine.terms(theta)?;
        let s = self.stats;
        let f = -t.log_det + s.rss(theta) / (2.0 * self.sigma2);
        let g = (&s.gram * theta - &s.cross) / self.sigma2 + t.trace_grad;
        let h = &s.gram / self.sigma2 + t.trace_hess;
        Ok((f, g, h))
    }
}

fn masked_norm(g: &DVector<f64>, free: &[bool]) -> f64 {
    g.iter().zip(free).filter(|(_, &f)| f).map(|(v, _)| v * v).sum::<f64>().sqrt()
}

/// Newton direction on the free coordinates, with a small ridge if the
/// Hessian is numerically singular.
fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>, free: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
    let m = idx.len();
    let hf = DMatrix::from_fn(m, m, |a, b| h[(idx[a], idx[b])]);
    let gf = DVector::from_fn(m, |a, _| g[idx[a]]);
    let scale = hf.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    let step = loop {
        let mut hr = hf.clone();
        for i in 0..m {
            hr[(i, i)] += ridge;
        }
        if let Some(ch) = hr.cholesky() {
            break -ch.solve(&gf);
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
        if ridge > 1e6 * scale {
            break -gf.clone() / scale;
        }
    };
    let mut d = DVector::zeros(free.len());
    for (a, &i) in idx.iter().enumerate() {
        d[i] = step[a];
    }
    d
}

/// Maximize the log-likelihood over `theta` with coordinates where `free` is
/// false pinned at zero.
pub fn fit(
    engine: &LogDetEngine,
    stats: &QuadraticStats,
    sigma2: f64,
    intercept: bool,
    free: &[bool],
    opts: &FitOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<FitResult> {
    let k = engine.k();
    if free.len() != k {
        return Err(Error::DimensionMismatch(format!("{} flags for {k} groups", free.len())));
    }
    if !(sigma2 > 0.0) {
        return Err(invalid("sigma2 must be positive"));
    }
    let centered;
    let quad = if intercept {
        centered = stats.centered();
        &centered
    } else {
        stats
    };
    let obj = Objective {
        engine,
        stats: quad,
        sigma2,
    };

    let zero = DVector::zeros(k);
    let mut theta = zero.clone();
    if let Some(w) = warm_start {
        let mut cand = w.clone();
        for i in 0..k {
            if !free[i] {
                cand[i] = 0.0;
            }
        }
        if cand.iter().all(|v| v.is_finite()) && obj.value(&cand).is_ok() {
            theta = cand;
        }
    }
    let (mut f, mut g, mut h) = obj.full(&theta)?;
    let mut trace = vec![-f];
    let mut iterations = 0;
    let mut converged = false;
    let any_free = free.iter().any(|&b| b);
    loop {
        let gn = masked_norm(&g, free);
        if !any_free || gn < opts.grad_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let d = newton_direction(&g, &h, free);
        let decrement = -g.dot(&d);
        let tiny = decrement.abs() <= 1e-14 * (1.0 + f.abs());
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &theta + &d * t;
            if let Ok(fc) = obj.value(&cand) {
                if fc <= f - opts.armijo * t * decrement || (tiny && fc <= f + 1e-12 * (1.0 + f.abs())) {
                    accepted = Some(cand);
                    break;
                }
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some(cand) => match obj.full(&cand) {
                Ok((fc, gc, hc)) => {
                    theta = cand;
                    f = fc;
                    g = gc;
                    h = hc;
                    trace.push(-f);
                }
                Err(_) => break,
            },
            None => break,
        }
    }
    let mu_hat = if intercept {
        (stats.sum_y - theta.dot(&stats.sum_yhat)) / stats.n as f64
    } else {
        0.0
    };
    let gradient_norm_final = masked_norm(&g, free);
    Ok(FitResult {
        theta_hat: theta,
        mu_hat,
        loglik_at_opt: -f,
        iterations,
        converged,
        gradient_norm_final,
        loglik_trace: trace,
    })
}

/// Response, hats and known noise variance of a prototype model.
#[derive(Debug, Clone)]
pub struct PrototypeLikelihood {
    engine: LogDetEngine,
    y: DVector<f64>,
    sigma2: f64,
    intercept: bool,
    stats: QuadraticStats,
}

impl PrototypeLikelihood {
    pub fn new(hats: Vec<HatOperator>, y: DVector<f64>, sigma2: f64, intercept: bool) -> Result<Self> {
        Self::with_strategy(hats, y, sigma2, intercept, InverseStrategy::default())
    }

    pub fn with_strategy(
        hats: Vec<HatOperator>,
        y: DVector<f64>,
        sigma2: f64,
        intercept: bool,
        strategy: InverseStrategy,
    ) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(invalid("sigma2 must be positive"));
        }
        if hats.iter().any(|h| h.n() != y.len()) {
            return Err(Error::DimensionMismatch("response length differs from hat dimension".into()));
        }
        let engine = LogDetEngine::new(hats, strategy)?;
        let stats = QuadraticStats::from_response(engine.hats(), &y);
        Ok(Self {
            engine,
            y,
            sigma2,
            intercept,
            stats,
        })
    }

    pub fn hats(&self) -> &[HatOperator] {
        self.engine.hats()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
    pub fn intercept(&self) -> bool {
        self.intercept
    }
    pub fn engine(&self) -> &LogDetEngine {
        &self.engine
    }
    pub fn stats(&self) -> &QuadraticStats {
        &self.stats
    }
    pub fn k(&self) -> usize {
        self.engine.k()
    }

    /// Prototypes `H_k y` as columns.
    pub fn prototypes(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.hats().iter().map(|h| h.apply(&self.y)).collect();
        DMatrix::from_columns(&cols)
    }

    /// `log|G(theta)| - ||G(theta) y - mu 1||^2 / (2 sigma^2)`.
    pub fn loglik(&self, theta: &DVector<f64>, mu: f64) -> Result<f64> {
        self.check_len(theta)?;
        let ld = self.engine.log_det(theta)?;
        let s = &self.stats;
        let resid = s.rss(theta) - 2.0 * mu * (s.sum_y - theta.dot(&s.sum_yhat)) + mu * mu * s.n as f64;
        Ok(ld - resid / (2.0 * self.sigma2))
    }

    /// `mu` maximizing the log-likelihood at `theta`: `1^T G(theta) y / n`.
    pub fn mu_hat(&self, theta: &DVector<f64>) -> f64 {
        if self.intercept {
            (self.stats.sum_y - theta.dot(&self.stats.sum_yhat)) / self.stats.n as f64
        } else {
            0.0
        }
    }

    /// Log-likelihood with `mu` at its profile maximum (zero without intercept).
    pub fn loglik_profiled(&self, theta: &DVector<f64>) -> Result<f64> {
        self.loglik(theta, self.mu_hat(theta))
    }

    /// Gradient and Hessian of the negative (profiled) log-likelihood.
    pub fn grad_hess(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_len(theta)?;
        let centered;
        let stats = if self.intercept {
            centered = self.stats.centered();
            &centered
        } else {
            &self.stats
        };
        let obj = Objective {
            engine: &self.engine,
            stats,
            sigma2: self.sigma2,
        };
        obj.full(theta).map(|(_, g, h)| (g, h))
    }

    pub fn fit_mle(&self) -> Result<FitResult> {
        self.fit_mle_restricted(&[])
    }

    /// Maximize with the listed coordinates pinned to zero.
    pub fn fit_mle_restricted(&self, fixed_zero: &[usize]) -> Result<FitResult> {
        self.fit_with(fixed_zero, &FitOptions::default(), None)
    }

    pub fn fit_with(&self, fixed_zero: &[usize], opts: &FitOptions, warm: Option<&DVector<f64>>) -> Result<FitResult> {
        if self.y.iter().all(|&v| v == 0.0) {
            return Err(invalid("response is identically zero"));
        }
        let mut free = vec![true; self.k()];
        for &i in fixed_zero {
            if i >= self.k() {
                return Err(invalid(format!("group index {i} out of range")));
            }
            free[i] = false;
        }
        fit(&self.engine, &self.stats, self.sigma2, self.intercept, &free, opts, warm)
    }

    fn check_len(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.k() {
            return Err(Error::DimensionMismatch(format!("theta has {} entries for {} groups", theta.len(), self.k())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{make_hat, GTheta, HatKind};
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, &[1]);
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng))
    }

    fn vecn(n: usize, seed: u64) -> DVector<f64> {
        gaussian(n, 1, seed).column(0).into_owned()
    }

    fn hats(n: usize, sizes: &[usize], seed: u64) -> Vec<HatOperator> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &m)| make_hat(&gaussian(n, m, seed + 100 * i as u64), HatKind::LeastSquares).unwrap())
            .collect()
    }

    #[test]
    fn loglik_at_zero() {
        let y = vecn(20, 1);
        let pl = PrototypeLikelihood::new(hats(20, &[3, 2], 2), y.clone(), 2.0, false).unwrap();
        let l = pl.loglik(&DVector::zeros(2), 0.0).unwrap();
        assert!((l + y.norm_squared() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_direct_evaluation() {
        let y = vecn(25, 3);
        let hs = hats(25, &[3, 2, 4], 4);
        let pl = PrototypeLikelihood::new(hs.clone(), y.clone(), 1.5, true).unwrap();
        let theta = DVector::from_vec(vec![0.3, -0.5, 0.2]);
        let g = GTheta::new(&theta, &hs).unwrap();
        let gd = g.dense();
        let ld = gd.clone().cholesky().unwrap().determinant().ln();
        let resid = &gd * &y - DVector::from_element(25, 0.7);
        let direct = ld - resid.norm_squared() / 3.0;
        assert!((pl.loglik(&theta, 0.7).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn single_group_expansion() {
        let y = vecn(30, 5);
        let hs = hats(30, &[4], 6);
        let q = hs[0].quad(&y);
        let pl = PrototypeLikelihood::new(hs, y.clone(), 1.0, false).unwrap();
        for &t in &[-1.5, -0.2, 0.4, 0.9] {
            let expect = 4.0 * (1.0f64 - t).ln() - y.norm_squared() / 2.0 + q / 2.0 * (2.0 * t - t * t);
            let got = pl.loglik(&DVector::from_element(1, t), 0.0).unwrap();
            assert!((got - expect).abs() < 1e-10);
        }
    }

    /// Two unit columns with `x_k^T y = rho_k`, `x_1^T x_2 = xi`, sigma^2 = 1.
    fn two_column_case(rho1: f64, rho2: f64, xi: f64) -> (Vec<HatOperator>, DVector<f64>) {
        let n = 6;
        let mut x1 = DVector::zeros(n);
        x1[0] = 1.0;
        let mut x2 = DVector::zeros(n);
        x2[0] = xi;
        x2[1] = (1.0 - xi * xi).sqrt();
        // y = a x1 + b e2 + rest, solve for inner products.
        let a = rho1;
        let b = (rho2 - xi * rho1) / (1.0 - xi * xi).sqrt();
        let mut y = DVector::zeros(n);
        y[0] = a;
        y[1] = b;
        y[2] = 1.3;
        y[3] = -0.4;
        let hs = vec![
            HatOperator::projection(DMatrix::from_columns(&[x1]), HatKind::LeastSquares),
            HatOperator::projection(DMatrix::from_columns(&[x2]), HatKind::LeastSquares),
        ];
        (hs, y)
    }

    fn closed_form_loglik(theta: &DVector<f64>, rho1: f64, rho2: f64, xi: f64, y: &DVector<f64>) -> f64 {
        let (t1, t2) = (theta[0], theta[1]);
        let disc = ((t1 - t2).powi(2) + 4.0 * xi * xi * t1 * t2).sqrt();
        let pen = (1.0 - (t1 + t2 + disc) / 2.0).ln() + (1.0 - (t1 + t2 - disc) / 2.0).ln();
        let q = DMatrix::from_row_slice(2, 2, &[rho1 * rho1, rho1 * rho2 * xi, rho1 * rho2 * xi, rho2 * rho2]);
        let c = DVector::from_vec(vec![
            (1.0 - rho2 * xi / rho1) / (1.0 - xi * xi),
            (1.0 - rho1 * xi / rho2) / (1.0 - xi * xi),
        ]);
        let d = theta - &c;
        // constant k: value of the quadratic part at its minimum c.
        let k = -0.5 * (y.norm_squared() - c.dot(&(&q * &c)));
        pen - 0.5 * d.dot(&(&q * &d)) + k
    }

    #[test]
    fn two_rank_one_groups_closed_form() {
        let (rho1, rho2, xi) = (0.5, 0.3, 0.25);
        let (hs, y) = two_column_case(rho1, rho2, xi);
        let pl = PrototypeLikelihood::new(hs, y.clone(), 1.0, false).unwrap();
        for th in [[0.2, -0.3], [-1.0, 0.5], [0.6, 0.1]] {
            let theta = DVector::from_row_slice(&th);
            let a = pl.loglik(&theta, 0.0).unwrap();
            let b = closed_form_loglik(&theta, rho1, rho2, xi, &y);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let y = vecn(30, 7) * 2.0;
        let pl = PrototypeLikelihood::new(hats(30, &[3, 2, 2], 8), y, 1.3, true).unwrap();
        let theta = DVector::from_vec(vec![0.2, -0.4, 0.35]);
        let (g, h) = pl.grad_hess(&theta).unwrap();
        let eps = 1e-5;
        for k in 0..3 {
            let mut tp = theta.clone();
            tp[k] += eps;
            let mut tm = theta.clone();
            tm[k] -= eps;
            let fd = -(pl.loglik_profiled(&tp).unwrap() - pl.loglik_profiled(&tm).unwrap()) / (2.0 * eps);
            assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0));
            let (gp, _) = pl.grad_hess(&tp).unwrap();
            let (gm, _) = pl.grad_hess(&tm).unwrap();
            let col = (gp - gm) / (2.0 * eps);
            for l in 0..3 {
                assert!((col[l] - h[(l, k)]).abs() <= 1e-5 * h[(l, k)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradient_at_zero() {
        let y = vecn(20, 9);
        let hs = hats(20, &[3, 2], 10);
        let pl = PrototypeLikelihood::new(hs.clone(), y.clone(), 1.0, false).unwrap();
        let (g, h) = pl.grad_hess(&DVector::zeros(2)).unwrap();
        for k in 0..2 {
            let yk = hs[k].apply(&y);
            assert!((g[k] - (-yk.dot(&y) + hs[k].rank() as f64)).abs() < 1e-10);
        }
        let t01 = (hs[0].dense() * hs[1].dense()).trace();
        let y0 = hs[0].apply(&y);
        let y1 = hs[1].apply(&y);
        assert!((h[(0, 1)] - (y0.dot(&y1) + t01)).abs() < 1e-10);
    }

    #[test]
    fn single_group_closed_form_fit() {
        let y = vecn(40, 11) * 1.7;
        let hs = hats(40, &[5], 12);
        let q = hs[0].quad(&y);
        let sigma2 = 0.9;
        let pl = PrototypeLikelihood::new(hs, y, sigma2, false).unwrap();
        let fit = pl.fit_mle().unwrap();
        let expect = 1.0 - (5.0 * sigma2 / q).sqrt();
        assert!(fit.converged);
        assert!((fit.theta_hat[0] - expect).abs() < 1e-8);
        let (g, _) = pl.grad_hess(&DVector::from_element(1, expect)).unwrap();
        assert!(g[0].abs() < 1e-9);
    }

    #[test]
    fn null_point_fit() {
        // y^T H y = M sigma^2 gives theta = 0.
        let hs = hats(20, &[3], 13);
        let u = hs[0].basis().column(0).into_owned();
        let y = u * 3f64.sqrt();
        let pl = PrototypeLikelihood::new(hs, y, 1.0, false).unwrap();
        let fit = pl.fit_mle().unwrap();
        assert!(fit.theta_hat[0].abs() < 1e-8);
    }

    #[test]
    fn orthogonal_groups_separate() {
        let n = 30;
        let q = gaussian(n, 5, 14).qr().q();
        let h1 = HatOperator::projection(q.columns(0, 2).into_owned(), HatKind::LeastSquares);
        let h2 = HatOperator::projection(q.columns(2, 3).into_owned(), HatKind::LeastSquares);
        let y = vecn(n, 15) * 1.5;
        let pl = PrototypeLikelihood::new(vec![h1.clone(), h2.clone()], y.clone(), 1.0, false).unwrap();
        let fit = pl.fit_mle().unwrap();
        assert!(fit.converged);
        for (k, h) in [h1, h2].iter().enumerate() {
            let expect = 1.0 - (h.rank() as f64 / h.quad(&y)).sqrt();
            assert!((fit.theta_hat[k] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn response_orthogonal_to_all_groups() {
        let n = 20;
        let q = gaussian(n, 4, 16).qr().q();
        let h1 = HatOperator::projection(q.columns(0, 1).into_owned(), HatKind::LeastSquares);
        let h2 = HatOperator::projection(q.columns(1, 2).into_owned(), HatKind::LeastSquares);
        let y = q.column(3).into_owned();
        let pl = PrototypeLikelihood::new(vec![h1, h2], y, 1.0, false).unwrap();
        let fit = pl.fit_mle().unwrap();
        assert!(fit.converged);
        assert!(fit.gradient_norm_final < 1e-8);
        assert!(fit.theta_hat.iter().all(|&t| t < 0.0));
        // Per coordinate the objective is -M log(1 - t): a golden-section search
        // on any bounded interval runs to its left end.
        let f = |t: f64| -2.0 * (1.0 - t).ln();
        let (mut a, mut b) = (-50.0, 0.99);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        assert!((a + 50.0).abs() < 1e-6);
    }

    #[test]
    fn restricted_fits() {
        let y = vecn(30, 17) * 1.5;
        let pl = PrototypeLikelihood::new(hats(30, &[3, 2], 18), y, 1.0, true).unwrap();
        let all = pl.fit_mle_restricted(&[0, 1]).unwrap();
        assert_eq!(all.theta_hat, DVector::zeros(2));
        assert!((all.loglik_at_opt - pl.loglik_profiled(&DVector::zeros(2)).unwrap()).abs() < 1e-12);
        let none = pl.fit_mle_restricted(&[]).unwrap();
        let full = pl.fit_mle().unwrap();
        assert_eq!(none, full);
        let one = pl.fit_mle_restricted(&[0]).unwrap();
        assert_eq!(one.theta_hat[0], 0.0);
        assert!(full.loglik_at_opt >= one.loglik_at_opt - 1e-10);
        // 1-D Newton on theta_2 alone.
        let mut t: f64 = 0.0;
        for _ in 0..100 {
            let th = DVector::from_vec(vec![0.0, t]);
            let (g, h) = pl.grad_hess(&th).unwrap();
            t -= g[1] / h[(1, 1)];
        }
        assert!((one.theta_hat[1] - t).abs() < 1e-8);
    }

    #[test]
    fn profiled_mu_centres_residual() {
        let y = vecn(25, 19).add_scalar(2.0);
        let hs = hats(25, &[2, 2], 20);
        let pl = PrototypeLikelihood::new(hs.clone(), y.clone(), 1.0, true).unwrap();
        let fit = pl.fit_mle().unwrap();
        let g = GTheta::new(&fit.theta_hat, &hs).unwrap();
        let r = g.apply(&y).add_scalar(-fit.mu_hat);
        assert!(r.sum().abs() < 1e-10);
    }

    #[test]
    fn stats_from_coords_match_direct() {
        let y = vecn(30, 21);
        let hs: Vec<HatOperator> = (0..3)
            .map(|i| make_hat(&gaussian(30, 3, 40 + i), HatKind::Ridge { lambda: 1.0 }).unwrap())
            .collect();
        let basis = StackedBasis::new(&hs);
        let a = QuadraticStats::from_response(&hs, &y);
        let b = QuadraticStats::from_basis(&basis, &y);
        assert!((a.gram - b.gram).norm() < 1e-10);
        assert!((a.cross - b.cross).norm() < 1e-10);
        assert!((a.sum_yhat - b.sum_yhat).norm() < 1e-10);
    }

    #[test]
    fn inverse_strategies_give_same_fit() {
        let y = vecn(30, 22) * 1.4;
        let hs = hats(30, &[2, 3], 23);
        let fits: Vec<FitResult> = [InverseStrategy::Gram, InverseStrategy::ShermanMorrison, InverseStrategy::Dense]
            .iter()
            .map(|&s| {
                PrototypeLikelihood::with_strategy(hs.clone(), y.clone(), 1.0, false, s)
                    .unwrap()
                    .fit_mle()
                    .unwrap()
            })
            .collect();
        for f in &fits[1..] {
            assert!((&f.theta_hat - &fits[0].theta_hat).norm() < 1e-8);
        }
    }
}
