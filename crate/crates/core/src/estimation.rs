//! Prediction with the prototype model and the competing estimators used in the
//! estimation study.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::{generate_design, prototype_response, thread_pool};
use crate::likelihood::{FitResult, PrototypeLikelihood};
use crate::linalg::{make_hat, GTheta, GroupedDesign, HatKind, HatOperator};
use crate::rng;
use crate::selection::lasso_cd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    LpmlM,
    LpmlL,
    Lsl,
    LslO,
    Opml,
    SopmlM,
    SopmlL,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::LpmlM,
        EstimatorKind::LpmlL,
        EstimatorKind::Lsl,
        EstimatorKind::LslO,
        EstimatorKind::Opml,
        EstimatorKind::SopmlM,
        EstimatorKind::SopmlL,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            EstimatorKind::LpmlM => "LPML-M",
            EstimatorKind::LpmlL => "LPML-L",
            EstimatorKind::Lsl => "LSL",
            EstimatorKind::LslO => "LSL-O",
            EstimatorKind::Opml => "OPML",
            EstimatorKind::SopmlM => "SOPML-M",
            EstimatorKind::SopmlL => "SOPML-L",
        }
    }

    pub fn needs_oracle(&self) -> bool {
        !matches!(self, EstimatorKind::LpmlM | EstimatorKind::LpmlL | EstimatorKind::Lsl)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| invalid(format!("unknown estimator '{s}'")))
    }
}

/// Penalized fit `min ||y - Yhat theta - mu 1||^2 / (2 sigma^2) - log|G(theta)|`.
pub fn fit_prototype_penalized(hats: Vec<HatOperator>, y: &DVector<f64>, sigma2: f64, with_intercept: bool) -> Result<FitResult> {
    PrototypeLikelihood::new(hats, y.clone(), sigma2, with_intercept)?.fit_mle()
}

/// `mu G(theta)^{-1} 1`.
pub fn mean_prediction(hats: &[HatOperator], theta: &DVector<f64>, mu: f64, n: usize) -> Result<DVector<f64>> {
    if hats.is_empty() {
        return Ok(DVector::from_element(n, mu));
    }
    let g = GTheta::new(theta, hats)?.dense();
    let ones = DVector::from_element(n, mu);
    g.cholesky()
        .map(|c| c.solve(&ones))
        .ok_or(Error::InfeasibleTheta { min_eigenvalue: f64::NAN })
}

/// `mu 1 + sum_k theta_k H_k y`.
pub fn linear_prediction(hats: &[HatOperator], theta: &DVector<f64>, mu: f64, y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::from_element(y.len(), mu);
    for (k, h) in hats.iter().enumerate() {
        out += h.apply(y) * theta[k];
    }
    out
}

/// Least-squares fit with intercept on the given columns.
pub fn least_squares_prediction(x: &DMatrix<f64>, support: &[usize], y: &DVector<f64>) -> Result<DVector<f64>> {
    let ybar = y.mean();
    let yc = y.add_scalar(-ybar);
    let mut out = DVector::from_element(y.len(), ybar);
    if !support.is_empty() {
        let mut xs = x.select_columns(support);
        for mut c in xs.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        out += make_hat(&xs, HatKind::LeastSquares)?.apply(&yc);
    }
    Ok(out)
}

/// Lasso penalty chosen by K-fold cross-validation (plain minimum CV error).
#[derive(Debug, Clone, PartialEq)]
pub struct CvLasso {
    pub lambda: f64,
    pub support: Vec<usize>,
    pub cv_error: Vec<f64>,
    pub lambdas: Vec<f64>,
}

fn centre(x: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let means = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
    let mut xc = x.clone();
    for (j, mut c) in xc.column_iter_mut().enumerate() {
        c.add_scalar_mut(-means[j]);
    }
    let ybar = y.mean();
    (xc, y.add_scalar(-ybar), means, ybar)
}

pub fn cv_lasso(x: &DMatrix<f64>, y: &DVector<f64>, folds: usize, n_lambda: usize, seed: u64) -> Result<CvLasso> {
    let n = y.len();
    if folds < 2 || folds > n {
        return Err(invalid(format!("need 2 <= folds <= n, got {folds}")));
    }
    let (xc, yc, _, _) = centre(x, y);
    let lmax = xc.tr_mul(&yc).amax();
    if !(lmax > 0.0) {
        return Ok(CvLasso {
            lambda: 0.0,
            support: Vec::new(),
            cv_error: Vec::new(),
            lambdas: Vec::new(),
        });
    }
    let ratio: f64 = if n > x.ncols() { 1e-4 } else { 1e-2 };
    let lambdas: Vec<f64> = (0..n_lambda)
        .map(|i| lmax * ratio.powf(i as f64 / (n_lambda - 1).max(1) as f64))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("cv-folds")]));
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut cv_error = vec![0.0; lambdas.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let xt = x.select_rows(&train);
        let yt = y.select_rows(&train);
        let (xtc, ytc, means, ybar) = centre(&xt, &yt);
        let xv = x.select_rows(&test);
        let yv = y.select_rows(&test);
        let mut beta: Option<DVector<f64>> = None;
        for (l, &lam) in lambdas.iter().enumerate() {
            let b = lasso_cd(&xtc, &ytc, lam, beta.as_ref());
            let intercept = ybar - means.dot(&b);
            let pred = (&xv * &b).add_scalar(intercept);
            cv_error[l] += (&yv - pred).norm_squared();
            beta = Some(b);
        }
    }
    for e in cv_error.iter_mut() {
        *e /= n as f64;
    }
    let best = (0..lambdas.len())
        .min_by(|&a, &b| cv_error[a].total_cmp(&cv_error[b]))
        .expect("non-empty grid");
    let lambda = lambdas[best];
    let beta = lasso_cd(&xc, &yc, lambda, None);
    let support = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    Ok(CvLasso {
        lambda,
        support,
        cv_error,
        lambdas,
    })
}

/// Known truth handed to the oracle estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    /// Non-null columns of each group (local indices).
    pub supports: Vec<Vec<usize>>,
    pub theta: DVector<f64>,
    pub mu: f64,
}

/// Hats of the non-empty column sets, with the group index each belongs to.
fn hats_for(design: &GroupedDesign, supports: &[Vec<usize>]) -> Result<(Vec<HatOperator>, Vec<usize>)> {
    let mut hats = Vec::new();
    let mut idx = Vec::new();
    for (k, s) in supports.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        let cols: Vec<usize> = s.iter().map(|&j| design.group(k)[j]).collect();
        hats.push(make_hat(&design.columns(&cols), HatKind::LeastSquares)?);
        idx.push(k);
    }
    Ok((hats, idx))
}

#[derive(Debug, Clone)]
pub struct EstimationSettings {
    pub sigma2: f64,
    pub folds: usize,
    pub n_lambda: usize,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            folds: 10,
            n_lambda: 100,
        }
    }
}

/// Predictions of every requested estimator from one training response.
pub fn predict_all(
    kinds: &[EstimatorKind],
    design: &GroupedDesign,
    y_train: &DVector<f64>,
    oracle: Option<&Oracle>,
    settings: &EstimationSettings,
    seed: u64,
) -> Result<Vec<(EstimatorKind, DVector<f64>)>> {
    let n = y_train.len();
    let sigma2 = settings.sigma2;
    let need = |k: EstimatorKind| kinds.contains(&k);
    let oracle_ref = || oracle.ok_or_else(|| invalid("oracle estimators need oracle inputs"));
    let mut out = Vec::new();

    if need(EstimatorKind::LpmlM) || need(EstimatorKind::LpmlL) {
        let supports = (0..design.k())
            .map(|k| cv_lasso(&design.group_matrix(k), y_train, settings.folds, settings.n_lambda, rng::derive_seed(seed, &[k as u64])).map(|c| c.support))
            .collect::<Result<Vec<_>>>()?;
        let (hats, _) = hats_for(design, &supports)?;
        let (theta, mu) = if hats.is_empty() {
            (DVector::zeros(0), y_train.mean())
        } else {
            let f = fit_prototype_penalized(hats.clone(), y_train, sigma2, true)?;
            (f.theta_hat, f.mu_hat)
        };
        if need(EstimatorKind::LpmlM) {
            out.push((EstimatorKind::LpmlM, mean_prediction(&hats, &theta, mu, n)?));
        }
        if need(EstimatorKind::LpmlL) {
            out.push((EstimatorKind::LpmlL, linear_prediction(&hats, &theta, mu, y_train)));
        }
    }
    if need(EstimatorKind::Lsl) {
        let cv = cv_lasso(design.x(), y_train, settings.folds, settings.n_lambda, rng::derive_seed(seed, &[rng::tag("lsl")]))?;
        out.push((EstimatorKind::Lsl, least_squares_prediction(design.x(), &cv.support, y_train)?));
    }
    if need(EstimatorKind::LslO) {
        let o = oracle_ref()?;
        let cols: Vec<usize> = o
            .supports
            .iter()
            .enumerate()
            .flat_map(|(k, s)| s.iter().map(move |&j| design.group(k)[j]))
            .collect();
        out.push((EstimatorKind::LslO, least_squares_prediction(design.x(), &cols, y_train)?));
    }
    if need(EstimatorKind::Opml) {
        let o = oracle_ref()?;
        let (hats, _) = hats_for(design, &o.supports)?;
        let f = fit_prototype_penalized(hats.clone(), y_train, sigma2, true)?;
        out.push((EstimatorKind::Opml, linear_prediction(&hats, &f.theta_hat, f.mu_hat, y_train)));
    }
    if need(EstimatorKind::SopmlM) || need(EstimatorKind::SopmlL) {
        let o = oracle_ref()?;
        let (hats, idx) = hats_for(design, &o.supports)?;
        let theta = DVector::from_iterator(idx.len(), idx.iter().map(|&k| o.theta[k]));
        if need(EstimatorKind::SopmlM) {
            out.push((EstimatorKind::SopmlM, mean_prediction(&hats, &theta, o.mu, n)?));
        }
        if need(EstimatorKind::SopmlL) {
            out.push((EstimatorKind::SopmlL, linear_prediction(&hats, &theta, o.mu, y_train)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sparsity {
    /// First three columns of every group.
    Equal,
    /// First 10, 5, 5 and 3 columns.
    Unequal,
}

impl Sparsity {
    pub fn supports(&self, k: usize) -> Vec<Vec<usize>> {
        let sizes: Vec<usize> = match self {
            Sparsity::Equal => vec![3; k],
            Sparsity::Unequal => [10, 5, 5, 3].iter().copied().cycle().take(k).collect(),
        };
        sizes.into_iter().map(|s| (0..s).collect()).collect()
    }

    pub fn label(&self) -> &'static str {
        match self {
            Sparsity::Equal => "equal",
            Sparsity::Unequal => "unequal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationCell {
    pub sparsity: Sparsity,
    pub theta: Vec<f64>,
    pub mu: f64,
    pub rho: f64,
}

impl EstimationCell {
    /// Full grid: two sparsity patterns, five theta vectors, two mu, two rho.
    pub fn grid() -> Vec<Self> {
        let thetas: [[f64; 4]; 5] = [
            [0.0; 4],
            [0.2; 4],
            [0.4; 4],
            [0.0, 0.0, 0.2, 0.5],
            [0.5, 0.2, 0.0, 0.0],
        ];
        let mut cells = Vec::new();
        for sparsity in [Sparsity::Equal, Sparsity::Unequal] {
            for t in &thetas {
                for mu in [0.0, 2.0] {
                    for rho in [0.0, 0.3] {
                        cells.push(Self {
                            sparsity,
                            theta: t.to_vec(),
                            mu,
                            rho,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub n: usize,
    pub k: usize,
    pub group_size: usize,
    pub replications: usize,
    pub sigma2: f64,
    pub folds: usize,
    pub n_lambda: usize,
    pub seed: u64,
    pub cells: Vec<EstimationCell>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            n: 100,
            k: 4,
            group_size: 25,
            replications: 120,
            sigma2: 1.0,
            folds: 10,
            n_lambda: 100,
            seed: 2017,
            cells: EstimationCell::grid(),
        }
    }
}

/// Test MSE of every estimator over the replications of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: EstimationCell,
    /// `mse[e][b]` for estimator `EstimatorKind::ALL[e]`, replication `b`.
    pub mse: Vec<Vec<f64>>,
    /// Mean over replications of `MSE_e / MSE_LPML-M`.
    pub mean_ratio: Vec<f64>,
    pub median_ratio: Vec<f64>,
    pub failures: usize,
}

impl CellResult {
    pub fn ratio(&self, kind: EstimatorKind) -> f64 {
        self.mean_ratio[EstimatorKind::ALL.iter().position(|&k| k == kind).expect("listed")]
    }
}

fn run_cell(cfg: &EstimationConfig, ci: usize, cell: &EstimationCell) -> Result<CellResult> {
    let sizes = vec![cfg.group_size; cfg.k];
    let design = generate_design(cfg.n, &sizes, cell.rho, rng::derive_seed(cfg.seed, &[ci as u64, rng::tag("design")]))?;
    let oracle = Oracle {
        supports: cell.sparsity.supports(cfg.k),
        theta: DVector::from_vec(cell.theta.clone()),
        mu: cell.mu,
    };
    let (hats, idx) = hats_for(&design, &oracle.supports)?;
    let theta_true = DVector::from_iterator(idx.len(), idx.iter().map(|&k| oracle.theta[k]));
    let settings = EstimationSettings {
        sigma2: cfg.sigma2,
        folds: cfg.folds,
        n_lambda: cfg.n_lambda,
    };
    let pool = thread_pool()?;
    let reps: Vec<Option<Vec<f64>>> = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|b| {
                let seed = rng::derive_seed(cfg.seed, &[ci as u64, b as u64]);
                let y_train = prototype_response(&hats, &theta_true, cell.mu, cfg.sigma2, rng::derive_seed(seed, &[1])).ok()?;
                let y_test = prototype_response(&hats, &theta_true, cell.mu, cfg.sigma2, rng::derive_seed(seed, &[2])).ok()?;
                let preds = predict_all(&EstimatorKind::ALL, &design, &y_train, Some(&oracle), &settings, seed).ok()?;
                Some(preds.iter().map(|(_, p)| (&y_test - p).norm_squared() / cfg.n as f64).collect())
            })
            .collect()
    });
    let ok: Vec<&Vec<f64>> = reps.iter().flatten().collect();
    let failures = reps.len() - ok.len();
    let ne = EstimatorKind::ALL.len();
    let mse: Vec<Vec<f64>> = (0..ne).map(|e| ok.iter().map(|r| r[e]).collect()).collect();
    let ratios: Vec<Vec<f64>> = (0..ne).map(|e| ok.iter().map(|r| r[e] / r[0]).collect()).collect();
    let mean_ratio = ratios.iter().map(|r| crate::stats::mean(r)).collect();
    let median_ratio = ratios
        .iter()
        .map(|r| {
            let mut v = r.clone();
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                f64::NAN
            } else if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            }
        })
        .collect();
    Ok(CellResult {
        cell: cell.clone(),
        mse,
        mean_ratio,
        median_ratio,
        failures,
    })
}

pub fn run_estimation_experiment(cfg: &EstimationConfig) -> Result<Vec<CellResult>> {
    cfg.cells.iter().enumerate().map(|(ci, cell)| run_cell(cfg, ci, cell)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: DVector<f64>) -> DVector<f64> {
        let n = v.norm();
        v / n
    }

    /// Two unit columns with `x1^T x2 = xi` and `x_k^T y = rho_k`.
    fn two_column_setup(xi: f64, r1: f64, r2: f64) -> (Vec<HatOperator>, DVector<f64>, DMatrix<f64>) {
        let n = 6;
        let e = |i: usize| DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 });
        let x1 = e(0);
        let x2 = unit(e(0) * xi + e(1) * (1.0 - xi * xi).sqrt());
        // Solve for the part of y in span(x1, x2), then add an orthogonal component.
        let x = DMatrix::from_columns(&[x1.clone(), x2.clone()]);
        let coef = x.tr_mul(&x).lu().solve(&DVector::from_vec(vec![r1, r2])).unwrap();
        let y = &x * coef + e(3) * 1.5;
        let hats = vec![
            make_hat(&DMatrix::from_columns(&[x1]), HatKind::LeastSquares).unwrap(),
            make_hat(&DMatrix::from_columns(&[x2]), HatKind::LeastSquares).unwrap(),
        ];
        (hats, y, x)
    }

    #[test]
    fn grid_search_oracle() {
        let (hats, y, _) = two_column_setup(0.0, 0.4, 0.4);
        let fit = fit_prototype_penalized(hats.clone(), &y, 1.0, false).unwrap();
        let pl = PrototypeLikelihood::new(hats, y, 1.0, false).unwrap();
        let (mut best, mut arg) = (f64::NEG_INFINITY, (0.0, 0.0));
        let (mut centre, mut half) = ((0.0, 0.0), 5.0);
        // Zoom: scan a 41 x 41 grid, recentre on its maximum, shrink the window.
        while half > 1e-6 {
            let step = half / 20.0;
            for i in -20..=20 {
                for j in -20..=20 {
                    let t = DVector::from_vec(vec![centre.0 + i as f64 * step, centre.1 + j as f64 * step]);
                    if let Ok(v) = pl.loglik(&t, 0.0) {
                        if v > best {
                            best = v;
                            arg = (t[0], t[1]);
                        }
                    }
                }
            }
            centre = arg;
            half *= 0.25;
        }
        assert!((fit.theta_hat[0] - arg.0).abs() < 1e-4, "{} vs {}", fit.theta_hat[0], arg.0);
        assert!((fit.theta_hat[1] - arg.1).abs() < 1e-4);
    }

    #[test]
    fn fit_is_shrunk_from_least_squares_point() {
        for (xi, r1, r2) in [(0.25, 0.4, 0.4), (0.5, 0.5, 0.3), (0.0, 0.5, 0.3)] {
            let (hats, y, x) = two_column_setup(xi, r1, r2);
            let fit = fit_prototype_penalized(hats, &y, 1.0, false).unwrap();
            let c = DVector::from_vec(vec![(1.0 - r2 * xi / r1) / (1.0 - xi * xi), (1.0 - r1 * xi / r2) / (1.0 - xi * xi)]);
            assert!(fit.theta_hat[0] < c[0] && fit.theta_hat[1] < c[1]);
            // c_k rho_k reproduces the least-squares coefficients.
            let beta = x.tr_mul(&x).lu().solve(&x.tr_mul(&y)).unwrap();
            assert!((c[0] * r1 - beta[0]).abs() < 1e-12);
            assert!((c[1] * r2 - beta[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn first_order_conditions_hold() {
        for (xi, r1, r2) in [(0.25, 0.4, 0.4), (0.75, 0.5, 0.3)] {
            let (hats, y, _) = two_column_setup(xi, r1, r2);
            let pl = PrototypeLikelihood::new(hats, y, 1.0, false).unwrap();
            let fit = pl.fit_mle().unwrap();
            let (g, _) = pl.grad_hess(&fit.theta_hat).unwrap();
            assert!(g.amax() < 1e-8);
        }
    }

    #[test]
    fn penalty_is_convex_along_segments() {
        let design = generate_design(30, &[5, 5, 5], 0.3, 3).unwrap();
        let hats: Vec<HatOperator> = (0..3)
            .map(|k| make_hat(&design.group_matrix(k).columns(0, 2).into_owned(), HatKind::LeastSquares).unwrap())
            .collect();
        let engine = crate::linalg::LogDetEngine::new(hats, Default::default()).unwrap();
        let mut r = rng::stream(4, &[]);
        let mut checked = 0;
        while checked < 200 {
            let a = DVector::from_fn(3, |_, _| 2.0 * rng::open_unit(&mut r) - 1.5);
            let b = DVector::from_fn(3, |_, _| 2.0 * rng::open_unit(&mut r) - 1.5);
            let (Ok(fa), Ok(fb)) = (engine.log_det(&a), engine.log_det(&b)) else { continue };
            let fm = engine.log_det(&((&a + &b) * 0.5)).unwrap();
            assert!(-fm <= -(fa + fb) / 2.0 + 1e-10);
            checked += 1;
        }
    }

    #[test]
    fn zero_theta_predictions_are_constant() {
        let design = generate_design(20, &[4, 4], 0.0, 5).unwrap();
        let hats = vec![make_hat(&design.group_matrix(0), HatKind::LeastSquares).unwrap()];
        let y = DVector::from_fn(20, |i, _| i as f64);
        let t = DVector::zeros(1);
        assert!((mean_prediction(&hats, &t, 1.7, 20).unwrap().add_scalar(-1.7)).amax() < 1e-12);
        assert!((linear_prediction(&hats, &t, 1.7, &y).add_scalar(-1.7)).amax() < 1e-12);
    }

    #[test]
    fn super_oracle_mean_is_plug_in() {
        let design = generate_design(15, &[3, 3], 0.0, 6).unwrap();
        let oracle = Oracle {
            supports: vec![vec![0, 1], vec![0]],
            theta: DVector::from_vec(vec![0.3, -0.5]),
            mu: 1.5,
        };
        let y = DVector::from_element(15, 0.1);
        let p = predict_all(&[EstimatorKind::SopmlM], &design, &y, Some(&oracle), &EstimationSettings::default(), 1).unwrap();
        let (hats, _) = hats_for(&design, &oracle.supports).unwrap();
        let g = GTheta::new(&oracle.theta, &hats).unwrap().dense();
        let direct = g.lu().solve(&DVector::from_element(15, 1.5)).unwrap();
        assert!((&p[0].1 - direct).amax() < 1e-12);
    }

    #[test]
    fn lpml_prediction_is_reproducible_from_fit() {
        let design = generate_design(40, &[6, 6], 0.0, 7).unwrap();
        let (hats, _) = hats_for(&design, &[vec![0, 1], vec![0]]).unwrap();
        let y = prototype_response(&hats, &DVector::from_vec(vec![0.4, 0.4]), 1.0, 1.0, 8).unwrap();
        let s = EstimationSettings::default();
        let a = predict_all(&[EstimatorKind::LpmlM], &design, &y, None, &s, 9).unwrap();
        let b = predict_all(&[EstimatorKind::LpmlM], &design, &y, None, &s, 9).unwrap();
        assert_eq!(a[0].1, b[0].1);
    }

    #[test]
    fn cv_lasso_finds_strong_support() {
        let design = generate_design(100, &[20], 0.0, 10).unwrap();
        let x = design.x();
        let mut y = x.column(0) * 8.0 + x.column(3) * 6.0;
        let mut r = rng::stream(11, &[]);
        y += DVector::from_fn(100, |_, _| 0.3 * rng::normal(&mut r));
        let cv = cv_lasso(x, &y, 10, 50, 12).unwrap();
        assert!(cv.support.contains(&0) && cv.support.contains(&3));
        let again = cv_lasso(x, &y, 10, 50, 12).unwrap();
        assert_eq!(cv, again);
    }

    #[test]
    fn oracle_estimators_require_oracle() {
        let design = generate_design(20, &[4], 0.0, 13).unwrap();
        let y = DVector::from_element(20, 1.0);
        assert!(predict_all(&[EstimatorKind::Opml], &design, &y, None, &EstimationSettings::default(), 1).is_err());
        for k in EstimatorKind::ALL {
            assert_eq!(k.tag().parse::<EstimatorKind>().unwrap(), k);
        }
    }

    #[test]
    fn grid_has_forty_cells() {
        assert_eq!(EstimationCell::grid().len(), 40);
    }
}
