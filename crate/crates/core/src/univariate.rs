//! Tests of `H0: theta_1 = 0` for a single group in the univariate model
//! `y = mu + theta_1 H y + eps`.
//!
//! Selective methods condition on the lasso event of the group (or the
//! marginal-screening event for the protolasso test). Sampled references share
//! a single hit-and-run chain per response: every sampled method is evaluated on
//! the same draws from `N(0, sigma^2 I)` restricted to the event.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{chi2_sf, f_sf, t_two_sided};
use crate::error::{invalid, Error, Result};
use crate::likelihood::PrototypeLikelihood;
use crate::linalg::{make_hat, HatKind, HatOperator};
use crate::sampler::{hit_and_run_for_each, ConstrainedGaussian, HitAndRunConfig};
use crate::selection::{lasso_event, lasso_fixed_lambda, marginal_screen_event, LassoSelection, SelectionEvent};
use crate::truncation::{alr_exact_pvalue, elr_chi1_pvalue, norm_bounds, protolasso_pvalue, truncated_f_pvalue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UniMethod {
    ElrHr,
    ElrChi,
    AlrHr,
    AlrExact,
    Pt,
    F,
    FHr,
    LrAll,
    LrOr,
    TMean,
    TPc,
    /// Classical F test on the full group projection.
    FClassic,
    /// Likelihood ratio with a ridge prototype and `chi2_1` reference.
    LrRidge,
}

impl UniMethod {
    pub const ALL: [UniMethod; 13] = [
        UniMethod::ElrHr,
        UniMethod::ElrChi,
        UniMethod::AlrHr,
        UniMethod::AlrExact,
        UniMethod::Pt,
        UniMethod::F,
        UniMethod::FHr,
        UniMethod::LrAll,
        UniMethod::LrOr,
        UniMethod::TMean,
        UniMethod::TPc,
        UniMethod::FClassic,
        UniMethod::LrRidge,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            UniMethod::ElrHr => "ELR-HR",
            UniMethod::ElrChi => "ELR-Chi",
            UniMethod::AlrHr => "ALR-HR",
            UniMethod::AlrExact => "ALR-Exact",
            UniMethod::Pt => "PT",
            UniMethod::F => "F",
            UniMethod::FHr => "F-HR",
            UniMethod::LrAll => "LR-all",
            UniMethod::LrOr => "LR-or",
            UniMethod::TMean => "t-mean",
            UniMethod::TPc => "t-PC",
            UniMethod::FClassic => "F-classic",
            UniMethod::LrRidge => "LR-ridge",
        }
    }

    pub fn is_sampled(&self) -> bool {
        matches!(self, UniMethod::ElrHr | UniMethod::AlrHr | UniMethod::FHr)
    }

    pub fn uses_lasso(&self) -> bool {
        matches!(
            self,
            UniMethod::ElrHr | UniMethod::ElrChi | UniMethod::AlrHr | UniMethod::AlrExact | UniMethod::F | UniMethod::FHr
        )
    }
}

impl fmt::Display for UniMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for UniMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UniMethod::ALL
            .iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| invalid(format!("unknown univariate method '{s}'")))
    }
}

/// Reference distribution behind a p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reference {
    Sampled { n_samples: usize, burn_in: usize, seed: u64 },
    Analytic(String),
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub no_selection: bool,
    pub non_converged: bool,
    pub degenerate_window: bool,
}

impl Flags {
    pub fn labels(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_selection {
            v.push("no-selection");
        }
        if self.non_converged {
            v.push("non-converged");
        }
        if self.degenerate_window {
            v.push("degenerate-window");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    pub reference: Reference,
    pub flags: Flags,
    /// Number of columns in the tested prototype.
    pub selected: usize,
}

impl TestResult {
    pub(crate) fn no_selection(method: &str) -> Self {
        Self {
            method: method.to_string(),
            statistic: 0.0,
            p_value: 1.0,
            reference: Reference::None,
            flags: Flags {
                no_selection: true,
                ..Flags::default()
            },
            selected: 0,
        }
    }
}

/// `R = M log(M sigma^2) - M log q + q / sigma^2 - M` with `q = y^T H y`.
pub fn elr_from_quad(q: f64, m: usize, sigma2: f64) -> f64 {
    let mf = m as f64;
    if q <= 0.0 {
        return f64::INFINITY;
    }
    mf * (mf * sigma2 / q).ln() + q / sigma2 - mf
}

/// `((q / sigma^2 - M) / sqrt(2 M))^2`.
pub fn alr_from_quad(q: f64, m: usize, sigma2: f64) -> f64 {
    let mf = m as f64;
    let z = (q / sigma2 - mf) / (2.0 * mf).sqrt();
    z * z
}

pub fn elr_statistic(y: &DVector<f64>, h: &HatOperator, m: usize, sigma2: f64) -> Result<f64> {
    if m == 0 {
        return Err(invalid("ELR needs M >= 1"));
    }
    let q = h.quad(y);
    if q <= 1e-14 {
        return Err(Error::NonFiniteStatistic(format!("ELR with y^T H y = {q:e}")));
    }
    Ok(elr_from_quad(q, m, sigma2))
}

pub fn alr_statistic(y: &DVector<f64>, h: &HatOperator, m: usize, sigma2: f64) -> f64 {
    alr_from_quad(h.quad(y), m, sigma2)
}

/// Settings shared by the univariate roster.
#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateOptions {
    pub sigma2: f64,
    /// Fixed lasso penalty for the selective methods.
    pub lambda: Option<f64>,
    pub hr: HitAndRunConfig,
    /// Use `(1 + #exceed) / (B + 1)` instead of `#exceed / B`.
    pub smoothed_hr: bool,
    /// True support for the oracle test (local column indices).
    pub oracle_support: Option<Vec<usize>>,
    /// Ridge penalty for the ridge likelihood-ratio test.
    pub ridge_lambda: f64,
}

impl Default for UnivariateOptions {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            lambda: None,
            hr: HitAndRunConfig::default(),
            smoothed_hr: false,
            oracle_support: None,
            ridge_lambda: 10.0,
        }
    }
}

pub(crate) fn hr_pvalue(exceed: usize, b: usize, smoothed: bool) -> f64 {
    if smoothed {
        (1.0 + exceed as f64) / (1.0 + b as f64)
    } else {
        exceed as f64 / b as f64
    }
}

/// Simple-regression t test of centred `y` on centred `x`, two-sided, df `n - 1`.
pub fn t_test_through_origin(x: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    let n = y.len();
    let xc = x.add_scalar(-x.mean());
    let yc = y.add_scalar(-y.mean());
    let sxx = xc.norm_squared();
    if !(sxx > 0.0) {
        return Err(Error::NonFiniteStatistic("t test on a constant prototype".into()));
    }
    let beta = xc.dot(&yc) / sxx;
    let rss = (&yc - &xc * beta).norm_squared();
    let df = (n - 1) as f64;
    let t = beta / (rss / df / sxx).sqrt();
    if !t.is_finite() {
        return Err(Error::NonFiniteStatistic("t statistic".into()));
    }
    Ok((t, t_two_sided(t, df)))
}

/// Column mean of the group.
pub fn centroid(x: &DMatrix<f64>) -> DVector<f64> {
    x.column_mean()
}

/// First principal component scores, oriented so that the loading vector's
/// largest-magnitude entry is positive.
pub fn first_pc(x: &DMatrix<f64>) -> DVector<f64> {
    let mut xc = x.clone();
    for mut c in xc.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    let svd = xc.svd(true, true);
    let i = svd.singular_values.imax();
    let u = svd.u.expect("u requested").column(i).into_owned();
    let v = svd.v_t.expect("v requested").row(i).transpose();
    let j = v.iamax();
    let sign = if v[j] < 0.0 { -1.0 } else { 1.0 };
    u * (svd.singular_values[i] * sign)
}

/// ELR with a `chi2_1` reference for a fixed, response-independent projection.
fn classical_lr(y: &DVector<f64>, h: &HatOperator, sigma2: f64, method: UniMethod) -> Result<TestResult> {
    let m = h.rank();
    let r = elr_statistic(y, h, m, sigma2)?;
    Ok(TestResult {
        method: method.tag().into(),
        statistic: r,
        p_value: chi2_sf(r, 1.0),
        reference: Reference::Analytic("chi2_1".into()),
        flags: Flags::default(),
        selected: m,
    })
}

/// Lasso selection, event and refit hat for one group.
#[derive(Debug, Clone)]
pub struct GroupSelection {
    pub selection: LassoSelection,
    pub event: SelectionEvent,
    pub hat: Option<HatOperator>,
}

impl GroupSelection {
    pub fn fit(x_sub: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, group: usize) -> Result<Self> {
        let selection = lasso_fixed_lambda(x_sub, y, lambda, group)?;
        let event = lasso_event(&selection, x_sub, lambda)?;
        let hat = if selection.is_empty() {
            None
        } else {
            Some(make_hat(&x_sub.select_columns(&selection.active), HatKind::LassoRefit)?)
        };
        Ok(Self { selection, event, hat })
    }

    pub fn m(&self) -> usize {
        self.hat.as_ref().map_or(0, HatOperator::rank)
    }
}

/// Observed statistic of a sampled method from `q = y^T H y` and `yy = y^T y`.
fn sampled_statistic(method: UniMethod, q: f64, yy: f64, m: usize, n: usize, sigma2: f64) -> f64 {
    match method {
        UniMethod::ElrHr => elr_from_quad(q, m, sigma2),
        UniMethod::AlrHr => alr_from_quad(q, m, sigma2),
        UniMethod::FHr => (q / m as f64) / ((yy - q).max(0.0) / (n - m) as f64),
        _ => unreachable!("not a sampled method"),
    }
}

/// Run several univariate methods on one response; errors are per method.
pub fn run_univariate_roster(
    methods: &[UniMethod],
    x_sub: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &UnivariateOptions,
) -> Vec<(UniMethod, Result<TestResult>)> {
    let n = y.len();
    let sigma2 = opts.sigma2;
    let mut out: Vec<(UniMethod, Result<TestResult>)> = Vec::with_capacity(methods.len());

    let needs_lasso = methods.iter().any(UniMethod::uses_lasso);
    let selection: Option<Result<GroupSelection>> = needs_lasso.then(|| {
        let lambda = opts.lambda.ok_or_else(|| invalid("lasso-based methods need a lambda"))?;
        GroupSelection::fit(x_sub, y, lambda, 0)
    });

    // Shared chain for all sampled methods.
    let sampled: Vec<UniMethod> = methods.iter().copied().filter(UniMethod::is_sampled).collect();
    let mut sampled_results: Vec<(UniMethod, Result<TestResult>)> = Vec::new();
    if !sampled.is_empty() {
        match selection.as_ref().expect("sampled methods use the lasso") {
            Err(e) => {
                for &m in &sampled {
                    sampled_results.push((m, Err(invalid(format!("selection failed: {e}")))));
                }
            }
            Ok(sel) if sel.hat.is_none() => {
                for &m in &sampled {
                    sampled_results.push((m, Ok(TestResult::no_selection(m.tag()))));
                }
            }
            Ok(sel) => {
                let h = sel.hat.as_ref().expect("checked above");
                let m = h.rank();
                let q_obs = h.quad(y);
                let yy_obs = y.norm_squared();
                let observed: Vec<f64> = sampled.iter().map(|&s| sampled_statistic(s, q_obs, yy_obs, m, n, sigma2)).collect();
                let mut exceed = vec![0usize; sampled.len()];
                let target = ConstrainedGaussian::isotropic(DVector::zeros(n), sigma2.sqrt(), sel.event.clone());
                let basis = h.basis();
                let run = hit_and_run_for_each(&target, y, &opts.hr, |_, ys| {
                    let c = basis.tr_mul(ys);
                    let q = c.norm_squared();
                    let yy = ys.norm_squared();
                    for (i, &s) in sampled.iter().enumerate() {
                        if sampled_statistic(s, q, yy, m, n, sigma2) > observed[i] {
                            exceed[i] += 1;
                        }
                    }
                    Ok(())
                });
                for (i, &s) in sampled.iter().enumerate() {
                    let res = match &run {
                        Err(e) => Err(invalid(format!("sampler failed: {e}"))),
                        Ok(()) => Ok(TestResult {
                            method: s.tag().into(),
                            statistic: observed[i],
                            p_value: hr_pvalue(exceed[i], opts.hr.n_samples, opts.smoothed_hr),
                            reference: Reference::Sampled {
                                n_samples: opts.hr.n_samples,
                                burn_in: opts.hr.burn_in,
                                seed: opts.hr.seed,
                            },
                            flags: Flags::default(),
                            selected: m,
                        }),
                    };
                    sampled_results.push((s, res));
                }
            }
        }
    }

    for &method in methods {
        if method.is_sampled() {
            let pos = sampled_results.iter().position(|(m, _)| *m == method).expect("computed above");
            out.push(sampled_results.swap_remove(pos));
            continue;
        }
        let res = run_analytic(method, x_sub, y, opts, selection.as_ref());
        out.push((method, res));
    }
    out
}

fn run_analytic(
    method: UniMethod,
    x_sub: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &UnivariateOptions,
    selection: Option<&Result<GroupSelection>>,
) -> Result<TestResult> {
    let n = y.len();
    let sigma2 = opts.sigma2;
    let lasso = || -> Result<&GroupSelection> {
        match selection {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(invalid(format!("selection failed: {e}"))),
            None => Err(invalid("selection not computed")),
        }
    };
    match method {
        UniMethod::ElrChi | UniMethod::AlrExact | UniMethod::F => {
            let sel = lasso()?;
            let Some(h) = sel.hat.as_ref() else {
                return Ok(TestResult::no_selection(method.tag()));
            };
            let m = h.rank();
            let (statistic, tp, reference) = match method {
                UniMethod::ElrChi => {
                    let r = elr_statistic(y, h, m, sigma2)?;
                    let b = norm_bounds(&sel.event, h, y)?;
                    (r, elr_chi1_pvalue(r, &b, m, sigma2), "truncated chi2_1")
                }
                UniMethod::AlrExact => {
                    let r = alr_statistic(y, h, m, sigma2);
                    let b = norm_bounds(&sel.event, h, y)?;
                    (r, alr_exact_pvalue(r, &b, m, sigma2), "truncated chi2_M")
                }
                _ => {
                    let f = crate::truncation::f_statistic(h, y, m);
                    (f, truncated_f_pvalue(f, &sel.event, h, y, m, n)?, "truncated F(M, n-M)")
                }
            };
            Ok(TestResult {
                method: method.tag().into(),
                statistic,
                p_value: tp.p_value,
                reference: Reference::Analytic(reference.into()),
                flags: Flags {
                    degenerate_window: tp.degenerate,
                    ..Flags::default()
                },
                selected: m,
            })
        }
        UniMethod::Pt => {
            let (i, ev) = marginal_screen_event(x_sub, y)?;
            let xi = x_sub.column(i).into_owned();
            let sigma = sigma2.sqrt();
            let z = xi.dot(y) / sigma;
            let tp = protolasso_pvalue(z, &ev, &xi, y, sigma)?;
            Ok(TestResult {
                method: method.tag().into(),
                statistic: z,
                p_value: tp.p_value,
                reference: Reference::Analytic("truncated N(0,1)".into()),
                flags: Flags {
                    degenerate_window: tp.degenerate,
                    ..Flags::default()
                },
                selected: 1,
            })
        }
        UniMethod::LrAll => classical_lr(y, &make_hat(x_sub, HatKind::LeastSquares)?, sigma2, method),
        UniMethod::LrOr => {
            let support = opts
                .oracle_support
                .as_ref()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| invalid("LR-or needs a non-empty oracle support"))?;
            classical_lr(y, &make_hat(&x_sub.select_columns(support), HatKind::LeastSquares)?, sigma2, method)
        }
        UniMethod::TMean | UniMethod::TPc => {
            let proto = if method == UniMethod::TMean {
                centroid(x_sub)
            } else {
                first_pc(x_sub)
            };
            let (t, p) = t_test_through_origin(&proto, y)?;
            Ok(TestResult {
                method: method.tag().into(),
                statistic: t,
                p_value: p,
                reference: Reference::Analytic(format!("t_{}", n - 1)),
                flags: Flags::default(),
                selected: x_sub.ncols(),
            })
        }
        UniMethod::FClassic => {
            let h = make_hat(x_sub, HatKind::LeastSquares)?;
            let m = h.rank();
            if m >= n {
                return Err(invalid("classical F needs rank < n"));
            }
            let f = crate::truncation::f_statistic(&h, y, m);
            Ok(TestResult {
                method: method.tag().into(),
                statistic: f,
                p_value: f_sf(f, m as f64, (n - m) as f64),
                reference: Reference::Analytic(format!("F({}, {})", m, n - m)),
                flags: Flags::default(),
                selected: m,
            })
        }
        UniMethod::LrRidge => {
            let h = make_hat(x_sub, HatKind::Ridge { lambda: opts.ridge_lambda })?;
            let pl = PrototypeLikelihood::new(vec![h], y.clone(), sigma2, false)?;
            let fit = pl.fit_mle()?;
            let l0 = pl.loglik(&DVector::zeros(1), 0.0)?;
            let r = (2.0 * (fit.loglik_at_opt - l0)).max(0.0);
            Ok(TestResult {
                method: method.tag().into(),
                statistic: r,
                p_value: chi2_sf(r, 1.0),
                reference: Reference::Analytic("chi2_1".into()),
                flags: Flags {
                    non_converged: !fit.converged,
                    ..Flags::default()
                },
                selected: x_sub.ncols(),
            })
        }
        _ => unreachable!("sampled methods handled by the shared chain"),
    }
}

/// Single univariate test.
pub fn run_univariate_test(method: UniMethod, x_sub: &DMatrix<f64>, y: &DVector<f64>, opts: &UnivariateOptions) -> Result<TestResult> {
    run_univariate_roster(&[method], x_sub, y, opts)
        .pop()
        .expect("one method requested")
        .1
}
