//! Tests of `H0: theta_1 = 0` in the multivariate model `y = sum_k theta_k H_k y + eps`.
//!
//! Each group is selected by its own lasso and the events are stacked. The
//! nuisance parameters `theta_2..theta_K` are removed by conditioning on
//! `delta = P y`, where `P` projects onto the selected columns of the other groups.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dist::{chi2_sf, f_sf, t_two_sided};
use crate::error::{invalid, Error, Result};
use crate::likelihood::{fit, FitOptions, QuadraticStats};
use crate::linalg::{make_hat, GroupedDesign, HatKind, HatOperator, InverseStrategy, LogDetEngine, StackedBasis};
use crate::sampler::{hit_and_run_for_each, ConstrainedGaussian, HitAndRunConfig};
use crate::selection::SelectionEvent;
use crate::univariate::{centroid, first_pc, hr_pvalue, Flags, GroupSelection, Reference, TestResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum MultiMethod {
    AlrLasso,
    ElrLasso,
    F,
    AlrAll,
    AlrOr,
    FAll,
    TMean,
    TPc,
}

impl MultiMethod {
    pub const ALL: [MultiMethod; 8] = [
        MultiMethod::AlrLasso,
        MultiMethod::ElrLasso,
        MultiMethod::F,
        MultiMethod::AlrAll,
        MultiMethod::AlrOr,
        MultiMethod::FAll,
        MultiMethod::TMean,
        MultiMethod::TPc,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            MultiMethod::AlrLasso => "ALR-lasso",
            MultiMethod::ElrLasso => "ELR-lasso",
            MultiMethod::F => "F",
            MultiMethod::AlrAll => "ALR-all",
            MultiMethod::AlrOr => "ALR-or",
            MultiMethod::FAll => "F-all",
            MultiMethod::TMean => "t-mean",
            MultiMethod::TPc => "t-PC",
        }
    }

    pub fn is_sampled(&self) -> bool {
        matches!(self, MultiMethod::AlrLasso | MultiMethod::ElrLasso | MultiMethod::F)
    }
}

impl fmt::Display for MultiMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MultiMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MultiMethod::ALL
            .iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| invalid(format!("unknown multivariate method '{s}'")))
    }
}

/// Orthonormal basis of the column space of `x` (`n x 0` when `x` has no columns).
pub fn column_space(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Ok(DMatrix::zeros(x.nrows(), 0));
    }
    Ok(make_hat(x, HatKind::LeastSquares)?.basis().clone())
}

/// Null law of `y` given `delta = P y`: `y~ = (I - P) eps~ + delta` with
/// `eps~ ~ N(0, sigma^2 I)` restricted to `A~ eps~ <= b~`.
#[derive(Debug, Clone)]
pub struct ConditionedNull {
    /// Orthonormal basis `Q` of the conditioning space, `P = Q Q^T`.
    pub q: DMatrix<f64>,
    pub delta: DVector<f64>,
    /// `{A (I - P) eps <= b - A delta}`.
    pub event: SelectionEvent,
    /// `y - delta`, a feasible point of the transformed event.
    pub start: DVector<f64>,
}

impl ConditionedNull {
    /// `others` holds the selected columns of every non-tested group side by side.
    pub fn build(event: &SelectionEvent, others: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let n = y.len();
        if event.n() != n || others.nrows() != n {
            return Err(Error::DimensionMismatch("event, design and response differ in n".into()));
        }
        let q = column_space(others)?;
        let delta = &q * q.tr_mul(y);
        let aq = &event.a * &q;
        let a_t = &event.a - &aq * q.transpose();
        let b_t = &event.b - &event.a * &delta;
        let start = y - &delta;
        let event = SelectionEvent {
            a: a_t,
            b: b_t,
            meta: event.meta.clone(),
        };
        let violation = -event.min_slack(&start);
        if event.rows() > 0 && violation > 1e-8 {
            return Err(Error::ConditioningBug { violation });
        }
        Ok(Self { q, delta, event, start })
    }

    /// Map a draw `eps~` to `y~`.
    pub fn response(&self, eps: &DVector<f64>) -> DVector<f64> {
        let mut y = eps - &self.q * self.q.tr_mul(eps);
        y += &self.delta;
        y
    }

    pub fn projection(&self) -> DMatrix<f64> {
        &self.q * self.q.transpose()
    }

    pub fn target(&self, sigma2: f64) -> ConstrainedGaussian {
        ConstrainedGaussian::isotropic(DVector::zeros(self.delta.len()), sigma2.sqrt(), self.event.clone())
    }
}

/// Closed-form ALR for a fixed set of hats, evaluated from sufficient statistics.
#[derive(Debug, Clone)]
pub struct AlrEvaluator {
    basis: StackedBasis,
    g: DVector<f64>,
    htilde: DMatrix<f64>,
    drop: usize,
    sigma2: f64,
}

impl AlrEvaluator {
    pub fn new(hats: &[HatOperator], sigma2: f64, drop: usize) -> Result<Self> {
        if hats.is_empty() || drop >= hats.len() {
            return Err(invalid("ALR needs at least one group and a valid drop index"));
        }
        if !(sigma2 > 0.0) {
            return Err(invalid("sigma2 must be positive"));
        }
        let basis = StackedBasis::new(hats);
        let k = basis.k();
        let w = basis.weights();
        let c = basis.gram();
        let g = DVector::from_iterator(k, hats.iter().map(HatOperator::trace));
        let mut htilde = DMatrix::zeros(k, k);
        for (a, ra) in basis.ranges().iter().enumerate() {
            for (b, rb) in basis.ranges().iter().enumerate().skip(a) {
                let mut acc = 0.0;
                for i in ra.clone() {
                    for j in rb.clone() {
                        acc += w[i] * w[j] * c[(i, j)] * c[(i, j)];
                    }
                }
                htilde[(a, b)] = acc;
                htilde[(b, a)] = acc;
            }
        }
        Ok(Self {
            basis,
            g,
            htilde,
            drop,
            sigma2,
        })
    }

    pub fn basis(&self) -> &StackedBasis {
        &self.basis
    }

    /// `tr(H_k H_l)`.
    pub fn htilde(&self) -> &DMatrix<f64> {
        &self.htilde
    }

    pub fn evaluate(&self, y: &DVector<f64>) -> Result<f64> {
        let c = self.basis.u().tr_mul(y);
        self.evaluate_coords(&c, y.norm_squared())
    }

    /// Evaluate from `c = U^T y`.
    pub fn evaluate_coords(&self, c: &DVector<f64>, yy: f64) -> Result<f64> {
        let stats = QuadraticStats::from_coords(&self.basis, c, yy, 0.0, 0);
        self.evaluate_stats(&stats)
    }

    pub fn evaluate_stats(&self, stats: &QuadraticStats) -> Result<f64> {
        let k = self.g.len();
        let a = &stats.cross / self.sigma2 - &self.g;
        let m = &stats.gram / self.sigma2 + &self.htilde;
        let full = quad_inverse(&m, &a)?;
        let keep: Vec<usize> = (0..k).filter(|&i| i != self.drop).collect();
        let reduced = if keep.is_empty() {
            0.0
        } else {
            let a1 = a.select_rows(&keep);
            let m1 = m.select_rows(&keep).select_columns(&keep);
            quad_inverse(&m1, &a1)?
        };
        Ok(full - reduced)
    }
}

fn quad_inverse(m: &DMatrix<f64>, a: &DVector<f64>) -> Result<f64> {
    let ch = m.clone().cholesky().ok_or(Error::DegenerateGram)?;
    Ok(a.dot(&ch.solve(a)))
}

/// Approximate likelihood ratio for `H0: theta_drop = 0`.
pub fn alr_multivariate(y: &DVector<f64>, hats: &[HatOperator], sigma2: f64, drop: usize) -> Result<f64> {
    AlrEvaluator::new(hats, sigma2, drop)?.evaluate(y)
}

/// Exact likelihood ratio and whether both fits converged.
#[derive(Debug, Clone, PartialEq)]
pub struct ElrValue {
    pub statistic: f64,
    pub converged: bool,
    pub theta_full: DVector<f64>,
    pub theta_restricted: DVector<f64>,
}

/// Nested Newton fits sharing one log-determinant engine.
#[derive(Debug, Clone)]
pub struct ElrEvaluator {
    engine: LogDetEngine,
    sigma2: f64,
    drop: usize,
    opts: FitOptions,
}

impl ElrEvaluator {
    pub fn new(hats: &[HatOperator], sigma2: f64, drop: usize, strategy: InverseStrategy) -> Result<Self> {
        if hats.is_empty() || drop >= hats.len() {
            return Err(invalid("ELR needs at least one group and a valid drop index"));
        }
        if !(sigma2 > 0.0) {
            return Err(invalid("sigma2 must be positive"));
        }
        Ok(Self {
            engine: LogDetEngine::new(hats.to_vec(), strategy)?,
            sigma2,
            drop,
            opts: FitOptions::default(),
        })
    }

    pub fn basis(&self) -> &StackedBasis {
        self.engine.basis()
    }

    pub fn evaluate(&self, y: &DVector<f64>, warm: Option<(&DVector<f64>, &DVector<f64>)>) -> Result<ElrValue> {
        let stats = QuadraticStats::from_response(self.engine.hats(), y);
        self.evaluate_stats(&stats, warm)
    }

    pub fn evaluate_stats(&self, stats: &QuadraticStats, warm: Option<(&DVector<f64>, &DVector<f64>)>) -> Result<ElrValue> {
        let k = self.engine.k();
        let all = vec![true; k];
        let mut restricted = all.clone();
        restricted[self.drop] = false;
        let full = fit(&self.engine, stats, self.sigma2, false, &all, &self.opts, warm.map(|w| w.0))?;
        let null = fit(&self.engine, stats, self.sigma2, false, &restricted, &self.opts, warm.map(|w| w.1))?;
        Ok(ElrValue {
            statistic: 2.0 * (full.loglik_at_opt - null.loglik_at_opt),
            converged: full.converged && null.converged,
            theta_full: full.theta_hat,
            theta_restricted: null.theta_hat,
        })
    }
}

pub fn elr_multivariate(y: &DVector<f64>, hats: &[HatOperator], sigma2: f64, drop: usize) -> Result<ElrValue> {
    ElrEvaluator::new(hats, sigma2, drop, InverseStrategy::ShermanMorrison)?.evaluate(y, None)
}

/// Settings shared by the multivariate roster.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateOptions {
    pub sigma2: f64,
    /// Lasso penalty of each group.
    pub lambdas: Vec<f64>,
    pub hr: HitAndRunConfig,
    pub smoothed_hr: bool,
    /// Non-zero columns of each group (local indices) for the oracle test.
    pub oracle_supports: Option<Vec<Vec<usize>>>,
    pub tested: usize,
}

impl Default for MultivariateOptions {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            lambdas: Vec::new(),
            hr: HitAndRunConfig::default(),
            smoothed_hr: false,
            oracle_supports: None,
            tested: 0,
        }
    }
}

/// Per-group lasso outcomes with the stacked event.
#[derive(Debug, Clone)]
pub struct MultiSelection {
    pub groups: Vec<GroupSelection>,
    pub event: SelectionEvent,
}

impl MultiSelection {
    pub fn fit(design: &GroupedDesign, y: &DVector<f64>, lambdas: &[f64]) -> Result<Self> {
        if lambdas.len() != design.k() {
            return Err(invalid(format!("{} lambdas for {} groups", lambdas.len(), design.k())));
        }
        let groups = (0..design.k())
            .map(|k| GroupSelection::fit(&design.group_matrix(k), y, lambdas[k], k))
            .collect::<Result<Vec<_>>>()?;
        let events: Vec<SelectionEvent> = groups.iter().map(|g| g.event.clone()).collect();
        Ok(Self {
            event: SelectionEvent::stack(&events)?,
            groups,
        })
    }

    /// Selected columns (global indices) of group `k`.
    pub fn selected_columns(&self, design: &GroupedDesign, k: usize) -> Vec<usize> {
        let g = design.group(k);
        self.groups[k].selection.active.iter().map(|&j| g[j]).collect()
    }

    /// Hats of non-empty groups, with the position of `tested` among them.
    pub fn model(&self, tested: usize) -> Option<(Vec<HatOperator>, usize)> {
        self.groups[tested].hat.as_ref()?;
        let mut hats = Vec::new();
        let mut pos = 0;
        for (k, g) in self.groups.iter().enumerate() {
            if let Some(h) = &g.hat {
                if k == tested {
                    pos = hats.len();
                }
                hats.push(h.clone());
            }
        }
        Some((hats, pos))
    }
}

/// F statistic `[y^T (P - P_-) y / m] / [y^T (I - P) y / (n - r)]` from two
/// nested orthonormal bases.
#[derive(Debug, Clone)]
pub struct NestedF {
    full: DMatrix<f64>,
    reduced: DMatrix<f64>,
    pub df1: usize,
    pub df2: usize,
}

impl NestedF {
    pub fn new(full_cols: &DMatrix<f64>, reduced_cols: &DMatrix<f64>, df1: usize) -> Result<Self> {
        let full = column_space(full_cols)?;
        let reduced = column_space(reduced_cols)?;
        let n = full.nrows();
        let r = full.ncols();
        if r >= n {
            return Err(invalid(format!("F test needs rank {r} < n = {n}")));
        }
        if df1 == 0 {
            return Err(invalid("F test needs a positive numerator df"));
        }
        Ok(Self {
            full,
            reduced,
            df1,
            df2: n - r,
        })
    }

    pub fn statistic(&self, y: &DVector<f64>) -> f64 {
        let qf = self.full.tr_mul(y).norm_squared();
        let qr = self.reduced.tr_mul(y).norm_squared();
        let rss = (y.norm_squared() - qf).max(0.0);
        ((qf - qr).max(0.0) / self.df1 as f64) / (rss / self.df2 as f64)
    }

    pub fn p_value(&self, f: f64) -> f64 {
        f_sf(f, self.df1 as f64, self.df2 as f64)
    }
}

/// Joint regression of centred `y` on centred prototypes; t test of `coef[first]`, df `n - K`.
pub fn joint_t_test(protos: &DMatrix<f64>, y: &DVector<f64>, first: usize) -> Result<(f64, f64)> {
    let n = y.len();
    let k = protos.ncols();
    if k == 0 || first >= k || n <= k {
        return Err(invalid("joint t test needs 1 <= K < n"));
    }
    let mut z = protos.clone();
    for mut c in z.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    let yc = y.add_scalar(-y.mean());
    let ztz = z.tr_mul(&z);
    let inv = ztz
        .cholesky()
        .ok_or_else(|| Error::NonFiniteStatistic("collinear prototypes".into()))?
        .inverse();
    let beta = &inv * z.tr_mul(&yc);
    let rss = (&yc - &z * &beta).norm_squared();
    let df = (n - k) as f64;
    let se = (rss / df * inv[(first, first)]).sqrt();
    let t = beta[first] / se;
    if !t.is_finite() {
        return Err(Error::NonFiniteStatistic("t statistic".into()));
    }
    Ok((t, t_two_sided(t, df)))
}

fn analytic(method: MultiMethod, statistic: f64, p_value: f64, reference: String, selected: usize) -> TestResult {
    TestResult {
        method: method.tag().into(),
        statistic,
        p_value,
        reference: Reference::Analytic(reference),
        flags: Flags::default(),
        selected,
    }
}

/// ALR with response-independent projections and a `chi2_1` reference.
fn fixed_alr(method: MultiMethod, design: &GroupedDesign, y: &DVector<f64>, cols: &[Vec<usize>], tested: usize, sigma2: f64) -> Result<TestResult> {
    if cols[tested].is_empty() {
        return Ok(TestResult::no_selection(method.tag()));
    }
    let mut hats = Vec::new();
    let mut pos = 0;
    for (k, c) in cols.iter().enumerate() {
        if c.is_empty() {
            continue;
        }
        if k == tested {
            pos = hats.len();
        }
        hats.push(make_hat(&design.columns(c), HatKind::LeastSquares)?);
    }
    let r = alr_multivariate(y, &hats, sigma2, pos)?;
    Ok(analytic(method, r, chi2_sf(r, 1.0), "chi2_1".into(), cols[tested].len()))
}

/// Run several multivariate methods on one response; errors are per method.
pub fn run_multivariate_roster(
    methods: &[MultiMethod],
    design: &GroupedDesign,
    y: &DVector<f64>,
    opts: &MultivariateOptions,
) -> Vec<(MultiMethod, Result<TestResult>)> {
    let tested = opts.tested;
    let sampled: Vec<MultiMethod> = methods.iter().copied().filter(MultiMethod::is_sampled).collect();
    let mut sampled_results = if sampled.is_empty() {
        Vec::new()
    } else {
        match run_sampled(&sampled, design, y, opts) {
            Ok(v) => v.into_iter().map(|(m, r)| (m, Ok(r))).collect(),
            Err(e) => sampled.iter().map(|&m| (m, Err(invalid(format!("{e}"))))).collect(),
        }
    };
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        if method.is_sampled() {
            let pos = sampled_results.iter().position(|(m, _)| *m == method).expect("computed");
            out.push(sampled_results.swap_remove(pos));
            continue;
        }
        let res = (|| -> Result<TestResult> {
            if tested >= design.k() {
                return Err(invalid("tested group out of range"));
            }
            match method {
                MultiMethod::AlrAll => {
                    let cols: Vec<Vec<usize>> = design.groups().to_vec();
                    fixed_alr(method, design, y, &cols, tested, opts.sigma2)
                }
                MultiMethod::AlrOr => {
                    let sup = opts
                        .oracle_supports
                        .as_ref()
                        .ok_or_else(|| invalid("ALR-or needs oracle supports"))?;
                    if sup.len() != design.k() {
                        return Err(invalid("one oracle support per group required"));
                    }
                    let cols: Vec<Vec<usize>> = sup
                        .iter()
                        .enumerate()
                        .map(|(k, s)| s.iter().map(|&j| design.group(k)[j]).collect())
                        .collect();
                    fixed_alr(method, design, y, &cols, tested, opts.sigma2)
                }
                MultiMethod::FAll => {
                    let others: Vec<usize> = (0..design.k())
                        .filter(|&k| k != tested)
                        .flat_map(|k| design.group(k).to_vec())
                        .collect();
                    let all: Vec<usize> = (0..design.p()).collect();
                    let full = design.columns(&all);
                    let reduced = design.columns(&others);
                    let df1 = column_space(&full)?.ncols() - column_space(&reduced)?.ncols();
                    let nf = NestedF::new(&full, &reduced, df1)?;
                    let f = nf.statistic(y);
                    Ok(analytic(method, f, nf.p_value(f), format!("F({}, {})", nf.df1, nf.df2), design.group(tested).len()))
                }
                MultiMethod::TMean | MultiMethod::TPc => {
                    let cols: Vec<DVector<f64>> = (0..design.k())
                        .map(|k| {
                            let x = design.group_matrix(k);
                            if method == MultiMethod::TMean {
                                centroid(&x)
                            } else {
                                first_pc(&x)
                            }
                        })
                        .collect();
                    let (t, p) = joint_t_test(&DMatrix::from_columns(&cols), y, tested)?;
                    Ok(analytic(method, t, p, format!("t_{}", y.len() - design.k()), design.group(tested).len()))
                }
                _ => unreachable!("sampled methods handled by the shared chain"),
            }
        })();
        out.push((method, res));
    }
    out
}

fn run_sampled(
    methods: &[MultiMethod],
    design: &GroupedDesign,
    y: &DVector<f64>,
    opts: &MultivariateOptions,
) -> Result<Vec<(MultiMethod, TestResult)>> {
    let tested = opts.tested;
    if tested >= design.k() {
        return Err(invalid("tested group out of range"));
    }
    let sel = MultiSelection::fit(design, y, &opts.lambdas)?;
    let Some((hats, pos)) = sel.model(tested) else {
        return Ok(methods.iter().map(|&m| (m, TestResult::no_selection(m.tag()))).collect());
    };
    let m1 = hats[pos].rank();
    let other_cols: Vec<usize> = (0..design.k())
        .filter(|&k| k != tested)
        .flat_map(|k| sel.selected_columns(design, k))
        .collect();
    let all_cols: Vec<usize> = (0..design.k()).flat_map(|k| sel.selected_columns(design, k)).collect();
    let null = ConditionedNull::build(&sel.event, &design.columns(&other_cols), y)?;

    let want = |m: MultiMethod| methods.contains(&m);
    let alr = if want(MultiMethod::AlrLasso) {
        Some(AlrEvaluator::new(&hats, opts.sigma2, pos)?)
    } else {
        None
    };
    let elr = if want(MultiMethod::ElrLasso) {
        Some(ElrEvaluator::new(&hats, opts.sigma2, pos, InverseStrategy::Gram)?)
    } else {
        None
    };
    let fstat = if want(MultiMethod::F) {
        Some(NestedF::new(&design.columns(&all_cols), &design.columns(&other_cols), m1)?)
    } else {
        None
    };
    let basis = StackedBasis::new(&hats);

    let mut non_converged = false;
    let eval = |yv: &DVector<f64>, warm: Option<(&DVector<f64>, &DVector<f64>)>, nc: &mut bool| -> Result<([f64; 3], Option<ElrValue>)> {
        let c = basis.u().tr_mul(yv);
        let stats = QuadraticStats::from_coords(&basis, &c, yv.norm_squared(), 0.0, 0);
        let mut v = [f64::NAN; 3];
        if let Some(a) = &alr {
            v[0] = a.evaluate_stats(&stats)?;
        }
        let mut ev = None;
        if let Some(e) = &elr {
            let r = e.evaluate_stats(&stats, warm)?;
            *nc |= !r.converged;
            v[1] = r.statistic;
            ev = Some(r);
        }
        if let Some(f) = &fstat {
            v[2] = f.statistic(yv);
        }
        Ok((v, ev))
    };

    let (observed, first) = eval(y, None, &mut non_converged)?;
    let mut warm = first.map(|e| (e.theta_full, e.theta_restricted));
    let mut exceed = [0usize; 3];
    let mut replicate_nc = false;
    let target = null.target(opts.sigma2);
    hit_and_run_for_each(&target, &null.start, &opts.hr, |_, eps| {
        let ys = null.response(eps);
        let (v, ev) = match eval(&ys, warm.as_ref().map(|w| (&w.0, &w.1)), &mut replicate_nc) {
            Ok(x) => x,
            Err(_) => {
                replicate_nc = true;
                return Ok(());
            }
        };
        if let Some(e) = ev {
            warm = Some((e.theta_full, e.theta_restricted));
        }
        for i in 0..3 {
            if v[i] > observed[i] {
                exceed[i] += 1;
            }
        }
        Ok(())
    })?;

    let reference = Reference::Sampled {
        n_samples: opts.hr.n_samples,
        burn_in: opts.hr.burn_in,
        seed: opts.hr.seed,
    };
    Ok(methods
        .iter()
        .map(|&m| {
            let i = match m {
                MultiMethod::AlrLasso => 0,
                MultiMethod::ElrLasso => 1,
                _ => 2,
            };
            let flags = Flags {
                non_converged: m == MultiMethod::ElrLasso && (non_converged || replicate_nc),
                ..Flags::default()
            };
            (
                m,
                TestResult {
                    method: m.tag().into(),
                    statistic: observed[i],
                    p_value: hr_pvalue(exceed[i], opts.hr.n_samples, opts.smoothed_hr),
                    reference: reference.clone(),
                    flags,
                    selected: m1,
                },
            )
        })
        .collect())
}

pub fn run_multivariate_test(method: MultiMethod, design: &GroupedDesign, y: &DVector<f64>, opts: &MultivariateOptions) -> Result<TestResult> {
    run_multivariate_roster(&[method], design, y, opts).pop().expect("one method").1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::PrototypeLikelihood;
    use crate::rng;
    use crate::selection::{lasso_fixed_lambda, SelectionEvent};
    use crate::stats::ks_two_sample;
    use crate::univariate::{alr_from_quad, elr_from_quad};

    fn gaussian(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, &[9]);
        DMatrix::from_fn(n, m, |_, _| rng::normal(&mut r))
    }

    fn design(n: usize, sizes: &[usize], seed: u64) -> GroupedDesign {
        let p: usize = sizes.iter().sum();
        GroupedDesign::from_raw(gaussian(n, p, seed), GroupedDesign::contiguous_groups(sizes)).unwrap()
    }

    fn hats_of(d: &GroupedDesign, cols: &[Vec<usize>]) -> Vec<HatOperator> {
        cols.iter()
            .enumerate()
            .map(|(k, c)| make_hat(&d.group_matrix(k).select_columns(c), HatKind::LassoRefit).unwrap())
            .collect()
    }

    #[test]
    fn single_group_alr_has_closed_form() {
        let d = design(40, &[5], 1);
        let hats = hats_of(&d, &[vec![0, 1, 2]]);
        for seed in 0..20 {
            let y = gaussian(40, 1, 100 + seed).column(0) * 1.3;
            let q = hats[0].quad(&y);
            for s2 in [0.5, 1.0, 2.0] {
                let r = alr_multivariate(&y, &hats, s2, 0).unwrap();
                let expect = (q / s2 - 3.0).powi(2) / (q / s2 + 3.0);
                assert!((r - expect).abs() < 1e-10 * (1.0 + expect));
            }
        }
    }

    #[test]
    fn single_group_alr_meets_univariate_at_null_point() {
        let d = design(30, &[4], 2);
        let hats = hats_of(&d, &[vec![0, 1]]);
        let u = hats[0].basis().column(0).into_owned();
        let v = hats[0].basis().column(1).into_owned();
        // q = M sigma^2 exactly: both statistics vanish.
        let y = &u + &v;
        assert!(alr_multivariate(&y, &hats, 1.0, 0).unwrap().abs() < 1e-20);
        assert!(alr_from_quad(2.0, 2, 1.0).abs() < 1e-20);
        // Ratio tends to one near the null point.
        let eps: f64 = 1e-4;
        let y = (&u + &v) * (1.0 + eps).sqrt();
        let ratio = alr_multivariate(&y, &hats, 1.0, 0).unwrap() / alr_from_quad(hats[0].quad(&y), 2, 1.0);
        assert!((ratio - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_group_elr_matches_univariate() {
        let d = design(40, &[6], 3);
        let hats = hats_of(&d, &[vec![0, 2, 4]]);
        for seed in 0..10 {
            let y = gaussian(40, 1, 200 + seed).column(0) * 1.2;
            let r = elr_multivariate(&y, &hats, 1.0, 0).unwrap();
            let u = elr_from_quad(hats[0].quad(&y), 3, 1.0);
            assert!(r.converged);
            assert!((r.statistic - u).abs() < 1e-8, "{} vs {u}", r.statistic);
        }
    }

    #[test]
    fn orthogonal_groups_are_block_diagonal() {
        // Groups supported on disjoint coordinates.
        let n = 30;
        let mut x = DMatrix::zeros(n, 6);
        let g = gaussian(n, 6, 4);
        for j in 0..3 {
            for i in 0..15 {
                x[(i, j)] = g[(i, j)];
            }
        }
        for j in 3..6 {
            for i in 15..n {
                x[(i, j)] = g[(i, j)];
            }
        }
        let hats = vec![
            make_hat(&x.columns(0, 3).into_owned(), HatKind::LeastSquares).unwrap(),
            make_hat(&x.columns(3, 3).into_owned(), HatKind::LeastSquares).unwrap(),
        ];
        for seed in 0..10 {
            let y = gaussian(n, 1, 300 + seed).column(0).into_owned();
            let r = alr_multivariate(&y, &hats, 1.0, 0).unwrap();
            let own = alr_multivariate(&y, &hats[..1], 1.0, 0).unwrap();
            assert!((r - own).abs() < 1e-10 * (1.0 + r));
            let e = elr_multivariate(&y, &hats, 1.0, 0).unwrap();
            let e1 = elr_multivariate(&y, &hats[..1], 1.0, 0).unwrap();
            assert!((e.statistic - e1.statistic).abs() < 1e-7);
        }
    }

    #[test]
    fn statistics_are_nonnegative() {
        let d = design(40, &[5, 5, 5], 5);
        let hats = hats_of(&d, &[vec![0, 1], vec![1, 3], vec![0, 2, 4]]);
        let mut r = rng::stream(6, &[]);
        for t in 0..1000 {
            let y = gaussian(40, 1, 1000 + t).column(0) * (0.2 + 3.0 * rng::open_unit(&mut r));
            let drop = t as usize % 3;
            assert!(alr_multivariate(&y, &hats, 1.0, drop).unwrap() >= -1e-10);
            if t % 20 == 0 {
                assert!(elr_multivariate(&y, &hats, 1.0, drop).unwrap().statistic >= -1e-10);
            }
        }
    }

    #[test]
    fn alr_is_taylor_maximum() {
        // Direct maximization of the quadratic surrogate.
        let d = design(30, &[4, 4], 7);
        let hats = hats_of(&d, &[vec![0, 1], vec![2, 3]]);
        let y = gaussian(30, 1, 8).column(0) * 1.5;
        let s2 = 0.8;
        let pl = PrototypeLikelihood::new(hats.clone(), y.clone(), s2, false).unwrap();
        let yhat = pl.prototypes();
        let g = DVector::from_fn(2, |k, _| hats[k].trace());
        let ht = DMatrix::from_fn(2, 2, |a, b| (hats[a].dense() * hats[b].dense()).trace());
        let lt = |t: &DVector<f64>| -t.dot(&g) - 0.5 * t.dot(&(&ht * t)) - (&y - &yhat * t).norm_squared() / (2.0 * s2);
        let m = yhat.tr_mul(&yhat) / s2 + &ht;
        let a = yhat.tr_mul(&y) / s2 - &g;
        let t_full = m.clone().lu().solve(&a).unwrap();
        let t_red = DVector::from_vec(vec![0.0, a[1] / m[(1, 1)]]);
        let direct = 2.0 * (lt(&t_full) - lt(&t_red));
        let r = alr_multivariate(&y, &hats, s2, 0).unwrap();
        assert!((r - direct).abs() < 1e-9 * (1.0 + r));
        let ev = AlrEvaluator::new(&hats, s2, 0).unwrap();
        assert!((ev.htilde() - &ht).amax() < 1e-10);
    }

    fn small_problem() -> (GroupedDesign, DVector<f64>, Vec<f64>) {
        let d = design(20, &[3, 3], 11);
        let mut y = d.x().column(3) * 2.0;
        y += gaussian(20, 1, 12).column(0);
        let lambdas: Vec<f64> = (0..2).map(|k| 0.6 * d.group_matrix(k).tr_mul(&y).amax()).collect();
        (d, y, lambdas)
    }

    #[test]
    fn conditioned_null_properties() {
        let (d, y, lambdas) = small_problem();
        let sel = MultiSelection::fit(&d, &y, &lambdas).unwrap();
        let others = d.columns(&sel.selected_columns(&d, 1));
        let cn = ConditionedNull::build(&sel.event, &others, &y).unwrap();
        let p = cn.projection();
        assert!((&p * &p - &p).amax() < 1e-8);
        assert!((&p - p.transpose()).amax() < 1e-8);
        assert!((cn.response(&cn.start) - &y).amax() < 1e-12);
        let cfg = HitAndRunConfig::new(2000, 100, 13);
        hit_and_run_for_each(&cn.target(1.0), &cn.start, &cfg, |_, e| {
            let ys = cn.response(e);
            assert!(sel.event.contains(&ys, 1e-8));
            assert!((&p * &ys - &cn.delta).amax() < 1e-9);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn single_group_null_is_univariate() {
        let (d, y, lambdas) = small_problem();
        let sel = MultiSelection::fit(&d, &y, &lambdas).unwrap();
        let cn = ConditionedNull::build(&sel.event, &DMatrix::zeros(20, 0), &y).unwrap();
        assert_eq!(cn.delta.amax(), 0.0);
        assert_eq!(cn.event.a, sel.event.a);
        assert_eq!(cn.event.b, sel.event.b);
    }

    #[test]
    fn conditioning_violation_is_reported() {
        let (d, y, lambdas) = small_problem();
        let sel = MultiSelection::fit(&d, &y, &lambdas).unwrap();
        let ev = SelectionEvent {
            a: sel.event.a.clone(),
            b: &sel.event.b - DVector::from_element(sel.event.rows(), 10.0),
            meta: sel.event.meta.clone(),
        };
        let others = d.columns(&sel.selected_columns(&d, 1));
        assert!(matches!(ConditionedNull::build(&ev, &others, &y), Err(Error::ConditioningBug { .. })));
    }

    #[test]
    fn orthogonal_groups_leave_tested_prototypes_untouched() {
        let n = 24;
        let g = gaussian(n, 4, 14);
        let mut x = DMatrix::zeros(n, 4);
        for i in 0..12 {
            x[(i, 0)] = g[(i, 0)];
            x[(i, 1)] = g[(i, 1)];
            x[(i + 12, 2)] = g[(i + 12, 2)];
            x[(i + 12, 3)] = g[(i + 12, 3)];
        }
        let others = x.columns(2, 2).into_owned();
        let h1 = make_hat(&x.columns(0, 2).into_owned(), HatKind::LeastSquares).unwrap();
        let y = gaussian(n, 1, 15).column(0).into_owned();
        let cn = ConditionedNull::build(&SelectionEvent::unconstrained(n), &others, &y).unwrap();
        for seed in 0..5 {
            let eps = gaussian(n, 1, 16 + seed).column(0).into_owned();
            let ys = cn.response(&eps);
            assert!((h1.apply(&ys) - h1.apply(&eps)).amax() < 1e-12);
        }
    }

    /// Rejection oracle: draw `y = delta + (I - P) eps`, keep draws that the
    /// lasso maps to the same active sets and signs.
    #[test]
    fn conditioned_sampler_matches_rejection() {
        let (d, y, lambdas) = small_problem();
        let sel = MultiSelection::fit(&d, &y, &lambdas).unwrap();
        assert!(sel.groups.iter().all(|g| !g.selection.is_empty()));
        let others = d.columns(&sel.selected_columns(&d, 1));
        let cn = ConditionedNull::build(&sel.event, &others, &y).unwrap();
        let (hats, pos) = sel.model(0).unwrap();
        let alr = AlrEvaluator::new(&hats, 1.0, pos).unwrap();

        let same = |ys: &DVector<f64>| {
            (0..2).all(|k| {
                let s = lasso_fixed_lambda(&d.group_matrix(k), ys, lambdas[k], k).unwrap();
                s.active == sel.groups[k].selection.active && s.signs == sel.groups[k].selection.signs
            })
        };
        let mut r = rng::stream(17, &[]);
        let mut rej = Vec::new();
        while rej.len() < 3000 {
            let eps = DVector::from_fn(20, |_, _| rng::normal(&mut r));
            let ys = cn.response(&eps);
            if same(&ys) {
                rej.push(alr.evaluate(&ys).unwrap());
            }
        }
        let mut hr = Vec::new();
        let cfg = HitAndRunConfig {
            thinning: 10,
            ..HitAndRunConfig::new(3000, 1000, 18)
        };
        hit_and_run_for_each(&cn.target(1.0), &cn.start, &cfg, |_, e| {
            hr.push(alr.evaluate(&cn.response(e)).unwrap());
            Ok(())
        })
        .unwrap();
        let ks = ks_two_sample(&rej, &hr);
        assert!(ks.p_value > 0.01, "KS {ks:?}");
    }

    #[test]
    fn joint_t_matches_single_when_orthogonal_protos() {
        let n = 50;
        let z = gaussian(n, 1, 19).column(0).into_owned();
        let y = gaussian(n, 1, 20).column(0).into_owned();
        let (t, p) = joint_t_test(&DMatrix::from_columns(&[z.clone()]), &y, 0).unwrap();
        let (t1, _) = crate::univariate::t_test_through_origin(&z, &y).unwrap();
        assert!((t - t1).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn roster_runs_every_method() {
        let d = design(60, &[8, 8, 8], 21);
        let mut y = d.x().column(0) * 6.0 + d.x().column(9) * 3.0;
        y += gaussian(60, 1, 22).column(0);
        let lambdas: Vec<f64> = (0..3).map(|k| 0.5 * d.group_matrix(k).tr_mul(&y).amax()).collect();
        let opts = MultivariateOptions {
            lambdas,
            hr: HitAndRunConfig::new(300, 100, 23),
            oracle_supports: Some(vec![vec![0], vec![1], vec![]]),
            ..MultivariateOptions::default()
        };
        let res = run_multivariate_roster(&MultiMethod::ALL, &d, &y, &opts);
        for (m, r) in &res {
            let r = r.as_ref().unwrap_or_else(|e| panic!("{m}: {e}"));
            assert!((0.0..=1.0).contains(&r.p_value), "{m}");
        }
        let again = run_multivariate_roster(&MultiMethod::ALL, &d, &y, &opts);
        for (a, b) in res.iter().zip(&again) {
            assert_eq!(a.1.as_ref().unwrap(), b.1.as_ref().unwrap());
        }
    }

    #[test]
    fn empty_tested_group_is_flagged() {
        let d = design(40, &[5, 5], 24);
        let y = gaussian(40, 1, 25).column(0).into_owned();
        let opts = MultivariateOptions {
            lambdas: vec![100.0, 0.1],
            hr: HitAndRunConfig::new(100, 10, 26),
            ..MultivariateOptions::default()
        };
        let r = run_multivariate_test(MultiMethod::AlrLasso, &d, &y, &opts).unwrap();
        assert!(r.flags.no_selection);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn f_all_matches_direct_formula() {
        let d = design(50, &[4, 4], 27);
        let y = gaussian(50, 1, 28).column(0).into_owned();
        let r = run_multivariate_test(MultiMethod::FAll, &d, &y, &MultivariateOptions::default()).unwrap();
        let x = d.x();
        let proj = |m: &DMatrix<f64>| m * m.clone().pseudo_inverse(1e-12).unwrap();
        let h = proj(x);
        let hm = proj(&x.columns(4, 4).into_owned());
        let i = DMatrix::<f64>::identity(50, 50);
        let u = y.dot(&((&i - &hm) * &y));
        let v = y.dot(&((&i - &h) * &y));
        let f = ((u - v) / 4.0) / (v / 42.0);
        assert!((r.statistic - f).abs() < 1e-9 * f.max(1.0));
    }
}
