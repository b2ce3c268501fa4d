//! Truncated reference distributions for the non-sampling selective tests.
//!
//! Conditioning on everything but a one-dimensional summary of `y` turns the
//! polytope `{A y <= b}` into an interval (or union of intervals) for that
//! summary. The p-values below are tail masses of the classical law restricted
//! to that set, evaluated in log space.

use nalgebra::{DMatrix, DVector};

use crate::dist::{intersect, ln_add_exp, Intervals, Law};
use crate::error::{invalid, Error, Result};
use crate::linalg::HatOperator;
use crate::selection::SelectionEvent;

/// Coefficients below this magnitude are treated as zero when bounding a
/// one-dimensional slice of the polytope.
const SLOPE_TOL: f64 = 1e-13;

/// Bounds on `||H y||` given `delta = A (I - H) y` and `v = H y / ||H y||`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationBounds {
    pub t_star: f64,
    pub t_upper: f64,
    pub observed_norm: f64,
    pub delta: DVector<f64>,
    pub v: DVector<f64>,
}

/// A p-value with a flag for a degenerate truncation window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedPValue {
    pub p_value: f64,
    pub degenerate: bool,
}

/// Interval `{s : s * d + base <= b}` for scalar `s`, as `(lower, upper)`.
fn slice_bounds(d: &DVector<f64>, btilde: &DVector<f64>, a: &DMatrix<f64>) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for j in 0..d.len() {
        let scale = a.row(j).norm().max(1.0);
        if d[j].abs() <= SLOPE_TOL * scale {
            continue;
        }
        let t = btilde[j] / d[j];
        if d[j] > 0.0 {
            hi = hi.min(t);
        } else {
            lo = lo.max(t);
        }
    }
    (lo, hi)
}

pub fn norm_bounds(event: &SelectionEvent, h: &HatOperator, y: &DVector<f64>) -> Result<TruncationBounds> {
    let hy = h.apply(y);
    let norm = hy.norm();
    if !(norm > 0.0) {
        return Err(invalid("H y is zero"));
    }
    let v = hy / norm;
    let resid = y - &v * norm;
    let delta = &event.a * resid;
    let btilde = &event.b - &delta;
    let av = &event.a * &v;
    let (lo, hi) = slice_bounds(&av, &btilde, &event.a);
    let t_star = lo.max(0.0);
    let tol = 1e-6 * norm.max(1.0);
    if norm < t_star - tol || norm > hi + tol {
        return Err(Error::InconsistentConditioning {
            observed: norm,
            lower: t_star,
            upper: hi,
        });
    }
    Ok(TruncationBounds {
        t_star,
        t_upper: hi,
        observed_norm: norm,
        delta,
        v,
    })
}

/// `R(t) = M log(M sigma^2) - 2 M log t + t^2 / sigma^2 - M`, the ELR as a
/// function of `t = ||H y||`.
pub fn elr_of_norm(t: f64, m: usize, sigma2: f64) -> f64 {
    let m = m as f64;
    if t <= 0.0 {
        return f64::INFINITY;
    }
    if t == f64::INFINITY {
        return f64::INFINITY;
    }
    m * (m * sigma2).ln() - 2.0 * m * t.ln() + t * t / sigma2 - m
}

impl TruncationBounds {
    /// Window `[q*, Q*]` for the ELR implied by the norm bounds.
    pub fn elr_window(&self, m: usize, sigma2: f64) -> (f64, f64) {
        let r_lo = elr_of_norm(self.t_star, m, sigma2);
        let r_hi = elr_of_norm(self.t_upper, m, sigma2);
        let upper = r_lo.max(r_hi);
        let centre = (sigma2 * m as f64).sqrt();
        let lower = if centre >= self.t_star && centre <= self.t_upper {
            0.0
        } else {
            r_lo.min(r_hi)
        };
        (lower, upper)
    }

    /// Window for `y^T H y / sigma^2`.
    pub fn chi2_window(&self, sigma2: f64) -> (f64, f64) {
        (self.t_star * self.t_star / sigma2, self.t_upper * self.t_upper / sigma2)
    }
}

fn ln_mass(law: &Law, set: &[(f64, f64)]) -> f64 {
    set.iter().fold(f64::NEG_INFINITY, |acc, &(a, b)| ln_add_exp(acc, law.ln_interval(a, b)))
}

fn ratio(law: &Law, num: &[(f64, f64)], den: &[(f64, f64)]) -> TruncatedPValue {
    let ld = ln_mass(law, den);
    if !ld.is_finite() {
        return TruncatedPValue {
            p_value: 1.0,
            degenerate: true,
        };
    }
    let ln = ln_mass(law, num);
    TruncatedPValue {
        p_value: (ln - ld).exp().clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// `P(chi2_1 > R | q* <= chi2_1 <= Q*)`.
pub fn elr_chi1_pvalue(r_obs: f64, bounds: &TruncationBounds, m: usize, sigma2: f64) -> TruncatedPValue {
    let (q_lo, q_hi) = bounds.elr_window(m, sigma2);
    if !(q_hi - q_lo >= 1e-12) {
        return TruncatedPValue {
            p_value: 1.0,
            degenerate: true,
        };
    }
    let law = Law::ChiSquared { df: 1.0 };
    ratio(&law, &[(r_obs.max(q_lo), q_hi)], &[(q_lo, q_hi)])
}

/// `P(chi2_M outside [M -+ sqrt(2 M r)] | q~* <= chi2_M <= Q~*)`.
pub fn alr_exact_pvalue(r_obs: f64, bounds: &TruncationBounds, m: usize, sigma2: f64) -> TruncatedPValue {
    let (lo, hi) = bounds.chi2_window(sigma2);
    if !(hi - lo >= 1e-12) {
        return TruncatedPValue {
            p_value: 1.0,
            degenerate: true,
        };
    }
    let mf = m as f64;
    let half = (2.0 * mf * r_obs.max(0.0)).sqrt();
    let support = vec![(lo, hi)];
    let outside: Intervals = vec![(f64::NEG_INFINITY, mf - half), (mf + half, f64::INFINITY)];
    let num = intersect(&outside, &support);
    ratio(&Law::ChiSquared { df: mf }, &num, &support)
}

/// Truncation window `[Z-, Z+]` of `Z = x_{i*}^T y / sigma` given
/// `(I - x x^T) y`, and the two-sided truncated normal p-value.
pub fn protolasso_pvalue(
    z_obs: f64,
    event: &SelectionEvent,
    x_istar: &DVector<f64>,
    y: &DVector<f64>,
    sigma: f64,
) -> Result<TruncatedPValue> {
    let proj = x_istar.dot(y);
    let delta = y - x_istar * proj;
    let btilde = &event.b - &event.a * delta;
    let ax = &event.a * x_istar;
    let (lo, hi) = slice_bounds(&ax, &btilde, &event.a);
    let (lo, hi) = (lo / sigma, hi / sigma);
    if !(lo < hi) {
        return Err(Error::EmptyTruncation { lower: lo, upper: hi });
    }
    let z = z_obs.abs();
    let window = vec![(lo, hi)];
    let outside: Intervals = vec![(f64::NEG_INFINITY, -z), (z, f64::INFINITY)];
    let num = intersect(&outside, &window);
    Ok(ratio(&Law::StdNormal, &num, &window))
}

/// Truncation region of the F statistic as sorted disjoint intervals on `f > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FTruncationRegion {
    pub intervals: Intervals,
}

impl FTruncationRegion {
    pub fn contains(&self, f: f64, rel_tol: f64) -> bool {
        let tol = rel_tol * f.abs().max(1.0);
        self.intervals.iter().any(|&(a, b)| f >= a - tol && f <= b + tol)
    }
}

/// `{u >= 0 : q u + s - b sqrt(1 + u^2) <= 0}`.
pub(crate) fn row_set(q: f64, s: f64, b: f64) -> Intervals {
    let h = |u: f64| q * u + s - b * (1.0 + u * u).sqrt();
    let dh = |u: f64| q - b * u / (1.0 + u * u).sqrt();
    let qa = q * q - b * b;
    let qb = 2.0 * q * s;
    let qc = s * s - b * b;
    let mut roots: Vec<f64> = Vec::new();
    let scale = qa.abs().max(qb.abs()).max(qc.abs());
    if scale > 0.0 {
        if qa.abs() <= 1e-14 * scale {
            if qb.abs() > 1e-14 * scale {
                roots.push(-qc / qb);
            }
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let t = -0.5 * (qb + qb.signum() * sq);
                if t != 0.0 {
                    roots.push(t / qa);
                    roots.push(qc / t);
                } else {
                    roots.push(0.0);
                }
            }
        }
    }
    let mut pts: Vec<f64> = roots
        .into_iter()
        .filter(|r| r.is_finite() && *r > 0.0)
        .map(|mut r| {
            for _ in 0..3 {
                let d = dh(r);
                if d.abs() > 0.0 {
                    let next = r - h(r) / d;
                    if next.is_finite() && next > 0.0 {
                        r = next;
                    }
                }
            }
            r
        })
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * a.abs().max(1.0));
    let mut breaks = vec![0.0];
    breaks.extend(pts);
    let mut out: Intervals = Vec::new();
    for i in 0..breaks.len() {
        let a = breaks[i];
        let (b_end, probe) = if i + 1 < breaks.len() {
            (breaks[i + 1], 0.5 * (a + breaks[i + 1]))
        } else {
            (f64::INFINITY, a + a.max(1.0))
        };
        if h(probe) <= 0.0 {
            match out.last_mut() {
                Some(last) if last.1 == a => last.1 = b_end,
                _ => out.push((a, b_end)),
            }
        }
    }
    out
}

/// Region for `F` given `v_N = H y / ||H y||`, `v_D = (I - H) y / ||(I - H) y||`
/// and `l = ||y||`, with `c = M / (n - M)`.
pub fn f_truncation_region(event: &SelectionEvent, h: &HatOperator, y: &DVector<f64>, c: f64) -> Result<FTruncationRegion> {
    let hy = h.apply(y);
    let ry = y - &hy;
    let (nn, nd) = (hy.norm(), ry.norm());
    if !(nn > 0.0 && nd > 0.0) {
        return Err(invalid("F statistic undefined: zero numerator or denominator"));
    }
    let l = y.norm();
    let qv = &event.a * (&hy * (l / nn));
    let sv = &event.a * (&ry * (l / nd));
    let mut region: Intervals = vec![(0.0, f64::INFINITY)];
    for j in 0..event.rows() {
        let set = row_set(qv[j], sv[j], event.b[j]);
        region = intersect(&region, &set);
        if region.is_empty() {
            break;
        }
    }
    let intervals = region.into_iter().map(|(a, b)| (a * a / c, b * b / c)).collect();
    Ok(FTruncationRegion { intervals })
}

/// `P(F_{M, n-M} > F | F in region)` with `F = (y^T H y / M) / (y^T (I - H) y / (n - M))`.
pub fn truncated_f_pvalue(
    f_obs: f64,
    event: &SelectionEvent,
    h: &HatOperator,
    y: &DVector<f64>,
    m: usize,
    n: usize,
) -> Result<TruncatedPValue> {
    if m == 0 || m >= n {
        return Err(invalid(format!("F test needs 0 < M < n (M = {m}, n = {n})")));
    }
    let df2 = (n - m) as f64;
    let c = m as f64 / df2;
    let region = f_truncation_region(event, h, y, c)?;
    if !region.contains(f_obs, 1e-8) {
        return Err(Error::InconsistentRegion { observed: f_obs });
    }
    let num = intersect(&region.intervals, &[(f_obs, f64::INFINITY)]);
    Ok(ratio(
        &Law::FisherF {
            df1: m as f64,
            df2,
        },
        &num,
        &region.intervals,
    ))
}

/// `(y^T H y / M) / (y^T (I - H) y / (n - M))`.
pub fn f_statistic(h: &HatOperator, y: &DVector<f64>, m: usize) -> f64 {
    let n = y.len();
    let num = h.quad(y);
    let den = y.norm_squared() - num;
    (num / m as f64) / (den / (n - m) as f64)
}
