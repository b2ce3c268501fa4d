//! Hit-and-run sampling of `N(mu, Sigma)` restricted to a polytope.
//!
//! The chain works on the whitened variable `z = Sigma^{-1/2} (y - mu)`, for
//! which the constraints read `(A Sigma^{1/2}) z <= b - A mu`. Each step picks a
//! uniformly random direction, finds the chord of the polytope through the
//! current point and draws the position along the chord from the standard
//! normal truncated to it.

use nalgebra::{DMatrix, DVector};

use crate::dist::{ln_norm_pdf, ln_norm_sf, norm_cdf, norm_quantile, norm_sf};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, open_unit, StreamRng};
use crate::selection::SelectionEvent;

/// Directions with `|(A z)_j|` below this are treated as parallel to row `j`.
const PARALLEL_TOL: f64 = 1e-12;
/// Steps between recomputations of the slack vector from scratch.
const SLACK_REFRESH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HitAndRunConfig {
    pub n_samples: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub thinning: usize,
}

impl Default for HitAndRunConfig {
    fn default() -> Self {
        Self {
            n_samples: 50_000,
            burn_in: 10_000,
            seed: 0,
            thinning: 1,
        }
    }
}

impl HitAndRunConfig {
    pub fn new(n_samples: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            n_samples,
            burn_in,
            seed,
            thinning: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(invalid("hit-and-run needs at least one sample"));
        }
        if self.thinning == 0 {
            return Err(invalid("thinning must be >= 1"));
        }
        Ok(())
    }
}

/// Symmetric square root of the covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum CovFactor {
    /// `Sigma = sigma^2 I`.
    Isotropic { sigma: f64 },
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedGaussian {
    pub mean: DVector<f64>,
    pub cov: CovFactor,
    pub event: SelectionEvent,
}

impl ConstrainedGaussian {
    pub fn isotropic(mean: DVector<f64>, sigma: f64, event: SelectionEvent) -> Self {
        Self {
            mean,
            cov: CovFactor::Isotropic { sigma },
            event,
        }
    }
}

/// Feasible interval for `kappa` along `y(kappa) = y + (kappa - z^T y) z`
/// inside `{A y <= b}`.
pub fn chord_interval(a: &DMatrix<f64>, b: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Result<(f64, f64)> {
    let slack = b - a * y;
    let az = a * z;
    interval_from_slack(&slack, &az, z.dot(y))
}

fn interval_from_slack(slack: &DVector<f64>, az: &DVector<f64>, c: f64) -> Result<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (s, d) in slack.iter().zip(az.iter()) {
        if d.abs() < PARALLEL_TOL {
            continue;
        }
        let t = s.max(0.0) / d;
        if *d > 0.0 {
            hi = hi.min(t);
        } else {
            lo = lo.max(t);
        }
    }
    let (lo, hi) = (c + lo, c + hi);
    if lo > hi {
        return Err(Error::InfeasibleChord { lower: lo, upper: hi });
    }
    Ok((lo, hi))
}

/// Inverse of `x -> ln P(Z > x)` for `x >= 0`, by safeguarded Newton steps.
fn ln_sf_inverse(target: f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut x = if target > -700.0 {
        -norm_quantile(target.exp())
    } else {
        // ln Q(x) ~ -x^2/2 - ln(x sqrt(2 pi))
        let mut g = (-2.0 * target).sqrt();
        for _ in 0..3 {
            g = (-2.0 * target - 2.0 * (g * (2.0 * std::f64::consts::PI).sqrt()).ln()).max(0.0).sqrt();
        }
        g
    };
    if !x.is_finite() || x < lo || x > hi {
        x = if hi.is_finite() { 0.5 * (lo + hi) } else { lo + 1.0 };
    }
    for _ in 0..60 {
        let f = ln_norm_sf(x) - target;
        if f > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        // d/dx ln Q(x) = -phi(x) / Q(x)
        let slope = -(ln_norm_pdf(x) - ln_norm_sf(x)).exp();
        let mut next = x - f / slope;
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if (next - x).abs() <= 1e-14 * x.abs().max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

/// Draw from `N(0, 1)` truncated to `[lo, hi]` by inversion.
pub fn truncated_std_normal(lo: f64, hi: f64, rng: &mut StreamRng) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::InfeasibleChord { lower: lo, upper: hi });
    }
    let u = open_unit(rng);
    Ok(truncated_std_normal_at(lo, hi, u))
}

fn truncated_std_normal_at(lo: f64, hi: f64, u: f64) -> f64 {
    if hi <= 0.0 {
        return -truncated_std_normal_at(-hi, -lo, 1.0 - u);
    }
    let x = if lo > 4.0 {
        let a = ln_norm_sf(lo);
        let b = ln_norm_sf(hi);
        // ln Q(x) = a + ln(1 - u (1 - exp(b - a)))
        let target = a + (-u * (-(b - a).exp_m1())).ln_1p();
        ln_sf_inverse(target, lo, hi)
    } else if lo >= 0.0 {
        let qa = norm_sf(lo);
        let qb = norm_sf(hi);
        -norm_quantile(qa - u * (qa - qb))
    } else {
        let pa = norm_cdf(lo);
        let pb = norm_cdf(hi);
        norm_quantile(pa + u * (pb - pa))
    };
    x.clamp(lo, hi)
}

/// Whitened constraint system and chain state.
struct Chain {
    a: DMatrix<f64>,
    b: DVector<f64>,
    z: DVector<f64>,
    slack: DVector<f64>,
    az: DVector<f64>,
    dir: DVector<f64>,
    rng: StreamRng,
}

impl Chain {
    fn step(&mut self) -> Result<()> {
        let n = self.z.len();
        loop {
            for i in 0..n {
                self.dir[i] = rng::normal(&mut self.rng);
            }
            let norm = self.dir.norm();
            if norm > 0.0 {
                self.dir /= norm;
                break;
            }
        }
        self.a.mul_to(&self.dir, &mut self.az);
        let c = self.dir.dot(&self.z);
        let (lo, hi) = interval_from_slack(&self.slack, &self.az, c)?;
        let kappa = if lo < hi {
            truncated_std_normal(lo, hi, &mut self.rng)?
        } else {
            lo
        };
        let delta = kappa - c;
        self.z.axpy(delta, &self.dir, 1.0);
        self.slack.axpy(-delta, &self.az, 1.0);
        Ok(())
    }

    fn refresh(&mut self) {
        self.slack = &self.b - &self.a * &self.z;
    }
}

/// Run the chain from `start`, calling `visit(i, y_i)` for each retained sample.
pub fn hit_and_run_for_each(
    target: &ConstrainedGaussian,
    start: &DVector<f64>,
    cfg: &HitAndRunConfig,
    mut visit: impl FnMut(usize, &DVector<f64>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let n = target.mean.len();
    if start.len() != n || target.event.n() != n {
        return Err(Error::DimensionMismatch("start, mean and event dimensions differ".into()));
    }
    let ev = &target.event;
    let violation = -ev.min_slack(start);
    if ev.rows() > 0 && violation > 1e-8 {
        return Err(Error::InfeasibleStart { violation });
    }
    let centred = start - &target.mean;
    let b = &ev.b - &ev.a * &target.mean;
    let (a, z, unwhiten): (DMatrix<f64>, DVector<f64>, Option<&DMatrix<f64>>) = match &target.cov {
        CovFactor::Isotropic { sigma } => {
            if !(*sigma > 0.0) {
                return Err(invalid("sigma must be positive"));
            }
            (&ev.a * *sigma, centred / *sigma, None)
        }
        CovFactor::Full(root) => {
            let z = root
                .clone()
                .lu()
                .solve(&centred)
                .ok_or_else(|| invalid("covariance factor is singular"))?;
            (&ev.a * root, z, Some(root))
        }
    };
    let q = a.nrows();
    let mut chain = Chain {
        slack: &b - &a * &z,
        a,
        b,
        z,
        az: DVector::zeros(q),
        dir: DVector::zeros(n),
        rng: rng::stream(cfg.seed, &[rng::tag("hit-and-run")]),
    };
    let total = cfg.burn_in + cfg.n_samples * cfg.thinning;
    let mut y = DVector::zeros(n);
    let mut kept = 0;
    for step in 1..=total {
        chain.step()?;
        if step % SLACK_REFRESH == 0 {
            chain.refresh();
        }
        if step > cfg.burn_in && (step - cfg.burn_in) % cfg.thinning == 0 {
            match unwhiten {
                None => {
                    let CovFactor::Isotropic { sigma } = target.cov else { unreachable!() };
                    y.copy_from(&chain.z);
                    y *= sigma;
                    y += &target.mean;
                }
                Some(root) => {
                    root.mul_to(&chain.z, &mut y);
                    y += &target.mean;
                }
            }
            visit(kept, &y)?;
            kept += 1;
        }
    }
    Ok(())
}

/// All retained samples as rows of a `B x n` matrix.
pub fn hit_and_run(target: &ConstrainedGaussian, start: &DVector<f64>, cfg: &HitAndRunConfig) -> Result<DMatrix<f64>> {
    let n = target.mean.len();
    let mut out = DMatrix::zeros(cfg.n_samples, n);
    hit_and_run_for_each(target, start, cfg, |i, y| {
        out.row_mut(i).copy_from(&y.transpose());
        Ok(())
    })?;
    Ok(out)
}
