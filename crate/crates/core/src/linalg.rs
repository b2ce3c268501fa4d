//! Grouped designs, hat operators and the matrix `G(theta) = I - sum_k theta_k H_k`.
//!
//! Hats are stored as an orthonormal basis `U` and weights `w`, so that
//! `H = U diag(w) U^T`. Quantities involving `G(theta)^{-1}` can be obtained by
//! three routes which agree to rounding:
//!
//! - `Dense`: Cholesky factorisation of the `n x n` matrix `G`.
//! - `ShermanMorrison`: `s` rank-one updates of the identity, `O(s n^2)`.
//! - `Gram`: an `s x s` reduction through `C = U^T U`, `O(s^3)` per evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Minimum eigenvalue of `G` for `theta` to count as feasible.
pub const FEASIBILITY_MARGIN: f64 = 1e-10;
/// Relative singular-value cut-off for basis extraction.
pub const RANK_TOL: f64 = 1e-10;

/// Centre columns to zero mean and scale them to unit Euclidean norm.
pub fn standardize(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let n = x.nrows();
    if n == 0 {
        return Err(invalid("design has no rows"));
    }
    let mut out = x.clone();
    let mut means = Vec::with_capacity(x.ncols());
    let mut scales = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let mut col = out.column_mut(j);
        let m = col.sum() / n as f64;
        col.add_scalar_mut(-m);
        let s = col.norm();
        if !(s > 1e-12 * (1.0 + m.abs())) {
            return Err(invalid(format!("column {j} is constant")));
        }
        col /= s;
        means.push(m);
        scales.push(s);
    }
    Ok((out, means, scales))
}

/// Standardized `n x p` design with a disjoint partition of (some of) its columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDesign {
    x: DMatrix<f64>,
    groups: Vec<Vec<usize>>,
    column_means: Vec<f64>,
    column_scales: Vec<f64>,
}

impl GroupedDesign {
    /// Standardize `x` and attach the group partition.
    pub fn from_raw(x: DMatrix<f64>, groups: Vec<Vec<usize>>) -> Result<Self> {
        let (xs, means, scales) = standardize(&x)?;
        Self::validate(xs.ncols(), &groups)?;
        Ok(Self {
            x: xs,
            groups,
            column_means: means,
            column_scales: scales,
        })
    }

    /// `K` consecutive groups of the given sizes.
    pub fn contiguous_groups(sizes: &[usize]) -> Vec<Vec<usize>> {
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let g = (start..start + s).collect();
                start += s;
                g
            })
            .collect()
    }

    fn validate(p: usize, groups: &[Vec<usize>]) -> Result<()> {
        if groups.is_empty() {
            return Err(invalid("no groups"));
        }
        let mut seen = vec![false; p];
        for g in groups {
            if g.is_empty() {
                return Err(Error::EmptyGroup);
            }
            for &j in g {
                if j >= p {
                    return Err(invalid(format!("column index {j} out of range (p = {p})")));
                }
                if seen[j] {
                    return Err(invalid(format!("column {j} belongs to two groups")));
                }
                seen[j] = true;
            }
        }
        Ok(())
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn k(&self) -> usize {
        self.groups.len()
    }
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
    pub fn group(&self, k: usize) -> &[usize] {
        &self.groups[k]
    }
    pub fn column_means(&self) -> &[f64] {
        &self.column_means
    }
    pub fn column_scales(&self) -> &[f64] {
        &self.column_scales
    }

    /// Columns `idx` of the standardized design.
    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        self.x.select_columns(idx)
    }

    pub fn group_matrix(&self, k: usize) -> DMatrix<f64> {
        self.columns(&self.groups[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HatKind {
    LeastSquares,
    Ridge { lambda: f64 },
    LassoRefit,
}

/// `H = U diag(w) U^T` with orthonormal `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct HatOperator {
    basis: DMatrix<f64>,
    weights: DVector<f64>,
    singular_values: DVector<f64>,
    kind: HatKind,
}

impl HatOperator {
    /// Projection onto the span of an orthonormal basis.
    pub fn projection(basis: DMatrix<f64>, kind: HatKind) -> Self {
        let m = basis.ncols();
        Self {
            basis,
            weights: DVector::from_element(m, 1.0),
            singular_values: DVector::from_element(m, 1.0),
            kind,
        }
    }

    /// Zero operator on `R^n`.
    pub fn zero(n: usize, kind: HatKind) -> Self {
        Self::projection(DMatrix::zeros(n, 0), kind)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }
    pub fn kind(&self) -> HatKind {
        self.kind
    }
    pub fn n(&self) -> usize {
        self.basis.nrows()
    }
    /// Number of basis vectors (the rank).
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
    pub fn is_projection(&self) -> bool {
        !matches!(self.kind, HatKind::Ridge { .. })
    }
    pub fn trace(&self) -> f64 {
        self.weights.sum()
    }

    /// `U^T y`.
    pub fn coords(&self, y: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(y)
    }

    /// `H y`.
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let c = self.coords(y).component_mul(&self.weights);
        &self.basis * c
    }

    /// `y^T H y`.
    pub fn quad(&self, y: &DVector<f64>) -> f64 {
        let c = self.coords(y);
        c.iter().zip(self.weights.iter()).map(|(a, w)| w * a * a).sum()
    }

    /// Dense `n x n` matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let scaled = &self.basis * DMatrix::from_diagonal(&self.weights);
        scaled * self.basis.transpose()
    }
}

/// Hat operator for the columns of `x_sub`.
pub fn make_hat(x_sub: &DMatrix<f64>, kind: HatKind) -> Result<HatOperator> {
    if x_sub.ncols() == 0 {
        return Err(Error::EmptyGroup);
    }
    if let HatKind::Ridge { lambda } = kind {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("ridge lambda must be >= 0, got {lambda}")));
        }
    }
    let n = x_sub.nrows();
    let svd = x_sub.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let d = &svd.singular_values;
    let dmax = d.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..d.len()).filter(|&i| d[i] > RANK_TOL * dmax && dmax > 0.0).collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    let mut sv = DVector::zeros(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        basis.set_column(c, &u.column(i));
        sv[c] = d[i];
    }
    let weights = match kind {
        HatKind::Ridge { lambda } => sv.map(|di| di * di / (di * di + lambda)),
        _ => DVector::from_element(keep.len(), 1.0),
    };
    Ok(HatOperator {
        basis,
        weights,
        singular_values: sv,
        kind,
    })
}

/// `G(theta) = I - sum_k theta_k H_k`.
#[derive(Debug, Clone, Copy)]
pub struct GTheta<'a> {
    pub theta: &'a DVector<f64>,
    pub hats: &'a [HatOperator],
}

impl<'a> GTheta<'a> {
    pub fn new(theta: &'a DVector<f64>, hats: &'a [HatOperator]) -> Result<Self> {
        if theta.len() != hats.len() {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} entries for {} hats",
                theta.len(),
                hats.len()
            )));
        }
        if let Some(h) = hats.first() {
            if hats.iter().any(|o| o.n() != h.n()) {
                return Err(Error::DimensionMismatch("hats act on different dimensions".into()));
            }
        }
        Ok(Self { theta, hats })
    }

    pub fn n(&self) -> usize {
        self.hats.first().map_or(0, HatOperator::n)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut g = DMatrix::identity(self.n(), self.n());
        for (t, h) in self.theta.iter().zip(self.hats) {
            if *t != 0.0 {
                g -= h.dense() * *t;
            }
        }
        g
    }

    /// `G y`.
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = y.clone();
        for (t, h) in self.theta.iter().zip(self.hats) {
            if *t != 0.0 {
                out -= h.apply(y) * *t;
            }
        }
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.dense()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_feasible(&self) -> bool {
        self.min_eigenvalue() >= -FEASIBILITY_MARGIN
    }
}

/// Rank-one updates of `G^{-1}`, processing negative coefficients first so that
/// every intermediate matrix dominates `G` and stays positive definite.
/// Returns the inverse and `log|G|` (product of the update denominators).
fn sherman_morrison_with_logdet(g: &GTheta) -> Result<(DMatrix<f64>, f64)> {
    if g.hats.iter().any(|h| !h.is_projection()) {
        return Err(invalid("Sherman-Morrison updates require projection hats"));
    }
    let n = g.n();
    let mut inv = DMatrix::<f64>::identity(n, n);
    let mut log_det = 0.0;
    let mut order: Vec<usize> = (0..g.hats.len()).collect();
    order.sort_by(|&a, &b| g.theta[a].partial_cmp(&g.theta[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut step = 0;
    let mut w = DVector::zeros(n);
    for k in order {
        let t = g.theta[k];
        if t == 0.0 {
            step += g.hats[k].rank();
            continue;
        }
        for u in g.hats[k].basis().column_iter() {
            inv.mul_to(&u, &mut w);
            let den = 1.0 - t * u.dot(&w);
            if den.abs() < 1e-12 {
                return Err(Error::SingularUpdate {
                    step,
                    denominator: den,
                });
            }
            log_det += den.abs().ln();
            if den < 0.0 {
                log_det = f64::NAN;
            }
            inv.ger(t / den, &w, &w, 1.0);
            step += 1;
        }
    }
    Ok((inv, log_det))
}

/// `G(theta)^{-1}` by rank-one Sherman-Morrison updates.
pub fn sherman_morrison_inverse(g: &GTheta) -> Result<DMatrix<f64>> {
    sherman_morrison_with_logdet(g).map(|(inv, _)| inv)
}

/// `G(theta)^{-1}` by dense Cholesky factorisation.
pub fn dense_inverse(g: &GTheta) -> Result<DMatrix<f64>> {
    dense_inverse_with_logdet(g).map(|(inv, _)| inv)
}

fn dense_inverse_with_logdet(g: &GTheta) -> Result<(DMatrix<f64>, f64)> {
    let dense = g.dense();
    let n = dense.nrows();
    let shifted = &dense - DMatrix::identity(n, n) * FEASIBILITY_MARGIN;
    if shifted.cholesky().is_none() {
        return Err(Error::InfeasibleTheta {
            min_eigenvalue: g.min_eigenvalue(),
        });
    }
    let chol = dense.cholesky().ok_or(Error::InfeasibleTheta {
        min_eigenvalue: FEASIBILITY_MARGIN,
    })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((chol.inverse(), log_det))
}

/// `log|G(theta)|`.
pub fn log_det_g(g: &GTheta) -> Result<f64> {
    let eig = if g.hats.iter().all(HatOperator::is_projection) {
        let basis = StackedBasis::new(g.hats);
        let s = basis.reduced_matrix(g.theta);
        s.symmetric_eigenvalues()
    } else {
        g.dense().symmetric_eigenvalues()
    };
    let mut acc = 0.0;
    let mut min = f64::INFINITY;
    for &e in eig.iter() {
        min = min.min(e);
        acc += e.max(f64::MIN_POSITIVE).ln();
    }
    if min <= 1e-12 {
        return Err(Error::InfeasibleTheta { min_eigenvalue: min });
    }
    Ok(acc)
}

/// All hat bases side by side, `U = [U_1, ..., U_K]` (`n x s`), with the
/// square-root factor `R` of `C = U^T U = R^T R`.
#[derive(Debug, Clone)]
pub struct StackedBasis {
    u: DMatrix<f64>,
    weights: DVector<f64>,
    group_of: Vec<usize>,
    ranges: Vec<std::ops::Range<usize>>,
    gram: DMatrix<f64>,
    root: DMatrix<f64>,
    ones: DVector<f64>,
    gram_max_eigenvalue: f64,
}

impl StackedBasis {
    pub fn new(hats: &[HatOperator]) -> Self {
        let n = hats.first().map_or(0, HatOperator::n);
        let s: usize = hats.iter().map(HatOperator::rank).sum();
        let mut u = DMatrix::zeros(n, s);
        let mut weights = DVector::zeros(s);
        let mut group_of = Vec::with_capacity(s);
        let mut ranges = Vec::with_capacity(hats.len());
        let mut at = 0;
        for (k, h) in hats.iter().enumerate() {
            let m = h.rank();
            u.view_mut((0, at), (n, m)).copy_from(h.basis());
            weights.rows_mut(at, m).copy_from(h.weights());
            group_of.extend(std::iter::repeat_n(k, m));
            ranges.push(at..at + m);
            at += m;
        }
        let gram = u.tr_mul(&u);
        let ones = DVector::from_iterator(u.ncols(), u.column_iter().map(|c| c.sum()));
        let eig = gram.clone().symmetric_eigen();
        let gram_max_eigenvalue = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let mut root = eig.eigenvectors.transpose();
        for (i, mut row) in root.row_iter_mut().enumerate() {
            row *= eig.eigenvalues[i].max(0.0).sqrt();
        }
        Self {
            u,
            weights,
            group_of,
            ranges,
            gram,
            root,
            ones,
            gram_max_eigenvalue,
        }
    }

    /// `U^T 1`.
    pub fn ones(&self) -> &DVector<f64> {
        &self.ones
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }
    pub fn ranges(&self) -> &[std::ops::Range<usize>] {
        &self.ranges
    }
    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }
    pub fn s(&self) -> usize {
        self.u.ncols()
    }
    pub fn k(&self) -> usize {
        self.ranges.len()
    }

    /// `d_j = theta_{g(j)} w_j`.
    fn scaled_weights(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.s(),
            self.group_of.iter().zip(self.weights.iter()).map(|(&g, &w)| theta[g] * w),
        )
    }

    /// `S = I - R D R^T`, whose spectrum is that of `G` apart from unit eigenvalues.
    pub fn reduced_matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let s = self.s();
        let d = self.scaled_weights(theta);
        let mut rd = self.root.clone();
        for (j, mut col) in rd.column_iter_mut().enumerate() {
            col *= d[j];
        }
        DMatrix::identity(s, s) - rd * self.root.transpose()
    }
}

/// Route used to evaluate `G(theta)^{-1}`-dependent quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InverseStrategy {
    #[default]
    Gram,
    ShermanMorrison,
    Dense,
}

/// `log|G|`, `tr(G^{-1} H_k)` and `tr(G^{-1} H_k G^{-1} H_l)`.
#[derive(Debug, Clone)]
pub struct PenaltyTerms {
    pub log_det: f64,
    pub trace_grad: DVector<f64>,
    pub trace_hess: DMatrix<f64>,
}

/// Evaluates the log-determinant penalty and its derivatives for fixed hats.
#[derive(Debug, Clone)]
pub struct LogDetEngine {
    hats: Vec<HatOperator>,
    basis: StackedBasis,
    strategy: InverseStrategy,
}

impl LogDetEngine {
    pub fn new(hats: Vec<HatOperator>, strategy: InverseStrategy) -> Result<Self> {
        if hats.is_empty() {
            return Err(invalid("no hats"));
        }
        let n = hats[0].n();
        if hats.iter().any(|h| h.n() != n) {
            return Err(Error::DimensionMismatch("hats act on different dimensions".into()));
        }
        if strategy == InverseStrategy::ShermanMorrison && hats.iter().any(|h| !h.is_projection()) {
            return Err(invalid("Sherman-Morrison updates require projection hats"));
        }
        let basis = StackedBasis::new(&hats);
        Ok(Self {
            hats,
            basis,
            strategy,
        })
    }

    pub fn hats(&self) -> &[HatOperator] {
        &self.hats
    }
    pub fn basis(&self) -> &StackedBasis {
        &self.basis
    }
    pub fn strategy(&self) -> InverseStrategy {
        self.strategy
    }
    pub fn k(&self) -> usize {
        self.hats.len()
    }

    /// Cholesky factor of `S = I - R D R^T` with the feasibility margin enforced.
    fn reduced_factor(&self, theta: &DVector<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let s_mat = self.basis.reduced_matrix(theta);
        let dim = s_mat.nrows();
        // R D R^T <= max(d) C in the Loewner order, so S - margin I is
        // positive definite whenever 1 - max(d) lambda_max(C) exceeds the margin.
        let d_max = self.basis.scaled_weights(theta).iter().copied().fold(0.0, f64::max);
        if 1.0 - d_max * self.basis.gram_max_eigenvalue <= 2.0 * FEASIBILITY_MARGIN {
            let shifted = &s_mat - DMatrix::identity(dim, dim) * FEASIBILITY_MARGIN;
            if shifted.cholesky().is_none() {
                return Err(Error::InfeasibleTheta {
                    min_eigenvalue: s_mat.symmetric_eigenvalues().min().min(1.0),
                });
            }
        }
        s_mat.cholesky().ok_or(Error::InfeasibleTheta {
            min_eigenvalue: FEASIBILITY_MARGIN,
        })
    }

    fn chol_log_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
        2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `U^T G^{-1} U` and `log|G|`.
    fn inner(&self, theta: &DVector<f64>) -> Result<(DMatrix<f64>, f64)> {
        match self.strategy {
            InverseStrategy::Gram => {
                let chol = self.reduced_factor(theta)?;
                let log_det = Self::chol_log_det(&chol);
                let y = chol
                    .l()
                    .solve_lower_triangular(&self.basis.root)
                    .ok_or(Error::InfeasibleTheta {
                        min_eigenvalue: FEASIBILITY_MARGIN,
                    })?;
                Ok((y.tr_mul(&y), log_det))
            }
            InverseStrategy::ShermanMorrison => {
                let g = GTheta::new(theta, &self.hats)?;
                let (inv, log_det) = sherman_morrison_with_logdet(&g)?;
                if !log_det.is_finite() {
                    return Err(Error::InfeasibleTheta {
                        min_eigenvalue: g.min_eigenvalue(),
                    });
                }
                let w = self.basis.u.tr_mul(&(&inv * &self.basis.u));
                Ok((w, log_det))
            }
            InverseStrategy::Dense => {
                let g = GTheta::new(theta, &self.hats)?;
                let (inv, log_det) = dense_inverse_with_logdet(&g)?;
                let w = self.basis.u.tr_mul(&(&inv * &self.basis.u));
                Ok((w, log_det))
            }
        }
    }

    /// `log|G(theta)|` only; errors when `theta` is infeasible.
    pub fn log_det(&self, theta: &DVector<f64>) -> Result<f64> {
        match self.strategy {
            InverseStrategy::Gram => self.reduced_factor(theta).map(|c| Self::chol_log_det(&c)),
            _ => self.inner(theta).map(|(_, l)| l),
        }
    }

    pub fn terms(&self, theta: &DVector<f64>) -> Result<PenaltyTerms> {
        let k = self.k();
        let (w, log_det) = self.inner(theta)?;
        let wt = &self.basis.weights;
        let mut trace_grad = DVector::zeros(k);
        let mut trace_hess = DMatrix::zeros(k, k);
        for (a, ra) in self.basis.ranges.iter().enumerate() {
            trace_grad[a] = ra.clone().map(|i| wt[i] * w[(i, i)]).sum();
            for (b, rb) in self.basis.ranges.iter().enumerate().skip(a) {
                let mut acc = 0.0;
                for i in ra.clone() {
                    for j in rb.clone() {
                        acc += wt[i] * wt[j] * w[(i, j)] * w[(i, j)];
                    }
                }
                trace_hess[(a, b)] = acc;
                trace_hess[(b, a)] = acc;
            }
        }
        Ok(PenaltyTerms {
            log_det,
            trace_grad,
            trace_hess,
        })
    }
}
