//! Data generation, experiment orchestration, timing and dataset loading.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{make_hat, GTheta, GroupedDesign, HatKind, HatOperator, InverseStrategy};
use crate::multivariate::{run_multivariate_roster, AlrEvaluator, ElrEvaluator, MultiMethod, MultivariateOptions};
use crate::rng;
use crate::sampler::HitAndRunConfig;
use crate::selection::calibrate_lambda;
use crate::stats::{ks_uniform, qq_uniform, rejection_rate};
use crate::univariate::{run_univariate_roster, TestResult, UniMethod, UnivariateOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Worker pool sized by `PROTOSEL_THREADS` (all cores when unset or zero).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("PROTOSEL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| invalid(format!("PROTOSEL_THREADS must be an integer, got '{v}'")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))
}

/// Equicorrelated Gaussian columns within each group, `x_j = sqrt(rho) g_k + sqrt(1 - rho) e_j`,
/// then standardized.
pub fn generate_design(n: usize, sizes: &[usize], rho: f64, seed: u64) -> Result<GroupedDesign> {
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid(format!("rho must lie in [0, 1), got {rho}")));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::EmptyGroup);
    }
    let p: usize = sizes.iter().sum();
    let mut r = rng::stream(seed, &[rng::tag("design")]);
    let mut x = DMatrix::zeros(n, p);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut col = 0;
    for &s in sizes {
        let factor = DVector::from_fn(n, |_, _| rng::normal(&mut r));
        for _ in 0..s {
            for i in 0..n {
                x[(i, col)] = a * factor[i] + b * rng::normal(&mut r);
            }
            col += 1;
        }
    }
    GroupedDesign::from_raw(x, GroupedDesign::contiguous_groups(sizes))
}

fn noise(n: usize, sigma2: f64, seed: u64) -> DVector<f64> {
    let mut r = rng::stream(seed, &[rng::tag("noise")]);
    let s = sigma2.sqrt();
    DVector::from_fn(n, |_, _| s * rng::normal(&mut r))
}

/// `y = X beta + eps`.
pub fn linear_response(design: &GroupedDesign, beta: &DVector<f64>, sigma2: f64, seed: u64) -> Result<DVector<f64>> {
    if beta.len() != design.p() {
        return Err(Error::DimensionMismatch(format!("beta has {} entries for p = {}", beta.len(), design.p())));
    }
    Ok(design.x() * beta + noise(design.n(), sigma2, seed))
}

/// `y = G(theta)^{-1} (mu 1 + eps)`.
pub fn prototype_response(hats: &[HatOperator], theta: &DVector<f64>, mu: f64, sigma2: f64, seed: u64) -> Result<DVector<f64>> {
    let n = hats.first().map(HatOperator::n).ok_or_else(|| invalid("no hats"))?;
    let rhs = noise(n, sigma2, seed).add_scalar(mu);
    let g = GTheta::new(theta, hats)?;
    let dense = g.dense();
    match dense.cholesky() {
        Some(c) => Ok(c.solve(&rhs)),
        None => Err(Error::InfeasibleTheta {
            min_eigenvalue: g.min_eigenvalue(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Univariate,
    Multivariate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResponseSpec {
    /// `y = X beta + eps`, `beta` over all columns.
    Linear { beta: Vec<f64> },
    /// Prototype model with fixed hats on `supports` (local indices; all columns when absent).
    Prototype {
        theta: Vec<f64>,
        mu: f64,
        supports: Option<Vec<Vec<usize>>>,
        ridge_lambda: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LambdaSpec {
    /// One penalty per group.
    Fixed { values: Vec<f64> },
    /// Penalty giving about `target` active columns on pilot null responses.
    Calibrated { target: usize, trials: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub model: ModelKind,
    pub n: usize,
    pub group_sizes: Vec<usize>,
    pub rho: f64,
    pub response: ResponseSpec,
    pub sigma2: f64,
    pub replications: usize,
    pub methods: Vec<String>,
    pub hr_samples: usize,
    pub hr_burn_in: usize,
    pub lambda: LambdaSpec,
    /// Non-null columns of each group (local indices) for the oracle tests.
    pub oracle_supports: Option<Vec<Vec<usize>>>,
    pub ridge_lambda: f64,
    pub smoothed_hr: bool,
    pub tested: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
}

const UNIVARIATE_ROSTER: [&str; 10] = ["ELR-HR", "ELR-Chi", "ALR-HR", "ALR-Exact", "PT", "F", "F-HR", "LR-all", "t-mean", "t-PC"];

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn beta_from_blocks(sizes: &[usize], blocks: &[(usize, usize, f64)]) -> Vec<f64> {
    let p: usize = sizes.iter().sum();
    let mut beta = vec![0.0; p];
    let starts: Vec<usize> = sizes.iter().scan(0, |s, &g| {
        let at = *s;
        *s += g;
        Some(at)
    }).collect();
    for &(k, count, value) in blocks {
        for j in 0..count {
            beta[starts[k] + j] = value;
        }
    }
    beta
}

fn support_of(beta: &[f64], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut at = 0;
    for &s in sizes {
        out.push((0..s).filter(|&j| beta[at + j] != 0.0).collect());
        at += s;
    }
    out
}

impl ExperimentConfig {
    fn univariate(id: &str, beta: Vec<f64>, with_oracle: bool) -> Self {
        let sizes = vec![50];
        let oracle = with_oracle.then(|| support_of(&beta, &sizes));
        let mut methods = strings(&UNIVARIATE_ROSTER);
        if with_oracle {
            methods.push("LR-or".into());
        }
        Self {
            id: id.into(),
            model: ModelKind::Univariate,
            n: 100,
            group_sizes: sizes,
            rho: 0.0,
            response: ResponseSpec::Linear { beta },
            sigma2: 1.0,
            replications: 200,
            methods,
            hr_samples: 10_000,
            hr_burn_in: 2_000,
            lambda: LambdaSpec::Calibrated { target: 10, trials: 50 },
            oracle_supports: oracle,
            ridge_lambda: 10.0,
            smoothed_hr: false,
            tested: 0,
            seed: 20_170_101,
            alphas: vec![0.05, 0.1],
        }
    }

    fn fig1(id: &str, theta: f64) -> Self {
        Self {
            id: id.into(),
            rho: 0.3,
            response: ResponseSpec::Prototype {
                theta: vec![theta],
                mu: 0.0,
                supports: None,
                ridge_lambda: Some(10.0),
            },
            methods: strings(&["F-classic", "LR-ridge"]),
            lambda: LambdaSpec::Fixed { values: vec![] },
            oracle_supports: None,
            ..Self::univariate(id, vec![0.0; 50], false)
        }
    }

    fn multivariate(id: &str, n: usize, size: usize, rho: f64, first: f64, methods: &[&str]) -> Self {
        let sizes = vec![size; 4];
        let mut blocks = vec![(1, 10, 0.5), (2, 2, 0.5), (3, 5, 0.5)];
        if first != 0.0 {
            blocks.push((0, 2, first));
        }
        let beta = beta_from_blocks(&sizes, &blocks);
        Self {
            id: id.into(),
            model: ModelKind::Multivariate,
            n,
            group_sizes: sizes,
            rho,
            response: ResponseSpec::Linear { beta },
            sigma2: 1.0,
            replications: 200,
            methods: strings(methods),
            hr_samples: 10_000,
            hr_burn_in: 2_000,
            lambda: LambdaSpec::Calibrated { target: 10, trials: 50 },
            oracle_supports: Some(vec![(0..2).collect(), (0..10).collect(), (0..2).collect(), (0..5).collect()]),
            ridge_lambda: 10.0,
            smoothed_hr: false,
            tested: 0,
            seed: 20_170_601,
            alphas: vec![0.05, 0.1],
        }
    }

    pub const PRESETS: [&'static str; 12] = [
        "null",
        "table2-single",
        "table2-moderate",
        "table2-spread",
        "fig1",
        "fig1-null",
        "fig4-null",
        "fig4-signal",
        "fig5-null",
        "fig5",
        "fig5-strong",
        "rho03-null",
    ];

    /// Named configurations at desk scale.
    pub fn preset(name: &str) -> Result<Self> {
        let p = 50;
        let fig5 = ["ALR-lasso", "ALR-all", "ALR-or", "F", "F-all", "t-mean", "t-PC"];
        Ok(match name {
            "null" => Self::univariate(name, vec![0.0; p], false),
            "rho03-null" => Self {
                rho: 0.3,
                ..Self::univariate(name, vec![0.0; p], false)
            },
            "table2-single" => Self::univariate(name, beta_from_blocks(&[p], &[(0, 1, 4.0)]), true),
            "table2-moderate" => Self::univariate(name, beta_from_blocks(&[p], &[(0, 5, 4.0 / 5f64.sqrt())]), true),
            "table2-spread" => {
                let mut beta = vec![0.0; p];
                for j in 1..=10 {
                    beta[j - 1] = 4.0 * (11 - j) as f64 / 382f64.sqrt();
                }
                Self::univariate(name, beta, true)
            }
            "fig1" => Self::fig1(name, 1.2),
            "fig1-null" => Self::fig1(name, 0.0),
            "fig4-null" => Self::multivariate(name, 100, 25, 0.3, 0.0, &["ALR-lasso", "ELR-lasso"]),
            "fig4-signal" => Self::multivariate(name, 100, 25, 0.3, 2.0, &["ALR-lasso", "ELR-lasso"]),
            "fig5-null" => Self::multivariate(name, 300, 50, 0.0, 0.0, &fig5),
            "fig5" => Self::multivariate(name, 300, 50, 0.0, 2.0, &fig5),
            "fig5-strong" => Self::multivariate(name, 300, 50, 0.0, 3.0, &fig5),
            _ => {
                return Err(invalid(format!(
                    "unknown preset '{name}' (known: {})",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    /// Multiply the number of replications by `f`, leaving everything else unchanged.
    pub fn scaled(mut self, f: f64) -> Result<Self> {
        if !(f > 0.0) {
            return Err(invalid("scale must be positive"));
        }
        self.replications = ((self.replications as f64 * f).round() as usize).max(1);
        Ok(self)
    }

    /// Replication and sampler sizes used for the published figures.
    pub fn paper_scale(mut self) -> Self {
        self.replications = 800;
        self.hr_samples = 50_000;
        self.hr_burn_in = 10_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_sizes.is_empty() || self.tested >= self.group_sizes.len() {
            return Err(invalid("tested group out of range"));
        }
        if self.replications == 0 || self.methods.is_empty() {
            return Err(invalid("need at least one replication and one method"));
        }
        if !(self.sigma2 > 0.0) {
            return Err(invalid("sigma2 must be positive"));
        }
        if self.model == ModelKind::Univariate && self.group_sizes.len() != 1 {
            return Err(invalid("the univariate model uses a single group"));
        }
        for m in &self.methods {
            match self.model {
                ModelKind::Univariate => {
                    m.parse::<UniMethod>()?;
                }
                ModelKind::Multivariate => {
                    m.parse::<MultiMethod>()?;
                }
            }
        }
        Ok(())
    }
}

/// One test outcome on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub replication: usize,
    pub method: String,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub flags: String,
    pub error: Option<String>,
    pub selected: usize,
    pub wall_ms: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEntry {
    pub alpha: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rows: usize,
    pub valid: usize,
    pub flagged: usize,
    pub errors: usize,
    pub power: Vec<PowerEntry>,
    pub ks_statistic: Option<f64>,
    pub ks_p_value: Option<f64>,
    /// `(uniform quantile, sorted p-value)` pairs.
    pub qq: Vec<(f64, f64)>,
    pub mean_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub replications: usize,
    pub seed: u64,
    pub lambdas: Vec<f64>,
    pub lambda_mean_active: Vec<f64>,
    pub methods: Vec<MethodSummary>,
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn method(&self, tag: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == tag)
    }

    pub fn power(&self, tag: &str, alpha: f64) -> Option<f64> {
        self.method(tag)?
            .power
            .iter()
            .find(|p| (p.alpha - alpha).abs() < 1e-12)
            .map(|p| p.rate)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Summary,
}

impl ExperimentOutput {
    /// Writes `<id>_rows.csv` and `<id>_summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let id = &self.summary.experiment;
        write_rows_csv(&dir.join(format!("{id}_rows.csv")), &self.rows)?;
        fs::write(dir.join(format!("{id}_summary.json")), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }

    /// p-values of one method in replication order (rows with errors skipped).
    pub fn p_values(&self, tag: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == tag).filter_map(|r| r.p_value).collect()
    }
}

pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Power and uniformity summaries recomputed from raw rows.
pub fn summarize(cfg: &ExperimentConfig, rows: &[ResultRow], lambdas: Vec<f64>, lambda_mean_active: Vec<f64>) -> Summary {
    let mut by_method: BTreeMap<usize, (String, Vec<&ResultRow>)> = BTreeMap::new();
    for r in rows {
        let pos = cfg.methods.iter().position(|m| m.eq_ignore_ascii_case(&r.method)).unwrap_or(usize::MAX);
        by_method.entry(pos).or_insert_with(|| (r.method.clone(), Vec::new())).1.push(r);
    }
    let methods = by_method
        .into_values()
        .map(|(method, rs)| {
            let p: Vec<f64> = rs.iter().filter_map(|r| r.p_value).collect();
            let ks = (!p.is_empty()).then(|| ks_uniform(&p));
            MethodSummary {
                method,
                rows: rs.len(),
                valid: p.len(),
                flagged: rs.iter().filter(|r| !r.flags.is_empty()).count(),
                errors: rs.iter().filter(|r| r.error.is_some()).count(),
                power: cfg
                    .alphas
                    .iter()
                    .map(|&alpha| PowerEntry {
                        alpha,
                        rate: if p.is_empty() { f64::NAN } else { rejection_rate(&p, alpha) },
                    })
                    .collect(),
                ks_statistic: ks.map(|k| k.statistic),
                ks_p_value: ks.map(|k| k.p_value),
                qq: qq_uniform(&p),
                mean_wall_ms: rs.iter().map(|r| r.wall_ms).sum::<f64>() / rs.len().max(1) as f64,
            }
        })
        .collect();
    Summary {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.id.clone(),
        replications: cfg.replications,
        seed: cfg.seed,
        lambdas,
        lambda_mean_active,
        methods,
        config: cfg.clone(),
    }
}

struct Prepared {
    design: GroupedDesign,
    proto_hats: Vec<HatOperator>,
    lambdas: Vec<f64>,
    lambda_mean_active: Vec<f64>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let design = generate_design(cfg.n, &cfg.group_sizes, cfg.rho, rng::derive_seed(cfg.seed, &[rng::tag("design")]))?;
    let proto_hats = match &cfg.response {
        ResponseSpec::Linear { .. } => Vec::new(),
        ResponseSpec::Prototype { theta, supports, ridge_lambda, .. } => {
            if theta.len() != design.k() {
                return Err(invalid("one theta per group required"));
            }
            let kind = match ridge_lambda {
                Some(l) => HatKind::Ridge { lambda: *l },
                None => HatKind::LeastSquares,
            };
            (0..design.k())
                .map(|k| {
                    let x = design.group_matrix(k);
                    let x = match supports {
                        Some(s) => x.select_columns(&s[k]),
                        None => x,
                    };
                    make_hat(&x, kind)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let (lambdas, lambda_mean_active) = match &cfg.lambda {
        LambdaSpec::Fixed { values } => (values.clone(), vec![]),
        LambdaSpec::Calibrated { target, trials } => {
            let groups: Vec<usize> = match cfg.model {
                ModelKind::Univariate => vec![cfg.tested],
                ModelKind::Multivariate => (0..design.k()).collect(),
            };
            let mut l = Vec::new();
            let mut a = Vec::new();
            for k in groups {
                let c = calibrate_lambda(
                    &design.group_matrix(k),
                    *target,
                    cfg.sigma2,
                    *trials,
                    rng::derive_seed(cfg.seed, &[rng::tag("lambda"), k as u64]),
                )?;
                l.push(c.lambda);
                a.push(c.mean_active);
            }
            (l, a)
        }
    };
    Ok(Prepared {
        design,
        proto_hats,
        lambdas,
        lambda_mean_active,
    })
}

fn response_for(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<DVector<f64>> {
    match &cfg.response {
        ResponseSpec::Linear { beta } => linear_response(&prep.design, &DVector::from_column_slice(beta), cfg.sigma2, seed),
        ResponseSpec::Prototype { theta, mu, .. } => prototype_response(&prep.proto_hats, &DVector::from_column_slice(theta), *mu, cfg.sigma2, seed),
    }
}

fn to_row(cfg: &ExperimentConfig, rep: usize, seed: u64, method: &str, res: Result<TestResult>, wall_ms: f64) -> ResultRow {
    match res {
        Ok(t) => ResultRow {
            experiment: cfg.id.clone(),
            replication: rep,
            method: method.into(),
            statistic: Some(t.statistic),
            p_value: Some(t.p_value),
            flags: t.flags.labels().join("|"),
            error: None,
            selected: t.selected,
            wall_ms,
            seed,
        },
        Err(e) => ResultRow {
            experiment: cfg.id.clone(),
            replication: rep,
            method: method.into(),
            statistic: None,
            p_value: None,
            flags: "error".into(),
            error: Some(e.to_string()),
            selected: 0,
            wall_ms,
            seed,
        },
    }
}

fn run_replication(cfg: &ExperimentConfig, prep: &Prepared, rep: usize) -> Vec<ResultRow> {
    let seed = rng::derive_seed(cfg.seed, &[rep as u64]);
    let y = match response_for(cfg, prep, rng::derive_seed(seed, &[rng::tag("response")])) {
        Ok(y) => y,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|m| to_row(cfg, rep, seed, m, Err(invalid(format!("response generation: {e}"))), 0.0))
                .collect()
        }
    };
    let hr = HitAndRunConfig::new(cfg.hr_samples, cfg.hr_burn_in, rng::derive_seed(seed, &[rng::tag("hit-and-run")]));
    let mut rows = Vec::with_capacity(cfg.methods.len());
    match cfg.model {
        ModelKind::Univariate => {
            let methods: Vec<UniMethod> = cfg.methods.iter().map(|m| m.parse().expect("validated")).collect();
            let opts = UnivariateOptions {
                sigma2: cfg.sigma2,
                lambda: prep.lambdas.first().copied(),
                hr,
                smoothed_hr: cfg.smoothed_hr,
                oracle_support: cfg.oracle_supports.as_ref().map(|s| s[cfg.tested].clone()),
                ridge_lambda: cfg.ridge_lambda,
            };
            let x = prep.design.group_matrix(cfg.tested);
            let sampled: Vec<UniMethod> = methods.iter().copied().filter(UniMethod::is_sampled).collect();
            let mut results: Vec<(UniMethod, Result<TestResult>, f64)> = Vec::new();
            if !sampled.is_empty() {
                let t = Instant::now();
                let r = run_univariate_roster(&sampled, &x, &y, &opts);
                let ms = t.elapsed().as_secs_f64() * 1e3;
                results.extend(r.into_iter().map(|(m, r)| (m, r, ms)));
            }
            for &m in methods.iter().filter(|m| !m.is_sampled()) {
                let t = Instant::now();
                let r = run_univariate_roster(&[m], &x, &y, &opts).pop().expect("one").1;
                results.push((m, r, t.elapsed().as_secs_f64() * 1e3));
            }
            for m in &methods {
                let pos = results.iter().position(|(mm, _, _)| mm == m).expect("ran");
                let (_, r, ms) = results.swap_remove(pos);
                rows.push(to_row(cfg, rep, seed, m.tag(), r, ms));
            }
        }
        ModelKind::Multivariate => {
            let methods: Vec<MultiMethod> = cfg.methods.iter().map(|m| m.parse().expect("validated")).collect();
            let opts = MultivariateOptions {
                sigma2: cfg.sigma2,
                lambdas: prep.lambdas.clone(),
                hr,
                smoothed_hr: cfg.smoothed_hr,
                oracle_supports: cfg.oracle_supports.clone(),
                tested: cfg.tested,
            };
            let sampled: Vec<MultiMethod> = methods.iter().copied().filter(MultiMethod::is_sampled).collect();
            let mut results: Vec<(MultiMethod, Result<TestResult>, f64)> = Vec::new();
            if !sampled.is_empty() {
                let t = Instant::now();
                let r = run_multivariate_roster(&sampled, &prep.design, &y, &opts);
                let ms = t.elapsed().as_secs_f64() * 1e3;
                results.extend(r.into_iter().map(|(m, r)| (m, r, ms)));
            }
            for &m in methods.iter().filter(|m| !m.is_sampled()) {
                let t = Instant::now();
                let r = run_multivariate_roster(&[m], &prep.design, &y, &opts).pop().expect("one").1;
                results.push((m, r, t.elapsed().as_secs_f64() * 1e3));
            }
            for m in &methods {
                let pos = results.iter().position(|(mm, _, _)| mm == m).expect("ran");
                let (_, r, ms) = results.swap_remove(pos);
                rows.push(to_row(cfg, rep, seed, m.tag(), r, ms));
            }
        }
    }
    rows
}

/// Run every method on every replication; per-replication failures become
/// flagged rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let pool = thread_pool()?;
    let rows: Vec<ResultRow> = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|rep| run_replication(cfg, &prep, rep))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    let summary = summarize(cfg, &rows, prep.lambdas.clone(), prep.lambda_mean_active.clone());
    Ok(ExperimentOutput { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub replications: usize,
    pub rho: f64,
    pub k: usize,
    pub seed: u64,
    /// Skip the dense route above this `n`.
    pub dense_max_n: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![100, 200, 500],
            sparsities: vec![0.05, 0.3],
            replications: 200,
            rho: 0.3,
            k: 4,
            seed: 3,
            dense_max_n: usize::MAX,
        }
    }
}

/// Mean milliseconds per replication of each statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sparsity: f64,
    pub n: usize,
    pub selected_per_group: usize,
    pub elr_naive_ms: Option<f64>,
    pub elr_sm_ms: f64,
    pub elr_gram_ms: f64,
    pub alr_ms: f64,
    pub replications: usize,
}

fn mean_ms(mut f: impl FnMut(usize) -> Result<()>, reps: usize) -> Result<f64> {
    let t = Instant::now();
    for b in 0..reps {
        f(b)?;
    }
    Ok(t.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

/// Timing of the likelihood-ratio statistics on an `n x n` design with the
/// first `floor(0.25 alpha n)` columns of each group selected.
pub fn bench_statistics(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut out = Vec::new();
    for &alpha in &cfg.sparsities {
        for &n in &cfg.ns {
            let m = (0.25 * alpha * n as f64).floor() as usize;
            if m == 0 || n % cfg.k != 0 {
                return Err(invalid(format!("bench cell n = {n}, alpha = {alpha} selects no columns or has unequal groups")));
            }
            let design = generate_design(n, &vec![n / cfg.k; cfg.k], cfg.rho, rng::derive_seed(cfg.seed, &[n as u64]))?;
            let hats = (0..cfg.k)
                .map(|k| make_hat(&design.group_matrix(k).columns(0, m).into_owned(), HatKind::LeastSquares))
                .collect::<Result<Vec<_>>>()?;
            let ys: Vec<DVector<f64>> = (0..cfg.replications)
                .map(|b| noise(n, 1.0, rng::derive_seed(cfg.seed, &[n as u64, b as u64])))
                .collect();
            let alr = AlrEvaluator::new(&hats, 1.0, 0)?;
            let sm = ElrEvaluator::new(&hats, 1.0, 0, InverseStrategy::ShermanMorrison)?;
            let gram = ElrEvaluator::new(&hats, 1.0, 0, InverseStrategy::Gram)?;
            let dense = ElrEvaluator::new(&hats, 1.0, 0, InverseStrategy::Dense)?;
            let reps = cfg.replications;
            let alr_ms = mean_ms(|b| alr.evaluate(&ys[b]).map(|_| ()), reps)?;
            let elr_gram_ms = mean_ms(|b| gram.evaluate(&ys[b], None).map(|_| ()), reps)?;
            let elr_sm_ms = mean_ms(|b| sm.evaluate(&ys[b], None).map(|_| ()), reps)?;
            let elr_naive_ms = if n <= cfg.dense_max_n {
                Some(mean_ms(|b| dense.evaluate(&ys[b], None).map(|_| ()), reps)?)
            } else {
                None
            };
            out.push(BenchRow {
                sparsity: alpha,
                n,
                selected_per_group: m,
                elr_naive_ms,
                elr_sm_ms,
                elr_gram_ms,
                alr_ms,
                replications: reps,
            });
        }
    }
    Ok(out)
}

fn dataset_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(dataset_err(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let mut row = Vec::with_capacity(rec.len());
        for (j, field) in rec.iter().enumerate() {
            let f = field.trim();
            if f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan") {
                return Err(dataset_err(path, line, format!("missing value in column '{}'", header[j])));
            }
            let v: f64 = f
                .parse()
                .map_err(|_| dataset_err(path, line, format!("non-numeric value '{f}' in column '{}'", header[j])))?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(dataset_err(path, 1, "no data rows"));
    }
    Ok((header, rows))
}

fn read_groups(path: &Path, p: usize) -> Result<Vec<Vec<usize>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut assign: Vec<Option<(usize, usize)>> = vec![None; p];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(dataset_err(path, line, "expected 'column_index,group_id'"));
        }
        let (c, g) = (rec[0].trim(), rec[1].trim());
        let (Ok(c), Ok(g)) = (c.parse::<usize>(), g.parse::<usize>()) else {
            if line == 1 {
                continue;
            }
            return Err(dataset_err(path, line, format!("non-integer entry '{c},{g}'")));
        };
        if c >= p {
            return Err(dataset_err(path, line, format!("column index {c} out of range (p = {p})")));
        }
        if assign[c].is_some() {
            return Err(dataset_err(path, line, format!("column {c} assigned twice")));
        }
        assign[c] = Some((g, line));
    }
    if let Some(c) = assign.iter().position(Option::is_none) {
        return Err(dataset_err(path, 0, format!("column {c} has no group")));
    }
    let ids: std::collections::BTreeSet<usize> = assign.iter().map(|a| a.expect("checked").0).collect();
    let base = *ids.iter().next().expect("p > 0");
    if base > 1 {
        return Err(dataset_err(path, 0, format!("group ids must start at 0 or 1, first id is {base}")));
    }
    let k = ids.len();
    for (i, &id) in ids.iter().enumerate() {
        if id != base + i {
            let line = assign.iter().flatten().find(|a| a.0 == id).map_or(0, |a| a.1);
            return Err(dataset_err(path, line, format!("unknown group id {id}: expected {} (ids must be consecutive)", base + i)));
        }
    }
    let mut groups = vec![Vec::new(); k];
    for (c, a) in assign.iter().enumerate() {
        groups[a.expect("checked").0 - base].push(c);
    }
    Ok(groups)
}

/// Design CSV (header row), groups CSV (`column_index,group_id`) and a response
/// taken from `y_path` or from a design column named `y`.
pub fn load_dataset(x_path: &Path, groups_path: &Path, y_path: Option<&Path>) -> Result<(GroupedDesign, DVector<f64>)> {
    let (header, rows) = read_numeric_csv(x_path)?;
    let y_col = header.iter().position(|h| h == "y");
    let (y, keep): (DVector<f64>, Vec<usize>) = match (y_path, y_col) {
        (Some(p), _) => {
            let (_, yr) = read_numeric_csv(p)?;
            if yr.iter().any(|r| r.len() != 1) {
                return Err(dataset_err(p, 1, "response file must have one column"));
            }
            if yr.len() != rows.len() {
                return Err(dataset_err(p, yr.len() + 1, format!("{} responses for {} design rows", yr.len(), rows.len())));
            }
            let keep = (0..header.len()).filter(|&j| Some(j) != y_col).collect();
            (DVector::from_iterator(yr.len(), yr.iter().map(|r| r[0])), keep)
        }
        (None, Some(j)) => (
            DVector::from_iterator(rows.len(), rows.iter().map(|r| r[j])),
            (0..header.len()).filter(|&c| c != j).collect(),
        ),
        (None, None) => return Err(dataset_err(x_path, 1, "no response: pass a y file or add a 'y' column")),
    };
    let n = rows.len();
    let x = DMatrix::from_fn(n, keep.len(), |i, j| rows[i][keep[j]]);
    let groups = read_groups(groups_path, keep.len())?;
    Ok((GroupedDesign::from_raw(x, groups)?, y))
}

/// Write a design (and response column) in the format read by [`load_dataset`].
pub fn write_dataset(x_path: &Path, groups_path: &Path, design: &GroupedDesign, y: &DVector<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(x_path)?;
    let mut header: Vec<String> = (0..design.p()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..design.n() {
        let mut rec: Vec<String> = (0..design.p()).map(|j| format!("{:e}", design.x()[(i, j)])).collect();
        rec.push(format!("{:e}", y[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut g = csv::Writer::from_path(groups_path)?;
    g.write_record(["column_index", "group_id"])?;
    for (k, cols) in design.groups().iter().enumerate() {
        for c in cols {
            g.write_record([c.to_string(), k.to_string()])?;
        }
    }
    g.flush()?;
    Ok(())
}
