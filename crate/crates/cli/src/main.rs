use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use protosel_core::estimation::{run_estimation_experiment, EstimationConfig, EstimatorKind};
use protosel_core::harness::{bench_statistics, load_dataset, run_experiment, BenchConfig, ExperimentConfig};
use protosel_core::multivariate::{run_multivariate_test, MultiMethod, MultivariateOptions};
use protosel_core::sampler::HitAndRunConfig;
use protosel_core::univariate::{run_univariate_test, UniMethod, UnivariateOptions};

const CONFIG_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "protosel", version, about = "Selective tests for group-wide signal via supervised prototypes")]
struct Cli {
    /// TOML config file; its values override command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named simulation preset.
    Simulate(SimulateArgs),
    /// Test one group of a dataset for signal.
    Test(TestArgs),
    /// Run the penalized estimation comparison.
    Estimate(EstimateArgs),
    /// Time the likelihood-ratio statistics.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    preset: Option<String>,
    /// Replication multiplier.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Use replication and sampler sizes of the published experiments.
    #[arg(long)]
    paper_scale: bool,
    /// List the available presets and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
enum Model {
    Univariate,
    Multivariate,
}

#[derive(clap::Args)]
struct TestArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Response file; defaults to a `y` column in the data file.
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Lasso penalty, one value or one per group (comma separated).
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Index of the tested group.
    #[arg(long, default_value_t = 0)]
    tested: usize,
    #[arg(long, default_value_t = 10_000)]
    hr_samples: usize,
    #[arg(long, default_value_t = 2_000)]
    hr_burn_in: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(clap::Args)]
struct EstimateArgs {
    #[arg(long, default_value = "appendixA")]
    preset: String,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_delimiter = ',')]
    ns: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    sparsities: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

/// Overrides read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    version: u32,
    seed: Option<u64>,
    scale: Option<f64>,
    out: Option<PathBuf>,
    simulate: Option<SimulateSection>,
    test: Option<TestSection>,
    estimate: Option<EstimationConfig>,
    bench: Option<BenchConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateSection {
    preset: Option<String>,
    paper_scale: Option<bool>,
    /// Full experiment definition replacing the preset.
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TestSection {
    data: Option<PathBuf>,
    groups: Option<PathBuf>,
    y: Option<PathBuf>,
    model: Option<Model>,
    method: Option<String>,
    sigma2: Option<f64>,
    lambda: Option<Vec<f64>>,
    tested: Option<usize>,
    hr_samples: Option<usize>,
    hr_burn_in: Option<usize>,
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ConfigFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if cfg.version != CONFIG_VERSION {
        bail!("{}: config version {} is not supported (expected {CONFIG_VERSION})", path.display(), cfg.version);
    }
    Ok(cfg)
}

fn simulate(mut a: SimulateArgs, cfg: ConfigFile) -> Result<()> {
    if a.list {
        for p in ExperimentConfig::PRESETS {
            println!("{p}");
        }
        return Ok(());
    }
    a.seed = cfg.seed.or(a.seed);
    a.scale = cfg.scale.unwrap_or(a.scale);
    a.out = cfg.out.unwrap_or(a.out);
    let section = cfg.simulate.unwrap_or_default();
    a.preset = section.preset.or(a.preset);
    a.paper_scale = section.paper_scale.unwrap_or(a.paper_scale);
    let mut exp = match (section.experiment, &a.preset) {
        (Some(e), _) => e,
        (None, Some(p)) => ExperimentConfig::preset(p)?,
        (None, None) => bail!("--preset is required (see --list)"),
    };
    if a.paper_scale {
        exp = exp.paper_scale();
    }
    exp = exp.scaled(a.scale)?;
    if let Some(s) = a.seed {
        exp.seed = s;
    }
    eprintln!("running {} ({} replications, {} methods)", exp.id, exp.replications, exp.methods.len());
    let out = run_experiment(&exp)?;
    out.write(&a.out)?;
    for m in &out.summary.methods {
        let power: Vec<String> = m.power.iter().map(|p| format!("power@{}={:.3}", p.alpha, p.rate)).collect();
        println!(
            "{:<10} {} ks_p={} valid={}/{} flagged={}",
            m.method,
            power.join(" "),
            m.ks_p_value.map_or("NA".into(), |v| format!("{v:.3}")),
            m.valid,
            m.rows,
            m.flagged
        );
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn test(mut a: TestArgs, cfg: ConfigFile) -> Result<()> {
    let s = cfg.test.unwrap_or_default();
    a.data = s.data.or(a.data);
    a.groups = s.groups.or(a.groups);
    a.y = s.y.or(a.y);
    a.model = s.model.or(a.model);
    a.method = s.method.or(a.method);
    a.sigma2 = s.sigma2.or(a.sigma2);
    if let Some(l) = s.lambda {
        a.lambda = l;
    }
    a.tested = s.tested.unwrap_or(a.tested);
    a.hr_samples = s.hr_samples.unwrap_or(a.hr_samples);
    a.hr_burn_in = s.hr_burn_in.unwrap_or(a.hr_burn_in);
    a.seed = cfg.seed.unwrap_or(a.seed);

    let data = a.data.context("--data is required")?;
    let groups = a.groups.context("--groups is required")?;
    let method = a.method.context("--method is required")?;
    let sigma2 = a.sigma2.context("--sigma2 is required")?;
    let (design, y) = load_dataset(&data, &groups, a.y.as_deref())?;
    if a.tested >= design.k() {
        bail!("--tested {} but the dataset has {} groups", a.tested, design.k());
    }
    let hr = HitAndRunConfig::new(a.hr_samples, a.hr_burn_in, a.seed);
    let result = match a.model.unwrap_or(Model::Univariate) {
        Model::Univariate => {
            let m: UniMethod = method.parse()?;
            if a.lambda.len() > 1 {
                bail!("the univariate model takes a single --lambda");
            }
            let opts = UnivariateOptions {
                sigma2,
                lambda: a.lambda.first().copied(),
                hr,
                ..UnivariateOptions::default()
            };
            run_univariate_test(m, &design.group_matrix(a.tested), &y, &opts)?
        }
        Model::Multivariate => {
            let m: MultiMethod = method.parse()?;
            let lambdas = match a.lambda.len() {
                0 if m.is_sampled() => bail!("--lambda is required for {m}"),
                1 => vec![a.lambda[0]; design.k()],
                _ => a.lambda.clone(),
            };
            let opts = MultivariateOptions {
                sigma2,
                lambdas,
                hr,
                smoothed_hr: false,
                oracle_supports: None,
                tested: a.tested,
            };
            run_multivariate_test(m, &design, &y, &opts)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn estimate(mut a: EstimateArgs, cfg: ConfigFile) -> Result<()> {
    if !a.preset.eq_ignore_ascii_case("appendixA") {
        bail!("unknown estimation preset '{}' (known: appendixA)", a.preset);
    }
    a.seed = cfg.seed.or(a.seed);
    a.scale = cfg.scale.unwrap_or(a.scale);
    a.out = cfg.out.unwrap_or(a.out);
    let mut exp = cfg.estimate.unwrap_or_default();
    if !(a.scale > 0.0) {
        bail!("--scale must be positive");
    }
    exp.replications = ((exp.replications as f64 * a.scale).round() as usize).max(1);
    if let Some(s) = a.seed {
        exp.seed = s;
    }
    eprintln!("running appendixA ({} cells x {} replications)", exp.cells.len(), exp.replications);
    let results = run_estimation_experiment(&exp)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("appendixA_summary.json"), serde_json::to_string_pretty(&results)?)?;
    let mut header = format!("{:<8} {:>15} {:>4} {:>4}", "sparsity", "theta", "mu", "rho");
    for k in EstimatorKind::ALL {
        header.push_str(&format!(" {:>8}", k.tag()));
    }
    println!("{header}");
    for r in &results {
        let mut line = format!(
            "{:<8} {:>15} {:>4} {:>4}",
            format!("{:?}", r.cell.sparsity),
            r.cell.theta.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("/"),
            r.cell.mu,
            r.cell.rho
        );
        for k in EstimatorKind::ALL {
            line.push_str(&format!(" {:>8.3}", r.ratio(k)));
        }
        println!("{line}");
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn bench(a: BenchArgs, cfg: ConfigFile) -> Result<()> {
    let mut b = cfg.bench.unwrap_or_default();
    if !a.ns.is_empty() {
        b.ns = a.ns;
    }
    if !a.sparsities.is_empty() {
        b.sparsities = a.sparsities;
    }
    let scale = cfg.scale.unwrap_or(a.scale);
    if !(scale > 0.0) {
        bail!("--scale must be positive");
    }
    b.replications = ((b.replications as f64 * scale).round() as usize).max(1);
    if let Some(s) = cfg.seed.or(a.seed) {
        b.seed = s;
    }
    let out = cfg.out.unwrap_or(a.out);
    let rows = bench_statistics(&b)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("bench.json"), serde_json::to_string_pretty(&rows)?)?;
    println!("{:>6} {:>5} {:>4} {:>12} {:>10} {:>10} {:>8}", "alpha", "n", "m", "ELR-naive", "ELR-SM", "ELR-Gram", "ALR");
    for r in rows {
        println!(
            "{:>6} {:>5} {:>4} {:>12} {:>10.3} {:>10.3} {:>8.4}",
            r.sparsity,
            r.n,
            r.selected_per_group,
            r.elr_naive_ms.map_or("-".into(), |v| format!("{v:.3}")),
            r.elr_sm_ms,
            r.elr_gram_ms,
            r.alr_ms
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => read_config(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Simulate(a) => simulate(a, cfg),
        Command::Test(a) => test(a, cfg),
        Command::Estimate(a) => estimate(a, cfg),
        Command::Bench(a) => bench(a, cfg),
    }
}
