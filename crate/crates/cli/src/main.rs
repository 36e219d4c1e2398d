use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use car_core::analysis::analyze_log;
use car_core::harness::export::load_summaries;
use car_core::harness::{exact_enumeration, export_summary, rate_fit, run_experiment, ScenarioConfig};
use car_core::{AllocationSpec, UnitRecord};
use car_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "car", version, about = "Covariate-adaptive randomization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write <name>.json and <name>.csv.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's replication count.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the allocation function, as `kind:rho[:lambda]`.
        #[arg(long)]
        alloc: Option<AllocationSpec>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact law of the first n units over all 2^n assignment paths.
    Enumerate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        alloc: Option<AllocationSpec>,
        /// Include every path in the output.
        #[arg(long)]
        paths: bool,
    },
    /// Log-log slope of a metric against n for every summary in a directory.
    Rates {
        #[arg(long = "in")]
        input: PathBuf,
        /// Design gamma; E Imb_n should grow like n^gamma.
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value = "imb")]
        metric: String,
    },
    /// Run the HTTP allocation service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Require `Authorization: Bearer <token>`. Also read from CAR_TOKEN.
        #[arg(long, env = "CAR_TOKEN")]
        token: Option<String>,
    },
    /// Classical and adjusted tests for a finished trial log.
    Analyze {
        /// The service's log.jsonl.
        #[arg(long)]
        log: PathBuf,
        /// One outcome per line, in enrollment order.
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

fn load_scenario(path: &Path, alloc: Option<AllocationSpec>) -> Result<ScenarioConfig> {
    let mut scenario = ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(spec) = alloc {
        scenario.design.rho = spec.rho;
        scenario.design.allocation = spec;
        scenario.validate()?;
    }
    Ok(scenario)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn simulate(path: &Path, reps: Option<usize>, out: &Path, alloc: Option<AllocationSpec>, seed: Option<u64>) -> Result<()> {
    let mut scenario = load_scenario(path, alloc)?;
    if let Some(r) = reps {
        scenario.replications = r;
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    for note in scenario.notes() {
        eprintln!("note: {note}");
    }
    let summary = run_experiment(&scenario)?;
    let stem = if scenario.name.is_empty() { "summary" } else { scenario.name.as_str() };
    export_summary(&summary, out, stem)?;
    eprintln!(
        "{} replications in {:.1}s, wrote {}/{stem}.{{json,csv}}",
        summary.replications,
        summary.wall_time_secs,
        out.display()
    );
    for c in &summary.checkpoints {
        let imb = c.get("imb").expect("imb is always reported");
        let prop = c.get("arm_proportion").expect("arm proportion is always reported");
        println!(
            "n={:<7} E Imb={:<12.5} (se {:.2e})  N1/n={:.4} (se {:.1e})",
            c.n, imb.value, imb.se, prop.value, prop.se
        );
    }
    Ok(())
}

fn enumerate(path: &Path, n: usize, alloc: Option<AllocationSpec>, paths: bool) -> Result<()> {
    let scenario = load_scenario(path, alloc)?;
    let law = exact_enumeration(&scenario, n)?;
    let mut out = json!({
        "n": law.n,
        "path_count": law.paths.len(),
        "total_probability": law.total_probability,
        "mean_imb": law.mean_imb,
        "mean_lambda": law.mean_lambda,
        "n1_distribution": law.n1_distribution,
    });
    if paths {
        out["paths"] = serde_json::to_value(&law.paths)?;
    }
    print_json(&out)
}

#[derive(Serialize)]
struct RateRow {
    scenario: String,
    scenario_hash: String,
    points: usize,
    slope: f64,
    expected: f64,
}

fn rates(dir: &Path, gamma: f64, metric: &str) -> Result<()> {
    let summaries = load_summaries(dir)?;
    if summaries.is_empty() {
        bail!("no summaries in {}", dir.display());
    }
    let mut rows = Vec::new();
    for s in &summaries {
        let points: Vec<(f64, f64)> = s.series(metric).into_iter().map(|(n, e)| (n as f64, e.value)).collect();
        match rate_fit(&points) {
            Ok(fit) => rows.push(RateRow {
                scenario: s.scenario_name.clone(),
                scenario_hash: s.scenario_hash.clone(),
                points: points.len(),
                slope: fit.slope,
                expected: gamma,
            }),
            Err(e) => eprintln!("skipping {}: {e}", s.scenario_name),
        }
    }
    print_json(&rows)
}

fn read_outcomes(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| l.parse().with_context(|| format!("outcome {} is not a number: {l:?}", i + 1)))
        .collect()
}

fn read_log(path: &Path) -> Result<Vec<UnitRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut entry: serde_json::Value = serde_json::from_str(l).with_context(|| format!("log line {}", i + 1))?;
            let unit = entry.get_mut("unit").map(serde_json::Value::take).unwrap_or(entry);
            serde_json::from_value(unit).with_context(|| format!("log line {}", i + 1))
        })
        .collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { scenario, reps, out, alloc, seed } => simulate(&scenario, reps, &out, alloc, seed),
        Command::Enumerate { scenario, n, alloc, paths } => enumerate(&scenario, n, alloc, paths),
        Command::Rates { input, gamma, metric } => rates(&input, gamma, &metric),
        Command::Serve { port, host, data, token } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
                )
                .init();
            let config = ServiceConfig {
                data_dir: data,
                bearer_token: token,
            };
            car_service::serve_blocking(config, SocketAddr::new(host, port))?;
            Ok(())
        }
        Command::Analyze { log, outcomes, rho, alpha } => {
            let records = read_log(&log)?;
            let y = read_outcomes(&outcomes)?;
            print_json(&analyze_log(&records, &y, rho, alpha)?)
        }
    }
}
