use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand as ClapSubcommand};

use sara_cli::bench::{run_bench, EngineChoice};
use sara_cli::config::{load_json, RunConfig, Subcommand};
use sara_cli::demo::run_demo;
use sara_cli::output::{bench_csv, demo_csv, write_json};
use sara_cli::train::{run_uptrain, write_uptrain};
use sara_cli::verify::run_verify;
use sara_cli::engine_parallelism;
use sara_core::uptrain::DistillationConfig;

const EXIT_CHECKS_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sara", version, about = "Linear-attention verification, benchmark, up-training and demo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config (a RunConfig, or a DistillationConfig for `uptrain`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Engines to benchmark.
    #[arg(long, global = true, value_enum, default_value_t = EngineChoice::Both)]
    engine: EngineChoice,
    /// Comma-separated sequence lengths for the benchmark sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
}

#[derive(ClapSubcommand, Debug, Clone, Copy)]
enum Command {
    /// Estimator and approximation checks; writes verify.json.
    Verify,
    /// Engine timing sweep; writes bench.csv.
    Bench,
    /// Distills a synthetic softmax teacher; writes history.csv and params/.
    Uptrain,
    /// Exact vs approximate attention control on a synthetic scene; writes demo.csv and demo.json.
    Demo,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn run_config(cli: &Cli, sub: Subcommand) -> Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => load_json::<RunConfig>(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(grid) = &cli.grid {
        config.grid = grid.clone();
    }
    config.validate(sub).map_err(Failure::Config)?;
    Ok(config)
}

fn out_dir(cli: &Cli, configured: Option<&Path>) -> Result<PathBuf, Failure> {
    let dir = cli
        .out
        .clone()
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("sara-out"));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("output directory {} is not writable", dir.display()))
        .map_err(Failure::Config)?;
    Ok(dir)
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let rt = Failure::Runtime;
    match cli.command {
        Command::Verify => {
            let config = run_config(cli, Subcommand::Verify)?;
            let out = out_dir(cli, config.out.as_deref())?;
            let report = run_verify(&config).map_err(rt)?;
            write_json(&out.join("verify.json"), &report).map_err(rt)?;
            println!("verify: {} -> {}", if report.pass { "pass" } else { "FAIL" }, out.join("verify.json").display());
            Ok(report.pass)
        }
        Command::Bench => {
            let config = run_config(cli, Subcommand::Bench)?;
            let out = out_dir(cli, config.out.as_deref())?;
            let (parallel, threads) = engine_parallelism(config.bench.parallel).map_err(Failure::Config)?;
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
            }
            let records = run_bench(&config, &cli.engine.engines(), parallel).map_err(rt)?;
            bench_csv(&out.join("bench.csv"), &records).map_err(rt)?;
            println!("bench: {} records -> {}", records.len(), out.join("bench.csv").display());
            Ok(true)
        }
        Command::Uptrain => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Failure::Config(anyhow::anyhow!("uptrain needs --config <DistillationConfig JSON>")))?;
            let mut config: DistillationConfig = load_json(path).map_err(Failure::Config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            config.validate().map_err(|e| Failure::Config(e.into()))?;
            let out = out_dir(cli, None)?;
            let history = run_uptrain(&config).map_err(rt)?;
            let summary = write_uptrain(&out, &config, &history).map_err(rt)?;
            println!(
                "uptrain: {} steps, loss {:e} -> {:e} -> {}",
                summary.steps,
                summary.loss_first,
                summary.loss_last,
                out.display()
            );
            Ok(true)
        }
        Command::Demo => {
            let config = run_config(cli, Subcommand::Demo)?;
            let out = out_dir(cli, config.out.as_deref())?;
            let report = run_demo(&config).map_err(rt)?;
            demo_csv(&out.join("demo.csv"), &report).map_err(rt)?;
            write_json(&out.join("demo.json"), &report).map_err(rt)?;
            for s in &report.summary {
                println!(
                    "{:<28} mean TV {:.4}  argmax {:>5.1}%  entropy gap {:+.4}",
                    s.label,
                    s.mean_tv,
                    100.0 * s.argmax_rate,
                    s.mean_entropy_gap
                );
            }
            Ok(report.pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECKS_FAILED),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
