use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use escrowpay::chain::log::read_log;
use escrowpay::chain::WorldState;
use escrowpay::contract::ContractConfig;
use escrowpay::sim::{
    run_scenario, write_report, ClockMode, Deployment, DeploymentParams, FaultSpec, ReportFormat, Scenario, ScenarioConfig, SimError,
};

#[derive(Parser)]
#[command(name = "escrowpay", version, about = "Escrow payment scenarios over a permissioned chain and a CBDC ledger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its metrics report.
    Run(RunArgs),
    /// Re-fold a block log and print the resulting world-state digest.
    Replay(ReplayArgs),
}

/// Settings shared by `run` and `replay`. Flags override the config file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with any ScenarioConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    commission_rate: Option<f64>,
    #[arg(long)]
    num_banks: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// normal | dispute | proof | sweep
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    num_tx: Option<usize>,
    #[arg(long)]
    num_buyers: Option<usize>,
    #[arg(long)]
    num_merchants: Option<usize>,
    #[arg(long)]
    num_couriers: Option<usize>,
    #[arg(long)]
    block_timer_ms: Option<u64>,
    /// Comma-separated batch sizes for the sweep scenario.
    #[arg(long, value_delimiter = ',')]
    sweep_sizes: Option<Vec<usize>>,
    /// `skip:<txid>` or `wrong:<txid>`; repeatable.
    #[arg(long = "fault")]
    faults: Vec<FaultSpec>,
    /// Use measured block processing time instead of the cost model.
    #[arg(long)]
    wall_clock: bool,
    /// Persist the block log of the run.
    #[arg(long)]
    block_log: Option<PathBuf>,
    /// Report destination.
    #[arg(long)]
    report: Option<PathBuf>,
    /// json-lines | csv | human; inferred from the report extension if omitted.
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Do not print the human summary to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    log: PathBuf,
}

fn base_config(args: &ConfigArgs) -> Result<ScenarioConfig, SimError> {
    let mut cfg = match &args.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.commission_rate {
        cfg.commission_rate = v;
    }
    if let Some(v) = args.num_banks {
        cfg.num_banks = v;
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<bool, SimError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(v) = args.scenario {
        cfg.scenario = v;
    }
    if let Some(v) = args.num_tx {
        cfg.num_transactions = v;
    }
    if let Some(v) = args.num_buyers {
        cfg.num_buyers = v;
    }
    if let Some(v) = args.num_merchants {
        cfg.num_merchants = v;
    }
    if let Some(v) = args.num_couriers {
        cfg.num_couriers = v;
    }
    if let Some(v) = args.block_timer_ms {
        cfg.block_timer_ms = v;
    }
    if let Some(v) = args.sweep_sizes {
        cfg.sweep_sizes = v;
    }
    if args.wall_clock {
        cfg.clock = ClockMode::WallClock;
    }
    if args.block_log.is_some() {
        cfg.block_log = args.block_log;
    }
    cfg.faults.extend(args.faults);
    cfg.validate()?;

    let report = run_scenario(&cfg)?;
    if let Some(path) = &args.report {
        let format = args.format.unwrap_or_else(|| ReportFormat::for_path(path));
        write_report(&report, format, path)?;
    }
    if !args.quiet {
        print!("{}", escrowpay::sim::report::render_report(&report, ReportFormat::Human));
    }
    for failed in report.failed_invariants() {
        eprintln!("invariant {} failed: {}", failed.name, failed.detail);
    }
    Ok(report.passed)
}

fn replay(args: ReplayArgs) -> Result<bool, SimError> {
    let cfg = base_config(&args.common)?;
    cfg.validate()?;
    let blocks = read_log(&args.log).map_err(escrowpay::chain::ChainError::from)?;
    let dep = Deployment::new(DeploymentParams::from(&cfg))?;
    let contract = ContractConfig { commission: cfg.commission()?, ..ContractConfig::default() };
    let mut failures = Vec::new();
    let mut digest = None;
    for require_settlement_proof in [false, true] {
        let contract = ContractConfig { require_settlement_proof, ..contract.clone() };
        match WorldState::replay(&blocks, cfg.batch_size, &contract, &dep.authorities) {
            Ok(world) => {
                digest = Some(world.digest());
                break;
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    match digest {
        Some(d) => {
            println!("blocks {}", blocks.len());
            println!("world {}", d.to_hex());
            Ok(true)
        }
        None => {
            eprintln!("replay failed: {}", failures.join("; "));
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Replay(args) => replay(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
