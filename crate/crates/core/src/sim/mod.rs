//! Scenario runner: workload generation, a discrete-event driver over the
//! chain, ledger and watchers, post-run audits and report emission.

pub mod audit;
mod config;
pub mod deploy;
pub mod engine;
pub mod report;
mod sweep;
mod workload;

pub use audit::InvariantCheck;
pub use config::{ClockMode, CostModel, DelayModel, FaultSpec, Scenario, ScenarioConfig};
pub use deploy::{BuyerAccount, Deployment, DeploymentParams};
pub use engine::{simulate, RunOutput, TxTrack};
pub use report::{emit_report, write_report, MetricsReport, ReportFormat, Stage, StageMetrics, SweepRow, SweepTable};
pub use sweep::run_batch_sweep;
pub use workload::{tx_id_for, workload_gen, PurchaseIntent, Workload};

use thiserror::Error;

use crate::bridge::GatewayError;
use crate::chain::ChainError;
use crate::identity::IdentityError;
use crate::ledger::LedgerError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Runs the configured scenario, audits it, and returns the report. For
/// `BatchSweep` the headline metrics come from the run at `batch_size` (or
/// the first swept size), and an invariant passes only if it passed in
/// every swept run.
pub fn run_scenario(config: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    config.validate()?;
    if config.scenario != Scenario::BatchSweep {
        let mut out = simulate(config, false)?;
        let invariants = audit::audit(&mut out);
        return Ok(report::build_report(&out, invariants, None));
    }
    let runs = sweep::sweep_runs(config, &config.sweep_sizes)?;
    let table = sweep::table(&runs);
    let main = runs.iter().position(|r| r.batch_size == config.batch_size).unwrap_or(0);
    let invariants = runs[main]
        .invariants
        .iter()
        .map(|check| {
            let failing = runs.iter().find_map(|r| {
                r.invariants.iter().find(|c| c.name == check.name && !c.passed).map(|c| (r.batch_size, c))
            });
            match failing {
                Some((size, c)) => InvariantCheck { passed: false, detail: format!("batch {size}: {}", c.detail), ..c.clone() },
                None => check.clone(),
            }
        })
        .collect();
    Ok(report::build_report(&runs[main].output, invariants, Some(table)))
}
