use super::audit::{audit, InvariantCheck};
use super::engine::{simulate, RunOutput};
use super::report::{stage_metrics, Stage, SweepRow, SweepTable};
use super::{ScenarioConfig, SimError};

pub(crate) struct SweepRun {
    pub batch_size: usize,
    pub output: RunOutput,
    pub invariants: Vec<InvariantCheck>,
}

pub(crate) fn sweep_runs(base: &ScenarioConfig, sizes: &[usize]) -> Result<Vec<SweepRun>, SimError> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(SimError::ConfigInvalid("sweep sizes must be non-empty and positive".into()));
    }
    sizes
        .iter()
        .map(|&batch_size| {
            let cfg = ScenarioConfig { batch_size, block_log: None, ..base.clone() };
            let mut output = simulate(&cfg, true)?;
            let invariants = audit(&mut output);
            Ok(SweepRun { batch_size, output, invariants })
        })
        .collect()
}

pub(crate) fn table(runs: &[SweepRun]) -> SweepTable {
    let rows = runs
        .iter()
        .flat_map(|run| {
            Stage::ALL.iter().map(move |&stage| {
                let m = stage_metrics(&run.output.tracks, stage);
                SweepRow { batch_size: run.batch_size, stage, transactions: m.transactions, tps: m.tps, avg_latency_s: m.avg_latency_s }
            })
        })
        .collect();
    SweepTable { rows }
}

/// Per-stage TPS and latency for each batch size. Each stage is measured
/// with the orderer saturated by that stage alone.
pub fn run_batch_sweep(base: &ScenarioConfig, sizes: &[usize]) -> Result<SweepTable, SimError> {
    base.validate()?;
    Ok(table(&sweep_runs(base, sizes)?))
}
