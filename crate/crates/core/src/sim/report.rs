use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bridge::ChallengeOutcome;
use crate::codec::Encoder;
use crate::contract::ContractState;
use crate::crypto::Digest;

use super::audit::InvariantCheck;
use super::engine::{RunOutput, TxTrack};
use super::{ScenarioConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Buyer submission until the proposal commits.
    Proposal,
    /// First endorsement submitted until funds lock or the round fails.
    Endorsement,
    /// Courier attestation until the contract settles or refunds.
    Escrow,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Proposal, Stage::Endorsement, Stage::Escrow];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Proposal => "proposal",
            Stage::Endorsement => "endorsement",
            Stage::Escrow => "escrow",
        }
    }

    fn window(self, t: &TxTrack) -> Option<(u64, u64)> {
        match self {
            Stage::Proposal => t.submitted_us.zip(t.proposal_committed_us),
            Stage::Endorsement => t.endorse_started_us.zip(t.endorsed_us),
            Stage::Escrow => t.escrow_started_us.zip(t.done_us),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: Stage,
    pub transactions: usize,
    pub tps: f64,
    pub avg_latency_s: f64,
}

/// Throughput over the span from the first start to the last end, and the
/// mean per-transaction duration.
fn span_metrics(windows: &[(u64, u64)]) -> (f64, f64) {
    if windows.is_empty() {
        return (0.0, 0.0);
    }
    let first = windows.iter().map(|w| w.0).min().unwrap_or(0);
    let last = windows.iter().map(|w| w.1).max().unwrap_or(0);
    let span_s = (last.saturating_sub(first)).max(1) as f64 / 1e6;
    let mean_s = windows.iter().map(|(a, b)| (b - a) as f64).sum::<f64>() / windows.len() as f64 / 1e6;
    (windows.len() as f64 / span_s, mean_s)
}

pub fn stage_metrics(tracks: &[TxTrack], stage: Stage) -> StageMetrics {
    let windows: Vec<(u64, u64)> = tracks.iter().filter_map(|t| stage.window(t)).collect();
    let (tps, avg_latency_s) = span_metrics(&windows);
    StageMetrics { stage, transactions: windows.len(), tps, avg_latency_s }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeSummary {
    pub challenged: usize,
    pub proof_supplied: usize,
    pub compensated: usize,
    pub compensated_amount: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunDigests {
    pub world_state: String,
    pub last_block: String,
    pub balances: String,
    pub outcomes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub stage: Stage,
    pub transactions: usize,
    pub tps: f64,
    pub avg_latency_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.batch_size).collect();
        sizes.dedup();
        sizes
    }

    pub fn row(&self, batch_size: usize, stage: Stage) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.batch_size == batch_size && r.stage == stage)
    }

    /// Batch sizes at which endorsement is not the strictly slowest stage.
    pub fn endorsement_not_slowest(&self) -> Vec<usize> {
        self.sizes()
            .into_iter()
            .filter(|&b| {
                let tps = |s| self.row(b, s).map_or(f64::NAN, |r| r.tps);
                !(tps(Stage::Endorsement) < tps(Stage::Proposal).min(tps(Stage::Escrow)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: ScenarioConfig,
    pub completed: usize,
    pub settled: usize,
    pub refunded: usize,
    pub throughput_tps: f64,
    pub avg_latency_s: f64,
    pub latency_samples: usize,
    pub stages: Vec<StageMetrics>,
    pub blocks: usize,
    pub ops_committed: usize,
    pub ops_rejected: usize,
    pub challenges: ChallengeSummary,
    pub invariants: Vec<InvariantCheck>,
    pub passed: bool,
    pub digests: RunDigests,
    /// Virtual time from the first purchase to the last committed block.
    pub sim_time_s: f64,
    pub wall_clock_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
}

impl MetricsReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantCheck> {
        self.invariants.iter().find(|c| c.name == name)
    }

    pub fn failed_invariants(&self) -> Vec<&InvariantCheck> {
        self.invariants.iter().filter(|c| !c.passed).collect()
    }
}

pub fn run_digests(out: &RunOutput) -> RunDigests {
    let ledger = &out.deployment.ledger;
    let mut enc = Encoder::new();
    for (wallet, amount) in ledger.audit_balances() {
        enc.item(&wallet).u64(amount);
    }
    let balances = Digest::tagged("escrowpay/sim-balances/v1", &[&enc.finish()]);
    let mut enc = Encoder::new();
    for it in &out.intents {
        let state = out.chain.query_state(&it.tx_id).map(|c| c.state.as_str()).unwrap_or("missing");
        enc.item(&it.tx_id).str(state);
    }
    let outcomes = Digest::tagged("escrowpay/sim-outcomes/v1", &[&enc.finish()]);
    RunDigests {
        world_state: out.chain.world().digest().to_hex(),
        last_block: out.chain.blocks().last().map_or(Digest::ZERO, |b| b.block_hash).to_hex(),
        balances: balances.to_hex(),
        outcomes: outcomes.to_hex(),
    }
}

pub fn build_report(out: &RunOutput, invariants: Vec<InvariantCheck>, sweep: Option<SweepTable>) -> MetricsReport {
    let windows: Vec<(u64, u64)> = out.tracks.iter().filter_map(|t| t.submitted_us.zip(t.done_us)).collect();
    let (throughput_tps, avg_latency_s) = span_metrics(&windows);
    let count = |s| out.tracks.iter().filter(|t| t.outcome == Some(s)).count();
    let mut challenges = ChallengeSummary { challenged: out.challenges.len(), ..Default::default() };
    for c in &out.challenges {
        match c.outcome {
            ChallengeOutcome::ProofSupplied(_) => challenges.proof_supplied += 1,
            ChallengeOutcome::Compensated(a) => {
                challenges.compensated += 1;
                challenges.compensated_amount += a;
            }
        }
    }
    let ops_committed = out.chain.blocks().iter().map(|b| b.ops.len()).sum();
    let passed = invariants.iter().all(|c| c.passed);
    MetricsReport {
        scenario: out.config.clone(),
        completed: windows.len(),
        settled: count(ContractState::Settled),
        refunded: count(ContractState::Refunded),
        throughput_tps,
        avg_latency_s,
        latency_samples: windows.len(),
        stages: Stage::ALL.iter().map(|s| stage_metrics(&out.tracks, *s)).collect(),
        blocks: out.chain.blocks().len(),
        ops_committed,
        ops_rejected: out.rejected_ops,
        challenges,
        invariants,
        passed,
        digests: run_digests(out),
        sim_time_s: out.end_us as f64 / 1e6,
        wall_clock_s: out.wall_clock_s,
        sweep,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    JsonLines,
    Csv,
    Human,
}

impl FromStr for ReportFormat {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "json" | "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            "csv" => Ok(ReportFormat::Csv),
            "human" | "text" => Ok(ReportFormat::Human),
            other => Err(SimError::ConfigInvalid(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    /// Picks a format from a file extension, defaulting to JSON lines.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            Some("txt") => ReportFormat::Human,
            _ => ReportFormat::JsonLines,
        }
    }
}

/// Columns of the summary row, in order.
pub const REPORT_CSV_HEADER: &str = "scenario,num_transactions,batch_size,rng_seed,completed,settled,refunded,throughput_tps,avg_latency_s,\
proposal_tps,proposal_latency_s,endorsement_tps,endorsement_latency_s,escrow_tps,escrow_latency_s,\
blocks,ops_committed,invariants_passed,invariants_total,passed";

/// Columns of the sweep table, emitted after a blank line when present.
pub const SWEEP_CSV_HEADER: &str = "batch_size,stage,transactions,tps,avg_latency_s";

fn csv(report: &MetricsReport) -> String {
    let mut s = String::new();
    let stage = |st| report.stage(st).map_or((0.0, 0.0), |m| (m.tps, m.avg_latency_s));
    let (ptps, plat) = stage(Stage::Proposal);
    let (etps, elat) = stage(Stage::Endorsement);
    let (stps, slat) = stage(Stage::Escrow);
    let cfg = &report.scenario;
    let _ = writeln!(s, "{REPORT_CSV_HEADER}");
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{:.3},{:.6},{:.3},{:.6},{:.3},{:.6},{:.3},{:.6},{},{},{},{},{}",
        cfg.scenario,
        cfg.num_transactions,
        cfg.batch_size,
        cfg.rng_seed,
        report.completed,
        report.settled,
        report.refunded,
        report.throughput_tps,
        report.avg_latency_s,
        ptps,
        plat,
        etps,
        elat,
        stps,
        slat,
        report.blocks,
        report.ops_committed,
        report.invariants.iter().filter(|c| c.passed).count(),
        report.invariants.len(),
        report.passed
    );
    if let Some(sweep) = &report.sweep {
        let _ = writeln!(s, "\n{SWEEP_CSV_HEADER}");
        for r in &sweep.rows {
            let _ = writeln!(s, "{},{},{},{:.3},{:.6}", r.batch_size, r.stage.name(), r.transactions, r.tps, r.avg_latency_s);
        }
    }
    s
}

fn human(report: &MetricsReport) -> String {
    let mut s = String::new();
    let cfg = &report.scenario;
    let _ = writeln!(s, "scenario {} | {} tx | batch {} | seed {}", cfg.scenario, cfg.num_transactions, cfg.batch_size, cfg.rng_seed);
    let _ = writeln!(
        s,
        "completed {} (settled {}, refunded {}) in {:.3} s simulated, {:.3} s wall",
        report.completed, report.settled, report.refunded, report.sim_time_s, report.wall_clock_s
    );
    let _ = writeln!(s, "throughput {:.1} TPS, average latency {:.3} s", report.throughput_tps, report.avg_latency_s);
    for m in &report.stages {
        let _ = writeln!(s, "  {:<12} {:>9.1} TPS  {:>8.3} s", m.stage.name(), m.tps, m.avg_latency_s);
    }
    let _ = writeln!(s, "blocks {}, ops {} ({} rejected)", report.blocks, report.ops_committed, report.ops_rejected);
    let c = &report.challenges;
    let _ = writeln!(s, "challenges {}: {} proofs supplied, {} compensated ({})", c.challenged, c.proof_supplied, c.compensated, c.compensated_amount);
    if let Some(sweep) = &report.sweep {
        let _ = writeln!(s, "batch sweep:");
        for r in &sweep.rows {
            let _ = writeln!(s, "  batch {:>4} {:<12} {:>9.1} TPS  {:>8.3} s", r.batch_size, r.stage.name(), r.tps, r.avg_latency_s);
        }
    }
    let _ = writeln!(s, "invariants:");
    for inv in &report.invariants {
        let _ = writeln!(s, "  [{}] {}: {}", if inv.passed { "PASS" } else { "FAIL" }, inv.name, inv.detail);
    }
    let _ = writeln!(s, "result: {}", if report.passed { "PASS" } else { "FAIL" });
    s
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::JsonLines => {
            let mut line = serde_json::to_string(report).expect("report serializes");
            line.push('\n');
            line
        }
        ReportFormat::Csv => csv(report),
        ReportFormat::Human => human(report),
    }
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, out: &mut impl Write) -> io::Result<()> {
    out.write_all(render_report(report, format).as_bytes())
}

pub fn write_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<(), SimError> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    emit_report(report, format, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn parse_json_report(line: &str) -> Result<MetricsReport, SimError> {
    serde_json::from_str(line.trim()).map_err(|e| SimError::ConfigInvalid(format!("report: {e}")))
}
