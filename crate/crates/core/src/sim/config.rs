use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bridge::FaultMode;
use crate::contract::{Amount, CommissionRate, TxId};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Normal,
    #[serde(alias = "dispute")]
    ReshippingDispute,
    #[serde(alias = "proof")]
    ProofPerSettlement,
    #[serde(alias = "sweep")]
    BatchSweep,
}

impl Scenario {
    pub fn cli_name(self) -> &'static str {
        match self {
            Scenario::Normal => "normal",
            Scenario::ReshippingDispute => "dispute",
            Scenario::ProofPerSettlement => "proof",
            Scenario::BatchSweep => "sweep",
        }
    }
}

impl FromStr for Scenario {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "normal" => Ok(Scenario::Normal),
            "dispute" | "reshipping_dispute" => Ok(Scenario::ReshippingDispute),
            "proof" | "proof_per_settlement" => Ok(Scenario::ProofPerSettlement),
            "sweep" | "batch_sweep" => Ok(Scenario::BatchSweep),
            other => Err(SimError::ConfigInvalid(format!("unknown scenario {other:?}"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Block service times come from [`CostModel`]; runs are timing-stable.
    Simulated,
    /// Block service times are the measured cost of cutting the block.
    WallClock,
}

/// A settlement fault injected into the buyer bank's watcher.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub tx_id: TxId,
    pub mode: FaultMode,
}

impl FromStr for FaultSpec {
    type Err = SimError;
    /// `skip:<txid>` or `wrong:<txid>`.
    fn from_str(s: &str) -> Result<Self, SimError> {
        let (mode, tx) = s.split_once(':').ok_or_else(|| SimError::ConfigInvalid(format!("fault {s:?}: expected mode:txid")))?;
        let mode = match mode {
            "skip" => FaultMode::SkipTx,
            "wrong" => FaultMode::WrongAmount,
            other => return Err(SimError::ConfigInvalid(format!("unknown fault mode {other:?}"))),
        };
        if tx.is_empty() {
            return Err(SimError::ConfigInvalid("fault without a tx id".into()));
        }
        Ok(FaultSpec { tx_id: TxId::new(tx), mode })
    }
}

/// Simulated service cost of ordering and validating ops, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub block_overhead_us: u64,
    pub op_base_us: u64,
    pub sig_verify_us: u64,
    pub per_byte_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { block_overhead_us: 2_000, op_base_us: 200, sig_verify_us: 150, per_byte_us: 0.1 }
    }
}

/// Actor reaction and network delays, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModel {
    pub network_us: u64,
    pub endorse_us: u64,
    pub delivery_us: u64,
    pub confirm_us: u64,
    pub adjudication_us: u64,
    pub bank_us: u64,
    /// Gap between consecutive purchase arrivals.
    pub arrival_interval_us: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            network_us: 5_000,
            endorse_us: 10_000,
            delivery_us: 50_000,
            confirm_us: 20_000,
            adjudication_us: 200_000,
            bank_us: 10_000,
            arrival_interval_us: 1_000,
        }
    }
}

/// Loadable from TOML; every key is optional.
///
/// ```toml
/// scenario = "normal"          # normal | dispute | proof | sweep
/// num_transactions = 1000
/// batch_size = 20
/// block_timer_ms = 500
/// num_buyers = 100
/// num_merchants = 10
/// num_couriers = 5
/// num_banks = 2
/// commission_rate = 0.05
/// rng_seed = 7
/// price_min = 100
/// price_max = 10000
/// reject_rate = 0.0
/// shards = 2
/// clock = "simulated"          # simulated | wall_clock
/// sweep_sizes = [10, 20, 40, 80]
/// challenge_all = true
/// faults = [{ tx_id = "tx-000003", mode = "SkipTx" }]
/// block_log = "blocks.spay"
///
/// [costs]
/// sig_verify_us = 150
///
/// [delays]
/// network_us = 5000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub num_transactions: usize,
    pub batch_size: usize,
    pub block_timer_ms: u64,
    pub num_buyers: usize,
    pub num_merchants: usize,
    pub num_couriers: usize,
    pub num_banks: usize,
    pub commission_rate: f64,
    pub rng_seed: u64,
    pub price_min: Amount,
    pub price_max: Amount,
    /// Probability that an individual endorser rejects.
    pub reject_rate: f64,
    pub shards: usize,
    pub clock: ClockMode,
    pub sweep_sizes: Vec<usize>,
    /// Merchants challenge every confirmed settlement after the run, not
    /// only the ones still unsettled.
    pub challenge_all: bool,
    pub faults: Vec<FaultSpec>,
    /// Where to persist the block log of the main run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_log: Option<PathBuf>,
    pub costs: CostModel,
    pub delays: DelayModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::Normal,
            num_transactions: 1000,
            batch_size: 20,
            block_timer_ms: 500,
            num_buyers: 100,
            num_merchants: 10,
            num_couriers: 5,
            num_banks: 2,
            commission_rate: 0.05,
            rng_seed: 7,
            price_min: 100,
            price_max: 10_000,
            reject_rate: 0.0,
            shards: 2,
            clock: ClockMode::Simulated,
            sweep_sizes: vec![10, 20, 40, 80],
            challenge_all: true,
            faults: Vec::new(),
            block_log: None,
            costs: CostModel::default(),
            delays: DelayModel::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        ScenarioConfig { scenario, ..Default::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn commission(&self) -> Result<CommissionRate, SimError> {
        CommissionRate::from_fraction(self.commission_rate)
            .ok_or_else(|| SimError::ConfigInvalid(format!("commission_rate {} outside [0, 1)", self.commission_rate)))
    }

    pub fn proof_mode(&self) -> bool {
        self.scenario == Scenario::ProofPerSettlement
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: &str| Err(SimError::ConfigInvalid(m.to_owned()));
        let counts = [
            ("num_transactions", self.num_transactions),
            ("batch_size", self.batch_size),
            ("num_buyers", self.num_buyers),
            ("num_merchants", self.num_merchants),
            ("num_couriers", self.num_couriers),
            ("num_banks", self.num_banks),
            ("shards", self.shards),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return invalid(&format!("{name} must be positive"));
        }
        if self.price_min == 0 || self.price_min > self.price_max {
            return invalid("price range must satisfy 0 < price_min <= price_max");
        }
        if !(0.0..=1.0).contains(&self.reject_rate) {
            return invalid("reject_rate must lie in [0, 1]");
        }
        self.commission()?;
        if self.scenario == Scenario::BatchSweep && (self.sweep_sizes.is_empty() || self.sweep_sizes.contains(&0)) {
            return invalid("sweep_sizes must be non-empty and positive");
        }
        if self.proof_mode() && !self.faults.is_empty() {
            return invalid("settlement faults cannot be injected when every settlement must carry a proof");
        }
        if !(self.costs.per_byte_us >= 0.0) {
            return invalid("per_byte_us must be non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_counts_rejected() {
        for patch in [
            |c: &mut ScenarioConfig| c.num_buyers = 0,
            |c: &mut ScenarioConfig| c.num_transactions = 0,
            |c: &mut ScenarioConfig| c.batch_size = 0,
            |c: &mut ScenarioConfig| c.num_banks = 0,
        ] {
            let mut cfg = ScenarioConfig::default();
            patch(&mut cfg);
            assert!(matches!(cfg.validate(), Err(SimError::ConfigInvalid(_))));
        }
    }

    #[test]
    fn toml_partial_overrides() {
        let cfg = ScenarioConfig::from_toml_str("scenario = \"dispute\"\nnum_transactions = 5\n[delays]\nnetwork_us = 1\n").unwrap();
        assert_eq!(cfg.scenario, Scenario::ReshippingDispute);
        assert_eq!(cfg.num_transactions, 5);
        assert_eq!(cfg.delays.network_us, 1);
        assert_eq!(cfg.delays.bank_us, DelayModel::default().bank_us);
        assert_eq!(cfg.batch_size, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioConfig::from_toml_str("batch = 3").is_err());
    }

    #[test]
    fn fault_parsing() {
        let f: FaultSpec = "skip:tx-000001".parse().unwrap();
        assert_eq!(f, FaultSpec { tx_id: TxId::new("tx-000001"), mode: FaultMode::SkipTx });
        assert_eq!("wrong:x".parse::<FaultSpec>().unwrap().mode, FaultMode::WrongAmount);
        assert!("drop:x".parse::<FaultSpec>().is_err());
        assert!("skip:".parse::<FaultSpec>().is_err());
    }

    #[test]
    fn proof_mode_refuses_faults() {
        let mut cfg = ScenarioConfig::new(Scenario::ProofPerSettlement);
        cfg.faults.push("skip:tx-000000".parse().unwrap());
        assert!(cfg.validate().is_err());
    }
}
