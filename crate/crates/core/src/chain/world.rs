use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::contract::{transition, ContractConfig, ContractEnv, EscrowContract, OpResult, TxId};
use crate::crypto::Digest;
use crate::identity::AuthoritySet;

use super::block::Block;
use super::op::{ChainOp, DedupKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("block {index} has height {got}, expected {expected}")]
    HeightGap { index: usize, expected: u64, got: u64 },
    #[error("block {0} does not link to its predecessor")]
    BrokenLink(u64),
    #[error("block {0} fails its hash or Merkle check")]
    Corrupt(u64),
    #[error("block {0} holds more than {1} ops")]
    Oversized(u64, usize),
    #[error("op {index} in block {height} re-folds to a different result")]
    ResultMismatch { height: u64, index: usize },
    #[error("op {index} in block {height} was committed twice")]
    Duplicate { height: u64, index: usize },
}

/// Contract snapshots plus the committed op log, keyed by transaction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorldState {
    pub contracts: BTreeMap<TxId, EscrowContract>,
    pub op_log: BTreeMap<TxId, Vec<ChainOp>>,
    /// Number of blocks applied; the next block's height.
    pub height: u64,
    pub last_hash: Digest,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one op and records it in the op log.
    pub fn execute(&mut self, op: &ChainOp, env: &ContractEnv<'_>) -> OpResult {
        let (next, result) = transition(self.contracts.get(&op.tx_id), op, env);
        if let (Some(c), true) = (next, result.is_applied()) {
            self.contracts.insert(op.tx_id.clone(), c);
        }
        self.op_log.entry(op.tx_id.clone()).or_default().push(op.clone());
        result
    }

    pub fn contract(&self, tx_id: &TxId) -> Option<&EscrowContract> {
        self.contracts.get(tx_id)
    }

    pub fn committed_keys(&self) -> BTreeSet<DedupKey> {
        self.op_log.values().flatten().map(ChainOp::dedup_key).collect()
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged("escrowpay/world/v1", &[&self.to_canonical_bytes()])
    }

    /// Rebuilds the world from genesis, checking links, hashes, batch
    /// bound, exactly-once commit, and that each recorded result re-folds.
    pub fn replay(
        blocks: &[Block],
        batch_size: usize,
        config: &ContractConfig,
        authorities: &AuthoritySet,
    ) -> Result<WorldState, ReplayError> {
        let mut world = WorldState::new();
        let mut seen = BTreeSet::new();
        for (index, block) in blocks.iter().enumerate() {
            let h = block.height();
            if h != world.height {
                return Err(ReplayError::HeightGap { index, expected: world.height, got: h });
            }
            if block.header.prev_hash != world.last_hash {
                return Err(ReplayError::BrokenLink(h));
            }
            if !block.verify_integrity() {
                return Err(ReplayError::Corrupt(h));
            }
            if block.ops.len() > batch_size {
                return Err(ReplayError::Oversized(h, batch_size));
            }
            let env = ContractEnv { config, authorities, block_time_ms: block.header.timestamp_ms };
            for (i, (op, recorded)) in block.ops.iter().zip(&block.results).enumerate() {
                if !seen.insert(op.dedup_key()) {
                    return Err(ReplayError::Duplicate { height: h, index: i });
                }
                if &world.execute(op, &env) != recorded {
                    return Err(ReplayError::ResultMismatch { height: h, index: i });
                }
            }
            world.height += 1;
            world.last_hash = block.block_hash;
        }
        Ok(world)
    }
}

impl Canonical for WorldState {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.height).item(&self.last_hash).u32(self.contracts.len() as u32);
        for (tx, c) in &self.contracts {
            enc.item(tx).item(c);
        }
        enc.u32(self.op_log.len() as u32);
        for (tx, ops) in &self.op_log {
            enc.item(tx).seq(ops.iter());
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let height = dec.u64()?;
        let last_hash = dec.item()?;
        let mut contracts = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let tx = dec.item()?;
            contracts.insert(tx, dec.item()?);
        }
        let mut op_log = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let tx = dec.item()?;
            op_log.insert(tx, dec.seq()?);
        }
        Ok(WorldState { contracts, op_log, height, last_hash })
    }
}
