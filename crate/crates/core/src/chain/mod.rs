//! Single-sequencer permissioned ledger.
//!
//! Ops are admitted to a FIFO mempool after certificate and signature
//! checks, cut into blocks of at most `batch_size`, folded through the
//! escrow contract, and streamed to subscribers with an inclusion proof.

mod block;
pub mod log;
mod op;
mod world;

pub use block::{merkle_root, Block, BlockHeader, ChainProof, HeaderError, HeaderStore, PathStep, ProofError};
pub use op::{ChainOp, DedupKey, OpBody, OpKind};
pub use world::{ReplayError, WorldState};

use std::collections::{HashSet, VecDeque};
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};

use thiserror::Error;

use crate::contract::{ContractConfig, ContractEnv, EscrowContract, TxId};
use crate::identity::AuthoritySet;

use self::log::{BlockLog, LogError};

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("submitter certificate does not chain to a known authority")]
    UnknownCertificate,
    #[error("op signature does not verify")]
    InvalidSignature,
    #[error("duplicate op {0:?}")]
    DuplicateOp(DedupKey),
    #[error("mempool is empty")]
    EmptyMempool,
    #[error("batch not full and block timer not expired")]
    NotReady,
    #[error("no contract for {0}")]
    NotFound(TxId),
    #[error("block log: {0}")]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainConfig {
    pub batch_size: usize,
    /// Simulated time a partial batch may wait before it is cut anyway.
    pub block_timer_ms: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { batch_size: 20, block_timer_ms: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitAck {
    pub tx_id: TxId,
    pub position: usize,
}

/// One committed op, with proof of inclusion and the contract afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitEvent {
    pub proof: ChainProof,
    pub contract: Option<EscrowContract>,
}

impl CommitEvent {
    pub fn height(&self) -> u64 {
        self.proof.height()
    }

    pub fn op(&self) -> &ChainOp {
        &self.proof.op
    }
}

pub struct Chain {
    config: ChainConfig,
    contract_config: ContractConfig,
    authorities: AuthoritySet,
    mempool: VecDeque<(ChainOp, u64)>,
    pending: HashSet<DedupKey>,
    committed: HashSet<DedupKey>,
    blocks: Vec<Block>,
    world: WorldState,
    subscribers: Vec<Sender<CommitEvent>>,
    log: Option<BlockLog>,
}

impl Chain {
    pub fn new(config: ChainConfig, contract_config: ContractConfig, authorities: AuthoritySet) -> Self {
        assert!(config.batch_size > 0, "batch_size must be positive");
        Chain {
            config,
            contract_config,
            authorities,
            mempool: VecDeque::new(),
            pending: HashSet::new(),
            committed: HashSet::new(),
            blocks: Vec::new(),
            world: WorldState::new(),
            subscribers: Vec::new(),
            log: None,
        }
    }

    /// Persists every subsequent block to `path`, truncating it first.
    pub fn persist_to(&mut self, path: &Path) -> Result<(), ChainError> {
        let mut log = BlockLog::create(path)?;
        for b in &self.blocks {
            log.append(b)?;
        }
        self.log = Some(log);
        Ok(())
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn contract_config(&self) -> &ContractConfig {
        &self.contract_config
    }

    pub fn authorities(&self) -> &AuthoritySet {
        &self.authorities
    }

    pub fn submit(&mut self, op: ChainOp, now_ms: u64) -> Result<SubmitAck, ChainError> {
        if !self.authorities.verify(&op.submitter_cert) {
            return Err(ChainError::UnknownCertificate);
        }
        if !op.verify_signature() {
            return Err(ChainError::InvalidSignature);
        }
        let key = op.dedup_key();
        if self.committed.contains(&key) || self.pending.contains(&key) {
            return Err(ChainError::DuplicateOp(key));
        }
        self.pending.insert(key);
        let ack = SubmitAck { tx_id: op.tx_id.clone(), position: self.mempool.len() };
        self.mempool.push_back((op, now_ms));
        Ok(ack)
    }

    /// Submits ops that arrived in the same tick, ordered by
    /// `(tx_id, op_kind, submitter_id)`.
    pub fn submit_batch(&mut self, mut ops: Vec<ChainOp>, now_ms: u64) -> Vec<Result<SubmitAck, ChainError>> {
        ops.sort_by_key(ChainOp::tie_key);
        ops.into_iter().map(|op| self.submit(op, now_ms)).collect()
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    /// When the oldest queued op's timer fires, if anything is queued.
    pub fn next_deadline(&self) -> Option<u64> {
        self.mempool.front().map(|(_, t)| t + self.config.block_timer_ms)
    }

    pub fn ready(&self, now_ms: u64) -> bool {
        self.mempool.len() >= self.config.batch_size || self.next_deadline().is_some_and(|d| now_ms >= d)
    }

    /// Cuts a block if the batch is full or the timer has expired.
    pub fn cut_block(&mut self, now_ms: u64) -> Result<&Block, ChainError> {
        if self.mempool.is_empty() {
            return Err(ChainError::EmptyMempool);
        }
        if !self.ready(now_ms) {
            return Err(ChainError::NotReady);
        }
        self.force_cut(now_ms)
    }

    /// Cuts whatever is queued, up to one batch, regardless of the timer.
    pub fn force_cut(&mut self, now_ms: u64) -> Result<&Block, ChainError> {
        self.cut_up_to(now_ms, self.config.batch_size)
    }

    /// The ops the next cut would take, oldest first.
    pub fn peek_mempool(&self, n: usize) -> impl Iterator<Item = &ChainOp> {
        self.mempool.iter().take(n).map(|(op, _)| op)
    }

    /// Cuts at most `limit` queued ops (capped at the batch size). Lets a
    /// caller fix a block's contents before its service time has elapsed.
    pub fn cut_up_to(&mut self, now_ms: u64, limit: usize) -> Result<&Block, ChainError> {
        if self.mempool.is_empty() || limit == 0 {
            return Err(ChainError::EmptyMempool);
        }
        let n = self.mempool.len().min(self.config.batch_size).min(limit);
        let ops: Vec<ChainOp> = self.mempool.drain(..n).map(|(op, _)| op).collect();
        let env = ContractEnv { config: &self.contract_config, authorities: &self.authorities, block_time_ms: now_ms };
        let mut results = Vec::with_capacity(n);
        let mut snapshots = Vec::with_capacity(n);
        for op in &ops {
            let key = op.dedup_key();
            self.pending.remove(&key);
            self.committed.insert(key);
            results.push(self.world.execute(op, &env));
            snapshots.push(self.world.contract(&op.tx_id).cloned());
        }
        let block = Block::new(self.world.height, self.world.last_hash, now_ms, ops, results);
        self.world.height += 1;
        self.world.last_hash = block.block_hash;
        if let Some(log) = &mut self.log {
            log.append(&block)?;
        }
        if !self.subscribers.is_empty() {
            for (proof, contract) in block.inclusion_proofs().into_iter().zip(snapshots) {
                let event = CommitEvent { proof, contract };
                self.subscribers.retain(|s| s.send(event.clone()).is_ok());
            }
        }
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Cuts blocks until the mempool is empty.
    pub fn flush(&mut self, now_ms: u64) -> usize {
        let mut cut = 0;
        while self.force_cut(now_ms).is_ok() {
            cut += 1;
        }
        cut
    }

    pub fn query_state(&self, tx_id: &TxId) -> Result<&EscrowContract, ChainError> {
        self.world.contract(tx_id).ok_or_else(|| ChainError::NotFound(tx_id.clone()))
    }

    pub fn subscribe_commits(&mut self) -> Receiver<CommitEvent> {
        let (tx, rx) = channel();
        self.subscribers.push(tx);
        rx
    }

    /// Rebuilds the commit stream from the stored blocks by re-folding from
    /// genesis, yielding events at or above `from_height`.
    pub fn replay_commits(&self, from_height: u64) -> Vec<CommitEvent> {
        let mut world = WorldState::new();
        let mut events = Vec::new();
        for block in &self.blocks {
            let env = ContractEnv {
                config: &self.contract_config,
                authorities: &self.authorities,
                block_time_ms: block.header.timestamp_ms,
            };
            let mut contracts = Vec::with_capacity(block.ops.len());
            for op in &block.ops {
                world.execute(op, &env);
                contracts.push(world.contract(&op.tx_id).cloned());
            }
            if block.height() >= from_height {
                events.extend(block.inclusion_proofs().into_iter().zip(contracts).map(|(proof, contract)| CommitEvent { proof, contract }));
            }
        }
        events
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height(&self) -> u64 {
        self.world.height
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }
}
