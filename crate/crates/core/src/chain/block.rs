use std::sync::RwLock;

use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::contract::OpResult;
use crate::crypto::Digest;

use super::op::ChainOp;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Digest,
    pub timestamp_ms: u64,
    /// Merkle root over `(op, result)` leaves.
    pub ops_root: Digest,
    pub op_count: u32,
}

impl BlockHeader {
    pub fn hash(&self) -> Digest {
        Digest::tagged("escrowpay/block/v1", &[&self.to_canonical_bytes()])
    }
}

impl Canonical for BlockHeader {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.height).item(&self.prev_hash).u64(self.timestamp_ms).item(&self.ops_root).u32(self.op_count);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(BlockHeader {
            height: dec.u64()?,
            prev_hash: dec.item()?,
            timestamp_ms: dec.u64()?,
            ops_root: dec.item()?,
            op_count: dec.u32()?,
        })
    }
}

/// An ordered batch of operations with the commit-time outcome of each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub ops: Vec<ChainOp>,
    pub results: Vec<OpResult>,
    pub block_hash: Digest,
}

impl Block {
    pub fn new(height: u64, prev_hash: Digest, timestamp_ms: u64, ops: Vec<ChainOp>, results: Vec<OpResult>) -> Self {
        assert_eq!(ops.len(), results.len());
        let leaves = leaf_hashes(&ops, &results);
        let header = BlockHeader {
            height,
            prev_hash,
            timestamp_ms,
            ops_root: merkle_root(&leaves),
            op_count: ops.len() as u32,
        };
        let block_hash = header.hash();
        Block { header, ops, results, block_hash }
    }

    pub fn height(&self) -> u64 {
        self.header.height
    }

    /// Recomputes the Merkle root and header hash.
    pub fn verify_integrity(&self) -> bool {
        self.ops.len() == self.results.len()
            && self.ops.len() == self.header.op_count as usize
            && !self.ops.is_empty()
            && merkle_root(&leaf_hashes(&self.ops, &self.results)) == self.header.ops_root
            && self.header.hash() == self.block_hash
    }

    pub fn inclusion_proof(&self, index: usize) -> ChainProof {
        let leaves = leaf_hashes(&self.ops, &self.results);
        ChainProof {
            header: self.header.clone(),
            block_hash: self.block_hash,
            op_index: index as u32,
            op: self.ops[index].clone(),
            result: self.results[index].clone(),
            path: merkle_path(&leaves, index),
        }
    }

    /// Proofs for every op, hashing the leaves once.
    pub fn inclusion_proofs(&self) -> Vec<ChainProof> {
        let leaves = leaf_hashes(&self.ops, &self.results);
        (0..self.ops.len())
            .map(|i| ChainProof {
                header: self.header.clone(),
                block_hash: self.block_hash,
                op_index: i as u32,
                op: self.ops[i].clone(),
                result: self.results[i].clone(),
                path: merkle_path(&leaves, i),
            })
            .collect()
    }
}

impl Canonical for Block {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.header).seq(self.ops.iter()).seq(self.results.iter()).item(&self.block_hash);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Block { header: dec.item()?, ops: dec.seq()?, results: dec.seq()?, block_hash: dec.item()? })
    }
}

pub fn leaf_hash(op: &ChainOp, result: &OpResult) -> Digest {
    Digest::tagged("escrowpay/leaf/v1", &[&op.to_canonical_bytes(), &result.to_canonical_bytes()])
}

fn leaf_hashes(ops: &[ChainOp], results: &[OpResult]) -> Vec<Digest> {
    ops.iter().zip(results).map(|(o, r)| leaf_hash(o, r)).collect()
}

fn node_hash(left: &Digest, right: &Digest) -> Digest {
    Digest::tagged("escrowpay/node/v1", &[&left.0, &right.0])
}

// An odd node at the end of a level is promoted unchanged rather than
// paired with itself, so no two distinct leaf lists share a root.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::ZERO;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| if pair.len() == 2 { node_hash(&pair[0], &pair[1]) } else { pair[0] })
            .collect();
    }
    level[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub sibling: Digest,
    /// True when the sibling sits to the left of the running hash.
    pub sibling_is_left: bool,
}

impl Canonical for PathStep {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.sibling).bool(self.sibling_is_left);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(PathStep { sibling: dec.item()?, sibling_is_left: dec.bool()? })
    }
}

fn merkle_path(leaves: &[Digest], mut index: usize) -> Vec<PathStep> {
    let mut path = Vec::new();
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        let sibling = index ^ 1;
        if sibling < level.len() {
            path.push(PathStep { sibling: level[sibling], sibling_is_left: sibling < index });
        }
        level = level
            .chunks(2)
            .map(|pair| if pair.len() == 2 { node_hash(&pair[0], &pair[1]) } else { pair[0] })
            .collect();
        index /= 2;
    }
    path
}

fn fold_path(leaf: Digest, path: &[PathStep]) -> Digest {
    path.iter().fold(leaf, |acc, step| {
        if step.sibling_is_left {
            node_hash(&step.sibling, &acc)
        } else {
            node_hash(&acc, &step.sibling)
        }
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProofError {
    #[error("header does not hash to the cited block hash")]
    HeaderMismatch,
    #[error("no known block at height {0} with that hash")]
    UnknownBlock(u64),
    #[error("inclusion path does not reach the block's op root")]
    BadInclusion,
}

/// Evidence that a specific op, with a specific commit outcome, sits in a
/// known block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainProof {
    pub header: BlockHeader,
    pub block_hash: Digest,
    pub op_index: u32,
    pub op: ChainOp,
    pub result: OpResult,
    pub path: Vec<PathStep>,
}

impl ChainProof {
    pub fn height(&self) -> u64 {
        self.header.height
    }

    pub fn verify(&self, headers: &HeaderStore) -> Result<(), ProofError> {
        if self.header.hash() != self.block_hash {
            return Err(ProofError::HeaderMismatch);
        }
        if headers.hash_at(self.header.height) != Some(self.block_hash) {
            return Err(ProofError::UnknownBlock(self.header.height));
        }
        if self.op_index >= self.header.op_count {
            return Err(ProofError::BadInclusion);
        }
        let expected_depth = path_len(self.header.op_count as usize, self.op_index as usize);
        if self.path.len() != expected_depth || fold_path(leaf_hash(&self.op, &self.result), &self.path) != self.header.ops_root {
            return Err(ProofError::BadInclusion);
        }
        Ok(())
    }
}

fn path_len(mut n: usize, mut index: usize) -> usize {
    let mut len = 0;
    while n > 1 {
        if (index ^ 1) < n {
            len += 1;
        }
        n = n.div_ceil(2);
        index /= 2;
    }
    len
}

impl Canonical for ChainProof {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.header)
            .item(&self.block_hash)
            .u32(self.op_index)
            .item(&self.op)
            .item(&self.result)
            .seq(self.path.iter());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(ChainProof {
            header: dec.item()?,
            block_hash: dec.item()?,
            op_index: dec.u32()?,
            op: dec.item()?,
            result: dec.item()?,
            path: dec.seq()?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeaderError {
    #[error("expected height {expected}, got {got}")]
    Gap { expected: u64, got: u64 },
    #[error("header at height {0} does not link to its predecessor")]
    BrokenLink(u64),
    #[error("conflicting header at height {0}")]
    Conflict(u64),
}

/// Read-only view of committed block headers, fed by the bridge.
#[derive(Debug, Default)]
pub struct HeaderStore {
    headers: RwLock<Vec<(BlockHeader, Digest)>>,
}

impl HeaderStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the next header. Re-appending a known header is a no-op.
    pub fn append(&self, header: &BlockHeader) -> Result<(), HeaderError> {
        let hash = header.hash();
        let mut headers = self.headers.write().unwrap();
        let next = headers.len() as u64;
        if header.height < next {
            return if headers[header.height as usize].1 == hash {
                Ok(())
            } else {
                Err(HeaderError::Conflict(header.height))
            };
        }
        if header.height > next {
            return Err(HeaderError::Gap { expected: next, got: header.height });
        }
        let prev = headers.last().map_or(Digest::ZERO, |(_, h)| *h);
        if header.prev_hash != prev {
            return Err(HeaderError::BrokenLink(header.height));
        }
        headers.push((header.clone(), hash));
        Ok(())
    }

    pub fn hash_at(&self, height: u64) -> Option<Digest> {
        self.headers.read().unwrap().get(height as usize).map(|(_, h)| *h)
    }

    pub fn header_at(&self, height: u64) -> Option<BlockHeader> {
        self.headers.read().unwrap().get(height as usize).map(|(h, _)| h.clone())
    }

    pub fn len(&self) -> usize {
        self.headers.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
