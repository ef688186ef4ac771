//! Append-only block log.
//!
//! Layout: `"SPAY"`, a big-endian `u16` version, then one record per block,
//! each a big-endian `u32` length followed by the block's canonical bytes.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::codec::{Canonical, DecodeError};
use crate::crypto::Digest;

use super::block::Block;

pub const MAGIC: &[u8; 4] = b"SPAY";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a block log")]
    BadMagic,
    #[error("unsupported log version {0}")]
    Version(u16),
    #[error("record {index} truncated")]
    Truncated { index: usize },
    #[error("record {index}: {source}")]
    Decode { index: usize, source: DecodeError },
    #[error("record {index} fails integrity check")]
    Integrity { index: usize },
}

pub fn encode_header() -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_be_bytes());
    out
}

pub fn encode_record(block: &Block) -> Vec<u8> {
    let body = block.to_canonical_bytes();
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn encode_log(blocks: &[Block]) -> Vec<u8> {
    let mut out = encode_header();
    for b in blocks {
        out.extend(encode_record(b));
    }
    out
}

/// Parses a log image and verifies every block's hash and its link to the
/// previous one.
pub fn decode_log(bytes: &[u8]) -> Result<Vec<Block>, LogError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(LogError::BadMagic);
    }
    let version = u16::from_be_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(LogError::Version(version));
    }
    let mut rest = &bytes[6..];
    let mut blocks = Vec::new();
    let mut prev = Digest::ZERO;
    while !rest.is_empty() {
        let index = blocks.len();
        if rest.len() < 4 {
            return Err(LogError::Truncated { index });
        }
        let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(LogError::Truncated { index });
        }
        let block = Block::from_canonical_bytes(&rest[..len]).map_err(|source| LogError::Decode { index, source })?;
        rest = &rest[len..];
        if block.height() != index as u64 || block.header.prev_hash != prev || !block.verify_integrity() {
            return Err(LogError::Integrity { index });
        }
        prev = block.block_hash;
        blocks.push(block);
    }
    Ok(blocks)
}

pub fn read_log(path: &Path) -> Result<Vec<Block>, LogError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_log(&bytes)
}

/// File-backed writer. Each append is flushed before returning.
pub struct BlockLog {
    out: BufWriter<File>,
}

impl BlockLog {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new().write(true).create(true).truncate(true).open(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(&encode_header())?;
        out.flush()?;
        Ok(BlockLog { out })
    }

    pub fn append(&mut self, block: &Block) -> Result<(), LogError> {
        self.out.write_all(&encode_record(block))?;
        self.out.flush()?;
        Ok(())
    }
}
