//! Per-master proof-of-work data ledger.
//!
//! Masters turn every ingested payload into a [`DataBlock`]: the payload is
//! carried Base64-encoded, linked to the previous block hash, mined until the
//! hash carries the chain difficulty in leading zero hex digits, and signed
//! with a key pair generated for that block alone. Workers keep replicas and
//! re-verify each block on arrival; disagreeing replicas are repaired from the
//! chain held by a strict majority.

mod majority;
mod pow;
mod signing;

use std::collections::BTreeSet;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use majority::{fingerprint, resolve_majority, Majority, MajorityError};
pub use pow::{compute_hash, leading_zero_nibbles, meets_difficulty, mine, Mined, MAX_DIFFICULTY, ZERO_HASH};
pub use signing::{verify_hash_signature, BlockSigner};

use crate::model::{now_ms, NodeId};

pub const DEFAULT_DIFFICULTY: u32 = 3;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("mining gave up after {attempts} attempts")]
    MiningExhausted { attempts: u64 },
    #[error("key generation failed")]
    KeyGeneration,
    #[error("hash is not 64 hex characters")]
    MalformedHash,
    #[error("difficulty {0} outside 0..={MAX_DIFFICULTY}")]
    Difficulty(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBlock {
    pub index: u64,
    pub timestamp_ms: u64,
    pub payload_b64: String,
    pub prev_hash: String,
    pub nonce: u64,
    pub hash: String,
    pub pub_key_b64: String,
    pub signature_b64: String,
}

impl DataBlock {
    pub fn recompute_hash(&self) -> String {
        compute_hash(self.index, self.timestamp_ms, &self.payload_b64, &self.prev_hash, self.nonce)
    }

    pub fn payload(&self) -> Option<Vec<u8>> {
        B64.decode(&self.payload_b64).ok()
    }

    /// Genesis is fully determined by the difficulty: index 0, timestamp 0,
    /// empty payload, all-zero previous hash, no key material.
    pub fn genesis(difficulty: u32) -> Result<Self, LedgerError> {
        let mined = mine(0, 0, "", ZERO_HASH, difficulty, None)?;
        Ok(Self {
            index: 0,
            timestamp_ms: 0,
            payload_b64: String::new(),
            prev_hash: ZERO_HASH.to_owned(),
            nonce: mined.nonce,
            hash: mined.hash,
            pub_key_b64: String::new(),
            signature_b64: String::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub blocks: Vec<DataBlock>,
    pub difficulty: u32,
}

impl Chain {
    pub fn new(difficulty: u32) -> Result<Self, LedgerError> {
        if difficulty > MAX_DIFFICULTY {
            return Err(LedgerError::Difficulty(difficulty));
        }
        Ok(Self {
            blocks: vec![DataBlock::genesis(difficulty)?],
            difficulty,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> &DataBlock {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn tip_hash(&self) -> &str {
        &self.tip().hash
    }

    pub fn find(&self, hash: &str) -> Option<&DataBlock> {
        self.blocks.iter().rev().find(|b| b.hash == hash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockKeyRecord {
    pub block_index: u64,
    pub pub_key_b64: String,
    pub distributed_to: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVerdict {
    Ok,
    BadHash,
    BadPow,
    BadLink,
    BadSignature,
}

impl fmt::Display for BlockVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BlockVerdict::Ok => "ok",
            BlockVerdict::BadHash => "bad_hash",
            BlockVerdict::BadPow => "bad_pow",
            BlockVerdict::BadLink => "bad_link",
            BlockVerdict::BadSignature => "bad_signature",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum ChainVerdict {
    Ok,
    InvalidAt { index: u64, reason: BlockVerdict },
}

/// Mines, signs and appends a block carrying `payload`, stamped with the
/// current wall clock.
pub fn append_block(chain: &mut Chain, payload: &[u8]) -> Result<DataBlock, LedgerError> {
    append_block_at(chain, payload, now_ms())
}

pub fn append_block_at(chain: &mut Chain, payload: &[u8], timestamp_ms: u64) -> Result<DataBlock, LedgerError> {
    let block = make_block(chain.tip(), chain.difficulty, payload, timestamp_ms)?;
    chain.blocks.push(block.clone());
    Ok(block)
}

/// Mines and signs the successor of `prev` without touching any chain.
pub fn make_block(prev: &DataBlock, difficulty: u32, payload: &[u8], timestamp_ms: u64) -> Result<DataBlock, LedgerError> {
    let index = prev.index + 1;
    let prev_hash = prev.hash.clone();
    let payload_b64 = B64.encode(payload);
    let mined = mine(index, timestamp_ms, &payload_b64, &prev_hash, difficulty, None)?;
    let signer = BlockSigner::generate()?;
    let block = DataBlock {
        index,
        timestamp_ms,
        payload_b64,
        prev_hash,
        nonce: mined.nonce,
        signature_b64: signer.sign_hash(&mined.hash)?,
        hash: mined.hash,
        pub_key_b64: signer.public_key_b64(),
    };
    Ok(block)
}

fn check_link(block: &DataBlock, prev: Option<&DataBlock>) -> bool {
    match prev {
        Some(p) => block.index == p.index + 1 && block.prev_hash == p.hash,
        None => block.index == 0 && block.prev_hash == ZERO_HASH,
    }
}

fn check_signature(block: &DataBlock, is_genesis: bool, trusted_key: Option<&str>) -> bool {
    if is_genesis {
        return block.pub_key_b64.is_empty() && block.signature_b64.is_empty() && trusted_key.is_none();
    }
    if let Some(k) = trusted_key {
        if k != block.pub_key_b64 {
            return false;
        }
    }
    verify_hash_signature(&block.pub_key_b64, &block.hash, &block.signature_b64)
}

/// Checks one block against its predecessor (`None` for genesis) in the
/// order link, hash, proof-of-work, signature and reports the first failure.
pub fn verify_block(block: &DataBlock, prev: Option<&DataBlock>, difficulty: u32) -> BlockVerdict {
    verify_block_inner(block, prev, difficulty, None)
}

/// Like [`verify_block`] but only accepts a signature made by `trusted_key`,
/// the key a worker received through its credential archive.
pub fn verify_block_with_key(
    block: &DataBlock,
    prev: Option<&DataBlock>,
    difficulty: u32,
    trusted_key: &str,
) -> BlockVerdict {
    verify_block_inner(block, prev, difficulty, Some(trusted_key))
}

fn verify_block_inner(
    block: &DataBlock,
    prev: Option<&DataBlock>,
    difficulty: u32,
    trusted_key: Option<&str>,
) -> BlockVerdict {
    let is_genesis = prev.is_none();
    if !check_link(block, prev) {
        return BlockVerdict::BadLink;
    }
    if is_genesis && (block.timestamp_ms != 0 || !block.payload_b64.is_empty()) {
        return BlockVerdict::BadHash;
    }
    if block.recompute_hash() != block.hash {
        return BlockVerdict::BadHash;
    }
    if !meets_difficulty(&block.hash, difficulty) {
        return BlockVerdict::BadPow;
    }
    if !check_signature(block, is_genesis, trusted_key) {
        return BlockVerdict::BadSignature;
    }
    BlockVerdict::Ok
}

/// Verifies every block against its predecessor and reports the smallest
/// failing index.
pub fn validate_chain(chain: &Chain) -> ChainVerdict {
    let mut prev: Option<&DataBlock> = None;
    for (i, block) in chain.blocks.iter().enumerate() {
        let v = verify_block(block, prev, chain.difficulty);
        if v != BlockVerdict::Ok {
            return ChainVerdict::InvalidAt {
                index: i as u64,
                reason: v,
            };
        }
        prev = Some(block);
    }
    if chain.blocks.is_empty() {
        return ChainVerdict::InvalidAt {
            index: 0,
            reason: BlockVerdict::BadLink,
        };
    }
    ChainVerdict::Ok
}
