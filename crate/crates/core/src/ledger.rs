//! Append-only hash-chained block store.
//!
//! Block layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "BSRB"
//! 4       2           format version (1)
//! 6       2           commit count K
//! 8       4           receipt count A
//! 12      4           block length in bytes
//! 16      8           header: index
//! 24      32          header: prev_hash (SHA-256 of the previous block; zero for genesis)
//! 56      4           header: round
//! 60      8           header: logical timestamp (ms)
//! 68      107 * K     commitAggregate transactions, ascending RSU id
//! ..      108         recordRound transaction
//! ..      11 * A      receipts: 10-byte link tag + 0xD1, ascending tag
//! ..      4           end marker "BSRE"
//! ..      8           first 8 bytes of SHA-256 over all preceding block bytes
//! ```
//!
//! A block is therefore `188 + 107 K + 11 A` bytes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest, Digest, LinkTag, LINK_TAG_LEN, PUBLIC_KEY_LEN};
use crate::model::ParamVector;
use crate::rsu::{quorum, CommitAggregateTx, ConsensusOutcome, RecordRoundTx};

const MAGIC: &[u8; 4] = b"BSRB";
const END_MAGIC: &[u8; 4] = b"BSRE";
const VERSION: u16 = 1;
const PREFIX_LEN: usize = 16;
const SUFFIX_LEN: usize = 12;
pub const HEADER_LEN: usize = 52;
pub const RECEIPT_LEN: usize = LINK_TAG_LEN + 1;
const RECEIPT_FRAMING: u8 = 0xD1;

/// Fixed bytes per block: framing, header and the record transaction.
pub const BLOCK_FIXED_BYTES: usize = PREFIX_LEN + HEADER_LEN + RecordRoundTx::ENCODED_LEN + SUFFIX_LEN;

/// Serialized size of a block with `commits` commit transactions and `receipts` receipts.
pub fn block_size(commits: usize, receipts: usize) -> usize {
    BLOCK_FIXED_BYTES + CommitAggregateTx::ENCODED_LEN * commits + RECEIPT_LEN * receipts
}

/// Ledger size in KB (1 KB = 1000 B) after `rounds` all-honest rounds.
pub fn ledger_size_kb(num_clients: usize, num_rsus: usize, rounds: usize, acceptance_rate: f64) -> f64 {
    let accepted = (num_clients as f64 * acceptance_rate).floor() as usize;
    (rounds * block_size(num_rsus, accepted)) as f64 / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockHeader {
    pub index: u64,
    pub prev_hash: Digest,
    pub round: u32,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub header: BlockHeader,
    pub commits: Vec<CommitAggregateTx>,
    pub record: RecordRoundTx,
    pub receipts: Vec<LinkTag>,
}

impl Block {
    pub fn encoded_len(&self) -> usize {
        block_size(self.commits.len(), self.receipts.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let len = self.encoded_len();
        let mut b = Vec::with_capacity(len);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.commits.len() as u16).to_le_bytes());
        b.extend_from_slice(&(self.receipts.len() as u32).to_le_bytes());
        b.extend_from_slice(&(len as u32).to_le_bytes());
        b.extend_from_slice(&self.header.index.to_le_bytes());
        b.extend_from_slice(&self.header.prev_hash.0);
        b.extend_from_slice(&self.header.round.to_le_bytes());
        b.extend_from_slice(&self.header.timestamp_ms.to_le_bytes());
        for c in &self.commits {
            b.extend_from_slice(&c.to_bytes());
        }
        b.extend_from_slice(&self.record.to_bytes());
        for t in &self.receipts {
            b.extend_from_slice(&t.0);
            b.push(RECEIPT_FRAMING);
        }
        b.extend_from_slice(END_MAGIC);
        let check = digest(&b);
        b.extend_from_slice(&check.0[..8]);
        debug_assert_eq!(b.len(), len);
        b
    }

    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }

    /// Parses one block at the start of `bytes`, returning it and its length.
    pub fn parse(bytes: &[u8]) -> Result<(Block, usize), String> {
        if bytes.len() < BLOCK_FIXED_BYTES {
            return Err(format!("truncated block ({} bytes left)", bytes.len()));
        }
        if &bytes[0..4] != MAGIC {
            return Err("bad block magic".into());
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported block version {version}"));
        }
        let commits = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
        let receipts = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if len != block_size(commits, receipts) {
            return Err(format!(
                "block length {len} inconsistent with {commits} commits, {receipts} receipts"
            ));
        }
        if bytes.len() < len {
            return Err(format!("block claims {len} bytes, {} available", bytes.len()));
        }
        let b = &bytes[..len];
        let body_end = len - SUFFIX_LEN;
        if &b[body_end..body_end + 4] != END_MAGIC {
            return Err("bad block end marker".into());
        }
        if digest(&b[..body_end + 4]).0[..8] != b[body_end + 4..] {
            return Err("block checksum mismatch".into());
        }
        let header = BlockHeader {
            index: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            prev_hash: Digest(b[24..56].try_into().unwrap()),
            round: u32::from_le_bytes(b[56..60].try_into().unwrap()),
            timestamp_ms: u64::from_le_bytes(b[60..68].try_into().unwrap()),
        };
        let mut at = PREFIX_LEN + HEADER_LEN;
        let mut commit_txs = Vec::with_capacity(commits);
        for _ in 0..commits {
            let c = CommitAggregateTx::from_bytes(&b[at..at + CommitAggregateTx::ENCODED_LEN])
                .map_err(|e| e.to_string())?;
            commit_txs.push(c);
            at += CommitAggregateTx::ENCODED_LEN;
        }
        let record = RecordRoundTx::from_bytes(&b[at..at + RecordRoundTx::ENCODED_LEN]).map_err(|e| e.to_string())?;
        at += RecordRoundTx::ENCODED_LEN;
        let mut tags = Vec::with_capacity(receipts);
        for _ in 0..receipts {
            if b[at + LINK_TAG_LEN] != RECEIPT_FRAMING {
                return Err("bad receipt framing".into());
            }
            tags.push(LinkTag(b[at..at + LINK_TAG_LEN].try_into().unwrap()));
            at += RECEIPT_LEN;
        }
        Ok((
            Block {
                header,
                commits: commit_txs,
                record,
                receipts: tags,
            },
            len,
        ))
    }
}

/// Why an append was refused. `code()` gives a stable numeric identifier.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppendError {
    #[error("recordRound proposer signature does not verify")]
    BadProposerSignature,
    #[error("block does not extend the chain tip")]
    BrokenChain,
    #[error("round {0} already has a block")]
    DuplicateRound(u32),
    #[error("quorum flag inconsistent with supporter set")]
    QuorumMismatch,
    #[error("commit transactions invalid: {0}")]
    BadCommit(String),
}

impl AppendError {
    pub fn code(&self) -> u8 {
        match self {
            AppendError::BadProposerSignature => 1,
            AppendError::BrokenChain => 2,
            AppendError::DuplicateRound(_) => 3,
            AppendError::QuorumMismatch => 4,
            AppendError::BadCommit(_) => 5,
        }
    }
}

/// Semantic checks shared by append and full-chain verification.
fn check_block_contents(block: &Block, peer_pks: &[[u8; PUBLIC_KEY_LEN]]) -> Result<(), AppendError> {
    let rec = &block.record;
    let k = peer_pks.len();
    if rec.round != block.header.round {
        return Err(AppendError::BadCommit("record round differs from header round".into()));
    }
    let proposer = rec.proposer_id as usize;
    if proposer >= k || !rec.verify(&peer_pks[proposer]) {
        return Err(AppendError::BadProposerSignature);
    }
    let mut last: Option<u16> = None;
    for c in &block.commits {
        if c.round != rec.round {
            return Err(AppendError::BadCommit(format!(
                "commit from RSU {} for another round",
                c.rsu_id
            )));
        }
        if last.is_some_and(|l| c.rsu_id <= l) {
            return Err(AppendError::BadCommit("commits not in ascending RSU order".into()));
        }
        last = Some(c.rsu_id);
        let id = c.rsu_id as usize;
        if id >= k || !c.verify(&peer_pks[id]) {
            return Err(AppendError::BadCommit(format!(
                "commit signature from RSU {} invalid",
                c.rsu_id
            )));
        }
    }
    if rec.quorum {
        let backing = block
            .commits
            .iter()
            .filter(|c| c.local_hash == rec.final_hash)
            .fold(0u32, |acc, c| acc | (1 << c.rsu_id));
        if backing != rec.supporters || rec.supporter_count() < quorum(k) {
            return Err(AppendError::QuorumMismatch);
        }
        let counts: BTreeSet<u32> = block
            .commits
            .iter()
            .filter(|c| c.local_hash == rec.final_hash)
            .map(|c| c.accepted_count)
            .collect();
        if counts.len() != 1 || counts.first() != Some(&(block.receipts.len() as u32)) {
            return Err(AppendError::BadCommit(
                "receipt count differs from supporters' accepted count".into(),
            ));
        }
    } else if rec.supporters != 0 || rec.final_hash != Digest::ZERO || !block.receipts.is_empty() {
        return Err(AppendError::QuorumMismatch);
    }
    if block.receipts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AppendError::BadCommit("receipts not strictly ascending".into()));
    }
    Ok(())
}

/// Hash-chained block list. Blocks are never modified once appended.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    peer_pks: Vec<[u8; PUBLIC_KEY_LEN]>,
    blocks: Vec<Block>,
    encoded: Vec<u8>,
    tip: Option<Digest>,
}

impl Ledger {
    pub fn new(peer_pks: Vec<[u8; PUBLIC_KEY_LEN]>) -> Self {
        Self {
            peer_pks,
            ..Default::default()
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.encoded.len()
    }

    /// Concatenated block bytes, the on-disk ledger format.
    pub fn as_bytes(&self) -> &[u8] {
        &self.encoded
    }

    pub fn tip_hash(&self) -> Digest {
        self.tip.unwrap_or(Digest::ZERO)
    }

    /// Builds the next block from a consensus outcome and appends it.
    pub fn append_block(
        &mut self,
        outcome: &ConsensusOutcome,
        receipts: &[LinkTag],
        timestamp_ms: u64,
    ) -> Result<&Block, AppendError> {
        let mut receipts = receipts.to_vec();
        receipts.sort();
        let block = Block {
            header: BlockHeader {
                index: self.blocks.len() as u64,
                prev_hash: self.tip_hash(),
                round: outcome.record.round,
                timestamp_ms,
            },
            commits: outcome.commits.clone(),
            record: outcome.record,
            receipts,
        };
        self.append(block)
    }

    /// Appends a fully formed block after checking linkage and contents.
    pub fn append(&mut self, block: Block) -> Result<&Block, AppendError> {
        if block.header.index != self.blocks.len() as u64 || block.header.prev_hash != self.tip_hash() {
            return Err(AppendError::BrokenChain);
        }
        if self.blocks.iter().any(|b| b.header.round == block.header.round) {
            return Err(AppendError::DuplicateRound(block.header.round));
        }
        check_block_contents(&block, &self.peer_pks)?;
        let bytes = block.to_bytes();
        self.tip = Some(digest(&bytes));
        self.encoded.extend_from_slice(&bytes);
        self.blocks.push(block);
        Ok(self.blocks.last().unwrap())
    }

    pub fn verify(&self) -> ChainVerification {
        verify_chain(&self.encoded, Some(&self.peer_pks))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainVerification {
    pub ok: bool,
    /// Blocks that passed every check.
    pub verified_blocks: usize,
    pub first_failure: Option<usize>,
    pub reason: Option<String>,
}

/// Checks framing, hash links, round uniqueness and, given the RSU keys, every
/// signature and the quorum arithmetic.
///
/// Without keys only the structural checks run.
pub fn verify_chain(bytes: &[u8], peer_pks: Option<&[[u8; PUBLIC_KEY_LEN]]>) -> ChainVerification {
    let fail = |i: usize, reason: String| ChainVerification {
        ok: false,
        verified_blocks: i,
        first_failure: Some(i),
        reason: Some(reason),
    };
    let mut at = 0;
    let mut index = 0usize;
    let mut prev = Digest::ZERO;
    let mut rounds = BTreeSet::new();
    while at < bytes.len() {
        let (block, len) = match Block::parse(&bytes[at..]) {
            Ok(v) => v,
            Err(e) => return fail(index, e),
        };
        if block.header.index != index as u64 {
            return fail(index, format!("index {} where {index} expected", block.header.index));
        }
        if block.header.prev_hash != prev {
            return fail(index, "prev_hash does not match previous block".into());
        }
        if !rounds.insert(block.header.round) {
            return fail(index, format!("round {} recorded twice", block.header.round));
        }
        if let Some(pks) = peer_pks {
            if let Err(e) = check_block_contents(&block, pks) {
                return fail(index, e.to_string());
            }
        }
        prev = digest(&bytes[at..at + len]);
        at += len;
        index += 1;
    }
    ChainVerification {
        ok: true,
        verified_blocks: index,
        first_failure: None,
        reason: None,
    }
}

/// Holds the latest full model checkpoint only.
#[derive(Clone, Debug, Default)]
pub struct OffchainStore {
    latest: Option<ParamVector>,
}

impl OffchainStore {
    /// Replaces the stored checkpoint.
    pub fn put(&mut self, model: &ParamVector) {
        self.latest = Some(model.clone());
    }

    pub fn latest(&self) -> Option<&ParamVector> {
        self.latest.as_ref()
    }

    pub fn stored_bytes(&self) -> usize {
        self.latest.as_ref().map_or(0, ParamVector::encoded_len)
    }
}

/// RSU public keys file: a u32 LE count followed by 32-byte keys.
pub fn encode_public_keys(pks: &[[u8; PUBLIC_KEY_LEN]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + PUBLIC_KEY_LEN * pks.len());
    out.extend_from_slice(&(pks.len() as u32).to_le_bytes());
    for pk in pks {
        out.extend_from_slice(pk);
    }
    out
}

pub fn decode_public_keys(bytes: &[u8]) -> crate::Result<Vec<[u8; PUBLIC_KEY_LEN]>> {
    let bad = || crate::Error::Format("public key file malformed".into());
    let n = u32::from_le_bytes(bytes.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    if bytes.len() != 4 + n * PUBLIC_KEY_LEN {
        return Err(bad());
    }
    Ok(bytes[4..]
        .chunks_exact(PUBLIC_KEY_LEN)
        .map(|c| c.try_into().unwrap())
        .collect())
}
