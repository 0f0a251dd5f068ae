//! RSU side of a round: update verification and deduplication, weighted
//! aggregation, hash commitment and majority-vote finalization.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crypto::{
    digest, gs_verify, rsu_sign, rsu_verify, Digest, GroupVerificationKey, LinkTag, RsuKeyPair, PUBLIC_KEY_LEN,
    SIGNATURE_LEN,
};
use crate::error::{Error, Result};
use crate::fed::UpdateMessage;
use crate::model::ParamVector;
use crate::registry::Registry;
use crate::seed::rng_for;

/// Largest committee the 32-bit supporter bitmap can describe.
pub const MAX_RSUS: usize = 32;

/// Strict majority, `floor(K/2) + 1`.
pub fn quorum(num_rsus: usize) -> usize {
    num_rsus / 2 + 1
}

/// Number of Byzantine RSUs a committee of `K` tolerates, `floor((K-1)/2)`.
pub fn fault_tolerance(num_rsus: usize) -> usize {
    num_rsus.saturating_sub(1) / 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    /// Envelope or certificate does not verify, or the digest does not match the payload.
    BadSignature,
    /// Message or certificate belongs to another round.
    WrongRound,
    /// Another accepted message carries the same link tag.
    Duplicate,
    /// Delta shape differs from the global model.
    Malformed,
}

/// Updates admitted for aggregation, sorted by link tag, and the rest with reasons.
#[derive(Clone, Debug, Default)]
pub struct VerifiedSet {
    pub accepted: Vec<UpdateMessage>,
    pub rejected: Vec<(UpdateMessage, RejectReason)>,
}

impl VerifiedSet {
    pub fn count(&self, reason: RejectReason) -> usize {
        self.rejected.iter().filter(|(_, r)| *r == reason).count()
    }

    pub fn link_tags(&self) -> Vec<LinkTag> {
        self.accepted.iter().map(UpdateMessage::link_tag).collect()
    }
}

/// Checks every message and keeps one per link tag.
///
/// Among messages sharing a tag the one with the lexicographically smallest
/// payload digest is kept, so every honest RSU picks the same representative
/// regardless of arrival order.
pub fn verify_updates(
    msgs: &[UpdateMessage],
    gvk: &GroupVerificationKey,
    round: u32,
    shape: &ParamVector,
) -> VerifiedSet {
    let mut out = VerifiedSet::default();
    let mut by_tag: BTreeMap<LinkTag, Vec<UpdateMessage>> = BTreeMap::new();
    for m in msgs {
        let reason = if m.round != round || m.envelope.round != round || m.envelope.cert.round != round {
            Some(RejectReason::WrongRound)
        } else if !m.payload_matches() || !gs_verify(gvk, &m.envelope) {
            Some(RejectReason::BadSignature)
        } else if m.delta.config() != shape.config() || !m.delta.is_finite() {
            Some(RejectReason::Malformed)
        } else {
            None
        };
        match reason {
            Some(r) => out.rejected.push((m.clone(), r)),
            None => by_tag.entry(m.link_tag()).or_default().push(m.clone()),
        }
    }
    for (_, mut group) in by_tag {
        group.sort_by_key(|m| m.envelope.payload_digest);
        let mut it = group.into_iter();
        out.accepted.push(it.next().expect("group is non-empty"));
        out.rejected.extend(it.map(|m| (m, RejectReason::Duplicate)));
    }
    out.rejected.sort_by(|(a, ra), (b, rb)| {
        (ra, a.link_tag(), a.envelope.payload_digest).cmp(&(rb, b.link_tag(), b.envelope.payload_digest))
    });
    out
}

/// `w = global + sum_i alpha_i delta_i` with `alpha_i = size_i / sum size`,
/// accumulated in link-tag order.
pub fn aggregate(global: &ParamVector, vs: &VerifiedSet) -> Result<ParamVector> {
    let total: u64 = vs.accepted.iter().map(|m| u64::from(m.declared_size)).sum();
    if vs.accepted.is_empty() || total == 0 {
        return Err(Error::NoAggregation);
    }
    let mut w = global.clone();
    for m in &vs.accepted {
        w.add_scaled(f64::from(m.declared_size) / total as f64, &m.delta)?;
    }
    Ok(w)
}

pub const COMMIT_FRAMING: u8 = 0xCA;
pub const RECORD_FRAMING: u8 = 0xCB;

/// An RSU's signed vote for its local aggregate hash. 107 bytes on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CommitAggregateTx {
    pub round: u32,
    pub rsu_id: u16,
    pub local_hash: Digest,
    pub accepted_count: u32,
    pub rsu_sig: [u8; SIGNATURE_LEN],
}

impl CommitAggregateTx {
    pub const ENCODED_LEN: usize = 107;
    const SIGNED_LEN: usize = 4 + 2 + 32 + 4;

    fn signed_bytes(round: u32, rsu_id: u16, local_hash: &Digest, accepted_count: u32) -> [u8; Self::SIGNED_LEN] {
        let mut b = [0u8; Self::SIGNED_LEN];
        b[0..4].copy_from_slice(&round.to_le_bytes());
        b[4..6].copy_from_slice(&rsu_id.to_le_bytes());
        b[6..38].copy_from_slice(&local_hash.0);
        b[38..42].copy_from_slice(&accepted_count.to_le_bytes());
        b
    }

    pub fn new_signed(key: &RsuKeyPair, round: u32, local_hash: Digest, accepted_count: u32) -> Self {
        let msg = Self::signed_bytes(round, key.rsu_id, &local_hash, accepted_count);
        Self {
            round,
            rsu_id: key.rsu_id,
            local_hash,
            accepted_count,
            rsu_sig: rsu_sign(key, &msg),
        }
    }

    pub fn verify(&self, pk: &[u8; PUBLIC_KEY_LEN]) -> bool {
        let msg = Self::signed_bytes(self.round, self.rsu_id, &self.local_hash, self.accepted_count);
        rsu_verify(pk, &msg, &self.rsu_sig)
    }

    pub fn to_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let mut b = [0u8; Self::ENCODED_LEN];
        b[..Self::SIGNED_LEN].copy_from_slice(&Self::signed_bytes(
            self.round,
            self.rsu_id,
            &self.local_hash,
            self.accepted_count,
        ));
        b[42..106].copy_from_slice(&self.rsu_sig);
        b[106] = COMMIT_FRAMING;
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != Self::ENCODED_LEN || b[106] != COMMIT_FRAMING {
            return Err(Error::Format("commitAggregate: bad length or framing".into()));
        }
        Ok(Self {
            round: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            rsu_id: u16::from_le_bytes(b[4..6].try_into().unwrap()),
            local_hash: Digest(b[6..38].try_into().unwrap()),
            accepted_count: u32::from_le_bytes(b[38..42].try_into().unwrap()),
            rsu_sig: b[42..106].try_into().unwrap(),
        })
    }
}

/// The round's finalization record. 108 bytes on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordRoundTx {
    pub round: u32,
    /// All-zero when no quorum was reached.
    pub final_hash: Digest,
    /// Bit `j` set when RSU `j` voted for `final_hash`.
    pub supporters: u32,
    pub quorum: bool,
    pub proposer_id: u16,
    pub proposer_sig: [u8; SIGNATURE_LEN],
}

impl RecordRoundTx {
    pub const ENCODED_LEN: usize = 108;
    const SIGNED_LEN: usize = 4 + 32 + 4 + 1 + 2;

    fn signed_bytes(&self) -> [u8; Self::SIGNED_LEN] {
        let mut b = [0u8; Self::SIGNED_LEN];
        b[0..4].copy_from_slice(&self.round.to_le_bytes());
        b[4..36].copy_from_slice(&self.final_hash.0);
        b[36..40].copy_from_slice(&self.supporters.to_le_bytes());
        b[40] = u8::from(self.quorum);
        b[41..43].copy_from_slice(&self.proposer_id.to_le_bytes());
        b
    }

    pub fn new_signed(proposer: &RsuKeyPair, round: u32, final_hash: Digest, supporters: u32, quorum: bool) -> Self {
        let mut tx = Self {
            round,
            final_hash,
            supporters,
            quorum,
            proposer_id: proposer.rsu_id,
            proposer_sig: [0; SIGNATURE_LEN],
        };
        tx.proposer_sig = rsu_sign(proposer, &tx.signed_bytes());
        tx
    }

    pub fn verify(&self, proposer_pk: &[u8; PUBLIC_KEY_LEN]) -> bool {
        rsu_verify(proposer_pk, &self.signed_bytes(), &self.proposer_sig)
    }

    pub fn supporter_count(&self) -> usize {
        self.supporters.count_ones() as usize
    }

    pub fn to_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let mut b = [0u8; Self::ENCODED_LEN];
        b[..Self::SIGNED_LEN].copy_from_slice(&self.signed_bytes());
        b[43..107].copy_from_slice(&self.proposer_sig);
        b[107] = RECORD_FRAMING;
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != Self::ENCODED_LEN || b[107] != RECORD_FRAMING {
            return Err(Error::Format("recordRound: bad length or framing".into()));
        }
        let quorum = match b[40] {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("recordRound: quorum flag {v}"))),
        };
        Ok(Self {
            round: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            final_hash: Digest(b[4..36].try_into().unwrap()),
            supporters: u32::from_le_bytes(b[36..40].try_into().unwrap()),
            quorum,
            proposer_id: u16::from_le_bytes(b[41..43].try_into().unwrap()),
            proposer_sig: b[43..107].try_into().unwrap(),
        })
    }
}

/// `h_j = digest(w_j)` and the signed commit carrying it.
pub fn commit(key: &RsuKeyPair, round: u32, model: &ParamVector, accepted_count: u32) -> (Digest, CommitAggregateTx) {
    let h = model.digest();
    (h, CommitAggregateTx::new_signed(key, round, h, accepted_count))
}

/// A vote plus, when the RSU has one, the model it commits to.
#[derive(Clone, Debug)]
pub struct Vote {
    pub commit: CommitAggregateTx,
    pub model: Option<ParamVector>,
}

/// The honestly computed local aggregate for a round.
#[derive(Clone, Debug)]
pub struct LocalAggregate {
    pub model: ParamVector,
    pub accepted_count: u32,
}

/// How an RSU turns its honest aggregate into votes.
pub trait RsuBehavior: Send + Sync + fmt::Debug {
    fn spec(&self) -> String;
    fn votes(&self, key: &RsuKeyPair, round: u32, honest: Option<&LocalAggregate>, seed: u64) -> Vec<Vote>;
    /// Whether the RSU forwards updates it received to its peers.
    fn relays(&self) -> bool {
        true
    }
    fn is_honest(&self) -> bool {
        false
    }
}

fn honest_vote(key: &RsuKeyPair, round: u32, agg: &LocalAggregate) -> Vote {
    let (_, tx) = commit(key, round, &agg.model, agg.accepted_count);
    Vote {
        commit: tx,
        model: Some(agg.model.clone()),
    }
}

fn forged_vote(key: &RsuKeyPair, round: u32, accepted_count: u32, seed: u64, label: &str) -> Vote {
    let mut noise = [0u8; 64];
    rng_for(seed, label, &[round as u64, key.rsu_id as u64]).fill_bytes(&mut noise);
    Vote {
        commit: CommitAggregateTx::new_signed(key, round, digest(&noise), accepted_count),
        model: None,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct HonestRsu;

impl RsuBehavior for HonestRsu {
    fn spec(&self) -> String {
        "honest".into()
    }
    fn votes(&self, key: &RsuKeyPair, round: u32, honest: Option<&LocalAggregate>, _: u64) -> Vec<Vote> {
        honest.map(|a| honest_vote(key, round, a)).into_iter().collect()
    }
    fn is_honest(&self) -> bool {
        true
    }
}

/// Commits to the digest of random bytes instead of its aggregate.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForgeHash;

impl RsuBehavior for ForgeHash {
    fn spec(&self) -> String {
        "forge_hash".into()
    }
    fn votes(&self, key: &RsuKeyPair, round: u32, honest: Option<&LocalAggregate>, seed: u64) -> Vec<Vote> {
        let count = honest.map_or(0, |a| a.accepted_count);
        vec![forged_vote(key, round, count, seed, "rsu/forge")]
    }
}

/// Signs both its honest hash and a forged one.
#[derive(Clone, Copy, Debug, Default)]
pub struct Equivocate;

impl RsuBehavior for Equivocate {
    fn spec(&self) -> String {
        "equivocate".into()
    }
    fn votes(&self, key: &RsuKeyPair, round: u32, honest: Option<&LocalAggregate>, seed: u64) -> Vec<Vote> {
        let count = honest.map_or(0, |a| a.accepted_count);
        let mut v: Vec<Vote> = honest.map(|a| honest_vote(key, round, a)).into_iter().collect();
        v.push(forged_vote(key, round, count, seed, "rsu/equivocate"));
        v
    }
}

/// Neither votes nor relays.
#[derive(Clone, Copy, Debug, Default)]
pub struct SilentRsu;

impl RsuBehavior for SilentRsu {
    fn spec(&self) -> String {
        "silent".into()
    }
    fn votes(&self, _: &RsuKeyPair, _: u32, _: Option<&LocalAggregate>, _: u64) -> Vec<Vote> {
        Vec::new()
    }
    fn relays(&self) -> bool {
        false
    }
}

pub fn rsu_behavior_registry() -> Registry<Arc<dyn RsuBehavior>> {
    let mut r: Registry<Arc<dyn RsuBehavior>> = Registry::new("RSU behaviour");
    r.register("honest", |_| Ok(Arc::new(HonestRsu)))
        .register("forge_hash", |_| Ok(Arc::new(ForgeHash)))
        .register("equivocate", |_| Ok(Arc::new(Equivocate)))
        .register("silent", |_| Ok(Arc::new(SilentRsu)));
    r
}

/// Per-RSU state.
#[derive(Clone, Debug)]
pub struct RsuState {
    pub keys: RsuKeyPair,
    pub gvk: GroupVerificationKey,
    pub peer_pks: Vec<[u8; PUBLIC_KEY_LEN]>,
    pub current_global: ParamVector,
    pub behavior: Arc<dyn RsuBehavior>,
}

/// What one RSU produced in one round.
#[derive(Clone, Debug)]
pub struct RsuRoundOutput {
    pub rsu_id: u16,
    pub verified: VerifiedSet,
    pub aggregate: Option<LocalAggregate>,
    pub votes: Vec<Vote>,
}

impl RsuState {
    pub fn rsu_id(&self) -> u16 {
        self.keys.rsu_id
    }

    /// Verification, aggregation and voting for one round.
    pub fn process_round(&self, inbox: &[UpdateMessage], round: u32, seed: u64) -> RsuRoundOutput {
        let verified = verify_updates(inbox, &self.gvk, round, &self.current_global);
        let aggregate = aggregate(&self.current_global, &verified)
            .ok()
            .map(|model| LocalAggregate {
                model,
                accepted_count: verified.accepted.len() as u32,
            });
        let votes = self.behavior.votes(&self.keys, round, aggregate.as_ref(), seed);
        RsuRoundOutput {
            rsu_id: self.rsu_id(),
            verified,
            aggregate,
            votes,
        }
    }

    pub fn apply_global(&mut self, finalized: Option<&ParamVector>) {
        if let Some(w) = finalized {
            self.current_global = w.clone();
        }
    }
}

/// Result of one consensus round.
#[derive(Clone, Debug)]
pub struct ConsensusOutcome {
    pub finalized: Option<ParamVector>,
    pub record: RecordRoundTx,
    /// Counted commits, one per voting RSU, ordered by RSU id.
    pub commits: Vec<CommitAggregateTx>,
}

/// Round-robin proposer for `round`, skipping RSUs listed in `unavailable`.
pub fn proposer_for(round: u32, num_rsus: usize, unavailable: &[bool]) -> usize {
    let start = round as usize % num_rsus;
    (0..num_rsus)
        .map(|i| (start + i) % num_rsus)
        .find(|&j| !unavailable.get(j).copied().unwrap_or(false))
        .unwrap_or(start)
}

/// One-shot signed-vote agreement.
///
/// Commits with a bad signature, a foreign round or an unknown RSU id are
/// dropped. Each RSU contributes at most one counted commit, the first in byte
/// order. A hash backed by `floor(K/2)+1` counted commits is finalized,
/// provided a model hashing to it is available.
pub fn bft_round(
    round: u32,
    commits: &[CommitAggregateTx],
    peer_pks: &[[u8; PUBLIC_KEY_LEN]],
    proposer: &RsuKeyPair,
    models: &[ParamVector],
) -> ConsensusOutcome {
    let k = peer_pks.len();
    let mut valid: Vec<&CommitAggregateTx> = commits
        .iter()
        .filter(|c| c.round == round)
        .filter(|c| (c.rsu_id as usize) < k && c.verify(&peer_pks[c.rsu_id as usize]))
        .collect();
    valid.sort_by_key(|c| c.to_bytes());
    let mut counted: BTreeMap<u16, CommitAggregateTx> = BTreeMap::new();
    for c in valid {
        counted.entry(c.rsu_id).or_insert(*c);
    }

    let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
    for c in counted.values() {
        *tally.entry(c.local_hash).or_default() += 1;
    }
    let winner = tally.iter().find(|(_, &n)| n >= quorum(k)).map(|(h, _)| *h);
    let finalized = winner.and_then(|h| models.iter().find(|m| m.digest() == h).cloned());

    let record = match (&winner, &finalized) {
        (Some(h), Some(_)) => {
            let supporters = counted
                .values()
                .filter(|c| c.local_hash == *h)
                .fold(0u32, |acc, c| acc | (1 << c.rsu_id));
            RecordRoundTx::new_signed(proposer, round, *h, supporters, true)
        }
        _ => RecordRoundTx::new_signed(proposer, round, Digest::ZERO, 0, false),
    };
    ConsensusOutcome {
        finalized,
        record,
        commits: counted.into_values().collect(),
    }
}
