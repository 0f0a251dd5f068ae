//! Client side of a round: local training, update computation, anonymous
//! signing and submission, plus adversarial client behaviours.

use std::fmt;
use std::sync::Arc;

use crate::crypto::{digest, gs_sign, CredentialSet, Digest, LinkTag, RoundCert, SignedEnvelope, SIGNATURE_LEN};
use crate::error::{Error, Result};
use crate::model::{local_train, Dataset, ParamVector, RetentionSchedule, TokenScorer, TrainHyper, TrainTrace};
use crate::registry::{parse_arg, Registry};
use crate::seed::derive_seed;

/// Client-local state. `client_id` is bookkeeping for the simulator and is
/// never written into a message.
#[derive(Clone, Debug)]
pub struct ClientState {
    client_id: usize,
    pub creds: CredentialSet,
    pub dataset: Dataset,
    pub declared_size: u32,
    current_global: ParamVector,
}

impl ClientState {
    pub fn new(client_id: usize, creds: CredentialSet, dataset: Dataset, global: ParamVector) -> Self {
        Self {
            client_id,
            creds,
            declared_size: dataset.len() as u32,
            dataset,
            current_global: global,
        }
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn current_global(&self) -> &ParamVector {
        &self.current_global
    }
}

/// Replaces the stored global model. A round without a finalized model leaves
/// the state untouched.
pub fn apply_global(state: &mut ClientState, finalized: Option<&ParamVector>) {
    if let Some(w) = finalized {
        state.current_global = w.clone();
    }
}

/// A signed model update as sent to RSUs.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMessage {
    pub round: u32,
    pub delta: ParamVector,
    pub declared_size: u32,
    pub envelope: SignedEnvelope,
}

/// Digest bound by the envelope: `SHA-256(round ‖ delta bytes ‖ declared_size)`.
pub fn payload_digest(round: u32, delta: &ParamVector, declared_size: u32) -> Digest {
    let delta_bytes = delta.to_bytes();
    let mut buf = Vec::with_capacity(8 + delta_bytes.len());
    buf.extend_from_slice(&round.to_le_bytes());
    buf.extend_from_slice(&delta_bytes);
    buf.extend_from_slice(&declared_size.to_le_bytes());
    digest(&buf)
}

impl UpdateMessage {
    pub fn sign(creds: &CredentialSet, round: u32, delta: ParamVector, declared_size: u32) -> Result<Self> {
        let envelope = gs_sign(creds, round, payload_digest(round, &delta, declared_size))?;
        Ok(Self {
            round,
            delta,
            declared_size,
            envelope,
        })
    }

    pub fn link_tag(&self) -> LinkTag {
        self.envelope.link_tag()
    }

    /// True when the envelope's digest matches the carried payload.
    pub fn payload_matches(&self) -> bool {
        self.envelope.round == self.round
            && self.envelope.payload_digest == payload_digest(self.round, &self.delta, self.declared_size)
    }

    /// `round ‖ declared_size ‖ delta_len ‖ delta ‖ cert ‖ sig`, integers u32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let delta = self.delta.to_bytes();
        let mut out = Vec::with_capacity(12 + delta.len() + RoundCert::ENCODED_LEN + SIGNATURE_LEN);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.declared_size.to_le_bytes());
        out.extend_from_slice(&(delta.len() as u32).to_le_bytes());
        out.extend_from_slice(&delta);
        self.envelope.cert.encode_into(&mut out);
        out.extend_from_slice(&self.envelope.sig);
        out
    }

    /// Decodes the wire layout. The payload digest is recomputed from the
    /// received fields, so any altered byte surfaces as a signature failure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Format("update message truncated".into());
        let u32_at = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(short)
        };
        let round = u32_at(0)?;
        let declared_size = u32_at(4)?;
        let delta_len = u32_at(8)? as usize;
        let delta_end = 12usize.checked_add(delta_len).ok_or_else(short)?;
        let delta = ParamVector::from_bytes(bytes.get(12..delta_end).ok_or_else(short)?)?;
        let cert_end = delta_end + RoundCert::ENCODED_LEN;
        let cert = RoundCert::decode(bytes.get(delta_end..cert_end).ok_or_else(short)?)?;
        let sig: [u8; SIGNATURE_LEN] = bytes
            .get(cert_end..cert_end + SIGNATURE_LEN)
            .ok_or_else(short)?
            .try_into()
            .unwrap();
        if bytes.len() != cert_end + SIGNATURE_LEN {
            return Err(Error::Format("trailing bytes after update message".into()));
        }
        Ok(Self {
            round,
            envelope: SignedEnvelope {
                round,
                payload_digest: payload_digest(round, &delta, declared_size),
                cert,
                sig,
            },
            delta,
            declared_size,
        })
    }
}

/// Local-training settings shared by all clients in a run.
#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub epochs: usize,
    pub schedule: RetentionSchedule,
    pub hyper: TrainHyper,
    pub scorer: Arc<dyn TokenScorer>,
    pub seed: u64,
}

/// Output of one honest client round.
#[derive(Clone, Debug)]
pub struct ClientRound {
    pub message: UpdateMessage,
    pub trace: TrainTrace,
}

/// Trains on the local data starting from `global`, computes
/// `delta = best - global` and signs it with the round's pseudonym key.
///
/// The batch-order seed is keyed by the round's pseudonym tag rather than the
/// enrollment index, so message bytes depend only on data, credentials and seed.
pub fn client_round(state: &ClientState, global: &ParamVector, round: u32, cfg: &ClientConfig) -> Result<ClientRound> {
    let cert = state.creds.cert(round).ok_or(Error::NoCredential {
        round,
        available: state.creds.rounds(),
    })?;
    let tag = cert.link_tag().0;
    let tag_word = u64::from_le_bytes(tag[..8].try_into().unwrap());
    let seed = derive_seed(cfg.seed, "local-train", &[round as u64, tag_word]);
    let out = local_train(
        global,
        &state.dataset,
        cfg.epochs,
        round,
        &cfg.schedule,
        &cfg.hyper,
        cfg.scorer.as_ref(),
        seed,
    )?;
    let delta = out.best.sub(global)?;
    let message = UpdateMessage::sign(&state.creds, round, delta, state.declared_size)?;
    Ok(ClientRound {
        message,
        trace: out.trace,
    })
}

/// What a client actually submits, given the honest update it computed.
pub trait ClientBehavior: Send + Sync + fmt::Debug {
    /// Canonical spec string, e.g. `duplicate:3`.
    fn spec(&self) -> String;
    fn submissions(&self, state: &ClientState, honest: UpdateMessage) -> Result<Vec<UpdateMessage>>;
    fn is_honest(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Honest;

impl ClientBehavior for Honest {
    fn spec(&self) -> String {
        "honest".into()
    }
    fn submissions(&self, _: &ClientState, honest: UpdateMessage) -> Result<Vec<UpdateMessage>> {
        Ok(vec![honest])
    }
    fn is_honest(&self) -> bool {
        true
    }
}

/// Replays the same signed update `copies` times.
#[derive(Clone, Copy, Debug)]
pub struct Duplicate {
    pub copies: usize,
}

impl ClientBehavior for Duplicate {
    fn spec(&self) -> String {
        format!("duplicate:{}", self.copies)
    }
    fn submissions(&self, _: &ClientState, honest: UpdateMessage) -> Result<Vec<UpdateMessage>> {
        Ok(vec![honest; self.copies])
    }
}

/// Scales the delta by `scale` and re-signs it.
#[derive(Clone, Copy, Debug)]
pub struct Poison {
    pub scale: f64,
}

impl ClientBehavior for Poison {
    fn spec(&self) -> String {
        format!("poison:{}", self.scale)
    }
    fn submissions(&self, state: &ClientState, honest: UpdateMessage) -> Result<Vec<UpdateMessage>> {
        let msg = UpdateMessage::sign(
            &state.creds,
            honest.round,
            honest.delta.scaled(self.scale),
            honest.declared_size,
        )?;
        Ok(vec![msg])
    }
}

/// Submits nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Silent;

impl ClientBehavior for Silent {
    fn spec(&self) -> String {
        "silent".into()
    }
    fn submissions(&self, _: &ClientState, _: UpdateMessage) -> Result<Vec<UpdateMessage>> {
        Ok(Vec::new())
    }
}

pub const DEFAULT_POISON_SCALE: f64 = -10.0;

pub fn client_behavior_registry() -> Registry<Arc<dyn ClientBehavior>> {
    const KIND: &str = "client behaviour";
    let mut r: Registry<Arc<dyn ClientBehavior>> = Registry::new(KIND);
    r.register("honest", |_| Ok(Arc::new(Honest)))
        .register("duplicate", |arg| {
            let copies = parse_arg(KIND, "duplicate", arg, 2usize)?;
            if copies == 0 {
                return Err(Error::Config("duplicate needs at least one copy".into()));
            }
            Ok(Arc::new(Duplicate { copies }))
        })
        .register("poison", |arg| {
            let scale = parse_arg(KIND, "poison", arg, DEFAULT_POISON_SCALE)?;
            if !scale.is_finite() {
                return Err(Error::Config("poison scale must be finite".into()));
            }
            Ok(Arc::new(Poison { scale }))
        })
        .register("silent", |_| Ok(Arc::new(Silent)));
    r
}

/// Applies a behaviour to an honest update.
pub fn make_attack(
    state: &ClientState,
    base: UpdateMessage,
    profile: &dyn ClientBehavior,
) -> Result<Vec<UpdateMessage>> {
    profile.submissions(state, base)
}
