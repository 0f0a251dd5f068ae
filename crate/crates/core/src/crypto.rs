//! Credentials, round-scoped anonymous signing, RSU signatures and hashing.
//!
//! Anonymous participation is realised with pseudonym certificates. During
//! enrollment the CA issues every client one certificate per round, each
//! binding a fresh Ed25519 public key to that round index. A client signs its
//! round-`r` update with the round-`r` pseudonym key. Verifiers learn only that
//! *some* enrolled client signed, and two envelopes from one round can be
//! linked by comparing the pseudonym key, whereas keys from different rounds
//! are independent.
//!
//! All encodings are little-endian, fixed width, fields in declared order.

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const DIGEST_LEN: usize = 32;
pub const LINK_TAG_LEN: usize = 10;

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Same-round linkage handle: the first 10 bytes of SHA-256 over the
/// pseudonym public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkTag(pub [u8; LINK_TAG_LEN]);

impl LinkTag {
    pub fn of_key(pseudo_pk: &[u8; PUBLIC_KEY_LEN]) -> Self {
        let d = digest(pseudo_pk);
        let mut tag = [0u8; LINK_TAG_LEN];
        tag.copy_from_slice(&d.0[..LINK_TAG_LEN]);
        LinkTag(tag)
    }

    pub fn to_hex(&self) -> String {
        hex(&self.0)
    }
}

impl fmt::Debug for LinkTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LinkTag({})", self.to_hex())
    }
}

/// Public verification material of the enrollment authority.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupVerificationKey(VerifyingKey);

impl GroupVerificationKey {
    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8; PUBLIC_KEY_LEN]) -> Result<Self> {
        VerifyingKey::from_bytes(bytes)
            .map(Self)
            .map_err(|e| Error::Format(format!("group verification key: {e}")))
    }
}

impl fmt::Debug for GroupVerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupVerificationKey({})", &hex(&self.to_bytes())[..16])
    }
}

/// CA-signed binding of a pseudonym key to one round.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct RoundCert {
    pub round: u32,
    pub pseudo_pk: [u8; PUBLIC_KEY_LEN],
    pub ca_sig: [u8; SIGNATURE_LEN],
}

impl RoundCert {
    pub const ENCODED_LEN: usize = 4 + PUBLIC_KEY_LEN + SIGNATURE_LEN;

    fn signed_message(round: u32, pseudo_pk: &[u8; PUBLIC_KEY_LEN]) -> [u8; 4 + PUBLIC_KEY_LEN] {
        let mut m = [0u8; 4 + PUBLIC_KEY_LEN];
        m[..4].copy_from_slice(&round.to_le_bytes());
        m[4..].copy_from_slice(pseudo_pk);
        m
    }

    pub fn link_tag(&self) -> LinkTag {
        LinkTag::of_key(&self.pseudo_pk)
    }

    pub fn verify(&self, gvk: &GroupVerificationKey) -> bool {
        let msg = Self::signed_message(self.round, &self.pseudo_pk);
        gvk.0.verify_strict(&msg, &Signature::from_bytes(&self.ca_sig)).is_ok()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.pseudo_pk);
        out.extend_from_slice(&self.ca_sig);
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(Error::Format(format!(
                "round cert must be {} bytes, got {}",
                Self::ENCODED_LEN,
                bytes.len()
            )));
        }
        Ok(Self {
            round: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            pseudo_pk: bytes[4..36].try_into().unwrap(),
            ca_sig: bytes[36..].try_into().unwrap(),
        })
    }
}

impl fmt::Debug for RoundCert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoundCert")
            .field("round", &self.round)
            .field("tag", &self.link_tag())
            .finish()
    }
}

/// One pseudonym certificate and its secret key per round.
#[derive(Clone)]
pub struct CredentialSet {
    rounds: Vec<(RoundCert, SigningKey)>,
}

impl CredentialSet {
    pub fn rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn cert(&self, round: u32) -> Option<&RoundCert> {
        self.rounds.get(round as usize).map(|(c, _)| c)
    }

    /// Canonical bytes of every certificate and secret, for reproducibility checks.
    pub fn fingerprint(&self) -> Digest {
        let mut buf = Vec::with_capacity(self.rounds.len() * (RoundCert::ENCODED_LEN + 32));
        for (cert, sk) in &self.rounds {
            cert.encode_into(&mut buf);
            buf.extend_from_slice(&sk.to_bytes());
        }
        digest(&buf)
    }
}

impl fmt::Debug for CredentialSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CredentialSet")
            .field("rounds", &self.rounds.len())
            .finish_non_exhaustive()
    }
}

/// Anonymous signature over an update digest.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SignedEnvelope {
    pub round: u32,
    pub payload_digest: Digest,
    pub cert: RoundCert,
    pub sig: [u8; SIGNATURE_LEN],
}

impl SignedEnvelope {
    fn signed_message(round: u32, payload_digest: &Digest) -> [u8; 4 + DIGEST_LEN] {
        let mut m = [0u8; 4 + DIGEST_LEN];
        m[..4].copy_from_slice(&round.to_le_bytes());
        m[4..].copy_from_slice(&payload_digest.0);
        m
    }

    pub fn link_tag(&self) -> LinkTag {
        self.cert.link_tag()
    }
}

/// Long-lived RSU signing identity.
#[derive(Clone)]
pub struct RsuKeyPair {
    pub rsu_id: u16,
    signing: SigningKey,
}

impl RsuKeyPair {
    pub fn public_key(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> [u8; SIGNATURE_LEN] {
        rsu_sign(self, message)
    }
}

impl fmt::Debug for RsuKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RsuKeyPair")
            .field("rsu_id", &self.rsu_id)
            .field("pk", &hex(&self.public_key()[..8]))
            .finish()
    }
}

/// Enrollment authority. Lives only inside [`ca_init`].
struct CaState {
    ca_signing_key: SigningKey,
    enrolled_clients: usize,
    enrolled_rsus: usize,
}

impl CaState {
    fn issue(&self, round: u32, pseudo_pk: [u8; PUBLIC_KEY_LEN]) -> RoundCert {
        let msg = RoundCert::signed_message(round, &pseudo_pk);
        RoundCert {
            round,
            pseudo_pk,
            ca_sig: self.ca_signing_key.sign(&msg).to_bytes(),
        }
    }
}

/// Everything handed out during enrollment.
#[derive(Clone, Debug)]
pub struct Enrollment {
    pub gvk: GroupVerificationKey,
    pub credentials: Vec<CredentialSet>,
    pub rsu_keys: Vec<RsuKeyPair>,
}

impl Enrollment {
    pub fn rsu_public_keys(&self) -> Vec<[u8; PUBLIC_KEY_LEN]> {
        self.rsu_keys.iter().map(RsuKeyPair::public_key).collect()
    }
}

/// Runs enrollment: one certificate per client per round, one key pair per RSU.
///
/// Every secret is derived from `seed` with the role and indices as input, so
/// a pseudonym key for round `r` is independent of the key for any other round.
pub fn ca_init(num_clients: usize, num_rsus: usize, rounds: usize, seed: u64) -> Result<Enrollment> {
    if num_clients == 0 || num_rsus == 0 || rounds == 0 {
        return Err(Error::InvalidArgument(format!(
            "ca_init needs at least one client, RSU and round (got {num_clients}, {num_rsus}, {rounds})"
        )));
    }
    if num_rsus > u16::MAX as usize || rounds > u32::MAX as usize {
        return Err(Error::InvalidArgument("enrollment size out of range".into()));
    }
    let ca = CaState {
        ca_signing_key: SigningKey::from_bytes(&derive_seed(seed, "ca", &[])),
        enrolled_clients: num_clients,
        enrolled_rsus: num_rsus,
    };
    let gvk = GroupVerificationKey(ca.ca_signing_key.verifying_key());

    let credentials = (0..ca.enrolled_clients)
        .map(|client| {
            let rounds = (0..rounds as u32)
                .map(|r| {
                    let sk = SigningKey::from_bytes(&derive_seed(seed, "pseudonym", &[client as u64, r as u64]));
                    (ca.issue(r, sk.verifying_key().to_bytes()), sk)
                })
                .collect();
            CredentialSet { rounds }
        })
        .collect();

    let rsu_keys = (0..ca.enrolled_rsus)
        .map(|j| RsuKeyPair {
            rsu_id: j as u16,
            signing: SigningKey::from_bytes(&derive_seed(seed, "rsu", &[j as u64])),
        })
        .collect();

    Ok(Enrollment {
        gvk,
        credentials,
        rsu_keys,
    })
}

/// Signs `payload_digest` with the round's pseudonym key.
pub fn gs_sign(creds: &CredentialSet, round: u32, payload_digest: Digest) -> Result<SignedEnvelope> {
    let (cert, sk) = creds.rounds.get(round as usize).ok_or(Error::NoCredential {
        round,
        available: creds.rounds.len(),
    })?;
    let msg = SignedEnvelope::signed_message(round, &payload_digest);
    Ok(SignedEnvelope {
        round,
        payload_digest,
        cert: *cert,
        sig: sk.sign(&msg).to_bytes(),
    })
}

pub fn gs_verify(gvk: &GroupVerificationKey, env: &SignedEnvelope) -> bool {
    if env.cert.round != env.round || !env.cert.verify(gvk) {
        return false;
    }
    let Ok(pk) = VerifyingKey::from_bytes(&env.cert.pseudo_pk) else {
        return false;
    };
    let msg = SignedEnvelope::signed_message(env.round, &env.payload_digest);
    pk.verify_strict(&msg, &Signature::from_bytes(&env.sig)).is_ok()
}

pub fn gs_link(a: &SignedEnvelope, b: &SignedEnvelope) -> bool {
    a.round == b.round && a.link_tag() == b.link_tag()
}

pub fn rsu_sign(key: &RsuKeyPair, message: &[u8]) -> [u8; SIGNATURE_LEN] {
    key.signing.sign(message).to_bytes()
}

pub fn rsu_verify(pk: &[u8; PUBLIC_KEY_LEN], message: &[u8], sig: &[u8; SIGNATURE_LEN]) -> bool {
    match VerifyingKey::from_bytes(pk) {
        Ok(vk) => vk.verify_strict(message, &Signature::from_bytes(sig)).is_ok(),
        Err(_) => false,
    }
}
