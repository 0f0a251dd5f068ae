//! Helpers shared by the integration tests.

#![allow(dead_code)]

use blocksec::crypto::CredentialSet;
use blocksec::fed::UpdateMessage;
use blocksec::model::{ParamVector, ToyEncoderConfig};
use rand::Rng;

pub fn random_params<R: Rng>(cfg: ToyEncoderConfig, rng: &mut R) -> ParamVector {
    let n = cfg.param_count();
    ParamVector::from_values(cfg, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// One signed update per credential set with a random delta and size.
pub fn signed_batch<R: Rng>(
    creds: &[CredentialSet],
    round: u32,
    cfg: ToyEncoderConfig,
    rng: &mut R,
) -> Vec<UpdateMessage> {
    creds
        .iter()
        .map(|c| {
            let delta = random_params(cfg, rng);
            UpdateMessage::sign(c, round, delta, rng.random_range(1..200)).unwrap()
        })
        .collect()
}

/// Checkpoint-form aggregate `sum_i alpha_i (global + delta_i)`, written
/// directly over the flat parameter arrays.
pub fn checkpoint_form(global: &ParamVector, msgs: &[UpdateMessage]) -> ParamVector {
    let total: f64 = msgs.iter().map(|m| m.declared_size as f64).sum();
    let mut out = vec![0.0; global.len()];
    for m in msgs {
        let alpha = m.declared_size as f64 / total;
        for ((o, g), d) in out.iter_mut().zip(global.as_slice()).zip(m.delta.as_slice()) {
            *o += alpha * (g + d);
        }
    }
    ParamVector::from_values(global.config(), out).unwrap()
}

/// Delta-form aggregate `global + sum_i alpha_i delta_i`, accumulated in
/// link-tag order so its bytes are comparable with an RSU's aggregate.
pub fn delta_form(global: &ParamVector, msgs: &[UpdateMessage]) -> ParamVector {
    let mut sorted: Vec<&UpdateMessage> = msgs.iter().collect();
    sorted.sort_by_key(|m| m.link_tag());
    let total: f64 = msgs.iter().map(|m| m.declared_size as f64).sum();
    let mut out = global.as_slice().to_vec();
    for m in sorted {
        let alpha = m.declared_size as f64 / total;
        for (o, d) in out.iter_mut().zip(m.delta.as_slice()) {
            *o += alpha * d;
        }
    }
    ParamVector::from_values(global.config(), out).unwrap()
}
