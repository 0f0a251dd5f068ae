//! End-to-end federation: enrollment once, then per round local training,
//! submission, RSU verification and aggregation, consensus and ledger append.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Delivery, ResolvedScenario, ScenarioConfig};
use crate::crypto::{ca_init, LinkTag, PUBLIC_KEY_LEN};
use crate::error::{Error, Result};
use crate::fed::{apply_global, client_round, ClientConfig, ClientState, UpdateMessage};
use crate::ledger::{encode_public_keys, ChainVerification, Ledger, OffchainStore};
use crate::model::{evaluate, local_train, synth_partition, Dataset, ParamVector, Partition};
use crate::rsu::{bft_round, proposer_for, RejectReason, RsuRoundOutput, RsuState};
use crate::seed::{derive_seed, rng_for};
use crate::timing::block_time;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub retention: f64,
    /// Test accuracy of the global model in force after the round.
    pub global_accuracy: f64,
    pub recall: Vec<Option<f64>>,
    /// Messages delivered to the committee, duplicates included.
    pub submissions: usize,
    pub accepted: usize,
    pub rejected_dup: usize,
    /// Bad signature, wrong round or undecodable message.
    pub rejected_sig: usize,
    pub quorum: bool,
    pub proposer: u16,
    pub supporters: Vec<u16>,
    pub final_hash: String,
    pub block_time_ms: f64,
    pub block_bytes: usize,
    pub ledger_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    pub behavior: String,
    pub train_size: usize,
    pub missing_classes: Vec<usize>,
    /// Recall on each missing class under the final global model.
    pub missing_class_recall: Vec<f64>,
    pub mean_missing_class_recall: Option<f64>,
    /// Same quantity for the client trained alone, when that arm ran.
    pub local_only_missing_class_recall: Option<f64>,
    pub local_only_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ScenarioConfig,
    pub rounds: Vec<RoundMetrics>,
    pub clients: Vec<ClientSummary>,
    pub final_accuracy: f64,
    pub final_recall: Vec<Option<f64>>,
    pub final_model_digest: String,
    pub finalized_rounds: usize,
    pub ledger_bytes: usize,
    pub chain: ChainVerification,
    pub centralized_accuracy: Option<f64>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub ledger: Ledger,
    pub final_model: ParamVector,
    pub rsu_public_keys: Vec<[u8; PUBLIC_KEY_LEN]>,
    /// Every envelope accepted by the committee, in round order.
    pub accepted_envelopes: Vec<UpdateMessage>,
}

impl RunArtifacts {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.report.rounds, self.report.config.encoder.num_classes)
    }

    /// Writes `metrics.csv`, `report.json`, `ledger.bin`, `final.params` and
    /// `rsu_pks.bin` into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let json = serde_json::to_string_pretty(&self.report).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        std::fs::write(dir.join("ledger.bin"), self.ledger.as_bytes())?;
        std::fs::write(dir.join("final.params"), self.final_model.to_bytes())?;
        std::fs::write(dir.join("rsu_pks.bin"), encode_public_keys(&self.rsu_public_keys))?;
        Ok(())
    }
}

pub fn metrics_csv(rounds: &[RoundMetrics], num_classes: usize) -> String {
    let mut out = String::from("round,global_acc");
    for c in 0..num_classes {
        write!(out, ",recall_c{c}").unwrap();
    }
    out.push_str(",accepted,rejected_dup,rejected_sig,block_time_ms,ledger_bytes\n");
    for m in rounds {
        write!(out, "{},{:.6}", m.round, m.global_accuracy).unwrap();
        for r in &m.recall {
            match r {
                Some(v) => write!(out, ",{v:.6}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(
            out,
            ",{},{},{},{:.1},{}",
            m.accepted, m.rejected_dup, m.rejected_sig, m.block_time_ms, m.ledger_bytes
        )
        .unwrap();
    }
    out
}

/// Runs the scenario. Config problems surface as [`Error::Config`]; a block
/// the ledger refuses or a chain that fails re-verification as
/// [`Error::Invariant`].
pub fn run_federation(cfg: &ScenarioConfig) -> Result<RunArtifacts> {
    let sc = cfg.resolve()?;
    let partition = synth_partition(&sc.partition, &cfg.encoder, cfg.seed)?;
    let enrollment = ca_init(cfg.num_clients, cfg.num_rsus, cfg.rounds, cfg.seed)?;
    let rsu_pks = enrollment.rsu_public_keys();
    let initial = ParamVector::random_init(cfg.encoder, &mut rng_for(cfg.seed, "global-init", &[]));

    let mut clients: Vec<ClientState> = enrollment
        .credentials
        .iter()
        .zip(&partition.clients)
        .enumerate()
        .map(|(i, (creds, data))| ClientState::new(i, creds.clone(), data.clone(), initial.clone()))
        .collect();
    let mut rsus: Vec<RsuState> = enrollment
        .rsu_keys
        .iter()
        .zip(&sc.rsu_behaviors)
        .map(|(keys, behavior)| RsuState {
            keys: keys.clone(),
            gvk: enrollment.gvk,
            peer_pks: rsu_pks.clone(),
            current_global: initial.clone(),
            behavior: behavior.clone(),
        })
        .collect();
    let silent: Vec<bool> = sc.rsu_behaviors.iter().map(|b| !b.relays()).collect();
    let client_cfg = ClientConfig {
        epochs: cfg.local_epochs,
        schedule: sc.schedule,
        hyper: cfg.train,
        scorer: sc.scorer.clone(),
        seed: cfg.seed,
    };

    let mut ledger = Ledger::new(rsu_pks.clone());
    let mut store = OffchainStore::default();
    let mut global = initial.clone();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut accepted_envelopes = Vec::new();

    for r in 0..cfg.rounds as u32 {
        let submissions = client_phase(&clients, &sc, &client_cfg, r)?;
        let wire: Vec<Vec<u8>> = submissions.iter().map(UpdateMessage::to_bytes).collect();
        let inboxes = route(&wire, &silent, cfg.delivery);

        let outputs: Vec<(RsuRoundOutput, usize)> = rsus
            .par_iter()
            .zip(inboxes.par_iter())
            .map(|(rsu, inbox)| {
                let (msgs, malformed) = decode_all(inbox);
                (rsu.process_round(&msgs, r, cfg.seed), malformed)
            })
            .collect();

        let proposer = proposer_for(r, cfg.num_rsus, &silent);
        let commits: Vec<_> = outputs
            .iter()
            .flat_map(|(o, _)| o.votes.iter().map(|v| v.commit))
            .collect();
        let models: Vec<ParamVector> = outputs
            .iter()
            .flat_map(|(o, _)| o.votes.iter().filter_map(|v| v.model.clone()))
            .collect();
        let outcome = bft_round(r, &commits, &rsu_pks, &enrollment.rsu_keys[proposer], &models);

        // Receipts name the updates behind the finalized aggregate, taken from
        // the first supporter whose own aggregate is the finalized model.
        let receipts: Vec<LinkTag> = match &outcome.finalized {
            Some(w) => outputs
                .iter()
                .find(|(o, _)| {
                    outcome.record.supporters & (1 << o.rsu_id) != 0
                        && o.aggregate.as_ref().is_some_and(|a| a.model == *w)
                })
                .map(|(o, _)| o.verified.link_tags())
                .ok_or_else(|| Error::Invariant(format!("round {r}: finalized model has no supporting aggregate")))?,
            None => Vec::new(),
        };
        let block_bytes = ledger
            .append_block(&outcome, &receipts, u64::from(r) * 1000)
            .map_err(|e| Error::Invariant(format!("round {r}: ledger rejected block: {e}")))?
            .encoded_len();

        if let Some(w) = &outcome.finalized {
            store.put(w);
            global = w.clone();
            if let Some((o, _)) = outputs
                .iter()
                .find(|(o, _)| o.aggregate.as_ref().is_some_and(|a| a.model == *w))
            {
                accepted_envelopes.extend(o.verified.accepted.iter().cloned());
            }
        }
        for c in &mut clients {
            apply_global(c, outcome.finalized.as_ref());
        }
        for rsu in &mut rsus {
            rsu.apply_global(outcome.finalized.as_ref());
        }

        let (view, malformed) = &outputs[proposer];
        let eval = evaluate(&global, &partition.test, sc.schedule.ratio(r + 1)?, sc.scorer.as_ref())?;
        rounds.push(RoundMetrics {
            round: r,
            retention: sc.schedule.ratio(r)?,
            global_accuracy: eval.accuracy,
            recall: eval.recall,
            submissions: submissions.len(),
            accepted: view.verified.accepted.len(),
            rejected_dup: view.verified.count(RejectReason::Duplicate),
            rejected_sig: view.verified.count(RejectReason::BadSignature)
                + view.verified.count(RejectReason::WrongRound)
                + view.verified.count(RejectReason::Malformed)
                + malformed,
            quorum: outcome.record.quorum,
            proposer: proposer as u16,
            supporters: (0..cfg.num_rsus as u16)
                .filter(|j| outcome.record.supporters & (1 << j) != 0)
                .collect(),
            final_hash: outcome.record.final_hash.to_hex(),
            block_time_ms: block_time(submissions.len(), cfg.num_rsus, &cfg.timing),
            block_bytes,
            ledger_bytes: ledger.total_bytes(),
        });
    }

    let chain = ledger.verify();
    if !chain.ok {
        return Err(Error::Invariant(format!(
            "ledger failed re-verification: {:?}",
            chain.reason
        )));
    }
    if store.latest().is_some_and(|w| *w != global) {
        return Err(Error::Invariant(
            "off-chain store diverged from the finalized model".into(),
        ));
    }

    let k_final = sc.schedule.ratio(cfg.rounds as u32)?;
    let final_eval = evaluate(&global, &partition.test, k_final, sc.scorer.as_ref())?;
    let local_only = if cfg.baselines.local_only {
        Some(local_only_arm(&sc, &partition, &initial, &client_cfg)?)
    } else {
        None
    };
    let centralized_accuracy = if cfg.baselines.centralized {
        Some(centralized_arm(&sc, &partition, &initial, &client_cfg)?)
    } else {
        None
    };

    let clients = (0..cfg.num_clients)
        .map(|i| {
            let missing = sc.partition.missing_classes(i);
            let recall: Vec<f64> = missing.iter().map(|&c| final_eval.recall[c].unwrap_or(0.0)).collect();
            let lo = local_only.as_ref().map(|v| &v[i]);
            ClientSummary {
                client: i,
                behavior: sc.client_behaviors[i].spec(),
                train_size: partition.clients[i].len(),
                mean_missing_class_recall: mean(&recall),
                missing_class_recall: recall,
                missing_classes: missing,
                local_only_missing_class_recall: lo.and_then(|e| e.0),
                local_only_accuracy: lo.map(|e| e.1),
            }
        })
        .collect();

    let report = RunReport {
        config: cfg.clone(),
        finalized_rounds: rounds.iter().filter(|m| m.quorum).count(),
        rounds,
        clients,
        final_accuracy: final_eval.accuracy,
        final_recall: final_eval.recall,
        final_model_digest: global.digest().to_hex(),
        ledger_bytes: ledger.total_bytes(),
        chain,
        centralized_accuracy,
    };
    Ok(RunArtifacts {
        report,
        ledger,
        final_model: global,
        rsu_public_keys: rsu_pks,
        accepted_envelopes,
    })
}

/// Trains every client against its current global and applies its behaviour.
/// Submissions are shuffled with a round-keyed RNG to model arbitrary arrival order.
fn client_phase(
    clients: &[ClientState],
    sc: &ResolvedScenario,
    cfg: &ClientConfig,
    r: u32,
) -> Result<Vec<UpdateMessage>> {
    let per_client: Vec<Vec<UpdateMessage>> = clients
        .par_iter()
        .zip(sc.client_behaviors.par_iter())
        .map(|(state, behavior)| {
            let honest = client_round(state, state.current_global(), r, cfg)?;
            behavior.submissions(state, honest.message)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<UpdateMessage> = per_client.into_iter().flatten().collect();
    all.shuffle(&mut rng_for(cfg.seed, "arrival-order", &[r as u64]));
    Ok(all)
}

/// Builds each RSU's inbox. In associated mode message `i` lands at RSU
/// `i mod K` and is forwarded to the others unless that RSU does not relay.
fn route(wire: &[Vec<u8>], silent: &[bool], delivery: Delivery) -> Vec<Vec<Vec<u8>>> {
    let k = silent.len();
    match delivery {
        Delivery::Broadcast => vec![wire.to_vec(); k],
        Delivery::Associated => (0..k)
            .map(|j| {
                wire.iter()
                    .enumerate()
                    .filter(|(i, _)| i % k == j || !silent[i % k])
                    .map(|(_, m)| m.clone())
                    .collect()
            })
            .collect(),
    }
}

fn decode_all(inbox: &[Vec<u8>]) -> (Vec<UpdateMessage>, usize) {
    let mut msgs = Vec::with_capacity(inbox.len());
    let mut malformed = 0;
    for bytes in inbox {
        match UpdateMessage::from_bytes(bytes) {
            Ok(m) => msgs.push(m),
            Err(_) => malformed += 1,
        }
    }
    (msgs, malformed)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// The same round/epoch budget as the federation, with no aggregation.
fn train_alone(
    sc: &ResolvedScenario,
    data: &Dataset,
    init: &ParamVector,
    cfg: &ClientConfig,
    label: &str,
    id: u64,
) -> Result<ParamVector> {
    let mut w = init.clone();
    for r in 0..sc.config.rounds as u32 {
        let seed = derive_seed(cfg.seed, label, &[id, r as u64]);
        let out = local_train(
            &w,
            data,
            cfg.epochs,
            r,
            &cfg.schedule,
            &cfg.hyper,
            cfg.scorer.as_ref(),
            seed,
        )?;
        w = out.best;
    }
    Ok(w)
}

/// Per client: mean missing-class recall and overall test accuracy.
fn local_only_arm(
    sc: &ResolvedScenario,
    partition: &Partition,
    init: &ParamVector,
    cfg: &ClientConfig,
) -> Result<Vec<(Option<f64>, f64)>> {
    let k = sc.schedule.ratio(sc.config.rounds as u32)?;
    partition
        .clients
        .par_iter()
        .enumerate()
        .map(|(i, data)| {
            let w = train_alone(sc, data, init, cfg, "local-only", i as u64)?;
            let eval = evaluate(&w, &partition.test, k, sc.scorer.as_ref())?;
            let recall: Vec<f64> = sc
                .partition
                .missing_classes(i)
                .iter()
                .map(|&c| eval.recall[c].unwrap_or(0.0))
                .collect();
            Ok((mean(&recall), eval.accuracy))
        })
        .collect()
}

fn centralized_arm(
    sc: &ResolvedScenario,
    partition: &Partition,
    init: &ParamVector,
    cfg: &ClientConfig,
) -> Result<f64> {
    let pooled = Dataset::pooled(&partition.clients, sc.config.encoder.num_classes);
    let w = train_alone(sc, &pooled, init, cfg, "centralized", 0)?;
    let k = sc.schedule.ratio(sc.config.rounds as u32)?;
    Ok(evaluate(&w, &partition.test, k, sc.scorer.as_ref())?.accuracy)
}
