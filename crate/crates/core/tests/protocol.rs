//! End-to-end protocol scenarios with injected client and RSU faults.

use blocksec::crypto::Digest;
use blocksec::harness::{run_federation, Delivery, ScenarioConfig};
use blocksec::ledger::block_size;
use blocksec::Error;

fn small(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        rounds: 3,
        local_epochs: 1,
        ..Default::default()
    }
}

#[test]
fn duplicate_attacker_keeps_one_update_per_round() {
    let mut cfg = small(3);
    cfg.attacks.client.insert("2".into(), "duplicate:3".into());
    let run = run_federation(&cfg).unwrap();
    for m in &run.report.rounds {
        assert_eq!(m.submissions, 7);
        assert_eq!(m.accepted, 5);
        assert_eq!(m.rejected_dup, 2);
        assert!(m.quorum);
        assert_eq!(m.block_bytes, block_size(3, 5));
    }
    assert_eq!(run.report.clients[2].behavior, "duplicate:3");
}

#[test]
fn byzantine_majority_never_finalizes_and_keeps_the_initial_model() {
    let mut cfg = small(5);
    cfg.attacks.rsu.insert("0".into(), "forge_hash".into());
    cfg.attacks.rsu.insert("2".into(), "forge_hash".into());
    let run = run_federation(&cfg).unwrap();
    assert_eq!(run.report.finalized_rounds, 0);
    for m in &run.report.rounds {
        assert!(!m.quorum);
        assert!(m.supporters.is_empty());
        assert_eq!(m.final_hash, Digest::ZERO.to_hex());
    }
    assert!(run.ledger.blocks().iter().all(|b| b.receipts.is_empty()));
    assert!(run.report.chain.ok);

    // With zero local epochs every delta is zero, so an honest run never
    // leaves the initial model either.
    let untrained = run_federation(&ScenarioConfig {
        local_epochs: 0,
        ..small(5)
    })
    .unwrap();
    assert_eq!(run.final_model, untrained.final_model);
}

#[test]
fn one_forger_or_equivocator_is_tolerated() {
    let honest = run_federation(&small(8)).unwrap();
    for behavior in ["forge_hash", "equivocate"] {
        let mut cfg = small(8);
        cfg.attacks.rsu.insert("1".into(), behavior.into());
        let run = run_federation(&cfg).unwrap();
        assert_eq!(run.report.finalized_rounds, 3, "{behavior}");
        assert_eq!(run.final_model, honest.final_model, "{behavior}");
        for (a, b) in run.report.rounds.iter().zip(&honest.report.rounds) {
            assert_eq!(a.final_hash, b.final_hash);
            // An equivocator's honest vote may be the one counted.
            if behavior == "forge_hash" {
                assert!(!a.supporters.contains(&1));
            }
        }
    }
}

#[test]
fn silent_client_shrinks_the_round() {
    let mut cfg = small(9);
    cfg.attacks.client.insert("4".into(), "silent".into());
    let run = run_federation(&cfg).unwrap();
    for m in &run.report.rounds {
        assert_eq!((m.submissions, m.accepted), (4, 4));
        assert_eq!(m.block_bytes, block_size(3, 4));
    }
}

#[test]
fn poisoned_update_is_accepted_but_changes_the_model() {
    let honest = run_federation(&small(10)).unwrap();
    let mut cfg = small(10);
    cfg.attacks.client.insert("0".into(), "poison".into());
    let run = run_federation(&cfg).unwrap();
    assert!(run.report.rounds.iter().all(|m| m.accepted == 5 && m.quorum));
    assert_ne!(run.final_model, honest.final_model);
}

#[test]
fn associated_delivery_matches_broadcast_when_all_rsus_relay() {
    let broadcast = run_federation(&small(12)).unwrap();
    let associated = run_federation(&ScenarioConfig {
        delivery: Delivery::Associated,
        ..small(12)
    })
    .unwrap();
    assert_eq!(broadcast.ledger.as_bytes(), associated.ledger.as_bytes());
    assert_eq!(broadcast.metrics_csv(), associated.metrics_csv());
}

#[test]
fn silent_rsu_drops_its_shard_and_is_never_proposer() {
    let mut cfg = ScenarioConfig {
        delivery: Delivery::Associated,
        ..small(14)
    };
    cfg.attacks.rsu.insert("0".into(), "silent".into());
    let run = run_federation(&cfg).unwrap();
    for m in &run.report.rounds {
        // Arrival slots 0 and 3 land at the silent RSU and go no further.
        assert_eq!(m.accepted, 3);
        assert!(m.quorum);
        assert_eq!(m.supporters, vec![1, 2]);
        assert_ne!(m.proposer, 0);
    }
    assert!(run.report.chain.ok);
}

#[test]
fn invalid_scenarios_are_config_errors() {
    let mut cfg = small(1);
    cfg.attacks.client.insert("9".into(), "silent".into());
    assert!(matches!(run_federation(&cfg), Err(Error::Config(_))));
    let cfg = ScenarioConfig {
        num_rsus: 0,
        ..small(1)
    };
    assert!(matches!(run_federation(&cfg), Err(Error::Config(_))));
}

#[test]
fn artifacts_are_written() {
    let run = run_federation(&ScenarioConfig {
        local_epochs: 0,
        ..small(2)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.write_to(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,global_acc,recall_c0,recall_c1,recall_c2,recall_c3,recall_c4,recall_c5,recall_c6,recall_c7,\
         accepted,rejected_dup,rejected_sig,block_time_ms,ledger_bytes"
    );
    assert_eq!(lines.count(), 3);
    let ledger = std::fs::read(dir.path().join("ledger.bin")).unwrap();
    assert_eq!(ledger, run.ledger.as_bytes());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rounds"].as_array().unwrap().len(), 3);
    assert_eq!(report["chain"]["ok"], true);
    let params = std::fs::read(dir.path().join("final.params")).unwrap();
    assert_eq!(params, run.final_model.to_bytes());
}
