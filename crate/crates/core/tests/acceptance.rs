//! Acceptance suite. Criteria run sequentially in one test so the wall-clock
//! budgets are measured without competing tests on the same cores. Each
//! criterion prints one PASS/FAIL line, even without `--nocapture`, and the
//! test fails if any criterion does.

mod common;

use std::io::Write as _;
use std::time::{Duration, Instant};

use blocksec::crypto::{ca_init, gs_link};
use blocksec::harness::{run_federation, RunArtifacts, ScenarioConfig};
use blocksec::ledger::{ledger_size_kb, verify_chain};
use blocksec::model::gradcheck::run_gradcheck;
use blocksec::model::{flops_estimate, RetentionSchedule, ToyEncoderConfig};
use blocksec::rsu::{bft_round, fault_tolerance, proposer_for, rsu_behavior_registry, RsuState};
use blocksec::timing::{block_time, sweep, TimingParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::{checkpoint_form, delta_form, random_params, signed_batch};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fast(seed: u64, clients: usize, rounds: usize, epochs: usize) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        num_clients: clients,
        rounds,
        local_epochs: epochs,
        ..Default::default()
    }
}

/// Independent block-size oracle: prefix 16, header 52, 107 per commit,
/// record 108, 11 per receipt, suffix 12.
fn block_bytes_oracle(k: usize, receipts: usize) -> usize {
    16 + 52 + 107 * k + 108 + 11 * receipts + 12
}

fn ledger_size() -> Outcome {
    const REFERENCE_KB: [(usize, f64); 5] = [(5, 8.45), (10, 9.25), (15, 10.05), (20, 10.87), (25, 11.68)];
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut exact = true;
    let mut notes = Vec::new();
    for (n, reference) in REFERENCE_KB {
        let kb = ledger_size_kb(n, 3, 15, 1.0);
        worst = worst.max((kb - reference).abs() / reference);
        exact &= (kb * 1000.0).round() as usize == 15 * block_bytes_oracle(3, n);
        notes.push(format!("N={n}:{kb:.3}KB"));
    }
    // Serialized ledgers at both ends of the range; tests/ledger_size.rs
    // covers every N. Block bytes depend only on N, K, R and the accepted
    // count, so the runs use the smallest partition that gives every client data.
    for n in [5, 25] {
        let mut cfg = fast(7, n, 15, 0);
        cfg.partition.scale_divisor = 100_000;
        cfg.partition.test_per_class = 1;
        let run = run_federation(&cfg).expect("run");
        let expected = 15 * block_bytes_oracle(3, n);
        exact &= run.ledger.as_bytes().len() == expected && run.report.ledger_bytes == expected;
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 0.01 && exact && elapsed < Duration::from_secs(1),
        format!(
            "{} max_rel_dev={:.4} serialized_matches_formula={exact} elapsed={:.3}s",
            notes.join(" "),
            worst,
            elapsed.as_secs_f64()
        ),
    )
}

fn block_time_sweep() -> Outcome {
    let start = Instant::now();
    let p = TimingParams::default();
    let t = block_time(25, 3, &p);
    let oracle = 27.8 + 9.0 * (35.6 + 1.0) + 10.0 + 1.0 * 3.0 * 2.0;
    let mut shape_ok = true;
    let rows = sweep(&(1..=40).collect::<Vec<_>>(), &[3], &p);
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let boundary = a.num_clients.div_ceil(3) != b.num_clients.div_ceil(3);
        shape_ok &= b.total_ms >= a.total_ms;
        shape_ok &= (b.total_ms > a.total_ms) == boundary;
    }
    let elapsed = start.elapsed();
    outcome(
        t <= 400.0
            && (t - 373.2).abs() < 1e-9
            && (t - oracle).abs() < 1e-9
            && shape_ok
            && elapsed < Duration::from_secs(1),
        format!(
            "block_time(25,3)={t:.4}ms steps_only_at_ceil_boundaries={shape_ok} elapsed={:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn retention_schedule() -> Outcome {
    let s = RetentionSchedule::default();
    let ks: Vec<f64> = (0..=15).map(|r| s.ratio(r).unwrap()).collect();
    let monotone = ks.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        ks[0] == 0.80 && ks[15] == 0.60 && monotone,
        format!("k(0)={} k(15)={} monotone_non_increasing={monotone}", ks[0], ks[15]),
    )
}

fn quadratic_attention() -> Outcome {
    let mut ok = true;
    let mut detail = String::new();
    for n in [4usize, 8, 16, 32, 64] {
        let cfg = ToyEncoderConfig {
            num_tokens: n,
            ..Default::default()
        };
        let full = flops_estimate(n, &cfg).unwrap().attention_quadratic;
        let half = flops_estimate(n / 2, &cfg).unwrap().attention_quadratic;
        ok &= half * 4 == full;
        if n == cfg.num_tokens && n == 16 {
            detail = format!("N=16 attention {half}/{full}={:.4}", half as f64 / full as f64);
        }
    }
    outcome(
        ok,
        format!("{detail}; detector-level encoder/total FLOPs reductions not reproduced (no detector backbone)"),
    )
}

fn missing_class_recovery() -> Outcome {
    const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
    let start = Instant::now();
    let mut fed = vec![0.0; 5];
    let mut local = vec![0.0; 5];
    let mut central = Vec::new();
    for seed in SEEDS {
        let mut cfg = ScenarioConfig {
            seed,
            ..Default::default()
        };
        cfg.baselines.local_only = true;
        cfg.baselines.centralized = true;
        let run = run_federation(&cfg).expect("run");
        central.push(run.report.centralized_accuracy.unwrap());
        for c in &run.report.clients {
            fed[c.client] += c.mean_missing_class_recall.unwrap() / SEEDS.len() as f64;
            local[c.client] += c.local_only_missing_class_recall.unwrap() / SEEDS.len() as f64;
        }
    }
    let elapsed = start.elapsed();
    let gate = central.iter().all(|&a| a > 0.95);
    let fed_ok = fed.iter().all(|&r| r > 0.60);
    let local_ok = local.iter().all(|&r| r < 0.05);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    outcome(
        gate && fed_ok && local_ok && elapsed < Duration::from_secs(300),
        format!(
            "centralized_acc=[{}] federated_recall=[{}] local_only_recall=[{}] elapsed={:.1}s",
            fmt(&central),
            fmt(&fed),
            fmt(&local),
            elapsed.as_secs_f64()
        ),
    )
}

fn duplicate_containment() -> (bool, String) {
    let mut ok = true;
    for n in [2usize, 3, 5] {
        let mut cfg = fast(11, 5, 3, 1);
        cfg.attacks.client.insert("2".into(), format!("duplicate:{n}"));
        let run = run_federation(&cfg).expect("run");
        for m in &run.report.rounds {
            ok &= m.accepted == 5 && m.rejected_dup == n - 1 && m.rejected_sig == 0;
        }
        for r in 0..3u32 {
            let tags: Vec<_> = run
                .accepted_envelopes
                .iter()
                .filter(|m| m.round == r)
                .map(|m| m.link_tag())
                .collect();
            let mut unique = tags.clone();
            unique.sort();
            unique.dedup();
            ok &= unique.len() == tags.len() && tags.len() == 5;
        }
    }
    (ok, format!("(a) duplicate n=2,3,5 one-per-tag={ok}"))
}

fn byzantine_subsets() -> (bool, String) {
    let registry = rsu_behavior_registry();
    let mut ok = true;
    let mut cases = 0;
    for k in [1usize, 3, 5, 7] {
        let f = fault_tolerance(k);
        let enrollment = ca_init(4, k, 2, 100 + k as u64).unwrap();
        let pks = enrollment.rsu_public_keys();
        let cfg = ToyEncoderConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(k as u64);
        let global = random_params(cfg, &mut rng);
        let inbox = signed_batch(&enrollment.credentials, 0, cfg, &mut rng);
        let honest_hash = delta_form(&global, &inbox).digest();
        for mask in 0u32..(1 << k) {
            if mask.count_ones() as usize > f {
                continue;
            }
            cases += 1;
            let rsus: Vec<RsuState> = enrollment
                .rsu_keys
                .iter()
                .map(|key| RsuState {
                    keys: key.clone(),
                    gvk: enrollment.gvk,
                    peer_pks: pks.clone(),
                    current_global: global.clone(),
                    behavior: registry
                        .build(if mask & (1 << key.rsu_id) != 0 {
                            "forge_hash"
                        } else {
                            "honest"
                        })
                        .unwrap(),
                })
                .collect();
            let outs: Vec<_> = rsus.iter().map(|r| r.process_round(&inbox, 0, 9)).collect();
            let commits: Vec<_> = outs.iter().flat_map(|o| o.votes.iter().map(|v| v.commit)).collect();
            let models: Vec<_> = outs
                .iter()
                .flat_map(|o| o.votes.iter().filter_map(|v| v.model.clone()))
                .collect();
            let proposer = proposer_for(0, k, &vec![false; k]);
            let res = bft_round(0, &commits, &pks, &enrollment.rsu_keys[proposer], &models);
            let finalized = res.finalized.map(|w| w.digest());
            ok &= res.record.quorum && res.record.final_hash == honest_hash && finalized == Some(honest_hash);
        }
    }
    (
        ok,
        format!("(b) forge_hash subsets within tolerance, {cases} cases, honest hash finalized={ok}"),
    )
}

fn cross_round_unlinkable(run: &RunArtifacts) -> (bool, String) {
    let env = &run.accepted_envelopes;
    let mut pairs = 0usize;
    let mut linked = 0usize;
    for (i, a) in env.iter().enumerate() {
        for b in &env[i + 1..] {
            if a.round != b.round {
                pairs += 1;
                linked += gs_link(&a.envelope, &b.envelope) as usize;
            }
        }
    }
    let ok = linked == 0 && pairs > 0;
    (ok, format!("(c) cross-round pairs={pairs} linked={linked}"))
}

fn tamper_detection() -> (bool, String) {
    let run = run_federation(&fast(13, 5, 3, 0)).expect("run");
    let bytes = run.ledger.as_bytes().to_vec();
    let pks = &run.rsu_public_keys;
    let mut missed = 0usize;
    let mut flips = 0usize;
    let clean = verify_chain(&bytes, Some(pks)).ok;
    for offset in 0..bytes.len() {
        for bit in 0..8 {
            let mut t = bytes.clone();
            t[offset] ^= 1 << bit;
            flips += 1;
            missed += verify_chain(&t, Some(pks)).ok as usize;
        }
    }
    let ok = clean && missed == 0 && run.ledger.len() == 3;
    (
        ok,
        format!(
            "(d) {} bytes, {flips} single-bit flips, undetected={missed}",
            bytes.len()
        ),
    )
}

fn numerical_suite() -> Outcome {
    let gc = run_gradcheck(20, 2024).expect("gradcheck");
    let gc_ok = gc.trials >= 20 && gc.max_relative_error <= 1e-6;

    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let enrollment = ca_init(6, 5, 100, 77).unwrap();
    let pks = enrollment.rsu_public_keys();
    let registry = rsu_behavior_registry();
    let mut max_dev: f64 = 0.0;
    let mut agree = true;
    for round in 0..100u32 {
        let cfg = ToyEncoderConfig {
            num_tokens: rng.random_range(2..6),
            token_dim: rng.random_range(2..6),
            ffn_dim: rng.random_range(2..6),
            num_classes: rng.random_range(2..4),
        };
        let global = random_params(cfg, &mut rng);
        let inbox = signed_batch(&enrollment.credentials, round, cfg, &mut rng);
        let oracle = checkpoint_form(&global, &inbox);
        let k = rng.random_range(1..=5usize);
        let mut hashes = Vec::new();
        for key in &enrollment.rsu_keys[..k] {
            let mut shuffled = inbox.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let rsu = RsuState {
                keys: key.clone(),
                gvk: enrollment.gvk,
                peer_pks: pks[..k].to_vec(),
                current_global: global.clone(),
                behavior: registry.build("honest").unwrap(),
            };
            let out = rsu.process_round(&shuffled, round, 0);
            let agg = out.aggregate.expect("aggregate").model;
            for (a, b) in agg.as_slice().iter().zip(oracle.as_slice()) {
                max_dev = max_dev.max((a - b).abs());
            }
            hashes.push(out.votes[0].commit.local_hash);
        }
        agree &= hashes.windows(2).all(|w| w[0] == w[1]);
    }
    outcome(
        gc_ok && max_dev <= 1e-9 && agree,
        format!(
            "gradcheck trials={} max_rel_err={:.2e}; delta vs checkpoint max_abs_dev={max_dev:.2e}; honest hash agreement over 100 rounds={agree}",
            gc.trials, gc.max_relative_error
        ),
    )
}

fn determinism(a: &RunArtifacts, b: &RunArtifacts) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    a.write_to(&da).unwrap();
    b.write_to(&db).unwrap();
    let same = |f: &str| std::fs::read(da.join(f)).unwrap() == std::fs::read(db.join(f)).unwrap();
    let ledger = same("ledger.bin");
    let metrics = same("metrics.csv");
    outcome(
        ledger && metrics,
        format!(
            "ledger.bin identical={ledger} ({} bytes) metrics.csv identical={metrics}",
            a.ledger.total_bytes()
        ),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name, o: Outcome| {
        // Written to the handle directly so the lines survive output capture.
        let mut out = std::io::stdout().lock();
        writeln!(out, "{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
        out.flush().unwrap();
        results.push((name, o));
    };

    record("1 ledger size", ledger_size());
    record("2 block time", block_time_sweep());
    record("3 retention schedule", retention_schedule());
    record("4 quadratic attention", quadratic_attention());
    record("5 missing-class recovery", missing_class_recovery());

    let default_a = run_federation(&ScenarioConfig::default()).expect("default run");
    let default_b = run_federation(&ScenarioConfig::default()).expect("default run");
    let parts = [
        duplicate_containment(),
        byzantine_subsets(),
        cross_round_unlinkable(&default_a),
        tamper_detection(),
    ];
    record(
        "6 security suite",
        outcome(
            parts.iter().all(|p| p.0),
            parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; "),
        ),
    );
    record("7 numerical suite", numerical_suite());
    record("8 determinism", determinism(&default_a, &default_b));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
