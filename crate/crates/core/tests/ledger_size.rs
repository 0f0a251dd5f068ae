//! Serialized ledger size of full runs against the closed-form block size.

use blocksec::harness::{run_federation, ScenarioConfig};
use blocksec::ledger::{block_size, ledger_size_kb};

fn tiny(num_clients: usize, num_rsus: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        seed: 21,
        num_clients,
        num_rsus,
        local_epochs: 0,
        ..Default::default()
    };
    cfg.partition.scale_divisor = 100_000;
    cfg.partition.test_per_class = 1;
    cfg
}

#[test]
fn every_client_count_matches_the_formula_byte_for_byte() {
    for n in [5, 10, 15, 20, 25] {
        let run = run_federation(&tiny(n, 3)).unwrap();
        let expected = 15 * (16 + 52 + 3 * 107 + 108 + 11 * n + 12);
        assert_eq!(run.ledger.as_bytes().len(), expected, "N={n}");
        assert_eq!((ledger_size_kb(n, 3, 15, 1.0) * 1000.0).round() as usize, expected);
        let mut cumulative = 0;
        for (m, b) in run.report.rounds.iter().zip(run.ledger.blocks()) {
            cumulative += b.encoded_len();
            assert_eq!(m.block_bytes, block_size(3, n));
            assert_eq!(m.ledger_bytes, cumulative);
        }
    }
}

#[test]
fn committee_size_enters_through_commits_only() {
    for k in [1, 5, 7] {
        let run = run_federation(&ScenarioConfig {
            rounds: 4,
            ..tiny(6, k)
        })
        .unwrap();
        assert_eq!(run.ledger.total_bytes(), 4 * block_size(k, 6), "K={k}");
    }
}
