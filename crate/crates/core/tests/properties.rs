use std::collections::BTreeMap;

use dcl_core::budget::CostLedger;
use dcl_core::nn::{cross_entropy, softmax};
use dcl_core::sharing::ShareKind;
use dcl_core::sim::metrics::{collective_objective, evaluate_seen_tasks};
use dcl_core::tasks::{load_idx, write_idx};
use dcl_core::topology::{gen_erdos_renyi, Topology};
use dcl_core::TaskId;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f32..30.0, 1..12)) {
        let p = softmax(&logits);
        let sum: f64 = p.iter().map(|v| *v as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn cross_entropy_matches_log_softmax(logits in prop::collection::vec(-10.0f32..10.0, 1..12), pick in 0usize..12) {
        let label = pick % logits.len();
        let p = softmax(&logits);
        let ce = cross_entropy(&logits, label);
        prop_assert!(ce >= 0.0);
        prop_assert!((ce + (p[label] as f64).ln()).abs() < 1e-3 * ce.max(1.0));
    }

    #[test]
    fn ledger_conserves_and_round_trips(charges in prop::collection::vec((0u64..5, 0usize..4, 0usize..4, 0u8..3, 0u64..10_000), 0..40)) {
        let mut ledger = CostLedger::audit();
        let mut per_edge: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut clocks: Vec<_> = charges.clone();
        clocks.sort_by_key(|c| c.0);
        for (clock, from, to, kind, floats) in clocks {
            if from == to {
                continue;
            }
            let kind = [ShareKind::Data, ShareKind::Fed, ShareKind::Modmod][kind as usize];
            ledger.charge(clock, from, to, kind, floats).unwrap();
            ledger.acknowledge(clock, from, to, kind, floats);
            *per_edge.entry((from, to)).or_default() += floats;
        }
        ledger.check_conservation().unwrap();
        prop_assert_eq!(ledger.total(), per_edge.values().sum::<u64>());
        for ((from, to), total) in &per_edge {
            prop_assert_eq!(ledger.edge_total(*from, *to), *total);
        }
        let back = CostLedger::from_csv(&ledger.to_csv()).unwrap();
        prop_assert_eq!(back.to_csv(), ledger.to_csv());
        if ledger.total() > 0 {
            ledger.charge(9, 0, 1, ShareKind::Fed, 1).unwrap();
            prop_assert!(ledger.check_conservation().is_err());
        }
    }

    #[test]
    fn seen_task_accuracy_is_the_mean(acc in prop::collection::vec(0.0f64..100.0, 1..20)) {
        let mut sum = 0.0;
        for a in &acc {
            sum += a;
        }
        prop_assert!((evaluate_seen_tasks(&acc).unwrap() - sum / acc.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn collective_objective_matches_triple_loop(
        streams in prop::collection::vec(prop::collection::vec(0u32..5, 0..8), 1..5),
        losses in prop::collection::vec(0.0f64..4.0, 5),
    ) {
        let streams: Vec<Vec<TaskId>> = streams.into_iter().map(|s| s.into_iter().map(TaskId).collect()).collect();
        let tables: Vec<BTreeMap<TaskId, f64>> = streams
            .iter()
            .enumerate()
            .map(|(i, _)| (0..5).map(|t| (TaskId(t), losses[t as usize] + i as f64)).collect())
            .collect();
        let mut want = 0.0;
        for (i, stream) in streams.iter().enumerate() {
            for t in 0..5u32 {
                let mut count = 0;
                for arrival in stream {
                    if arrival.0 == t {
                        count += 1;
                    }
                }
                if count > 0 {
                    want += count as f64 / stream.len() as f64 * tables[i][&TaskId(t)];
                }
            }
        }
        let got = collective_objective(&streams, &tables).unwrap();
        prop_assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn edge_list_round_trips(n in 2usize..12, p in 0.0f64..1.0, seed in 0u64..1000) {
        let g = gen_erdos_renyi(n, p, seed).unwrap();
        let back = Topology::parse_edge_list(n, &g.to_edge_list()).unwrap();
        prop_assert_eq!(back, g);
    }
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 17 % 256) as u8).collect();
    write_idx(&images, &labels, 4, 5, &pixels, &[7, 0, 255]).unwrap();
    let data = load_idx(&images, &labels).unwrap();
    assert_eq!((data.len(), data.rows, data.cols), (3, 4, 5));
    assert_eq!(data.labels, vec![7, 0, 255]);
    assert_eq!(data.image(1)[0], pixels[20] as f32 / 255.0);
}

#[test]
fn idx_rejects_mismatched_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    assert!(write_idx(&images, &labels, 2, 2, &[0; 8], &[1]).is_err());
}
