use cogc::gc_code::{binomial, cyclic_neighbors, verify_scheme, GcScheme, RESIDUAL_TOL};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize, u64)> {
    (2usize..=10).prop_flat_map(|m| (Just(m), 0..m, any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_pattern_decodes_exactly((m, s, seed) in shape()) {
        let scheme = GcScheme::construct(m, s, seed).unwrap();
        prop_assert!(verify_scheme(&scheme) < RESIDUAL_TOL);
        prop_assert_eq!(scheme.pattern_count() as u64, binomial(m as u64, s as u64));
    }

    #[test]
    fn allocation_is_cyclic((m, s, seed) in shape()) {
        let scheme = GcScheme::construct(m, s, seed).unwrap();
        for row in 0..m {
            let support: Vec<usize> = std::iter::once(row).chain(cyclic_neighbors(m, s, row)).collect();
            for k in 0..m {
                let b = scheme.b_entry(row, k);
                if support.contains(&k) {
                    prop_assert!(b != 0.0, "B[{row}][{k}] is zero inside the support");
                } else {
                    prop_assert_eq!(b, 0.0);
                }
            }
        }
    }

    #[test]
    fn rows_ignore_their_stragglers((m, s, seed) in shape()) {
        let scheme = GcScheme::construct(m, s, seed).unwrap();
        for row in 0..scheme.pattern_count() {
            let pattern = scheme.pattern(row);
            prop_assert_eq!(pattern.len(), s);
            prop_assert_eq!(scheme.row_for_pattern(&pattern), Some(row));
            let a = scheme.a_row(row);
            for &i in &pattern {
                prop_assert_eq!(a[i], 0.0);
            }
        }
    }

    #[test]
    fn detection_covers_missing_clients((m, s, seed) in shape(), mask in any::<u16>()) {
        let scheme = GcScheme::construct(m, s, seed).unwrap();
        let received: Vec<bool> = (0..m).map(|i| mask & (1 << i) == 0).collect();
        let missing = received.iter().filter(|r| !**r).count();
        let found = scheme.detect_straggler_pattern(3, &received);
        prop_assert_eq!(found.is_recoverable(), missing <= s);
        if let Some(row) = found.matched_row {
            let a = scheme.a_row(row);
            for i in (0..m).filter(|&i| !received[i]) {
                prop_assert_eq!(a[i], 0.0);
            }
        }
    }

    #[test]
    fn text_dump_round_trips((m, s, seed) in shape()) {
        let scheme = GcScheme::construct(m, s, seed).unwrap();
        let back = GcScheme::from_text(&scheme.to_text()).unwrap();
        prop_assert_eq!(back, scheme);
    }
}

#[test]
fn construction_is_seed_deterministic() {
    let a = GcScheme::construct(10, 5, 42).unwrap();
    let b = GcScheme::construct(10, 5, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, GcScheme::construct(10, 5, 43).unwrap());
}

#[test]
fn rejects_impossible_shapes() {
    assert!(GcScheme::construct(5, 5, 0).is_err());
    assert!(GcScheme::construct(0, 0, 0).is_err());
    assert!(GcScheme::from_text("3 1 3\n1 2\n").is_err());
}
