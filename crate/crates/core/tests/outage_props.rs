mod common;

use cogc::channel::{link_outage_probability, OutageMode};
use cogc::outage::closed_form_outage;
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=12).prop_flat_map(|m| (Just(m), 0..m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn components_sum_to_a_probability((m, s) in shape(), q in 0.0f64..=1.0) {
        let r = closed_form_outage(m, s, q).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p_o));
        for p in [r.p1, r.p2, r.p3] {
            prop_assert!(p >= 0.0);
        }
        prop_assert!((r.p1 + r.p2 + r.p3 - r.p_o).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_link_outage((m, s) in shape(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = closed_form_outage(m, s, lo).unwrap().p_o;
        let p_hi = closed_form_outage(m, s, hi).unwrap().p_o;
        prop_assert!(p_lo <= p_hi + 1e-12, "P_O({lo}) = {p_lo} > P_O({hi}) = {p_hi}");
    }

    #[test]
    fn matches_enumeration((m, s) in (1usize..=10).prop_flat_map(|m| (Just(m), 0..m)), q in 0.0f64..=1.0) {
        let closed = closed_form_outage(m, s, q).unwrap().p_o;
        let brute = common::enumerated_outage(m, s, q);
        prop_assert!((closed - brute).abs() < 1e-12, "{closed} vs {brute}");
    }

    #[test]
    fn link_outage_falls_with_snr(rate in 0.05f64..2.0, snr in 0.1f64..100.0, k in 1.01f64..10.0) {
        for mode in [OutageMode::Exact, OutageMode::Linearized] {
            let a = link_outage_probability(rate, snr, 0.5, mode).unwrap();
            let b = link_outage_probability(rate, snr * k, 0.5, mode).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b <= a);
        }
    }
}

#[test]
fn more_tolerance_helps_at_low_outage() {
    let q = 0.02;
    let p: Vec<f64> = (0..5)
        .map(|s| closed_form_outage(10, s, q).unwrap().p_o)
        .collect();
    assert!(p[1] < p[0], "{p:?}");
}
