mod common;

use cogc::bound::{
    denominator, geometric_moments, series_constants, theorem1_bound, truncated_series,
    BoundParams, DENOMINATOR_FLOOR,
};
use cogc::Error;
use proptest::prelude::*;

fn params(rounds: usize, local_steps: usize, p_o: f64) -> BoundParams {
    BoundParams {
        smoothness: 1.0,
        sigma2: 1.0,
        batch: 1,
        dissimilarity: vec![0.5; 10],
        f_star_gap: 10.0,
        eta: 0.0,
        sqrt_schedule: true,
        local_steps,
        rounds,
        clients: 10,
        weights: Vec::new(),
        j_terms: vec![0.01; 10],
        p_o,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn series_matches_exact_summation(
        p_o in 0.0f64..0.6,
        local_steps in 1usize..6,
        eta in 0.01f64..0.2,
        l in 0.5f64..2.0,
    ) {
        let (c1, c2, r_max) = common::exact_series(p_o, local_steps, eta, l, DENOMINATOR_FLOOR);
        let got = match truncated_series(p_o, local_steps, eta, l) {
            Ok(s) => s,
            Err(e) => {
                prop_assert!(matches!(e, Error::DenominatorViolation { .. }), "{e}");
                prop_assert_eq!(r_max, 0);
                return Ok(());
            }
        };
        // a floating-point tie at the floor may move R_max by one
        let boundary = denominator(got.r_max.max(r_max), local_steps, eta, l);
        prop_assume!(got.r_max == r_max || (boundary - DENOMINATOR_FLOOR).abs() < 1e-12);
        prop_assert!(((got.c1 - c1) / c1).abs() < 1e-10, "C1 {} vs {c1}", got.c1);
        prop_assert!(((got.c2 - c2) / c2).abs() < 1e-10, "C2 {} vs {c2}", got.c2);
    }

    #[test]
    fn moments_of_the_gap(p_o in 0.0f64..0.95) {
        let (m1, m2) = geometric_moments(p_o).unwrap();
        prop_assert!((m1 - 1.0 / (1.0 - p_o)).abs() < 1e-12 * m1);
        prop_assert!((m2 - (1.0 + p_o) / (1.0 - p_o).powi(2)).abs() < 1e-12 * m2);
    }

    #[test]
    fn bound_grows_with_outage(a in 0.0f64..0.4, b in 0.0f64..0.4) {
        prop_assume!((a - b).abs() > 1e-3);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let x = theorem1_bound(&params(100_000, 1, lo)).unwrap().total;
        let y = theorem1_bound(&params(100_000, 1, hi)).unwrap().total;
        prop_assert!(x < y);
    }
}

#[test]
fn components_add_up() {
    let r = theorem1_bound(&params(10_000, 2, 0.1)).unwrap();
    let sum = r.gap_term + r.dissimilarity_term + r.variance_term + r.quantization_term;
    assert!((sum - r.total).abs() <= 1e-12 * r.total);
    assert!(r.total.is_finite() && r.total > 0.0);
}

#[test]
fn decreasing_in_the_round_budget() {
    for p in [0.0, 0.05, 0.1] {
        let v: Vec<f64> = [1_000, 10_000, 100_000]
            .iter()
            .map(|&t| theorem1_bound(&params(t, 1, p)).unwrap().total)
            .collect();
        assert!(v[1] < v[0] && v[2] < v[1], "P_O={p}: {v:?}");
    }
}

#[test]
fn heavy_tail_is_reported() {
    // five local steps at T = 10^4 cut the series after five terms
    let mut p = params(10_000, 5, 0.07);
    p.sqrt_schedule = true;
    match series_constants(&p) {
        Err(Error::TailTooHeavy { .. }) => {}
        other => panic!("expected a tail error, got {other:?}"),
    }
    let s = truncated_series(0.07, 5, (10.0f64 / 10_000.0).sqrt(), 1.0).unwrap();
    assert_eq!(s.r_max, 5);
    let (c1, c2, r_max) =
        common::exact_series(0.07, 5, (10.0f64 / 10_000.0).sqrt(), 1.0, DENOMINATOR_FLOOR);
    assert_eq!(r_max, 5);
    assert!(((s.c1 - c1) / c1).abs() < 1e-10 && ((s.c2 - c2) / c2).abs() < 1e-10);
}
