use cogc::quantize::{
    decode_payload, dequantize, encode_payload, expected_squared_error, payload_bits,
    quantize_vector, QuantizerConfig, HEADER_BYTES,
};
use cogc::rng;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = QuantizerConfig> {
    (1u32..=16, 0.0f64..0.5, 0.1f64..4.0)
        .prop_map(|(bits, lower, width)| QuantizerConfig::new(bits, lower, lower + width).unwrap())
}

fn in_range(cfg: QuantizerConfig, len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((cfg.lower..=cfg.upper, any::<bool>()), 0..len).prop_map(|v| {
        v.into_iter()
            .map(|(x, neg)| if neg { -x } else { x })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn error_within_one_gap((cfg, v) in config().prop_flat_map(|c| (Just(c), in_range(c, 64))), seed in any::<u64>()) {
        let q = quantize_vector(&v, &cfg, &mut rng::stream(seed, &[0])).unwrap();
        prop_assert_eq!(q.clamped, 0);
        let tol = cfg.gap() * (1.0 + 1e-12);
        for (x, y) in v.iter().zip(&q.values) {
            prop_assert!((x - y).abs() <= tol, "{x} -> {y}, gap {}", cfg.gap());
            prop_assert!(*y == 0.0 || x.signum() == y.signum());
        }
        prop_assert!(expected_squared_error(&v, &cfg) <= v.len() as f64 * cfg.gap().powi(2) / 4.0 * (1.0 + 1e-12));
    }

    #[test]
    fn payload_round_trips((cfg, v) in config().prop_flat_map(|c| (Just(c), in_range(c, 200))), seed in any::<u64>()) {
        let q = quantize_vector(&v, &cfg, &mut rng::stream(seed, &[1])).unwrap();
        let bytes = encode_payload(&q.codes, &cfg).unwrap();
        let bits = payload_bits(v.len(), &cfg);
        prop_assert_eq!(bits - 8 * HEADER_BYTES, v.len() * (cfg.bits as usize + 1));
        prop_assert_eq!(bytes.len(), HEADER_BYTES + (bits - 8 * HEADER_BYTES).div_ceil(8));
        let (cfg2, codes) = decode_payload(&bytes).unwrap();
        prop_assert_eq!(cfg2, cfg);
        prop_assert_eq!(&codes, &q.codes);
        prop_assert_eq!(dequantize(&codes, &cfg).unwrap(), q.values);
    }

    #[test]
    fn out_of_range_inputs_are_clamped(cfg in config(), over in 1.01f64..10.0, seed in any::<u64>()) {
        let v = [cfg.upper * over, -cfg.upper * over];
        let q = quantize_vector(&v, &cfg, &mut rng::stream(seed, &[2])).unwrap();
        prop_assert_eq!(q.clamped, 2);
        let top = cfg.knob(cfg.max_index());
        prop_assert!((top - cfg.upper).abs() <= 1e-12 * cfg.upper);
        prop_assert_eq!(q.values, vec![top, -top]);
    }

    #[test]
    fn truncated_payloads_are_rejected((cfg, v) in config().prop_flat_map(|c| (Just(c), in_range(c, 40))), cut in 1usize..8) {
        prop_assume!(!v.is_empty());
        let q = quantize_vector(&v, &cfg, &mut rng::stream(0, &[3])).unwrap();
        let bytes = encode_payload(&q.codes, &cfg).unwrap();
        let keep = bytes.len().saturating_sub(cut).max(1);
        prop_assume!(keep < bytes.len());
        prop_assert!(decode_payload(&bytes[..keep]).is_err());
    }
}

#[test]
fn same_stream_same_codes() {
    let cfg = QuantizerConfig::new(6, 0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
    let a = quantize_vector(&v, &cfg, &mut rng::stream(9, &[4])).unwrap();
    let b = quantize_vector(&v, &cfg, &mut rng::stream(9, &[4])).unwrap();
    assert_eq!(a, b);
}
