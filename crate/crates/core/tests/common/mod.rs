#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use cogc::fl::data::synthetic_blobs;
use cogc::fl::{partition_dataset, Dataset, Model, ModelKind, Partition, SgdConfig};
use cogc::protocols::Federation;
use cogc::quantize::QuantizerConfig;

/// A small federation on blob data plus a held-out set.
pub fn federation(
    clients: usize,
    seed: u64,
    quantizer: Option<QuantizerConfig>,
) -> (Federation, Dataset) {
    let per_client = 24;
    let n = clients * per_client;
    let all = synthetic_blobs(n + 100, 4, 3, 3.0, 1.0, seed);
    let train = all.subset(&(0..n).collect::<Vec<_>>());
    let test = all.subset(&(n..n + 100).collect::<Vec<_>>());
    let shards = partition_dataset(&train, clients, Partition::Iid, seed).unwrap();
    let model = Model::new(ModelKind::Logistic, 4, 3);
    let sgd = SgdConfig {
        steps: 2,
        eta: 0.05,
        batch: 4,
    };
    (
        Federation::new(model, shards, model.init(seed), sgd, quantizer, seed),
        test,
    )
}

pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let scale = b
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn int(n: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Truncated series constants summed in exact rational arithmetic from the
/// exact values of the `f64` inputs. Returns `(C1, C2, R_max)`.
pub fn exact_series(p_o: f64, local_steps: usize, eta: f64, l: f64, floor: f64) -> (f64, f64, u64) {
    let (p, eta, l, floor) = (exact(p_o), exact(eta), exact(l), exact(floor));
    let i = int(local_steps as u64);
    let one = BigRational::one();
    let two = int(2);
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let two_thirds = BigRational::new(BigInt::from(2), BigInt::from(3));
    let e2l2 = &eta * &eta * &l * &l;
    let den = |r: u64| {
        let ri = int(r) * &i;
        &one - &ri * (&ri + &one) * &e2l2
    };
    let mut r_max = 0u64;
    while den(r_max + 1) >= floor {
        r_max += 1;
    }
    let (mut c1, mut c2) = (BigRational::zero(), BigRational::zero());
    let mut weight = &one - &p;
    for r in 1..=r_max {
        let rr = int(r);
        let ri = &rr * &i;
        let lead = &half + &eta * &ri * &l;
        let d = den(r);
        let base = &l * &l * &rr * (&ri + &one) * &lead / &d;
        c1 += &two_thirds * &base * (&two * &ri + &one) * &weight;
        c2 += &half * &base * &weight;
        weight *= &p;
    }
    (c1.to_f64().unwrap(), c2.to_f64().unwrap(), r_max)
}

/// Overall outage by brute-force enumeration over the number of clients
/// that decode all their neighbours: an independent check of the closed
/// form for small `M`, using only the per-client success probability.
pub fn enumerated_outage(clients: usize, stragglers: usize, q: f64) -> f64 {
    // each client independently delivers with prob (1-q)^s * (1-q)
    let p_ok = (1.0 - q).powi(stragglers as i32 + 1);
    let need = clients - stragglers;
    let mut ok = 0.0;
    for mask in 0u64..(1 << clients) {
        let k = mask.count_ones() as usize;
        if k >= need {
            ok += p_ok.powi(k as i32) * (1.0 - p_ok).powi((clients - k) as i32);
        }
    }
    1.0 - ok
}
