//! Overall outage probability of a cooperative gradient-coding round.
//!
//! A round fails when the parameter server receives fewer than `M - s`
//! partial sums. With every link failing independently with probability `q`
//! the failure splits into three disjoint events:
//!
//! * `p1`: no D2D straggler, but more than `s` D2P links are down;
//! * `p2`: more than `s` clients miss a neighbour in the D2D stage;
//! * `p3`: `v1 in 1..=s` D2D stragglers and more than `s - v1` D2P losses
//!   among the remaining `M - v1` clients.

use rayon::prelude::*;
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::gc_code::cyclic_neighbors;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutageReport {
    pub clients: usize,
    pub stragglers: usize,
    pub q: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p_o: f64,
}

#[inline]
fn ln_pow(ln_base: f64, k: u64) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * ln_base
    }
}

/// `C(n, k) p^k (1-p)^(n-k)`, evaluated in log space.
fn binomial_pmf(n: u64, k: u64, ln_p: f64, ln_1mp: f64) -> f64 {
    (ln_binomial(n, k) + ln_pow(ln_p, k) + ln_pow(ln_1mp, n - k)).exp()
}

/// `P[Bin(n, p) >= k]`.
fn upper_tail(n: u64, k: u64, ln_p: f64, ln_1mp: f64) -> f64 {
    (k..=n).map(|v| binomial_pmf(n, v, ln_p, ln_1mp)).sum()
}

pub fn closed_form_outage(clients: usize, stragglers: usize, q: f64) -> Result<OutageReport> {
    if clients < 1 || stragglers >= clients {
        return Err(Error::InvalidParams(format!(
            "need 0 <= s < M, got M = {clients}, s = {stragglers}"
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidParams(format!(
            "q = {q} is not a probability"
        )));
    }
    let (m, s) = (clients as u64, stragglers as u64);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    // a client misses at least one of its s neighbours
    let ln_keep = ln_pow(ln_1mq, s);
    let p_s = -ln_keep.exp_m1();
    let ln_ps = p_s.ln();

    let p1 = (ln_pow(ln_1mq, s * m)).exp() * upper_tail(m, s + 1, ln_q, ln_1mq);
    let p2 = upper_tail(m, s + 1, ln_ps, ln_keep);
    let p3 = (1..=s)
        .map(|v1| {
            binomial_pmf(m, v1, ln_ps, ln_keep) * upper_tail(m - v1, s - v1 + 1, ln_q, ln_1mq)
        })
        .sum::<f64>();
    let clamp = |p: f64| p.clamp(0.0, 1.0);
    let (p1, p2, p3) = (clamp(p1), clamp(p2), clamp(p3));
    Ok(OutageReport {
        clients,
        stragglers,
        q,
        p1,
        p2,
        p3,
        p_o: clamp(p1 + p2 + p3),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub trials: u64,
    pub failures: u64,
    pub estimate: f64,
    pub std_error: f64,
}

const MC_BLOCK: u64 = 1 << 14;

/// Whether trial `t` of the two-stage process ends in outage. Links are
/// counter-based draws keyed by `(key, t, link)`, so every trial is
/// independent of how trials are split across threads.
fn trial_fails(clients: usize, stragglers: usize, q_a: f64, q_b: f64, key: u64, t: u64) -> bool {
    let mut delivered = 0usize;
    for m in 0..clients {
        let decoded_all = cyclic_neighbors(clients, stragglers, m).all(|k| {
            rng::counter_uniform(key, t, crate::channel::d2d_link_id(clients, m, k)) >= q_a
        });
        if decoded_all
            && rng::counter_uniform(key, t, crate::channel::d2p_link_id(clients, m)) >= q_b
        {
            delivered += 1;
        }
    }
    delivered < clients - stragglers
}

/// Monte Carlo estimate of the overall outage with separate D2D/D2P outage
/// probabilities. Returns the empirical failure rate and its binomial
/// standard error.
pub fn monte_carlo_outage(
    clients: usize,
    stragglers: usize,
    q_a: f64,
    q_b: f64,
    trials: u64,
    seed: u64,
) -> Result<McEstimate> {
    if trials < 1 {
        return Err(Error::InvalidParams("need at least one trial".into()));
    }
    if clients < 1 || stragglers >= clients {
        return Err(Error::InvalidParams(format!(
            "need 0 <= s < M, got M = {clients}, s = {stragglers}"
        )));
    }
    let key = rng::derive_key(seed, &[domain::MONTE_CARLO]);
    let blocks = trials.div_ceil(MC_BLOCK);
    let failures: u64 = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let end = ((b + 1) * MC_BLOCK).min(trials);
            (b * MC_BLOCK..end)
                .filter(|&t| trial_fails(clients, stragglers, q_a, q_b, key, t))
                .count() as u64
        })
        .sum();
    let estimate = failures as f64 / trials as f64;
    Ok(McEstimate {
        trials,
        failures,
        estimate,
        std_error: (estimate * (1.0 - estimate) / trials as f64).sqrt(),
    })
}
