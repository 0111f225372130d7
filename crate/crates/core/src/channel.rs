//! Rayleigh block-fading links reduced to Bernoulli erasures.
//!
//! A link at rate `R` and SNR `gamma` is in outage when `|h|^2 < g` with
//! `g = (2^{2R} - 1) / gamma`; for `h ~ CN(0, sigma^2)` this happens with
//! probability `1 - exp(-g / (2 sigma^2))`. Delivered messages are exact,
//! lost ones vanish entirely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gc_code::cyclic_neighbors;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutageMode {
    /// `q = 1 - exp(-g / 2 sigma^2)`.
    #[default]
    Exact,
    /// First-order expansion `q = min(1, g / 2 sigma^2)`.
    Linearized,
}

impl OutageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OutageMode::Exact => "exact",
            OutageMode::Linearized => "linearized",
        }
    }
}

impl std::str::FromStr for OutageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(OutageMode::Exact),
            "linearized" => Ok(OutageMode::Linearized),
            other => Err(Error::InvalidParams(format!(
                "unknown outage mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Channel uses per symbol, `(B + 1) d / N`.
    pub rate: f64,
    /// D2D SNR; `inf` means perfect links.
    pub snr_a: f64,
    /// D2P SNR; absent means balanced so that `q_b = q_a`.
    #[serde(default)]
    pub snr_b: Option<f64>,
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    #[serde(default)]
    pub mode: OutageMode,
}

impl ChannelConfig {
    pub fn effective_snr_b(&self) -> f64 {
        self.snr_b
            .unwrap_or_else(|| balanced_d2p_snr(self.snr_a, self.sigma2_a, self.sigma2_b))
    }

    /// `(q_a, q_b)`.
    pub fn outage_probabilities(&self) -> Result<(f64, f64)> {
        let qa = link_outage_probability(self.rate, self.snr_a, self.sigma2_a, self.mode)?;
        let qb =
            link_outage_probability(self.rate, self.effective_snr_b(), self.sigma2_b, self.mode)?;
        Ok((qa, qb))
    }
}

/// Outage threshold `g = (2^{2R} - 1) / gamma` on `|h|^2`.
pub fn outage_threshold(rate: f64, snr: f64) -> f64 {
    (2f64.powf(2.0 * rate) - 1.0) / snr
}

pub fn link_outage_probability(rate: f64, snr: f64, sigma2: f64, mode: OutageMode) -> Result<f64> {
    let ok = rate > 0.0 && rate.is_finite() && snr > 0.0 && sigma2 > 0.0 && sigma2.is_finite();
    if !ok {
        return Err(Error::InvalidParams(format!(
            "rate, snr, sigma2 must be positive (got {rate}, {snr}, {sigma2})"
        )));
    }
    let x = outage_threshold(rate, snr) / (2.0 * sigma2);
    Ok(match mode {
        OutageMode::Exact => -(-x).exp_m1(),
        OutageMode::Linearized => x.min(1.0),
    })
}

/// D2P SNR making the D2P outage equal the D2D outage: `(sigma_a^2 / sigma_b^2) gamma_a`.
pub fn balanced_d2p_snr(snr_a: f64, sigma2_a: f64, sigma2_b: f64) -> f64 {
    sigma2_a / sigma2_b * snr_a
}

/// One round's link realizations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityDraw {
    pub round: usize,
    clients: usize,
    /// Row-major `M x M`; entry `(m, k)` is the link carrying `k`'s update to `m`.
    t_cyc: Vec<bool>,
    /// D2P links.
    pub tau: Vec<bool>,
}

impl ConnectivityDraw {
    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn d2d(&self, receiver: usize, sender: usize) -> bool {
        self.t_cyc[receiver * self.clients + sender]
    }

    pub fn all_up(clients: usize, stragglers: usize, round: usize) -> Self {
        let mut t_cyc = vec![false; clients * clients];
        for m in 0..clients {
            for k in cyclic_neighbors(clients, stragglers, m) {
                t_cyc[m * clients + k] = true;
            }
        }
        Self {
            round,
            clients,
            t_cyc,
            tau: vec![true; clients],
        }
    }

    /// Overrides D2D link `sender -> receiver`.
    pub fn set_d2d(&mut self, receiver: usize, sender: usize, up: bool) {
        self.t_cyc[receiver * self.clients + sender] = up;
    }

    pub fn d2d_links_up(&self) -> usize {
        self.t_cyc.iter().filter(|&&t| t).count()
    }
}

/// Link identifier used for counter-based draws: D2D links are `m * M + k`,
/// D2P links follow at `M * M + m`.
#[inline]
pub fn d2d_link_id(clients: usize, receiver: usize, sender: usize) -> u64 {
    (receiver * clients + sender) as u64
}

#[inline]
pub fn d2p_link_id(clients: usize, m: usize) -> u64 {
    (clients * clients + m) as u64
}

/// Draws every D2D link on the cyclic support and every D2P link for `round`.
/// Each link is a pure function of `(seed, round, link)`.
pub fn draw_connectivity(
    clients: usize,
    stragglers: usize,
    q_a: f64,
    q_b: f64,
    seed: u64,
    round: usize,
) -> ConnectivityDraw {
    let key = rng::derive_key(seed, &[domain::CHANNEL]);
    let mut t_cyc = vec![false; clients * clients];
    for m in 0..clients {
        for k in cyclic_neighbors(clients, stragglers, m) {
            let u = rng::counter_uniform(key, round as u64, d2d_link_id(clients, m, k));
            t_cyc[m * clients + k] = u >= q_a;
        }
    }
    let tau = (0..clients)
        .map(|m| rng::counter_uniform(key, round as u64, d2p_link_id(clients, m)) >= q_b)
        .collect();
    ConnectivityDraw {
        round,
        clients,
        t_cyc,
        tau,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huge_snr_means_no_outage() {
        for mode in [OutageMode::Exact, OutageMode::Linearized] {
            assert!(link_outage_probability(0.2, 1e12, 0.5, mode).unwrap() < 1e-9);
            assert_eq!(
                link_outage_probability(0.2, f64::INFINITY, 0.5, mode).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn closed_form_values() {
        // g = (2^0.4 - 1) / 5 = 0.0639016, q = 1 - e^-g
        let q = link_outage_probability(0.2, 5.0, 0.5, OutageMode::Exact).unwrap();
        assert!((q - 0.061_902_4).abs() < 1e-6, "{q}");
        let q = link_outage_probability(0.2, 10.0, 0.5, OutageMode::Linearized).unwrap();
        assert!((q - 0.031_950_791_077_289_4).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive() {
        assert!(link_outage_probability(0.0, 1.0, 1.0, OutageMode::Exact).is_err());
        assert!(link_outage_probability(0.2, -1.0, 1.0, OutageMode::Exact).is_err());
        assert!(link_outage_probability(0.2, 1.0, 0.0, OutageMode::Linearized).is_err());
    }

    #[test]
    fn balanced_snr() {
        assert!((balanced_d2p_snr(5.0, 1.0, 0.04) - 125.0).abs() < 1e-12);
        assert_eq!(balanced_d2p_snr(3.0, 0.7, 0.7), 3.0);
    }

    #[test]
    fn degenerate_draws() {
        let up = draw_connectivity(6, 2, 0.0, 0.0, 1, 3);
        assert_eq!(up, ConnectivityDraw::all_up(6, 2, 3));
        let down = draw_connectivity(6, 2, 1.0, 1.0, 1, 3);
        assert!(down.tau.iter().all(|&t| !t));
        assert_eq!(down.d2d_links_up(), 0);
    }

    #[test]
    fn off_support_links_stay_down() {
        let d = draw_connectivity(7, 2, 0.0, 0.0, 4, 0);
        for m in 0..7 {
            for k in 0..7 {
                let on_support = k != m && ((k + 7 - m) % 7) <= 2;
                assert_eq!(d.d2d(m, k), on_support);
            }
        }
    }
}
