//! Round engines: cooperative gradient coding and the three baselines.
//!
//! A CoGC round runs in five steps:
//!
//! 1. broadcast: clients adopt the global model only if the previous round
//!    succeeded, otherwise they keep training their own local model;
//! 2. local training and stochastic quantization of the delta against the
//!    last synced global model;
//! 3. D2D: client `m` needs the quantized updates of all `s` ring
//!    neighbours; with all of them it forms the partial sum
//!    `s_m = sum_k b_mk p_k Q(delta_k)`, otherwise it stays silent;
//! 4. D2P: partial sums reach the server over erasure links;
//! 5. the server picks the row `a_f` of `A` covering the missing clients and
//!    recovers `sum_m a_fm s_m = sum_k p_k Q(delta_k)` exactly, or changes
//!    nothing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_connectivity, ConnectivityDraw};
use crate::error::{Error, Result};
use crate::fl::{evaluate, ClientState, Dataset, Evaluation, LocalTrace, Model, SgdConfig};
use crate::gc_code::{cyclic_neighbors, GcScheme};
use crate::quantize::{quantize_vector, QuantizerConfig};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Quantized FL over perfect links.
    Qfl,
    Cogc,
    /// Server knows who arrived and renormalizes by the received weight.
    Nonblind,
    /// Server sums whatever arrived without renormalizing.
    Blind,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Qfl, Method::Cogc, Method::Nonblind, Method::Blind];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Qfl => "qfl",
            Method::Cogc => "cogc",
            Method::Nonblind => "nonblind",
            Method::Blind => "blind",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    /// Last completed wall round.
    pub round: usize,
    pub params: Vec<f64>,
    pub success_history: Vec<bool>,
}

/// A client's quantized update for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub quantized: Vec<f64>,
    pub clamped: usize,
    pub trace: LocalTrace,
}

/// Everything the server and clients saw in one CoGC round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    /// `K_m`: neighbours whose updates client `m` must decode.
    pub neighbor_sets: Vec<Vec<usize>>,
    /// `K~_m`: neighbours whose updates actually arrived at client `m`.
    pub decoded_sets: Vec<Vec<usize>>,
    /// Clients that decoded all their neighbours and formed a partial sum.
    pub d2d_full_set: Vec<usize>,
    /// Clients whose partial sum reached the server.
    pub d2p_received: Vec<usize>,
    pub matched_row: Option<usize>,
    pub success: bool,
    pub recovered_update: Option<Vec<f64>>,
}

impl RoundOutcome {
    pub fn d2d_stragglers(&self) -> usize {
        self.neighbor_sets.len() - self.d2d_full_set.len()
    }

    /// Partial sums sent but lost on the D2P hop.
    pub fn d2p_lost(&self) -> usize {
        self.d2d_full_set.len() - self.d2p_received.len()
    }
}

/// Server-side result of a baseline round.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub round: usize,
    pub received: Vec<usize>,
    pub update: Option<Vec<f64>>,
}

/// D2D exchange, partial sums, D2P delivery and server-side decoding for
/// one round, given every client's quantized update.
pub fn cogc_aggregate(
    scheme: &GcScheme,
    weights: &[f64],
    updates: &[Vec<f64>],
    draw: &ConnectivityDraw,
) -> Result<RoundOutcome> {
    let m_count = scheme.clients();
    if weights.len() != m_count || updates.len() != m_count || draw.clients() != m_count {
        return Err(Error::SchemeMismatch {
            expected: m_count,
            got: weights.len().max(updates.len()).max(draw.clients()),
        });
    }
    let s = scheme.stragglers();
    let dim = updates.first().map_or(0, Vec::len);

    let neighbor_sets: Vec<Vec<usize>> = (0..m_count)
        .map(|m| cyclic_neighbors(m_count, s, m).collect())
        .collect();
    let decoded_sets: Vec<Vec<usize>> = neighbor_sets
        .iter()
        .enumerate()
        .map(|(m, ks)| ks.iter().copied().filter(|&k| draw.d2d(m, k)).collect())
        .collect();
    let d2d_full_set: Vec<usize> = (0..m_count)
        .filter(|&m| decoded_sets[m].len() == neighbor_sets[m].len())
        .collect();
    let d2p_received: Vec<usize> = d2d_full_set
        .iter()
        .copied()
        .filter(|&m| draw.tau[m])
        .collect();

    let mut arrived = vec![false; m_count];
    for &m in &d2p_received {
        arrived[m] = true;
    }
    let pattern = scheme.detect_straggler_pattern(draw.round, &arrived);

    let recovered_update = pattern.matched_row.map(|row| {
        let a = scheme.a_row(row);
        let mut total = vec![0.0; dim];
        for &m in &d2p_received {
            // s_m = sum_k b_mk p_k Q(delta_k), own update included
            let mut partial = vec![0.0; dim];
            for k in std::iter::once(m).chain(neighbor_sets[m].iter().copied()) {
                let coeff = scheme.b_entry(m, k) * weights[k];
                for (p, u) in partial.iter_mut().zip(&updates[k]) {
                    *p += coeff * u;
                }
            }
            for (t, p) in total.iter_mut().zip(&partial) {
                *t += a[m] * p;
            }
        }
        total
    });

    Ok(RoundOutcome {
        round: draw.round,
        neighbor_sets,
        decoded_sets,
        d2d_full_set,
        d2p_received,
        matched_row: pattern.matched_row,
        success: recovered_update.is_some(),
        recovered_update,
    })
}

/// `sum_m p_m u_m`.
pub fn weighted_sum(weights: &[f64], updates: &[Vec<f64>]) -> Vec<f64> {
    let dim = updates.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (w, u) in weights.iter().zip(updates) {
        for (o, x) in out.iter_mut().zip(u) {
            *o += w * x;
        }
    }
    out
}

/// Server update of the non-blind baseline: mean of the received updates
/// weighted by `p_m / sum_{received} p_m`; `None` if nothing arrived.
pub fn nonblind_aggregate(weights: &[f64], updates: &[Vec<f64>], tau: &[bool]) -> Option<Vec<f64>> {
    let mass: f64 = weights
        .iter()
        .zip(tau)
        .filter(|(_, &t)| t)
        .map(|(w, _)| w)
        .sum();
    if mass <= 0.0 {
        return None;
    }
    let scaled: Vec<f64> = weights
        .iter()
        .zip(tau)
        .map(|(w, &t)| if t { w / mass } else { 0.0 })
        .collect();
    Some(weighted_sum(&scaled, updates))
}

/// Server update of the blind baseline: missing clients count as zero.
pub fn blind_aggregate(weights: &[f64], updates: &[Vec<f64>], tau: &[bool]) -> Vec<f64> {
    let masked: Vec<f64> = weights
        .iter()
        .zip(tau)
        .map(|(w, &t)| if t { *w } else { 0.0 })
        .collect();
    weighted_sum(&masked, updates)
}

/// Clients, server model and the training knobs shared by all methods.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: Model,
    pub clients: Vec<ClientState>,
    pub global: GlobalModel,
    pub sgd: SgdConfig,
    /// `None` sends raw deltas.
    pub quantizer: Option<QuantizerConfig>,
    pub seed: u64,
    /// Whether clients adopt the global model at the next round.
    broadcast_pending: bool,
}

impl Federation {
    pub fn new(
        model: Model,
        shards: Vec<crate::fl::Shard>,
        initial: Vec<f64>,
        sgd: SgdConfig,
        quantizer: Option<QuantizerConfig>,
        seed: u64,
    ) -> Self {
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState::new(id, shard, &initial))
            .collect();
        Self {
            model,
            clients,
            global: GlobalModel {
                round: 0,
                params: initial,
                success_history: Vec::new(),
            },
            sgd,
            quantizer,
            seed,
            broadcast_pending: true,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(ClientState::weight).collect()
    }

    pub fn next_round(&self) -> usize {
        self.global.round + 1
    }

    /// Broadcast (if pending), `I` local steps and quantization for every
    /// client. Randomness is keyed by `(seed, client, round)`.
    pub fn local_phase(&mut self) -> Result<Vec<LocalUpdate>> {
        let round = self.next_round() as u64;
        let (model, sgd, quantizer, seed) = (self.model, self.sgd, self.quantizer, self.seed);
        let global = &self.global.params;
        let broadcast = self.broadcast_pending;
        self.clients
            .par_iter_mut()
            .map(|c| {
                if broadcast {
                    c.sync(global);
                }
                let id = c.id as u64;
                let trace = c.train(
                    &model,
                    &sgd,
                    &mut rng::stream(seed, &[domain::SGD, id, round]),
                )?;
                let delta = c.update_delta();
                let (quantized, clamped) = match &quantizer {
                    Some(q) => {
                        let mut r = rng::stream(seed, &[domain::QUANT, id, round]);
                        let out = quantize_vector(&delta, q, &mut r)?;
                        (out.values, out.clamped)
                    }
                    None => (delta, 0),
                };
                Ok(LocalUpdate {
                    quantized,
                    clamped,
                    trace,
                })
            })
            .collect()
    }

    fn finish_round(&mut self, update: Option<&[f64]>, broadcast_next: bool) {
        if let Some(u) = update {
            for (g, d) in self.global.params.iter_mut().zip(u) {
                *g += d;
            }
        }
        self.global.round += 1;
        self.global.success_history.push(update.is_some());
        self.broadcast_pending = broadcast_next;
    }

    pub fn cogc_round(
        &mut self,
        scheme: &GcScheme,
        draw: &ConnectivityDraw,
    ) -> Result<(RoundOutcome, Vec<LocalUpdate>)> {
        if scheme.clients() != self.clients.len() {
            return Err(Error::SchemeMismatch {
                expected: scheme.clients(),
                got: self.clients.len(),
            });
        }
        let updates = self.local_phase()?;
        let quantized: Vec<Vec<f64>> = updates.iter().map(|u| u.quantized.clone()).collect();
        let outcome = cogc_aggregate(scheme, &self.weights(), &quantized, draw)?;
        // broadcast only after a successful update
        self.finish_round(outcome.recovered_update.as_deref(), outcome.success);
        Ok((outcome, updates))
    }

    pub fn qfl_round(&mut self) -> Result<(BaselineOutcome, Vec<LocalUpdate>)> {
        let all = vec![true; self.clients.len()];
        self.baseline_round(&all, |w, u, _| Some(weighted_sum(w, u)))
    }

    pub fn nonblind_round(&mut self, tau: &[bool]) -> Result<(BaselineOutcome, Vec<LocalUpdate>)> {
        self.baseline_round(tau, nonblind_aggregate)
    }

    pub fn blind_round(&mut self, tau: &[bool]) -> Result<(BaselineOutcome, Vec<LocalUpdate>)> {
        self.baseline_round(tau, |w, u, t| {
            t.iter().any(|&x| x).then(|| blind_aggregate(w, u, t))
        })
    }

    fn baseline_round(
        &mut self,
        tau: &[bool],
        aggregate: impl Fn(&[f64], &[Vec<f64>], &[bool]) -> Option<Vec<f64>>,
    ) -> Result<(BaselineOutcome, Vec<LocalUpdate>)> {
        if tau.len() != self.clients.len() {
            return Err(Error::SchemeMismatch {
                expected: self.clients.len(),
                got: tau.len(),
            });
        }
        let updates = self.local_phase()?;
        let quantized: Vec<Vec<f64>> = updates.iter().map(|u| u.quantized.clone()).collect();
        let update = aggregate(&self.weights(), &quantized, tau);
        let round = self.next_round();
        // the downlink is error-free, so baselines broadcast every round
        self.finish_round(update.as_deref(), true);
        Ok((
            BaselineOutcome {
                round,
                received: (0..tau.len()).filter(|&m| tau[m]).collect(),
                update,
            },
            updates,
        ))
    }

    pub fn evaluate(&self, test: &Dataset) -> Evaluation {
        evaluate(&self.model, &self.global.params, test)
    }
}

/// Inter-success gaps of a CoGC run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MirrorTrace {
    /// `R_j`: wall rounds from the previous success up to and including success `j`.
    pub gaps: Vec<usize>,
    /// Preliminary wall-round budget `T`.
    pub budget: usize,
}

impl MirrorTrace {
    /// `T'`, the number of successful global updates.
    pub fn executed(&self) -> usize {
        self.gaps.len()
    }

    pub fn wall_rounds(&self) -> usize {
        self.gaps.iter().sum()
    }

    /// `sum_{j <= T'} R_j >= T` and `sum_{j < T'} R_j < T`.
    pub fn is_consistent(&self) -> bool {
        let Some((&last, head)) = self.gaps.split_last() else {
            return self.budget == 0;
        };
        let before: usize = head.iter().sum();
        before < self.budget && before + last >= self.budget
    }
}

/// Per-wall-round record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub wall_round: usize,
    /// Successful global updates so far.
    pub successful_round: usize,
    pub success: bool,
    pub n_d2d_stragglers: usize,
    pub n_d2p_lost: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub rows: Vec<RoundMetrics>,
    pub trace: MirrorTrace,
    /// Quantizer inputs clamped to the knob range over the whole run.
    pub clamped: usize,
    pub final_params: Vec<f64>,
}

/// Link environment of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub q_a: f64,
    pub q_b: f64,
    /// Seed of the counter-based link draws.
    pub seed: u64,
}

/// Wall-round cap relative to the budget before a run is declared stuck.
pub const NON_TERMINATION_FACTOR: usize = 100;

/// Drives a federation for `budget` wall rounds (CoGC: until at least
/// `budget` rounds have run and the last one succeeded).
pub fn run_method(
    method: Method,
    fed: &mut Federation,
    scheme: Option<&GcScheme>,
    links: LinkModel,
    budget: usize,
    test: &Dataset,
) -> Result<RunResult> {
    let m_count = fed.clients.len();
    let stragglers = scheme.map_or(0, GcScheme::stragglers);
    let mut rows = Vec::with_capacity(budget);
    let mut gaps = Vec::new();
    let mut since_success = 0usize;
    let mut successes = 0usize;
    let mut clamped = 0usize;
    let cap = NON_TERMINATION_FACTOR * budget.max(1);

    loop {
        let round = fed.next_round();
        let done = match method {
            Method::Cogc => round > budget && fed.global.success_history.last() == Some(&true),
            _ => round > budget,
        };
        if done {
            break;
        }
        if round > cap {
            return Err(Error::NonTermination {
                wall_rounds: round - 1,
                budget,
            });
        }
        let draw = draw_connectivity(m_count, stragglers, links.q_a, links.q_b, links.seed, round);
        let (success, n_d2d, n_d2p, local) = match method {
            Method::Cogc => {
                let scheme =
                    scheme.ok_or_else(|| Error::InvalidParams("CoGC needs a scheme".into()))?;
                let (o, local) = fed.cogc_round(scheme, &draw)?;
                (o.success, o.d2d_stragglers(), o.d2p_lost(), local)
            }
            Method::Qfl => {
                let (o, local) = fed.qfl_round()?;
                (o.update.is_some(), 0, 0, local)
            }
            Method::Nonblind => {
                let (o, local) = fed.nonblind_round(&draw.tau)?;
                (o.update.is_some(), 0, m_count - o.received.len(), local)
            }
            Method::Blind => {
                let (o, local) = fed.blind_round(&draw.tau)?;
                (o.update.is_some(), 0, m_count - o.received.len(), local)
            }
        };
        clamped += local.iter().map(|u| u.clamped).sum::<usize>();
        since_success += 1;
        if success {
            successes += 1;
            gaps.push(since_success);
            since_success = 0;
        }
        let eval = fed.evaluate(test);
        rows.push(RoundMetrics {
            wall_round: round,
            successful_round: successes,
            success,
            n_d2d_stragglers: n_d2d,
            n_d2p_lost: n_d2p,
            accuracy: eval.accuracy,
            loss: eval.loss,
        });
    }
    if clamped > 0 {
        log::info!(
            "{}: quantizer clamped {clamped} coordinates over the run",
            method.as_str()
        );
    }
    Ok(RunResult {
        method,
        rows,
        trace: MirrorTrace { gaps, budget },
        clamped,
        final_params: fed.global.params.clone(),
    })
}

/// The mirror view of a CoGC run: QFL in which global round `j` lets every
/// client take `gaps[j] * I` local steps from the latest global model.
/// Local randomness is keyed by the wall rounds the gap spans, so with the
/// same seed it reproduces the CoGC trajectory. Returns the global model
/// after each mirrored round.
pub fn mirror_qfl(fed: &mut Federation, gaps: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut history = Vec::with_capacity(gaps.len());
    for &gap in gaps {
        for step in 0..gap {
            let updates = fed.local_phase()?;
            let last = step + 1 == gap;
            if last {
                let quantized: Vec<Vec<f64>> = updates.into_iter().map(|u| u.quantized).collect();
                let update = weighted_sum(&fed.weights(), &quantized);
                fed.finish_round(Some(&update), true);
            } else {
                fed.finish_round(None, false);
            }
        }
        history.push(fed.global.params.clone());
    }
    Ok(history)
}
