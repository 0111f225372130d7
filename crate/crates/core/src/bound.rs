//! Evaluator for the non-convex convergence bound of CoGC training.
//!
//! The number of wall rounds `R` spent on one successful global update is
//! geometric with failure probability `P_O`. The bound depends on `R`
//! through
//!
//! ```text
//! c1(R) = (2/3) L^2 R (RI+1)(2RI+1)(1/2 + eta R I L) / (1 - RI(RI+1) eta^2 L^2)
//! c2(R) = (1/2) L^2 R (RI+1)(1/2 + eta R I L)        / (1 - RI(RI+1) eta^2 L^2)
//! ```
//!
//! and their expectations `C1`, `C2`. The denominators become negative for
//! large `R`, so the sums stop at the last `R` whose denominator is at least
//! [`DENOMINATOR_FLOOR`]. The geometric mass beyond that point must stay
//! below [`TAIL_LIMIT`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DENOMINATOR_FLOOR: f64 = 0.1;
pub const TAIL_LIMIT: f64 = 1e-6;

/// Assumption constants and training knobs entering the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    /// Smoothness constant `L`.
    pub smoothness: f64,
    /// Per-sample gradient noise variance `sigma^2`.
    pub sigma2: f64,
    /// Mini-batch size `b`; the noise term uses `sigma^2 / b`.
    #[serde(default = "one")]
    pub batch: usize,
    /// Dissimilarity bounds `D_m`, one per client.
    pub dissimilarity: Vec<f64>,
    /// Optimality gap between the initial objective and `F*`; its absolute
    /// value is used.
    pub f_star_gap: f64,
    /// Fixed learning rate; ignored when `sqrt_schedule` is set.
    #[serde(default)]
    pub eta: f64,
    /// Use `eta = sqrt(M / T) / L`.
    #[serde(default)]
    pub sqrt_schedule: bool,
    /// Local iterations `I`.
    pub local_steps: usize,
    /// Wall-round budget `T`.
    pub rounds: usize,
    pub clients: usize,
    /// Learning weights `p_m`; empty means uniform.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Per-round `sum_m p_m^2 J_{m,r}^2`; the bound uses their mean.
    #[serde(default)]
    pub j_terms: Vec<f64>,
    pub p_o: f64,
}

fn one() -> usize {
    1
}

impl BoundParams {
    pub fn effective_eta(&self) -> f64 {
        if self.sqrt_schedule {
            (self.clients as f64 / self.rounds as f64).sqrt() / self.smoothness
        } else {
            self.eta
        }
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            vec![1.0 / self.clients as f64; self.clients]
        } else {
            self.weights.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return bad(format!(
                "smoothness must be positive, got {}",
                self.smoothness
            ));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be non-negative, got {}", self.sigma2));
        }
        if self.batch == 0 || self.local_steps == 0 || self.rounds == 0 || self.clients == 0 {
            return bad("batch, local_steps, rounds and clients must be positive".into());
        }
        if !(0.0..1.0).contains(&self.p_o) {
            return bad(format!("p_o must lie in [0, 1), got {}", self.p_o));
        }
        if !self.f_star_gap.is_finite() {
            return bad("f_star_gap must be finite".into());
        }
        let eta = self.effective_eta();
        if !(eta > 0.0 && eta.is_finite()) {
            return bad(format!("learning rate must be positive, got {eta}"));
        }
        if self.dissimilarity.len() != self.clients {
            return bad(format!(
                "{} dissimilarity bounds for {} clients",
                self.dissimilarity.len(),
                self.clients
            ));
        }
        if self
            .dissimilarity
            .iter()
            .any(|d| !(*d >= 0.0 && d.is_finite()))
        {
            return bad("dissimilarity bounds must be non-negative".into());
        }
        let p = self.effective_weights();
        if p.len() != self.clients {
            return bad(format!("{} weights for {} clients", p.len(), self.clients));
        }
        if p.iter().any(|w| !(*w >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("weights must be non-negative and sum to 1".into());
        }
        if self.j_terms.iter().any(|j| !(*j >= 0.0 && j.is_finite())) {
            return bad("j_terms must be non-negative".into());
        }
        Ok(())
    }
}

/// `(E[R], E[R^2])` for a geometric number of wall rounds per success.
pub fn geometric_moments(p_o: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&p_o) {
        return Err(Error::InvalidParams(format!(
            "p_o must lie in [0, 1), got {p_o}"
        )));
    }
    let q = 1.0 - p_o;
    Ok((1.0 / q, (1.0 + p_o) / (q * q)))
}

/// `1 - R I (R I + 1) eta^2 L^2`.
pub fn denominator(r: u64, local_steps: usize, eta: f64, l: f64) -> f64 {
    let ri = r as f64 * local_steps as f64;
    1.0 - ri * (ri + 1.0) * eta * eta * l * l
}

/// `(c1(R), c2(R))`.
pub fn c_terms(r: u64, local_steps: usize, eta: f64, l: f64) -> (f64, f64) {
    let rf = r as f64;
    let ri = rf * local_steps as f64;
    let den = denominator(r, local_steps, eta, l);
    let lead = 0.5 + eta * ri * l;
    let c1 = 2.0 / 3.0 * l * l * rf * (ri + 1.0) * (2.0 * ri + 1.0) * lead / den;
    let c2 = 0.5 * l * l * rf * (ri + 1.0) * lead / den;
    (c1, c2)
}

/// Largest `R` with `denominator(R) >= DENOMINATOR_FLOOR`, or 0 if none.
pub fn r_max(local_steps: usize, eta: f64, l: f64) -> u64 {
    // the denominator decreases in R; bracket then bisect
    if denominator(1, local_steps, eta, l) < DENOMINATOR_FLOOR {
        return 0;
    }
    let mut hi = 2u64;
    while denominator(hi, local_steps, eta, l) >= DENOMINATOR_FLOOR {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if denominator(mid, local_steps, eta, l) >= DENOMINATOR_FLOOR {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesConstants {
    pub c1: f64,
    pub c2: f64,
    pub r_max: u64,
    /// Terms actually summed; smaller than `r_max` once `P_O^{R-1}` underflows.
    pub r_used: u64,
    /// `P_O^{r_max}`, the discarded probability mass.
    pub tail_mass: f64,
}

/// `sum_{R=1}^{r_max} c_i(R) (1 - P_O) P_O^{R-1}` without the tail check.
pub fn truncated_series(p_o: f64, local_steps: usize, eta: f64, l: f64) -> Result<SeriesConstants> {
    geometric_moments(p_o)?;
    let r_max = r_max(local_steps, eta, l);
    if r_max == 0 {
        return Err(Error::DenominatorViolation {
            denominator: denominator(1, local_steps, eta, l),
            floor: DENOMINATOR_FLOOR,
        });
    }
    let (mut c1, mut c2) = (0.0, 0.0);
    let mut weight = 1.0 - p_o;
    let mut r_used = 0;
    for r in 1..=r_max {
        if weight == 0.0 {
            break;
        }
        let (a, b) = c_terms(r, local_steps, eta, l);
        c1 += a * weight;
        c2 += b * weight;
        weight *= p_o;
        r_used = r;
    }
    let tail_mass = p_o.powi(r_max.min(i32::MAX as u64) as i32);
    Ok(SeriesConstants {
        c1,
        c2,
        r_max,
        r_used,
        tail_mass,
    })
}

/// `C1`, `C2` with truncation diagnostics; refuses heavy tails.
pub fn series_constants(params: &BoundParams) -> Result<SeriesConstants> {
    params.validate()?;
    let s = truncated_series(
        params.p_o,
        params.local_steps,
        params.effective_eta(),
        params.smoothness,
    )?;
    if s.tail_mass > TAIL_LIMIT {
        return Err(Error::TailTooHeavy {
            tail_mass: s.tail_mass,
            limit: TAIL_LIMIT,
            r_max: s.r_max,
        });
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub eta: f64,
    pub expected_r: f64,
    pub expected_r2: f64,
    /// `(1 - P_O) T`, the expected number of successful updates.
    pub expected_updates: f64,
    pub series: SeriesConstants,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
    pub h5: f64,
    /// The four components, each already scaled by `2 (1 - P_O)`.
    pub gap_term: f64,
    pub dissimilarity_term: f64,
    pub variance_term: f64,
    pub quantization_term: f64,
    pub total: f64,
}

pub const REPORT_COLUMNS: [&str; 20] = [
    "eta",
    "expected_r",
    "expected_r2",
    "expected_updates",
    "c1",
    "c2",
    "r_max",
    "r_used",
    "tail_mass",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "gap_term",
    "dissimilarity_term",
    "variance_term",
    "quantization_term",
    "total",
    "p_o",
];

impl BoundReport {
    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn csv_row(&self, p_o: f64) -> String {
        let s = &self.series;
        [
            self.eta.to_string(),
            self.expected_r.to_string(),
            self.expected_r2.to_string(),
            self.expected_updates.to_string(),
            s.c1.to_string(),
            s.c2.to_string(),
            s.r_max.to_string(),
            s.r_used.to_string(),
            s.tail_mass.to_string(),
            self.h1.to_string(),
            self.h2.to_string(),
            self.h3.to_string(),
            self.h4.to_string(),
            self.h5.to_string(),
            self.gap_term.to_string(),
            self.dissimilarity_term.to_string(),
            self.variance_term.to_string(),
            self.quantization_term.to_string(),
            self.total.to_string(),
            p_o.to_string(),
        ]
        .join(",")
    }
}

/// Bound on `min_r E||grad F(theta_r)||^2` with all big-O constants set to 1.
pub fn theorem1_bound(params: &BoundParams) -> Result<BoundReport> {
    let series = series_constants(params)?;
    let p_o = params.p_o;
    let q = 1.0 - p_o;
    let (expected_r, expected_r2) = geometric_moments(p_o)?;
    let eta = params.effective_eta();
    let l = params.smoothness;
    let i = params.local_steps as f64;
    let m = params.clients as f64;
    let t = params.rounds as f64;
    let p = params.effective_weights();
    let sum_p2: f64 = p.iter().map(|w| w * w).sum();
    let sum_pd2: f64 = p
        .iter()
        .zip(&params.dissimilarity)
        .map(|(w, d)| w * d * d)
        .sum();
    let sigma2 = params.sigma2 / params.batch as f64;
    let j_mean = if params.j_terms.is_empty() {
        0.0
    } else {
        params.j_terms.iter().sum::<f64>() / params.j_terms.len() as f64
    };

    let h3 = 2.0 * eta * i * l * expected_r2 + eta * eta * series.c1;
    let h4 = 0.5 * eta * l * sum_p2 * expected_r + eta * eta * series.c2;
    let h1 = 0.5 * expected_r - h3;
    if h1 <= 0.0 {
        return Err(Error::NonPositiveH1(h1));
    }
    let h2 = 1.0 / (eta * i);
    let h5 = eta * l / (2.0 * i);

    let root = (m / t).sqrt();
    let scale = 2.0 * q;
    let gap_term = scale * l * params.f_star_gap.abs() / (q * (m * t).sqrt() * i);
    let dissimilarity_term =
        scale * (2.0 * i * (1.0 + p_o) / (q * q) * root + m * series.c1 / (l * l * t)) * sum_pd2;
    let variance_term = scale * (sum_p2 / (2.0 * q) * root + m * series.c2 / (l * l * t)) * sigma2;
    let quantization_term = scale * root / (2.0 * i) * j_mean;
    let total = gap_term + dissimilarity_term + variance_term + quantization_term;

    Ok(BoundReport {
        eta,
        expected_r,
        expected_r2,
        expected_updates: q * t,
        series,
        h1,
        h2,
        h3,
        h4,
        h5,
        gap_term,
        dissimilarity_term,
        variance_term,
        quantization_term,
        total,
    })
}
