//! Cyclic gradient-coding schemes.
//!
//! A scheme is a pair `(B, A)`: `B` is the `M x M` cyclic allocation matrix
//! whose row `m` is supported on `{m, m+1, ..., m+s} mod M`, and `A` is the
//! `C(M, s) x M` combination matrix with `A B = 1`. Row `f` of `A` vanishes
//! on the `f`-th size-`s` straggler subset (lexicographic order), so the
//! parameter server can combine whatever partial sums survive.
//!
//! Construction follows the random null-space recipe: draw `H` (`s x M`)
//! with `H 1 = 0`, put every row of `B` in `null(H)` with `b_mm = 1`; any
//! `M - s` rows of `B` then span `null(H)`, which contains the all-ones
//! vector.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Acceptable `max |A B - 1|` for a constructed scheme.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Upper limit on `C(M, s)`; beyond this the combination matrix is not materialised.
pub const MAX_PATTERNS: u64 = 1 << 20;
const MAX_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct GcScheme {
    clients: usize,
    stragglers: usize,
    b: DMatrix<f64>,
    a: DMatrix<f64>,
    /// Bit mask of the straggler subset owning each row of `a`.
    patterns: Vec<u64>,
}

/// Result of matching a round's receive indicator against `A`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StragglerPattern {
    pub round: usize,
    pub stragglers: Vec<usize>,
    pub matched_row: Option<usize>,
}

impl StragglerPattern {
    pub fn is_recoverable(&self) -> bool {
        self.matched_row.is_some()
    }
}

pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// All size-`k` subsets of `0..n` as bit masks, in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(binomial(n as u64, k as u64) as usize);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().fold(0u64, |m, &i| m | (1 << i)));
        // advance to the next combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn validate(clients: usize, stragglers: usize) -> Result<()> {
    if clients < 1 {
        return Err(Error::InvalidParams("need at least one client".into()));
    }
    if stragglers >= clients {
        return Err(Error::InvalidParams(format!(
            "straggler tolerance s = {stragglers} must be below M = {clients}"
        )));
    }
    if clients > 64 {
        return Err(Error::InvalidParams(format!("M = {clients} exceeds 64")));
    }
    let f = binomial(clients as u64, stragglers as u64);
    if f > MAX_PATTERNS {
        return Err(Error::InvalidParams(format!(
            "C({clients}, {stragglers}) = {f} straggler patterns exceeds {MAX_PATTERNS}"
        )));
    }
    Ok(())
}

/// Indices `m+1, ..., m+s` (mod M): the neighbours whose updates client `m` combines.
pub fn cyclic_neighbors(
    clients: usize,
    stragglers: usize,
    m: usize,
) -> impl Iterator<Item = usize> {
    (1..=stragglers).map(move |j| (m + j) % clients)
}

impl GcScheme {
    /// Builds a scheme for `clients` clients tolerating `stragglers` erasures.
    /// Deterministic in `seed`.
    pub fn construct(clients: usize, stragglers: usize, seed: u64) -> Result<Self> {
        validate(clients, stragglers)?;
        let patterns = combinations(clients, stragglers);
        if stragglers == 0 {
            return Ok(Self {
                clients,
                stragglers,
                b: DMatrix::identity(clients, clients),
                a: DMatrix::from_element(1, clients, 1.0),
                patterns,
            });
        }

        let mut last_residual = f64::INFINITY;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = rng::stream(seed, &[domain::GC_CONSTRUCTION, attempt as u64]);
            let Some(b) = Self::allocation_matrix(clients, stragglers, &mut rng) else {
                continue;
            };
            let Some(a) = Self::combination_matrix(&b, clients, stragglers, &patterns) else {
                continue;
            };
            let scheme = Self {
                clients,
                stragglers,
                b,
                a,
                patterns: patterns.clone(),
            };
            last_residual = scheme.verify();
            if last_residual < RESIDUAL_TOL {
                return Ok(scheme);
            }
            log::debug!("gc attempt {attempt}: residual {last_residual:e}, redrawing");
        }
        Err(Error::ConstructionFailed {
            attempts: MAX_ATTEMPTS,
            residual: last_residual,
        })
    }

    fn allocation_matrix(clients: usize, s: usize, rng: &mut impl Rng) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::<f64>::zeros(s, clients);
        for i in 0..s {
            let mut row_sum = 0.0;
            for j in 0..clients - 1 {
                let x: f64 = rng.random_range(-1.0..1.0);
                h[(i, j)] = x;
                row_sum += x;
            }
            h[(i, clients - 1)] = -row_sum;
        }

        let mut b = DMatrix::<f64>::zeros(clients, clients);
        for m in 0..clients {
            let cols: Vec<usize> = cyclic_neighbors(clients, s, m).collect();
            let sub = DMatrix::from_fn(s, s, |i, j| h[(i, cols[j])]);
            let rhs = DVector::from_fn(s, |i, _| -h[(i, m)]);
            let x = sub.lu().solve(&rhs)?;
            if x.iter().any(|v| !v.is_finite()) {
                return None;
            }
            b[(m, m)] = 1.0;
            for (j, &c) in cols.iter().enumerate() {
                b[(m, c)] = x[j];
            }
        }
        Some(b)
    }

    fn combination_matrix(
        b: &DMatrix<f64>,
        clients: usize,
        s: usize,
        patterns: &[u64],
    ) -> Option<DMatrix<f64>> {
        let kept = clients - s;
        let ones = DVector::from_element(clients, 1.0);
        let mut a = DMatrix::<f64>::zeros(patterns.len(), clients);
        for (row, &mask) in patterns.iter().enumerate() {
            let survivors: Vec<usize> = (0..clients).filter(|i| mask & (1 << i) == 0).collect();
            // Solve B_F^T a_F = 1 in the least-squares sense; the system is consistent.
            let bft = DMatrix::from_fn(clients, kept, |i, j| b[(survivors[j], i)]);
            let svd = bft.clone().svd(true, true);
            let mut sol = svd.solve(&ones, 1e-13).ok()?;
            // one round of iterative refinement
            let resid = &ones - &bft * &sol;
            sol += svd.solve(&resid, 1e-13).ok()?;
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            for (j, &c) in survivors.iter().enumerate() {
                a[(row, c)] = sol[j];
            }
        }
        Some(a)
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn stragglers(&self) -> usize {
        self.stragglers
    }

    /// Number of rows of `A`, `C(M, s)`.
    pub fn pattern_count(&self) -> usize {
        self.patterns.len()
    }

    pub fn b_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b_entry(&self, m: usize, k: usize) -> f64 {
        self.b[(m, k)]
    }

    pub fn a_row(&self, row: usize) -> Vec<f64> {
        self.a.row(row).iter().copied().collect()
    }

    /// Straggler subset owning row `row` of `A`.
    pub fn pattern(&self, row: usize) -> Vec<usize> {
        let mask = self.patterns[row];
        (0..self.clients).filter(|i| mask & (1 << i) != 0).collect()
    }

    /// Row of `A` owned by an exact size-`s` straggler subset.
    pub fn row_for_pattern(&self, stragglers: &[usize]) -> Option<usize> {
        let mask = stragglers.iter().fold(0u64, |m, &i| m | (1 << i));
        if stragglers.len() != self.stragglers || mask.count_ones() as usize != self.stragglers {
            return None;
        }
        self.patterns.binary_search_by(|p| lex_cmp(*p, mask)).ok()
    }

    /// Max absolute deviation of `A B` from the all-ones matrix.
    pub fn verify(&self) -> f64 {
        let prod = &self.a * &self.b;
        prod.iter().fold(0.0f64, |acc, v| acc.max((v - 1.0).abs()))
    }

    /// Matches a receive indicator (`true` = partial sum arrived) to a row of `A`.
    ///
    /// Picks the lowest-index row whose zeros cover every straggler; no row
    /// when more than `s` clients are missing.
    pub fn detect_straggler_pattern(&self, round: usize, received: &[bool]) -> StragglerPattern {
        debug_assert_eq!(received.len(), self.clients);
        let stragglers: Vec<usize> = (0..self.clients).filter(|&i| !received[i]).collect();
        let matched_row = if stragglers.len() > self.stragglers {
            None
        } else {
            let mask = stragglers.iter().fold(0u64, |m, &i| m | (1 << i));
            self.patterns.iter().position(|&p| mask & !p == 0)
        };
        StragglerPattern {
            round,
            stragglers,
            matched_row,
        }
    }

    /// Plain-text dump: a header line `M s f`, then the `M` rows of `B` and
    /// the `f` rows of `A`, row-major, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {}\n",
            self.clients,
            self.stragglers,
            self.patterns.len()
        );
        for mat in [&self.b, &self.a] {
            for row in mat.row_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidParams(format!("scheme dump: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty input".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(format!("header: {e}"))))
            .collect::<Result<_>>()?;
        let [clients, stragglers, f] = header[..] else {
            return Err(bad("header must be `M s f`".into()));
        };
        validate(clients, stragglers)?;
        let patterns = combinations(clients, stragglers);
        if patterns.len() != f {
            return Err(bad(format!(
                "f = {f} but C({clients}, {stragglers}) = {}",
                patterns.len()
            )));
        }
        let mut read = |rows: usize| -> Result<DMatrix<f64>> {
            let mut data = Vec::with_capacity(rows * clients);
            for r in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| bad(format!("missing row {r}")))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| bad(format!("row {r}: {e}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != clients {
                    return Err(bad(format!("row {r} has {} entries", vals.len())));
                }
                data.extend(vals);
            }
            Ok(DMatrix::from_row_slice(rows, clients, &data))
        };
        let b = read(clients)?;
        let a = read(f)?;
        Ok(Self {
            clients,
            stragglers,
            b,
            a,
            patterns,
        })
    }

    #[cfg(test)]
    pub(crate) fn b_matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.b
    }
}

/// Lexicographic order on subsets (as sorted index lists) encoded as masks.
fn lex_cmp(a: u64, b: u64) -> std::cmp::Ordering {
    let (mut a, mut b) = (a, b);
    while a != 0 && b != 0 {
        let (x, y) = (a.trailing_zeros(), b.trailing_zeros());
        if x != y {
            return x.cmp(&y);
        }
        a &= a - 1;
        b &= b - 1;
    }
    (a != 0).cmp(&(b != 0))
}

/// Free-function form of [`GcScheme::verify`].
pub fn verify_scheme(scheme: &GcScheme) -> f64 {
    scheme.verify()
}
