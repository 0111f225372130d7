//! Unbiased stochastic quantization of model updates.
//!
//! Magnitudes are rounded at random to one of `2^B` uniformly spaced knobs in
//! `[lower, upper]`; the sign travels in one extra bit, so each coordinate
//! costs exactly `B + 1` bits on the wire.
//!
//! Wire format (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     d, coordinate count (u32)
//! 4       1     B, knob bits (u8)
//! 5       8     lower knob bound (f64)
//! 13      8     upper knob bound (f64)
//! 21      ..    d codes of B+1 bits, packed LSB-first;
//!               code = knob_index | (negative << B)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_BYTES: usize = 21;
pub const MAX_BITS: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub bits: u32,
    #[serde(default)]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
}

fn default_upper() -> f64 {
    1.0
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            lower: 0.0,
            upper: 1.0,
        }
    }
}

impl QuantizerConfig {
    pub fn new(bits: u32, lower: f64, upper: f64) -> Result<Self> {
        let cfg = Self { bits, lower, upper };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 1 || self.bits > MAX_BITS {
            return Err(Error::InvalidConfig(format!(
                "bits = {} outside 1..={MAX_BITS}",
                self.bits
            )));
        }
        if !(self.lower >= 0.0) || !self.upper.is_finite() || self.upper <= self.lower {
            return Err(Error::InvalidConfig(format!(
                "need upper > lower >= 0, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    /// Number of knobs, `2^B`.
    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn max_index(&self) -> u32 {
        (self.levels() - 1) as u32
    }

    /// Spacing between adjacent knobs.
    pub fn gap(&self) -> f64 {
        (self.upper - self.lower) / self.max_index() as f64
    }

    pub fn knob(&self, index: u32) -> f64 {
        self.lower + index as f64 * self.gap()
    }

    /// Bits per coordinate on the wire.
    pub fn code_bits(&self) -> u32 {
        self.bits + 1
    }
}

/// Knob indices plus sign bits for one vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantCodes {
    pub indices: Vec<u32>,
    pub negative: Vec<bool>,
}

impl QuantCodes {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub values: Vec<f64>,
    pub codes: QuantCodes,
    /// Coordinates whose magnitude fell outside `[lower, upper]` and were clamped.
    pub clamped: usize,
}

#[inline]
fn signed(negative: bool, magnitude: f64) -> f64 {
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// Quantizes one magnitude already clamped into `[lower, upper]`.
#[inline]
fn quantize_magnitude(mag: f64, cfg: &QuantizerConfig, u: f64) -> u32 {
    let top = cfg.max_index();
    let l = (((mag - cfg.lower) / cfg.gap()).floor().max(0.0) as u64).min(top as u64 - 1) as u32;
    let lo = cfg.knob(l);
    let hi = cfg.knob(l + 1);
    let p_up = ((mag - lo) / (hi - lo)).clamp(0.0, 1.0);
    if u < p_up {
        l + 1
    } else {
        l
    }
}

pub fn quantize_vector<R: Rng + ?Sized>(
    v: &[f64],
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<QuantizedVector> {
    cfg.validate()?;
    let mut indices = Vec::with_capacity(v.len());
    let mut negative = Vec::with_capacity(v.len());
    let mut values = Vec::with_capacity(v.len());
    let mut clamped = 0;
    for &x in v {
        let neg = x.is_sign_negative() && x != 0.0;
        let raw = x.abs();
        let mag = raw.clamp(cfg.lower, cfg.upper);
        if mag != raw || raw.is_nan() {
            clamped += 1;
        }
        let mag = if mag.is_nan() { cfg.lower } else { mag };
        let u: f64 = rng.random();
        let idx = quantize_magnitude(mag, cfg, u);
        indices.push(idx);
        negative.push(neg);
        values.push(signed(neg, cfg.knob(idx)));
    }
    if clamped > 0 {
        log::debug!("quantizer clamped {clamped} of {} coordinates", v.len());
    }
    Ok(QuantizedVector {
        values,
        codes: QuantCodes { indices, negative },
        clamped,
    })
}

pub fn dequantize(codes: &QuantCodes, cfg: &QuantizerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let top = cfg.max_index();
    codes
        .indices
        .iter()
        .zip(&codes.negative)
        .map(|(&idx, &neg)| {
            if idx > top {
                Err(Error::IndexOutOfRange {
                    index: idx,
                    bits: cfg.bits,
                })
            } else {
                Ok(signed(neg, cfg.knob(idx)))
            }
        })
        .collect()
}

/// Exact `E ||Q(v) - v||^2` for in-range inputs: `sum (c_{l+1} - |v|)(|v| - c_l)`.
pub fn expected_squared_error(v: &[f64], cfg: &QuantizerConfig) -> f64 {
    v.iter()
        .map(|&x| {
            let mag = x.abs().clamp(cfg.lower, cfg.upper);
            let lo_idx = quantize_magnitude(mag, cfg, 1.0);
            let (lo, hi) = (
                cfg.knob(lo_idx),
                cfg.knob((lo_idx + 1).min(cfg.max_index())),
            );
            let err = (hi - mag) * (mag - lo);
            err.max(0.0) + (x.abs() - mag).powi(2)
        })
        .sum()
}

/// Serialized payload size in bits, header included.
pub fn payload_bits(d: usize, cfg: &QuantizerConfig) -> usize {
    HEADER_BYTES * 8 + d * cfg.code_bits() as usize
}

pub fn encode_payload(codes: &QuantCodes, cfg: &QuantizerConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let d = codes.len();
    let d32 =
        u32::try_from(d).map_err(|_| Error::MalformedPayload("too many coordinates".into()))?;
    let width = cfg.code_bits() as usize;
    let mut out = Vec::with_capacity(HEADER_BYTES + (d * width).div_ceil(8));
    out.extend_from_slice(&d32.to_le_bytes());
    out.push(cfg.bits as u8);
    out.extend_from_slice(&cfg.lower.to_le_bytes());
    out.extend_from_slice(&cfg.upper.to_le_bytes());

    let mut acc: u64 = 0;
    let mut filled = 0usize;
    for (&idx, &neg) in codes.indices.iter().zip(&codes.negative) {
        if idx > cfg.max_index() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                bits: cfg.bits,
            });
        }
        let code = idx as u64 | ((neg as u64) << cfg.bits);
        acc |= code << filled;
        filled += width;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn decode_payload(bytes: &[u8]) -> Result<(QuantizerConfig, QuantCodes)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::MalformedPayload(format!(
            "{} bytes, header needs {HEADER_BYTES}",
            bytes.len()
        )));
    }
    let d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cfg = QuantizerConfig {
        bits: bytes[4] as u32,
        lower: f64::from_le_bytes(bytes[5..13].try_into().unwrap()),
        upper: f64::from_le_bytes(bytes[13..21].try_into().unwrap()),
    };
    cfg.validate()?;
    let width = cfg.code_bits() as usize;
    let body = &bytes[HEADER_BYTES..];
    if body.len() != (d * width).div_ceil(8) {
        return Err(Error::MalformedPayload(format!(
            "body is {} bytes, expected {}",
            body.len(),
            (d * width).div_ceil(8)
        )));
    }
    let mask = (1u64 << width) - 1;
    let mut indices = Vec::with_capacity(d);
    let mut negative = Vec::with_capacity(d);
    let mut acc: u64 = 0;
    let mut filled = 0usize;
    let mut bytes_iter = body.iter();
    for _ in 0..d {
        while filled < width {
            acc |= (*bytes_iter.next().unwrap() as u64) << filled;
            filled += 8;
        }
        let code = acc & mask;
        acc >>= width;
        filled -= width;
        indices.push((code & ((1u64 << cfg.bits) - 1)) as u32);
        negative.push(code >> cfg.bits == 1);
    }
    Ok((cfg, QuantCodes { indices, negative }))
}

/// Coordinate-wise bounds on the accumulated stochastic gradient of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEnvelope {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl GradientEnvelope {
    pub fn new(upper: Vec<f64>, lower: Vec<f64>) -> Self {
        assert_eq!(upper.len(), lower.len());
        Self { upper, lower }
    }

    /// Envelope of a sum of `n` per-iteration gradients: each summand lies in
    /// `[min_i g_i, max_i g_i]` coordinate-wise, so the sum lies in `n` times that.
    pub fn from_iteration_gradients(grads: &[Vec<f64>]) -> Self {
        let d = grads.first().map_or(0, Vec::len);
        let n = grads.len() as f64;
        let mut upper = vec![f64::NEG_INFINITY; d];
        let mut lower = vec![f64::INFINITY; d];
        for g in grads {
            for j in 0..d {
                upper[j] = upper[j].max(g[j]);
                lower[j] = lower[j].min(g[j]);
            }
        }
        if grads.is_empty() {
            return Self::new(upper, lower);
        }
        Self::new(
            upper.into_iter().map(|u| u * n).collect(),
            lower.into_iter().map(|l| l * n).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.upper.len()
    }
}

/// Per-client, per-round quantization error constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantStats {
    /// Half the root-sum-square of the envelope widths.
    pub delta: f64,
    /// `delta / (2^B - 1)`.
    pub j_bound: f64,
    /// `eta^2 J^2`, the bound on the expected squared quantization error.
    pub mse_bound: f64,
}

pub fn lemma1_bounds(envelope: &GradientEnvelope, cfg: &QuantizerConfig, eta: f64) -> QuantStats {
    let sum_sq: f64 = envelope
        .upper
        .iter()
        .zip(&envelope.lower)
        .map(|(u, l)| (u - l) * (u - l))
        .sum();
    let delta = (0.25 * sum_sq).sqrt();
    let j_bound = delta / cfg.max_index() as f64;
    QuantStats {
        delta,
        j_bound,
        mse_bound: eta * eta * j_bound * j_bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(bits: u32) -> QuantizerConfig {
        QuantizerConfig::new(bits, 0.0, 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(QuantizerConfig::new(0, 0.0, 1.0).is_err());
        assert!(QuantizerConfig::new(8, 1.0, 1.0).is_err());
        assert!(QuantizerConfig::new(8, -0.5, 1.0).is_err());
    }

    #[test]
    fn one_bit_two_point_law() {
        let c = cfg(1);
        let mut r = rng::stream(1, &[0]);
        let n = 100_000;
        let mut ones = 0usize;
        for _ in 0..n {
            let q = quantize_vector(&[0.3], &c, &mut r).unwrap();
            assert!(q.values[0] == 0.0 || q.values[0] == 1.0);
            ones += (q.values[0] == 1.0) as usize;
        }
        let mean = ones as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((mean - 0.3).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn on_knob_values_are_deterministic() {
        let c = cfg(4);
        let mut r = rng::stream(2, &[0]);
        for l in 0..=c.max_index() {
            for sign in [1.0, -1.0] {
                let v = sign * c.knob(l);
                for _ in 0..20 {
                    let q = quantize_vector(&[v], &c, &mut r).unwrap();
                    assert_eq!(q.values[0], v);
                    assert_eq!(q.codes.indices[0], l);
                }
            }
        }
    }

    #[test]
    fn error_within_one_gap() {
        let c = cfg(8);
        let mut r = rng::stream(3, &[0]);
        let v: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..1.0)).collect();
        let q = quantize_vector(&v, &c, &mut r).unwrap();
        for (a, b) in v.iter().zip(&q.values) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-15);
            assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn dequantize_edges() {
        let c = cfg(1);
        let codes = QuantCodes {
            indices: vec![0, 1],
            negative: vec![false, true],
        };
        assert_eq!(dequantize(&codes, &c).unwrap(), vec![0.0, -1.0]);
        let bad = QuantCodes {
            indices: vec![2],
            negative: vec![false],
        };
        assert!(matches!(
            dequantize(&bad, &c),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn clamps_out_of_range() {
        let c = QuantizerConfig::new(3, 0.0, 0.5).unwrap();
        let mut r = rng::stream(4, &[0]);
        let q = quantize_vector(&[2.0, -7.0, 0.25], &c, &mut r).unwrap();
        assert_eq!(q.clamped, 2);
        assert_eq!(&q.values[..2], &[0.5, -0.5]);
    }

    #[test]
    fn lemma1_direct_formula() {
        let c = cfg(1);
        let zero = GradientEnvelope::new(vec![0.0; 4], vec![0.0; 4]);
        let s = lemma1_bounds(&zero, &c, 0.1);
        assert_eq!((s.delta, s.j_bound), (0.0, 0.0));
        let one = GradientEnvelope::new(vec![1.0], vec![-1.0]);
        let s = lemma1_bounds(&one, &c, 0.1);
        assert_eq!((s.delta, s.j_bound), (1.0, 1.0));
        assert!((s.mse_bound - 0.01).abs() < 1e-15);
    }

    #[test]
    fn envelope_of_iteration_gradients() {
        let e = GradientEnvelope::from_iteration_gradients(&[vec![1.0, -2.0], vec![3.0, 0.5]]);
        assert_eq!(e.upper, vec![6.0, 1.0]);
        assert_eq!(e.lower, vec![2.0, -4.0]);
    }

    #[test]
    fn payload_layout() {
        let c = cfg(3);
        let codes = QuantCodes {
            indices: vec![5, 0, 7],
            negative: vec![true, false, true],
        };
        let bytes = encode_payload(&codes, &c).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + 2);
        // codes: 0b1101, 0b0000, 0b1111 packed LSB-first
        assert_eq!(&bytes[HEADER_BYTES..], &[0b0000_1101, 0b0000_1111]);
        assert_eq!(decode_payload(&bytes).unwrap(), (c, codes));
        assert!(decode_payload(&bytes[..HEADER_BYTES + 1]).is_err());
    }
}
