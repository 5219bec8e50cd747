//! Quantization primitives shared by QAT and the integer inference path:
//! affine/fixed-point parameter computation, quantize/dequantize, range
//! observers, bias quantization, and the requantization multiplier.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("multiplier must be positive, got {0}")]
    NonPositiveMultiplier(f64),
    #[error("multiplier {0} cannot be normalized with a shift in [0, 62]")]
    MultiplierOutOfRange(f64),
    #[error("quantized bias {value} exceeds the 32-bit signed range")]
    BiasOverflow { value: f64 },
}

/// Rounding used everywhere in the quantization paths: half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Affine quantization parameters for one tensor.
///
/// `q_min`/`q_max` are the signed range of the `bits`-wide target,
/// `q_min = -2^(b-1)`, `q_max = 2^(b-1) - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u32,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u32) -> Self {
        assert!(scale > 0.0, "scale must be positive");
        assert!((2..=16).contains(&bits) || bits == 32);
        let q_min = -(1i64 << (bits - 1)) as i32;
        let q_max = ((1i64 << (bits - 1)) - 1) as i32;
        Self { scale, zero_point, bits, q_min, q_max }
    }

    /// Degenerate parameters used for constant tensors: S=1, Z=0.
    pub fn degenerate(bits: u32) -> Self {
        Self::new(1.0, 0, bits)
    }

    /// clamp(round(x/S) + Z, q_min, q_max)
    pub fn quantize(&self, x: f64) -> i32 {
        let q = round_half_away(x / self.scale) + self.zero_point as f64;
        (q.max(self.q_min as f64).min(self.q_max as f64)) as i32
    }

    /// S * (q - Z). No clamping is re-applied.
    pub fn dequantize(&self, q: i32) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }

    /// dequantize(quantize(x)) — the fake-quantization map.
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    /// Smallest and largest representable reals.
    pub fn real_range(&self) -> (f64, f64) {
        (self.dequantize(self.q_min), self.dequantize(self.q_max))
    }

    /// True when `x` lies inside the representable real range (used by the
    /// clipped straight-through estimator).
    pub fn in_range(&self, x: f64) -> bool {
        let (lo, hi) = self.real_range();
        x >= lo && x <= hi
    }
}

/// Fixed-point format (a, b): b total bits, a fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub frac_bits: u32,
    pub total_bits: u32,
}

impl FixedPointFormat {
    pub fn new(frac_bits: u32, total_bits: u32) -> Self {
        assert!(frac_bits < total_bits);
        Self { frac_bits, total_bits }
    }
}

/// Fixed-point quantization: S = 2^(-a), Z = 0.
pub fn fixed_point_params(fmt: FixedPointFormat) -> QuantParams {
    QuantParams::new((2.0f64).powi(-(fmt.frac_bits as i32)), 0, fmt.total_bits)
}

/// EMA min/max range observer. The first batch initializes the range,
/// subsequent batches blend with `momentum`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    pub min: f64,
    pub max: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl ObserverState {
    pub fn new(momentum: f64) -> Self {
        assert!(momentum > 0.0 && momentum <= 1.0);
        Self { min: 0.0, max: 0.0, momentum, initialized: false }
    }

    pub fn update(&mut self, batch: &[f64]) {
        assert!(!batch.is_empty(), "observer update needs a non-empty batch");
        let lo = batch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = batch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if self.initialized {
            self.min = self.momentum * self.min + (1.0 - self.momentum) * lo;
            self.max = self.momentum * self.max + (1.0 - self.momentum) * hi;
        } else {
            self.min = lo;
            self.max = hi;
            self.initialized = true;
        }
    }
}

/// S = (max - min)/(2^b - 1), Z = clamp(round(q_min - min/S)).
/// A degenerate range (max ≈ min) yields S=1, Z=0.
pub fn compute_affine_params(obs: &ObserverState, bits: u32) -> QuantParams {
    assert!(obs.initialized, "observer not initialized");
    affine_params_from_range(obs.min, obs.max, bits)
}

/// The observed range is first extended to include real zero so the zero
/// point is exact and the quantize/dequantize round trip stays within S/2
/// across the whole observed range.
pub fn affine_params_from_range(min: f64, max: f64, bits: u32) -> QuantParams {
    if max - min < 1e-12 {
        return QuantParams::degenerate(bits);
    }
    let min = min.min(0.0);
    let max = max.max(0.0);
    let span = max - min;
    let levels = ((1u64 << bits) - 1) as f64;
    let scale = span / levels;
    let q_min = -(1i64 << (bits - 1)) as f64;
    let q_max = (1i64 << (bits - 1)) as f64 - 1.0;
    let z = round_half_away(q_min - min / scale).max(q_min).min(q_max) as i32;
    QuantParams::new(scale, z, bits)
}

/// Requantization multiplier M ≈ M₀ · 2^(-n) with M₀ normalized to [2³⁰, 2³¹).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequantMultiplier {
    pub multiplier: f64,
    pub m0: u32,
    pub shift: u32,
}

/// Finds the shift n such that round(M · 2^n) lands in [2³⁰, 2³¹).
pub fn approximate_multiplier(m: f64) -> Result<RequantMultiplier, QuantError> {
    if !(m > 0.0) {
        return Err(QuantError::NonPositiveMultiplier(m));
    }
    const LO: f64 = (1u64 << 30) as f64;
    const HI: f64 = (1u64 << 31) as f64;
    let mut shifted = m;
    let mut n: i64 = 0;
    while round_half_away(shifted) < LO {
        shifted *= 2.0;
        n += 1;
        if n > 62 {
            return Err(QuantError::MultiplierOutOfRange(m));
        }
    }
    while round_half_away(shifted) >= HI {
        shifted /= 2.0;
        n -= 1;
        if n < 0 {
            return Err(QuantError::MultiplierOutOfRange(m));
        }
    }
    let m0 = round_half_away(shifted) as u32;
    debug_assert!((1u32 << 30..1u32 << 31).contains(&m0) || m0 == u32::MAX);
    Ok(RequantMultiplier { multiplier: m, m0, shift: n as u32 })
}

/// Bias quantization per the integer linear layer: B*_q = round(B/(S_x·S_w)),
/// 32-bit signed, no zero point.
pub fn quantize_bias(bias: &[f64], s_in: f64, s_w: f64) -> Result<Vec<i32>, QuantError> {
    assert!(s_in > 0.0 && s_w > 0.0);
    let scale = s_in * s_w;
    bias.iter()
        .map(|&b| {
            let q = round_half_away(b / scale);
            if q < i32::MIN as f64 || q > i32::MAX as f64 {
                Err(QuantError::BiasOverflow { value: b })
            } else {
                Ok(q as i32)
            }
        })
        .collect()
}
