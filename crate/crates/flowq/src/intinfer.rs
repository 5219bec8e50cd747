//! Integer-only inference: conversion of a trained QAT model into pure
//! integer layers, execution with multiplier/shift requantization, and the
//! deployment package import/export.
//!
//! Between input quantization and output dequantization every operation is
//! integer arithmetic: zero-point subtraction, 32-bit accumulation, a 64-bit
//! multiply by M₀ followed by an arithmetic right shift, and int8 clamping.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datakit::NormStats;
use crate::qat::QatModel;
use crate::quantcore::{
    approximate_multiplier, quantize_bias, QuantError, QuantParams, RequantMultiplier,
};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("32-bit accumulator overflow at row {row} (acc={acc})")]
    AccumulatorOverflow { row: usize, acc: i64 },
    #[error("input has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("model has no frozen quantization parameters; call freeze() first")]
    NotFrozen,
    #[error("only 8-bit frozen parameters can be converted, got {0} bits")]
    UnsupportedBits(u32),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed package: {0}")]
    Malformed(String),
    #[error("unsupported package format version {0}")]
    VersionMismatch(u32),
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },
}

/// Integer weights, bias, zero points and requantization constants for one
/// linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinearLayer {
    /// J × K int8 weights.
    pub w_q: Vec<Vec<i8>>,
    pub z_w: i32,
    /// J int32 biases, pre-scaled to S_in · S_w, no zero point.
    pub bias_q: Vec<i32>,
    pub z_in: i32,
    pub z_out: i32,
    pub requant: RequantMultiplier,
}

impl QuantizedLinearLayer {
    pub fn rows(&self) -> usize {
        self.w_q.len()
    }

    pub fn cols(&self) -> usize {
        self.w_q[0].len()
    }
}

/// Fully converted integer model plus the normalization metadata needed to
/// run raw sensor rows through it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMlp {
    pub hidden: QuantizedLinearLayer,
    pub output: QuantizedLinearLayer,
    /// ReLU threshold: the hidden activation zero point.
    pub z_a1: i32,
    pub input_params: QuantParams,
    pub output_params: QuantParams,
    pub norm: NormStats,
}

#[cfg(debug_assertions)]
thread_local! {
    static FLOAT_OPS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Debug-build instrumentation: any float arithmetic inside the integer
/// section must call this, and `int_forward` asserts the counter stays flat.
#[cfg(debug_assertions)]
#[allow(dead_code)]
pub(crate) fn note_float_op() {
    FLOAT_OPS.with(|c| c.set(c.get() + 1));
}

const REQUANT_SHIFT_MAX_ACC: i64 = i32::MAX as i64;

/// (acc · M₀ + 2^(n−1)) >> n: the 64-bit product, rounded to nearest by the
/// half-step addend before the arithmetic shift. Plain truncation would bias
/// every row low by half an LSB, and across a wide hidden layer those biases
/// accumulate past the 1-LSB agreement budget against the fake-quant path.
#[inline]
fn requant_shift(acc: i64, r: &RequantMultiplier) -> i64 {
    let rounding = if r.shift > 0 { 1i64 << (r.shift - 1) } else { 0 };
    (acc * r.m0 as i64 + rounding) >> r.shift
}

/// One integer linear layer: per row, accumulate
/// (x_q - Z_in)(w_q - Z_w) + B*_q in 32 bits, requantize with M₀ and n, add
/// Z_out, clamp to int8.
pub fn int_linear(layer: &QuantizedLinearLayer, x_q: &[i8]) -> Result<Vec<i8>, InferError> {
    if x_q.len() != layer.cols() {
        return Err(InferError::DimensionMismatch { expected: layer.cols(), got: x_q.len() });
    }
    let mut out = Vec::with_capacity(layer.rows());
    for (j, (row, &b)) in layer.w_q.iter().zip(&layer.bias_q).enumerate() {
        let mut acc: i64 = b as i64;
        for (&w, &x) in row.iter().zip(x_q) {
            acc += (x as i64 - layer.z_in as i64) * (w as i64 - layer.z_w as i64);
            if acc.abs() > REQUANT_SHIFT_MAX_ACC {
                return Err(InferError::AccumulatorOverflow { row: j, acc });
            }
        }
        let y = requant_shift(acc, &layer.requant) + layer.z_out as i64;
        out.push(y.clamp(-128, 127) as i8);
    }
    Ok(out)
}

/// Integer ReLU: elementwise max(Z, a_q), with Z the hidden activation zero
/// point standing in for real zero.
pub fn int_relu(a_q: &[i8], z: i32) -> Vec<i8> {
    a_q.iter()
        .map(|&a| (a as i32).max(z).clamp(-128, 127) as i8)
        .collect()
}

/// Runs one normalized input row through the integer pipeline. Returns the
/// quantized output and its dequantized real value.
pub fn int_forward(qm: &QuantizedMlp, x: &[f64]) -> Result<(i32, f64), InferError> {
    if x.len() != qm.hidden.cols() {
        return Err(InferError::DimensionMismatch { expected: qm.hidden.cols(), got: x.len() });
    }
    let x_q: Vec<i8> = x
        .iter()
        .map(|&v| qm.input_params.quantize(v).clamp(-128, 127) as i8)
        .collect();

    #[cfg(debug_assertions)]
    let float_ops_before = FLOAT_OPS.with(|c| c.get());

    let a1 = int_linear(&qm.hidden, &x_q)?;
    let a2 = int_relu(&a1, qm.z_a1);
    let y_q = int_linear(&qm.output, &a2)?[0] as i32;

    #[cfg(debug_assertions)]
    debug_assert_eq!(
        FLOAT_OPS.with(|c| c.get()),
        float_ops_before,
        "integer section must be float-free"
    );

    Ok((y_q, qm.output_params.dequantize(y_q)))
}

/// Converts a frozen QAT model: weights quantized with their frozen
/// parameters, biases rescaled to S_in · S_w, and the per-layer
/// requantization multipliers M = S_in · S_w / S_out approximated as M₀·2⁻ⁿ.
pub fn convert(m: &QatModel) -> Result<QuantizedMlp, ConvertError> {
    let p = m.frozen.ok_or(ConvertError::NotFrozen)?;
    for qp in [p.x, p.w1, p.a1, p.w2, p.y] {
        if qp.bits != 8 {
            return Err(ConvertError::UnsupportedBits(qp.bits));
        }
    }
    let quantize_weights = |w: &[f64], qp: &QuantParams| -> Vec<i8> {
        w.iter().map(|&v| qp.quantize(v) as i8).collect()
    };

    let hidden = QuantizedLinearLayer {
        w_q: m.mlp.w1.iter().map(|row| quantize_weights(row, &p.w1)).collect(),
        z_w: p.w1.zero_point,
        bias_q: quantize_bias(&m.mlp.b1, p.x.scale, p.w1.scale)?,
        z_in: p.x.zero_point,
        z_out: p.a1.zero_point,
        requant: approximate_multiplier(p.x.scale * p.w1.scale / p.a1.scale)?,
    };
    let output = QuantizedLinearLayer {
        w_q: vec![quantize_weights(&m.mlp.w2, &p.w2)],
        z_w: p.w2.zero_point,
        bias_q: quantize_bias(&[m.mlp.b2], p.a1.scale, p.w2.scale)?,
        z_in: p.a1.zero_point,
        z_out: p.y.zero_point,
        requant: approximate_multiplier(p.a1.scale * p.w2.scale / p.y.scale)?,
    };
    Ok(QuantizedMlp {
        hidden,
        output,
        z_a1: p.a1.zero_point,
        input_params: p.x,
        output_params: p.y,
        norm: NormStats {
            input_min: vec![0.0; m.mlp.input_dim()],
            input_max: vec![1.0; m.mlp.input_dim()],
            target_min: 0.0,
            target_max: 1.0,
        },
    })
}

/// Converts and attaches real normalization statistics.
pub fn convert_with_norm(m: &QatModel, norm: NormStats) -> Result<QuantizedMlp, ConvertError> {
    let mut qm = convert(m)?;
    qm.norm = norm;
    Ok(qm)
}

// ---------------------------------------------------------------------------
// Deployment package
// ---------------------------------------------------------------------------

pub const PACKAGE_FORMAT_VERSION: u32 = 1;

/// f64 serialized as a decimal string with 17 significant digits, which
/// round-trips exactly.
fn f64_to_str(v: f64) -> String {
    format!("{v:.16e}")
}

fn f64_from_str(s: &str, field: &str) -> Result<f64, PackageError> {
    s.parse::<f64>()
        .map_err(|_| PackageError::Malformed(format!("bad decimal '{s}' in field {field}")))
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    /// row-major int8 weights
    weights: Vec<i8>,
    biases: Vec<i32>,
    z_in: i32,
    z_w: i32,
    z_out: i32,
    m0: u32,
    shift: u32,
    multiplier: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsDoc {
    scale: String,
    zero_point: i32,
    bits: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormDoc {
    input_min: Vec<String>,
    input_max: Vec<String>,
    target_min: String,
    target_max: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PayloadDoc {
    hidden: LayerDoc,
    output: LayerDoc,
    z_a1: i32,
    input_params: ParamsDoc,
    output_params: ParamsDoc,
    norm: NormDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct PackageDoc {
    format_version: u32,
    payload: PayloadDoc,
    /// SHA-256 of the serialized payload, hex-encoded.
    checksum: String,
}

fn layer_to_doc(l: &QuantizedLinearLayer) -> LayerDoc {
    LayerDoc {
        rows: l.rows(),
        cols: l.cols(),
        weights: l.w_q.iter().flatten().copied().collect(),
        biases: l.bias_q.clone(),
        z_in: l.z_in,
        z_w: l.z_w,
        z_out: l.z_out,
        m0: l.requant.m0,
        shift: l.requant.shift,
        multiplier: f64_to_str(l.requant.multiplier),
    }
}

fn layer_from_doc(doc: &LayerDoc, name: &str) -> Result<QuantizedLinearLayer, PackageError> {
    if doc.rows == 0 || doc.cols == 0 || doc.weights.len() != doc.rows * doc.cols {
        return Err(PackageError::Malformed(format!("layer {name}: bad weight shape")));
    }
    if doc.biases.len() != doc.rows {
        return Err(PackageError::Malformed(format!("layer {name}: bad bias length")));
    }
    Ok(QuantizedLinearLayer {
        w_q: doc.weights.chunks(doc.cols).map(|c| c.to_vec()).collect(),
        z_w: doc.z_w,
        bias_q: doc.biases.clone(),
        z_in: doc.z_in,
        z_out: doc.z_out,
        requant: RequantMultiplier {
            multiplier: f64_from_str(&doc.multiplier, name)?,
            m0: doc.m0,
            shift: doc.shift,
        },
    })
}

fn params_to_doc(p: &QuantParams) -> ParamsDoc {
    ParamsDoc { scale: f64_to_str(p.scale), zero_point: p.zero_point, bits: p.bits }
}

fn params_from_doc(doc: &ParamsDoc, name: &str) -> Result<QuantParams, PackageError> {
    let scale = f64_from_str(&doc.scale, name)?;
    if !(scale > 0.0) {
        return Err(PackageError::Malformed(format!("{name}: non-positive scale")));
    }
    Ok(QuantParams::new(scale, doc.zero_point, doc.bits))
}

fn checksum_hex(payload_json: &str) -> String {
    let digest = Sha256::digest(payload_json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the self-describing deployment package: integer fields exact,
/// scales as 17-significant-digit decimals, SHA-256 checksum over the
/// payload.
pub fn export_package(qm: &QuantizedMlp, path: impl AsRef<Path>) -> Result<(), PackageError> {
    let payload = PayloadDoc {
        hidden: layer_to_doc(&qm.hidden),
        output: layer_to_doc(&qm.output),
        z_a1: qm.z_a1,
        input_params: params_to_doc(&qm.input_params),
        output_params: params_to_doc(&qm.output_params),
        norm: NormDoc {
            input_min: qm.norm.input_min.iter().copied().map(f64_to_str).collect(),
            input_max: qm.norm.input_max.iter().copied().map(f64_to_str).collect(),
            target_min: f64_to_str(qm.norm.target_min),
            target_max: f64_to_str(qm.norm.target_max),
        },
    };
    let payload_json = serde_json::to_string(&payload)
        .map_err(|e| PackageError::Malformed(e.to_string()))?;
    let doc = PackageDoc {
        format_version: PACKAGE_FORMAT_VERSION,
        checksum: checksum_hex(&payload_json),
        payload,
    };
    let path_str = path.as_ref().display().to_string();
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| PackageError::Malformed(e.to_string()))?;
    std::fs::write(path.as_ref(), json)
        .map_err(|e| PackageError::Io { path: path_str, source: e })
}

/// Loads and verifies a deployment package. The round trip through
/// `export_package` is the identity.
pub fn load_package(path: impl AsRef<Path>) -> Result<QuantizedMlp, PackageError> {
    let path_str = path.as_ref().display().to_string();
    let raw = std::fs::read_to_string(path.as_ref())
        .map_err(|e| PackageError::Io { path: path_str, source: e })?;
    let doc: PackageDoc =
        serde_json::from_str(&raw).map_err(|e| PackageError::Malformed(e.to_string()))?;
    if doc.format_version != PACKAGE_FORMAT_VERSION {
        return Err(PackageError::VersionMismatch(doc.format_version));
    }
    let payload_json = serde_json::to_string(&doc.payload)
        .map_err(|e| PackageError::Malformed(e.to_string()))?;
    let computed = checksum_hex(&payload_json);
    if computed != doc.checksum {
        return Err(PackageError::ChecksumMismatch { stored: doc.checksum, computed });
    }
    let p = &doc.payload;
    let norm = NormStats {
        input_min: p
            .norm
            .input_min
            .iter()
            .map(|s| f64_from_str(s, "input_min"))
            .collect::<Result<_, _>>()?,
        input_max: p
            .norm
            .input_max
            .iter()
            .map(|s| f64_from_str(s, "input_max"))
            .collect::<Result<_, _>>()?,
        target_min: f64_from_str(&p.norm.target_min, "target_min")?,
        target_max: f64_from_str(&p.norm.target_max, "target_max")?,
    };
    Ok(QuantizedMlp {
        hidden: layer_from_doc(&p.hidden, "hidden")?,
        output: layer_from_doc(&p.output, "output")?,
        z_a1: p.z_a1,
        input_params: params_from_doc(&p.input_params, "input_params")?,
        output_params: params_from_doc(&p.output_params, "output_params")?,
        norm,
    })
}
