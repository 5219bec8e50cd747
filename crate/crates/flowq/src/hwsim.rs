//! Cycle-level model of the pipelined MAC datapath: a functional trace that
//! steps the per-row load / zero-point-subtract / MAC / shift-scale / store
//! sequence (bit-exact against the integer engine) plus latency and energy
//! reporting.
//!
//! Layer cost is J·(cycles_per_element·K + per_row) + per_layer. The stage
//! constants reproduce the reference FPGA latencies for both design points at
//! 100 MHz; the ReLU is combinational and contributes zero cycles.

use serde::{Deserialize, Serialize};

use crate::intinfer::{InferError, QuantizedLinearLayer, QuantizedMlp};

/// Datapath variant being modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    /// Pipelined MAC with multiplier/shift requantization.
    PipelinedLinear,
    /// Non-pipelined fixed-point baseline.
    FixedBaseline,
}

pub const DEFAULT_CLOCK_HZ: f64 = 100_000_000.0;

/// Per-row / per-layer cycle overheads and the MAC element cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCostModel {
    pub cycles_per_element: u64,
    pub per_row: u64,
    pub per_layer: u64,
}

impl StageCostModel {
    pub fn for_design(design: DesignKind) -> Self {
        match design {
            DesignKind::PipelinedLinear => {
                Self { cycles_per_element: 1, per_row: 5, per_layer: 3 }
            }
            DesignKind::FixedBaseline => Self { cycles_per_element: 2, per_row: 2, per_layer: 1 },
        }
    }

    pub fn layer_cycles(&self, rows: usize, cols: usize) -> u64 {
        rows as u64 * (self.cycles_per_element * cols as u64 + self.per_row) + self.per_layer
    }
}

/// Steps the MAC algorithm row by row: load operands, subtract zero points,
/// accumulate, multiply by M₀ and shift, add Z_out on store. Outputs are
/// bit-identical to `int_linear`; the cycle count follows the stage model.
pub fn simulate_trace(
    layer: &QuantizedLinearLayer,
    x_q: &[i8],
    cost: &StageCostModel,
) -> Result<(Vec<i8>, u64), InferError> {
    if x_q.len() != layer.cols() {
        return Err(InferError::DimensionMismatch { expected: layer.cols(), got: x_q.len() });
    }
    let mut outputs = Vec::with_capacity(layer.rows());
    let mut cycles: u64 = 0;
    let mut j = 0;
    loop {
        // row prologue/epilogue: bias load, pipeline fill/drain, shift, store
        cycles += cost.per_row;
        let mut sum: i64 = layer.bias_q[j] as i64;
        let mut k = 0;
        loop {
            cycles += cost.cycles_per_element;
            let w = layer.w_q[j][k] as i64 - layer.z_w as i64;
            let x = x_q[k] as i64 - layer.z_in as i64;
            sum += w * x;
            if sum.abs() > i32::MAX as i64 {
                return Err(InferError::AccumulatorOverflow { row: j, acc: sum });
            }
            k += 1;
            if k == layer.cols() {
                break;
            }
        }
        let rounding =
            if layer.requant.shift > 0 { 1i64 << (layer.requant.shift - 1) } else { 0 };
        let y = (sum * layer.requant.m0 as i64 + rounding) >> layer.requant.shift;
        outputs.push((y + layer.z_out as i64).clamp(-128, 127) as i8);
        j += 1;
        if j == layer.rows() {
            break;
        }
    }
    cycles += cost.per_layer;
    Ok((outputs, cycles))
}

/// Total cycles for an H-hidden-neuron, D-input model on the given design.
pub fn estimate_cycles(hidden: usize, inputs: usize, design: DesignKind) -> u64 {
    assert!(hidden >= 1 && inputs >= 1);
    let cost = StageCostModel::for_design(design);
    cost.layer_cycles(hidden, inputs) + cost.layer_cycles(1, hidden)
}

pub fn latency_seconds(cycles: u64, frequency_hz: f64) -> f64 {
    assert!(frequency_hz > 0.0);
    cycles as f64 / frequency_hz
}

pub fn energy_joules(power_watts: f64, latency_s: f64) -> f64 {
    assert!(power_watts >= 0.0);
    power_watts * latency_s
}

/// Reference power draw in milliwatts per (design, hidden size), used when
/// the caller supplies no power table.
pub fn default_power_mw(design: DesignKind, hidden: usize) -> f64 {
    match design {
        DesignKind::PipelinedLinear => match hidden {
            0..=10 => 31.0,
            11..=30 => 32.0,
            31..=60 => 33.0,
            _ => 34.0,
        },
        DesignKind::FixedBaseline => match hidden {
            0..=10 => 28.0,
            _ => 29.0,
        },
    }
}

/// Per-layer and total cycles with derived latency and energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub design: DesignKind,
    pub hidden_neurons: usize,
    pub input_dim: usize,
    pub per_layer_cycles: Vec<u64>,
    pub total_cycles: u64,
    pub clock_hz: f64,
    pub latency_s: f64,
    pub power_w: f64,
    pub energy_j: f64,
}

impl CycleReport {
    pub fn latency_us(&self) -> f64 {
        self.latency_s * 1e6
    }

    pub fn energy_uj(&self) -> f64 {
        self.energy_j * 1e6
    }
}

/// Builds the cycle/latency/energy report for a model shape. `power_mw`
/// defaults to the reference table for the design.
pub fn report_for_shape(
    hidden: usize,
    inputs: usize,
    design: DesignKind,
    clock_hz: f64,
    power_mw: Option<f64>,
) -> CycleReport {
    let cost = StageCostModel::for_design(design);
    let per_layer = vec![cost.layer_cycles(hidden, inputs), cost.layer_cycles(1, hidden)];
    let total: u64 = per_layer.iter().sum();
    let latency = latency_seconds(total, clock_hz);
    let power_w = power_mw.unwrap_or_else(|| default_power_mw(design, hidden)) * 1e-3;
    CycleReport {
        design,
        hidden_neurons: hidden,
        input_dim: inputs,
        per_layer_cycles: per_layer,
        total_cycles: total,
        clock_hz,
        latency_s: latency,
        power_w,
        energy_j: energy_joules(power_w, latency),
    }
}

/// Report for a converted model.
pub fn report_for_model(
    qm: &QuantizedMlp,
    design: DesignKind,
    clock_hz: f64,
    power_mw: Option<f64>,
) -> CycleReport {
    report_for_shape(qm.hidden.rows(), qm.hidden.cols(), design, clock_hz, power_mw)
}
