//! Analytic FLOPs, memory, and rotation-overhead accounting.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{LayerSpec, ModelSpec};

/// FLOPs saved per binarized operation.
pub const BINARY_FLOP_FACTOR: u64 = 58;
/// Bits per full-precision parameter.
pub const REAL_PARAM_BITS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Real,
    Binary,
}

/// FLOPs split into full-precision and binarized operations, kept as
/// integers so ratios between counts are exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub full_precision: u64,
    /// Raw operation count of binarized layers, before the 58x discount.
    pub binary_ops: u64,
}

impl FlopCount {
    /// Effective FLOPs: binarized operations cost 1/58 each.
    pub fn flops(&self) -> f64 {
        self.full_precision as f64 + self.binary_ops as f64 / BINARY_FLOP_FACTOR as f64
    }

    fn in_58ths(&self) -> u128 {
        self.full_precision as u128 * BINARY_FLOP_FACTOR as u128 + self.binary_ops as u128
    }

    /// `self / other`, computed from the exact integer counts.
    pub fn ratio_to(&self, other: &FlopCount) -> f64 {
        let (a, b) = (self.in_58ths(), other.in_58ths());
        if b != 0 && a % b == 0 {
            (a / b) as f64
        } else {
            a as f64 / b as f64
        }
    }
}

/// `(layer FLOPs, parameter count)` per conv/dense layer, in spec order.
pub fn layer_costs(spec: &ModelSpec) -> Result<Vec<(u64, u64, bool)>> {
    let shapes = spec.shapes()?;
    let mut out = Vec::new();
    for (layer, out_shape) in spec.layers.iter().zip(&shapes[1..]) {
        match *layer {
            LayerSpec::Conv {
                c_in,
                c_out,
                kernel,
                binarize,
                ..
            } => {
                let (h, w) = (out_shape[1] as u64, out_shape[2] as u64);
                let k2 = (kernel * kernel) as u64;
                out.push((2 * c_in as u64 * k2 * h * w * c_out as u64, c_in as u64 * k2 * c_out as u64, binarize));
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                binarize,
            } => {
                let p = (in_features * out_features) as u64;
                out.push((2 * p, p, binarize));
            }
            LayerSpec::MaxPool { .. } => {}
        }
    }
    Ok(out)
}

/// Sum of `2 c_i k² h' w' c_o` over conv layers (and `2 n_in n_out` for dense).
pub fn count_flops(spec: &ModelSpec, mode: CostMode) -> Result<FlopCount> {
    let mut c = FlopCount::default();
    for (flops, _, binarize) in layer_costs(spec)? {
        if binarize && mode == CostMode::Binary {
            c.binary_ops += flops;
        } else {
            c.full_precision += flops;
        }
    }
    Ok(c)
}

/// Bits needed for the conv/dense weights; batch-norm state is not counted.
pub fn count_memory_bits(spec: &ModelSpec, mode: CostMode) -> Result<u64> {
    Ok(layer_costs(spec)?
        .into_iter()
        .map(|(_, p, binarize)| {
            if binarize && mode == CostMode::Binary {
                p
            } else {
                p * REAL_PARAM_BITS
            }
        })
        .sum())
}

pub fn bits_to_megabytes(bits: u64) -> f64 {
    bits as f64 / 8.0 / (1024.0 * 1024.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationOverhead {
    pub weight_params: usize,
    pub rotation_params: usize,
    pub percent: f64,
}

pub fn rotation_overhead(spec: &ModelSpec) -> RotationOverhead {
    let weight_params = spec.count_params();
    let rotation_params = spec.count_rotation_params();
    RotationOverhead {
        weight_params,
        rotation_params,
        percent: if weight_params == 0 {
            0.0
        } else {
            100.0 * rotation_params as f64 / weight_params as f64
        },
    }
}
