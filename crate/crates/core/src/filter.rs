//! Learnable importance filter.
//!
//! Each message dimension `d` carries a gate `κ_d = sigmoid(ρ_d)`. Training
//! multiplies messages by the gates and penalizes `exp(Σ κ_d)`; deployment
//! keeps only the `B` dimensions with the largest gates.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceGates {
    raw: Vec<f64>,
}

impl ImportanceGates {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("importance gates".into()));
        }
        Ok(Self { raw })
    }

    pub fn constant(dim: usize, raw: f64) -> Self {
        Self {
            raw: vec![raw; dim],
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    /// Gate values `κ`.
    pub fn values(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Maximum number of transmitted message dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BandwidthBudget {
    pub dims: usize,
}

impl BandwidthBudget {
    pub fn new(dims: usize, msg_dim: usize) -> Result<Self> {
        if dims > msg_dim {
            return Err(Error::InvalidArgument(format!(
                "bandwidth budget {dims} exceeds message dimension {msg_dim}"
            )));
        }
        Ok(Self { dims })
    }

    pub fn unlimited(msg_dim: usize) -> Self {
        Self { dims: msg_dim }
    }
}

pub fn gate_message(message: &[f64], gates: &ImportanceGates) -> Result<Vec<f64>> {
    ensure_len("gated message", gates.len(), message.len())?;
    Ok(message
        .iter()
        .zip(gates.raw())
        .map(|(m, &r)| sigmoid(r) * m)
        .collect())
}

/// Returns `(d message, d raw)` for a downstream gradient on the gated output.
pub fn gate_message_backward(
    message: &[f64],
    gates: &ImportanceGates,
    output_gradient: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_len("gated message", gates.len(), message.len())?;
    ensure_len("gate gradient", gates.len(), output_gradient.len())?;
    let mut dm = Vec::with_capacity(message.len());
    let mut dr = Vec::with_capacity(message.len());
    for ((m, &r), g) in message.iter().zip(gates.raw()).zip(output_gradient) {
        let k = sigmoid(r);
        dm.push(g * k);
        dr.push(g * m * k * (1.0 - k));
    }
    Ok((dm, dr))
}

/// Exponential bandwidth regularizer `exp(Σ_d κ_d)`.
pub fn importance_regularizer(gates: &ImportanceGates) -> f64 {
    gates.values().iter().sum::<f64>().exp()
}

/// Gradient of [`importance_regularizer`] with respect to the raw gates.
pub fn importance_regularizer_grad(gates: &ImportanceGates) -> Vec<f64> {
    let k = gates.values();
    let total = k.iter().sum::<f64>().exp();
    k.iter().map(|k| total * k * (1.0 - k)).collect()
}

/// Indices kept under `budget`, ordered by descending gate value with ties
/// going to the lower index.
pub fn kept_indices(gates: &ImportanceGates, budget: BandwidthBudget) -> Vec<usize> {
    let k = gates.values();
    let mut order: Vec<usize> = (0..k.len()).collect();
    order.sort_by(|&a, &b| k[b].total_cmp(&k[a]).then(a.cmp(&b)));
    order.truncate(budget.dims.min(k.len()));
    order
}

/// Gated message with every dimension outside the top-`B` gates set to zero.
pub fn mask_to_bandwidth(
    message: &[f64],
    gates: &ImportanceGates,
    budget: BandwidthBudget,
) -> Result<Vec<f64>> {
    let gated = gate_message(message, gates)?;
    let mut out = vec![0.0; gated.len()];
    for i in kept_indices(gates, budget) {
        out[i] = gated[i];
    }
    Ok(out)
}

/// Keeps the first `B` dimensions; used by schemes without learned gates.
pub fn truncate_to_bandwidth(message: &[f64], budget: BandwidthBudget) -> Vec<f64> {
    let keep = budget.dims.min(message.len());
    let mut out = message.to_vec();
    out[keep..].iter_mut().for_each(|v| *v = 0.0);
    out
}

pub fn effective_dimension(masked: &[f64]) -> usize {
    masked.iter().filter(|v| v.abs() > 0.0).count()
}
