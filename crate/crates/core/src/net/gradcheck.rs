//! Central-difference check of reverse-mode gradients.
//!
//! Only `forward` is used on the numerical side, so the check is independent
//! of the backward pass it validates.

use rand::seq::index::sample;
use rand::Rng;

use crate::batch::Batch;
use crate::error::Result;
use crate::net::mlp::{Network, Parameters};

/// Relative errors are measured against `max(|a| + |b|, floor)`.
pub const RELATIVE_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(RELATIVE_FLOOR)
}

fn mse(net: &Network, x: &Batch, t: &[f64], y: &Batch) -> Result<f64> {
    let out = net.forward(x, t)?;
    let n = out.as_slice().len() as f64;
    Ok(out
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(o, y)| (o - y) * (o - y))
        .sum::<f64>()
        / n)
}

fn param_slot(params: &mut Parameters, mut index: usize) -> &mut f64 {
    for layer in &mut params.layers {
        if index < layer.weight.len() {
            return &mut layer.weight[index];
        }
        index -= layer.weight.len();
        if index < layer.bias.len() {
            return &mut layer.bias[index];
        }
        index -= layer.bias.len();
    }
    panic!("parameter index out of range");
}

/// Finite-difference gradient of the MSE loss at the given flat parameter indices.
pub fn numerical_gradient(
    net: &Network,
    x: &Batch,
    t: &[f64],
    y: &Batch,
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let original = *param_slot(probe.params_mut(), i);
        *param_slot(probe.params_mut(), i) = original + h;
        let plus = mse(&probe, x, t, y)?;
        *param_slot(probe.params_mut(), i) = original - h;
        let minus = mse(&probe, x, t, y)?;
        *param_slot(probe.params_mut(), i) = original;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compare `analytic` (flat, in parameter order) against central differences.
///
/// With `max_coords = None` every coordinate is checked; otherwise a seeded
/// subset of that size, always including every output-layer parameter.
pub fn check_gradient(
    net: &Network,
    x: &Batch,
    t: &[f64],
    y: &Batch,
    analytic: &Parameters,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let total = analytic.len();
    let indices: Vec<usize> = match max_coords {
        Some(k) if k < total => {
            let last = net.params().layers.last().expect("at least one layer");
            let tail = last.weight.len() + last.bias.len();
            let mut picked: Vec<usize> = (total - tail..total).collect();
            let body = total - tail;
            let extra = k.saturating_sub(tail).min(body);
            let mut chosen: Vec<usize> = sample(rng, body, extra).into_vec();
            chosen.sort_unstable();
            chosen.append(&mut picked);
            chosen
        }
        _ => (0..total).collect(),
    };
    let numeric = numerical_gradient(net, x, t, y, &indices, DEFAULT_STEP)?;
    let flat: Vec<f64> = analytic.iter().copied().collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
    };
    for (&i, &n) in indices.iter().zip(&numeric) {
        let err = relative_error(flat[i], n);
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
