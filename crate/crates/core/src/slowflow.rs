//! Slowed-timestep estimation: where along its own interpolation path a generated state sits.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::sampling::{self, Method, SamplerConfig, VelocityField};
use crate::schedules::Schedule;
use crate::training::data::{standard_normal_cdf, GaussianMixtureSpec};

pub const DEFAULT_GRID_N: usize = 1000;
pub const DEFAULT_POPULATION: usize = 2000;
const DEGENERATE_GAP: f64 = 1e-12;
/// Rounding slack before an estimate outside `[0, 1]` counts as clamped.
pub const CLAMP_MARGIN: f64 = 1e-9;

/// Scalar projection of `x_hat` onto the line through `x0` and `x1`, in units of `x1 − x0`.
pub fn slowed_timestep_linear(x_hat: &[f64], x0: &[f64], x1: &[f64]) -> Result<f64> {
    if x_hat.len() != x0.len() || x0.len() != x1.len() {
        return Err(Error::Shape("projection operands differ in length".into()));
    }
    let mut dot = 0.0;
    let mut norm2 = 0.0;
    for ((&h, &a), &b) in x_hat.iter().zip(x0).zip(x1) {
        let d = b - a;
        dot += (h - a) * d;
        norm2 += d * d;
    }
    let gap = norm2.sqrt();
    if gap < DEGENERATE_GAP {
        return Err(Error::DegeneratePair(gap));
    }
    Ok(dot / norm2)
}

/// Grid argmin over `m ∈ [0, 1]` of `‖x_hat − x_m‖`; ties go to the smaller `m`.
pub fn slowed_timestep_search(schedule: Schedule, x_hat: &[f64], x0: &[f64], x1: &[f64], grid_n: usize) -> Result<f64> {
    if grid_n < 2 {
        return Err(Error::Config(format!("grid_n must be at least 2, got {grid_n}")));
    }
    if x_hat.len() != x0.len() || x0.len() != x1.len() {
        return Err(Error::Shape("search operands differ in length".into()));
    }
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..grid_n {
        let m = i as f64 / (grid_n - 1) as f64;
        let c = schedule.coefficients_unchecked(m);
        let d2: f64 = x_hat
            .iter()
            .zip(x0)
            .zip(x1)
            .map(|((&h, &a), &b)| {
                let r = h - (c.alpha * b + c.beta * a);
                r * r
            })
            .sum();
        if d2 < best.0 {
            best = (d2, m);
        }
    }
    Ok(best.1)
}

/// How generated paths are paired with data endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `x1 = F⁻¹(Φ(x0))`: the monotone transport map, which the exact 1D probability flow realises.
    #[default]
    Quantile,
    /// Independent draws of noise and data.
    Independent,
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(Pairing::Quantile),
            "independent" => Ok(Pairing::Independent),
            other => Err(Error::Config(format!("unknown pairing {other:?}"))),
        }
    }
}

/// Data endpoints matched to `noise` by the monotone map.
pub fn quantile_coupling(spec: &GaussianMixtureSpec, noise: &Batch) -> Result<Batch> {
    if noise.dim() != 1 {
        return Err(Error::Shape("quantile coupling is one-dimensional".into()));
    }
    let data = noise
        .as_slice()
        .par_iter()
        .map(|&z| spec.data_quantile(standard_normal_cdf(z)))
        .collect();
    Ok(Batch::from_scalars(data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowFlowReport {
    pub model_tag: String,
    pub population: usize,
    pub sampling_times: Vec<f64>,
    pub min_m: Vec<f64>,
    pub max_m: Vec<f64>,
    pub median_m: Vec<f64>,
    pub mean_m: Vec<f64>,
    pub raw_min_m: Vec<f64>,
    pub raw_max_m: Vec<f64>,
    pub clamped_fraction: Vec<f64>,
}

impl SlowFlowReport {
    pub fn width(&self, k: usize) -> f64 {
        self.max_m[k] - self.min_m[k]
    }

    pub fn index_of(&self, t: f64) -> usize {
        self.sampling_times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map_or(0, |(i, _)| i)
    }

    pub fn clamping_occurred(&self) -> bool {
        self.clamped_fraction.iter().any(|&f| f > 0.0)
    }

    /// Fraction of all (path, time) estimates that fell outside `[0, 1]`.
    pub fn overall_clamped_fraction(&self) -> f64 {
        self.clamped_fraction.iter().sum::<f64>() / self.clamped_fraction.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,min_m,max_m,median_m,mean_m,clamped_fraction\n");
        for k in 0..self.sampling_times.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.sampling_times[k], self.min_m[k], self.max_m[k], self.median_m[k], self.mean_m[k], self.clamped_fraction[k]
            );
        }
        out
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

struct Summary {
    min: f64,
    max: f64,
    median: f64,
    mean: f64,
    raw_min: f64,
    raw_max: f64,
    clamped_fraction: f64,
}

fn summarise(raw: &[f64]) -> Summary {
    let mut clamped: Vec<f64> = raw.iter().map(|m| m.clamp(0.0, 1.0)).collect();
    clamped.sort_by(f64::total_cmp);
    let n = raw.len() as f64;
    Summary {
        min: clamped[0],
        max: clamped[clamped.len() - 1],
        median: median(&clamped),
        mean: clamped.iter().sum::<f64>() / n,
        raw_min: raw.iter().copied().fold(f64::INFINITY, f64::min),
        raw_max: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        clamped_fraction: raw.iter().filter(|m| !(-CLAMP_MARGIN..=1.0 + CLAMP_MARGIN).contains(*m)).count() as f64 / n,
    }
}

/// Integrate each path from `interpolate(t_start, x0, x1)` and record its slowed timestep at every grid time.
///
/// Linear schedules use the exact projection; others use the grid search with `grid_n` points.
pub fn slowflow_envelope(
    field: &dyn VelocityField,
    schedule: Schedule,
    data: &Batch,
    noise: &Batch,
    config: &SamplerConfig,
    grid_n: usize,
    model_tag: &str,
) -> Result<SlowFlowReport> {
    data.same_shape(noise)?;
    if data.rows() == 0 {
        return Err(Error::Config("slow flow needs a nonempty population".into()));
    }
    if !matches!(config.method, Method::Euler | Method::Heun) {
        return Err(Error::Config("slow flow envelopes use an ODE sampler (euler or heun)".into()));
    }
    let mut config = config.clone();
    config.record_trajectory = true;
    let start_rows = noise
        .iter_rows()
        .zip(data.iter_rows())
        .map(|(a, b)| schedule.interpolate(config.t_start, a, b))
        .collect::<Result<Vec<_>>>()?;
    let start = Batch::from_rows(&start_rows)?;
    let (_, traj) = sampling::sample(field, schedule, &config, &start)?;
    let traj = traj.expect("trajectory requested");

    let estimate = |x_hat: &[f64], p: usize| -> Result<f64> {
        let r = match schedule {
            Schedule::Linear => slowed_timestep_linear(x_hat, noise.row(p), data.row(p)),
            _ => slowed_timestep_search(schedule, x_hat, noise.row(p), data.row(p), grid_n),
        };
        r.map_err(|e| match e {
            Error::DegeneratePair(gap) => Error::Integration {
                step: 0,
                t: config.t_start,
                path: Some(p),
                detail: format!("degenerate pair, |x1 - x0| = {gap:e}"),
            },
            other => other,
        })
    };

    let summaries = traj
        .states
        .par_iter()
        .map(|state| {
            let raw = (0..state.rows()).map(|p| estimate(state.row(p), p)).collect::<Result<Vec<f64>>>()?;
            Ok(summarise(&raw))
        })
        .collect::<Result<Vec<Summary>>>()?;

    Ok(SlowFlowReport {
        model_tag: model_tag.to_string(),
        population: data.rows(),
        sampling_times: traj.times.clone(),
        min_m: summaries.iter().map(|s| s.min).collect(),
        max_m: summaries.iter().map(|s| s.max).collect(),
        median_m: summaries.iter().map(|s| s.median).collect(),
        mean_m: summaries.iter().map(|s| s.mean).collect(),
        raw_min_m: summaries.iter().map(|s| s.raw_min).collect(),
        raw_max_m: summaries.iter().map(|s| s.raw_max).collect(),
        clamped_fraction: summaries.iter().map(|s| s.clamped_fraction).collect(),
    })
}
