//! One-dimensional Gaussian-mixture data and its exact marginals under a schedule.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::schedules::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Default for GaussianMixtureSpec {
    /// Two well-separated modes: `0.5·N(−2, 0.1²) + 0.5·N(2, 0.1²)`.
    fn default() -> Self {
        Self::toy()
    }
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub(crate) fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    (-0.5 * r * r / var).exp() / (2.0 * PI * var).sqrt()
}

impl GaussianMixtureSpec {
    pub fn toy() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            means: vec![-2.0, 2.0],
            stds: vec![0.1, 0.1],
        }
    }

    pub fn gaussian(mean: f64, std: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            stds: vec![std],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::Config(format!(
                "mixture needs equal, nonzero numbers of weights/means/stds (got {}/{}/{})",
                k,
                self.means.len(),
                self.stds.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if self.stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("mixture stds must be positive".into()));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(())
    }

    /// Draws a component index from one uniform, then one standard normal.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        self.means[k] + self.stds[k] * z
    }

    pub fn sample_batch(&self, rng: &mut impl Rng, rows: usize) -> Batch {
        Batch::from_scalars((0..rows).map(|_| self.sample(rng)).collect())
    }

    /// Per-component mean and variance of `x_t = α_t·x1 + β_t·x0`.
    fn marginal_components(&self, schedule: Schedule, t: f64) -> Result<Vec<(f64, f64, f64)>> {
        let c = schedule.coefficients(t)?;
        Ok(self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&w, &m), &s)| (w, c.alpha * m, c.alpha * c.alpha * s * s + c.beta * c.beta))
            .collect())
    }

    pub fn marginal_pdf(&self, schedule: Schedule, t: f64, x: f64) -> Result<f64> {
        Ok(self
            .marginal_components(schedule, t)?
            .iter()
            .map(|&(w, m, v)| w * normal_pdf(x, m, v))
            .sum())
    }

    pub fn data_pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&w, &m), &s)| w * normal_pdf(x, m, s * s))
            .sum()
    }

    /// Posterior component weights with per-component marginal mean and variance at `(t, x)`.
    fn responsibilities(&self, schedule: Schedule, t: f64, x: f64) -> Result<Vec<(f64, f64, f64)>> {
        let comps = self.marginal_components(schedule, t)?;
        let logs: Vec<f64> = comps
            .iter()
            .map(|&(w, m, v)| {
                let r = x - m;
                w.ln() - 0.5 * r * r / v - 0.5 * v.ln()
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logs.iter().map(|&l| (l - top).exp()).sum();
        Ok(comps
            .iter()
            .zip(&logs)
            .map(|(&(_, m, v), &l)| ((l - top).exp() / norm, m, v))
            .collect())
    }

    /// Exact marginal velocity `E[α̇·x1 + β̇·x0 | x_t = x]`.
    pub fn marginal_velocity(&self, schedule: Schedule, t: f64, x: f64) -> Result<f64> {
        let c = schedule.coefficients(t)?;
        let resp = self.responsibilities(schedule, t, x)?;
        Ok(resp
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(&(r, m, v), (&mu, &s))| {
                let resid = x - m;
                let e_data = mu + c.alpha * s * s / v * resid;
                let e_noise = c.beta / v * resid;
                r * (c.alpha_dot * e_data + c.beta_dot * e_noise)
            })
            .sum())
    }

    /// Exact marginal score `∂ log p_t(x)/∂x`.
    pub fn marginal_score(&self, schedule: Schedule, t: f64, x: f64) -> Result<f64> {
        let resp = self.responsibilities(schedule, t, x)?;
        Ok(resp.iter().map(|&(r, m, v)| r * (-(x - m) / v)).sum())
    }

    pub fn data_cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&w, &m), &s)| w * standard_normal_cdf((x - m) / s))
            .sum()
    }

    /// Inverse of [`Self::data_cdf`] by bisection; `p` is clamped into `(0, 1)`.
    pub fn data_quantile(&self, p: f64) -> f64 {
        let p = p.clamp(1e-300, 1.0 - 1e-16);
        let spread = self.stds.iter().copied().fold(0.0, f64::max);
        let mut lo = self.means.iter().copied().fold(f64::INFINITY, f64::min) - 40.0 * spread;
        let mut hi = self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 40.0 * spread;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if self.data_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| w * (s * s + m * m))
            .sum::<f64>()
            - mu * mu
    }
}
