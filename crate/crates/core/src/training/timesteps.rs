//! Training-timestep and slowed-timestep distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepDistribution {
    /// `t ~ U[0, 1)`.
    Uniform01,
    /// `t ~ Beta(2, 1)`, density `2t`.
    Beta21,
}

/// Distribution of the slowed timestep `m_t` given `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowedDistribution {
    /// `m_t ~ U[(1 − γ)t, t]`.
    #[default]
    Band,
    /// `m_t ~ U[0, 1)`, ignoring `t` (ablation).
    Uniform01,
}

/// Inverse-CDF draw from `Beta(2, 1)`: `t = √u`.
pub fn sample_t_beta(rng: &mut impl Rng) -> f64 {
    beta21_from_uniform(rng.random())
}

pub fn beta21_from_uniform(u: f64) -> f64 {
    u.sqrt()
}

pub fn sample_t(rng: &mut impl Rng, dist: TimestepDistribution) -> f64 {
    match dist {
        TimestepDistribution::Uniform01 => rng.random(),
        TimestepDistribution::Beta21 => sample_t_beta(rng),
    }
}

/// `m_t ~ U[(1 − γ)t, t]`; never exceeds `t`.
pub fn sample_slowed_timestep(rng: &mut impl Rng, t: f64, gamma: f64) -> f64 {
    slowed_from_uniform(t, gamma, rng.random())
}

pub fn slowed_from_uniform(t: f64, gamma: f64, u: f64) -> f64 {
    ((1.0 - gamma) * t + gamma * t * u).min(t)
}

pub fn sample_slowed(rng: &mut impl Rng, t: f64, gamma: f64, dist: SlowedDistribution) -> f64 {
    match dist {
        SlowedDistribution::Band => sample_slowed_timestep(rng, t, gamma),
        SlowedDistribution::Uniform01 => rng.random(),
    }
}
