//! Interpolation paths between noise (`t = 0`) and data (`t = 1`).
//!
//! A schedule produces `x_t = α_t·x1 + β_t·x0`. Its time derivative is the
//! regression target of velocity networks, and the pair `(α, β)` together with
//! their derivatives is enough to convert a velocity into a noise estimate or a
//! score.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `β_t` below this value makes the score conversion singular.
pub const SCORE_BETA_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `α_t = t`, `β_t = 1 − t` (flow matching).
    Linear,
    /// `α_t = sin(πt/2)`, `β_t = cos(πt/2)` (generalized variance preserving).
    Gvp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
}

impl Coefficients {
    /// `α̇β − αβ̇`, the determinant of the (data, noise) → (state, velocity) map.
    pub fn determinant(&self, schedule: Schedule) -> f64 {
        match schedule {
            Schedule::Linear => 1.0,
            // Constant; recomputing it cancels badly near the endpoints.
            Schedule::Gvp => FRAC_PI_2,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_pair(x0: &[f64], x1: &[f64]) -> Result<()> {
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!(
            "noise has {} entries, data has {}",
            x0.len(),
            x1.len()
        )));
    }
    Ok(())
}

impl Schedule {
    pub fn coefficients(self, t: f64) -> Result<Coefficients> {
        check_time(t)?;
        Ok(self.coefficients_unchecked(t))
    }

    /// Coefficients without the domain check, for hot loops that validated `t` already.
    pub(crate) fn coefficients_unchecked(self, t: f64) -> Coefficients {
        match self {
            Schedule::Linear => Coefficients {
                alpha: t,
                beta: 1.0 - t,
                alpha_dot: 1.0,
                beta_dot: -1.0,
            },
            Schedule::Gvp => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                Coefficients {
                    alpha: s,
                    beta: c,
                    alpha_dot: FRAC_PI_2 * c,
                    beta_dot: -FRAC_PI_2 * s,
                }
            }
        }
    }

    /// `α_t·x1 + β_t·x0`.
    pub fn interpolate(self, t: f64, x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        check_pair(x0, x1)?;
        let c = self.coefficients(t)?;
        Ok(x0
            .iter()
            .zip(x1)
            .map(|(&n, &d)| c.alpha * d + c.beta * n)
            .collect())
    }

    /// Ground-truth conditional velocity `α̇_t·x1 + β̇_t·x0`.
    pub fn target_velocity(self, t: f64, x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        check_pair(x0, x1)?;
        let c = self.coefficients(t)?;
        Ok(x0
            .iter()
            .zip(x1)
            .map(|(&n, &d)| c.alpha_dot * d + c.beta_dot * n)
            .collect())
    }

    /// Noise estimate implied by a velocity: `x̂0 = (α̇x − αv)/(α̇β − αβ̇)`.
    pub fn velocity_to_noise(self, t: f64, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_pair(x, v)?;
        let c = self.coefficients(t)?;
        let det = c.determinant(self);
        Ok(x.iter()
            .zip(v)
            .map(|(&x, &v)| (c.alpha_dot * x - c.alpha * v) / det)
            .collect())
    }

    /// Data estimate implied by a velocity: `x̂1 = (βv − β̇x)/(α̇β − αβ̇)`.
    pub fn velocity_to_data(self, t: f64, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_pair(x, v)?;
        let c = self.coefficients(t)?;
        let det = c.determinant(self);
        Ok(x.iter()
            .zip(v)
            .map(|(&x, &v)| (c.beta * v - c.beta_dot * x) / det)
            .collect())
    }

    /// Score `−x̂0/β_t` consistent with the velocity field.
    pub fn velocity_to_score(self, t: f64, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let beta = self.coefficients(t)?.beta;
        if beta <= SCORE_BETA_TOLERANCE {
            return Err(Error::Singularity { t, beta });
        }
        let mut noise = self.velocity_to_noise(t, x, v)?;
        for n in &mut noise {
            *n = -*n / beta;
        }
        Ok(noise)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Gvp => "gvp",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "gvp" => Ok(Schedule::Gvp),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?} (expected \"linear\" or \"gvp\")"
            ))),
        }
    }
}
