//! ODE and SDE samplers over a uniform time grid.
//!
//! Batches are split into fixed-size shards of [`SHARD_ROWS`] rows that are
//! integrated independently (in parallel under rayon) and concatenated in
//! shard order. Each shard's Wiener increments come from its own stream, so
//! results do not depend on the thread count.

pub mod fields;

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::schedules::Schedule;

pub use fields::{ConditionalField, FnField, MixtureField, VelocityField};

pub const SHARD_ROWS: usize = 1024;
/// Latest time an SDE may integrate stochastically before the deterministic bridge to `t = 1`.
pub const SDE_MAX_END: f64 = 1.0 - 1e-3;
/// Epsilon Scaling strength `λ(t) = k·t + b`; the tuned setting from the baseline sweep.
pub const DEFAULT_EPSILON_K: f64 = 1e-4;
pub const DEFAULT_EPSILON_B: f64 = 1.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Heun,
    Sde,
    EpsilonScaledEuler,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            "sde" => Ok(Method::Sde),
            "epsilon_scaled_euler" | "epsilon-scaled-euler" | "eps" => Ok(Method::EpsilonScaledEuler),
            other => Err(Error::Config(format!("unknown sampler method {other:?}"))),
        }
    }
}

/// SDE diffusion coefficient `w̄_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diffusion {
    Constant { value: f64 },
    /// `w̄_t = scale·(1 − t)`.
    Decreasing { scale: f64 },
}

impl Diffusion {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Diffusion::Constant { value } => value,
            Diffusion::Decreasing { scale } => scale * (1.0 - t),
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Diffusion::Constant { value } => value >= 0.0 && value.is_finite(),
            Diffusion::Decreasing { scale } => scale >= 0.0 && scale.is_finite(),
        }
    }
}

impl Default for Diffusion {
    fn default() -> Self {
        Diffusion::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default)]
    pub diffusion: Diffusion,
    #[serde(default = "default_k")]
    pub epsilon_k: f64,
    #[serde(default = "default_b")]
    pub epsilon_b: f64,
    #[serde(default)]
    pub record_trajectory: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> f64 {
    DEFAULT_EPSILON_K
}
fn default_b() -> f64 {
    DEFAULT_EPSILON_B
}

impl SamplerConfig {
    pub fn new(method: Method, steps: usize) -> Self {
        Self {
            method,
            steps,
            t_start: 0.0,
            t_end: if method == Method::Sde { SDE_MAX_END } else { 1.0 },
            diffusion: Diffusion::default(),
            epsilon_k: DEFAULT_EPSILON_K,
            epsilon_b: DEFAULT_EPSILON_B,
            record_trajectory: false,
            seed: 0,
        }
    }

    /// Five-step Euler from pure noise.
    pub fn toy_euler() -> Self {
        Self::new(Method::Euler, 5)
    }

    /// Fifty Euler steps from `t = 0.05`, as used for Slow Flow envelopes.
    pub fn slowflow_default() -> Self {
        Self {
            t_start: 0.05,
            record_trajectory: true,
            ..Self::new(Method::Euler, 50)
        }
    }

    pub fn epsilon_lambda(&self, t: f64) -> f64 {
        self.epsilon_k * t + self.epsilon_b
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(0.0 <= self.t_start && self.t_start < self.t_end && self.t_end <= 1.0) {
            return Err(Error::Config(format!(
                "sampler needs 0 <= t_start < t_end <= 1, got [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        match self.method {
            Method::Sde => {
                if self.t_end > SDE_MAX_END {
                    return Err(Error::Config(format!(
                        "SDE t_end {} must be <= {SDE_MAX_END}",
                        self.t_end
                    )));
                }
                if !self.diffusion.is_valid() {
                    return Err(Error::Config("diffusion coefficient must be nonnegative".into()));
                }
            }
            Method::EpsilonScaledEuler => {
                for t in self.grid() {
                    let lambda = self.epsilon_lambda(t);
                    if !(lambda > 0.0) || !lambda.is_finite() {
                        return Err(Error::Config(format!("epsilon scaling lambda({t}) = {lambda} must be positive")));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Uniform grid of `steps + 1` times from `t_start` to `t_end`.
    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.t_start, self.t_end, self.steps)
    }
}

pub fn uniform_grid(start: f64, end: f64, steps: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=steps)
        .map(|i| start + (end - start) * (i as f64 / steps as f64))
        .collect();
    g[steps] = end;
    g
}

/// States recorded at each grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Batch>,
}

impl Trajectory {
    fn concat(parts: Vec<Trajectory>) -> Result<Trajectory> {
        let times = parts.first().map(|p| p.times.clone()).unwrap_or_default();
        let mut states = Vec::with_capacity(times.len());
        for k in 0..times.len() {
            states.push(Batch::concat(parts.iter().map(|p| p.states[k].clone()).collect())?);
        }
        Ok(Trajectory { times, states })
    }

    /// CSV rows `path_id,t,x_0,...,x_{d-1}`, grouped by path.
    pub fn to_csv(&self) -> String {
        let dim = self.states.first().map_or(0, Batch::dim);
        let rows = self.states.first().map_or(0, Batch::rows);
        let mut out = String::from("path_id,t");
        for j in 0..dim {
            let _ = write!(out, ",x_{j}");
        }
        out.push('\n');
        for p in 0..rows {
            for (t, s) in self.times.iter().zip(&self.states) {
                let _ = write!(out, "{p},{t}");
                for v in s.row(p) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Index of the recorded time closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map_or(0, |(i, _)| i)
    }
}

fn check_state(x: &Batch, step: usize, t: f64, offset: usize) -> Result<()> {
    match x.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
        None => Ok(()),
        Some(row) => Err(Error::Integration {
            step,
            t,
            path: Some(offset + row),
            detail: "non-finite state".into(),
        }),
    }
}

fn axpy(x: &mut Batch, h: f64, v: &Batch) {
    for (xi, &vi) in x.as_mut_slice().iter_mut().zip(v.as_slice()) {
        *xi += h * vi;
    }
}

/// Scale the implied noise estimate by `1/λ` and return the adjusted velocity.
///
/// With `x̂0 = (α̇x − αv)/(α̇β − αβ̇)` and the data estimate held fixed, the
/// adjusted velocity is `v + β̇·x̂0·(1/λ − 1)`, which is `v` exactly when `λ = 1`.
pub fn epsilon_scaled_velocity(schedule: Schedule, t: f64, x: &Batch, v: &Batch, lambda: f64) -> Result<Batch> {
    x.same_shape(v)?;
    let c = schedule.coefficients(t)?;
    let det = c.determinant(schedule);
    let factor = 1.0 / lambda - 1.0;
    let out = x
        .as_slice()
        .iter()
        .zip(v.as_slice())
        .map(|(&x, &v)| {
            let noise = (c.alpha_dot * x - c.alpha * v) / det;
            v + c.beta_dot * noise * factor
        })
        .collect();
    Batch::new(x.rows(), x.dim(), out)
}

/// Explicit Euler over an arbitrary increasing grid.
pub fn euler_integrate(
    field: &dyn VelocityField,
    grid: &[f64],
    mut x: Batch,
    offset: usize,
    record: bool,
) -> Result<(Batch, Option<Trajectory>)> {
    let mut traj = record.then(|| Trajectory {
        times: vec![grid[0]],
        states: vec![x.clone()],
    });
    for (i, w) in grid.windows(2).enumerate() {
        let v = field.velocity_at(&x, w[0], offset)?;
        axpy(&mut x, w[1] - w[0], &v);
        check_state(&x, i + 1, w[1], offset)?;
        if let Some(tr) = traj.as_mut() {
            tr.times.push(w[1]);
            tr.states.push(x.clone());
        }
    }
    Ok((x, traj))
}

fn heun_integrate(
    field: &dyn VelocityField,
    grid: &[f64],
    mut x: Batch,
    offset: usize,
    record: bool,
) -> Result<(Batch, Option<Trajectory>)> {
    let mut traj = record.then(|| Trajectory {
        times: vec![grid[0]],
        states: vec![x.clone()],
    });
    for (i, w) in grid.windows(2).enumerate() {
        let h = w[1] - w[0];
        let v = field.velocity_at(&x, w[0], offset)?;
        let mut predicted = x.clone();
        axpy(&mut predicted, h, &v);
        let v_next = field.velocity_at(&predicted, w[1], offset)?;
        let half = h / 2.0;
        for ((xi, &a), &b) in x.as_mut_slice().iter_mut().zip(v.as_slice()).zip(v_next.as_slice()) {
            *xi += half * (a + b);
        }
        check_state(&x, i + 1, w[1], offset)?;
        if let Some(tr) = traj.as_mut() {
            tr.times.push(w[1]);
            tr.states.push(x.clone());
        }
    }
    Ok((x, traj))
}

fn epsilon_integrate(
    field: &dyn VelocityField,
    schedule: Schedule,
    config: &SamplerConfig,
    mut x: Batch,
    offset: usize,
) -> Result<(Batch, Option<Trajectory>)> {
    let grid = config.grid();
    let mut traj = config.record_trajectory.then(|| Trajectory {
        times: vec![grid[0]],
        states: vec![x.clone()],
    });
    for (i, w) in grid.windows(2).enumerate() {
        let v = field.velocity_at(&x, w[0], offset)?;
        let v = epsilon_scaled_velocity(schedule, w[0], &x, &v, config.epsilon_lambda(w[0]))?;
        axpy(&mut x, w[1] - w[0], &v);
        check_state(&x, i + 1, w[1], offset)?;
        if let Some(tr) = traj.as_mut() {
            tr.times.push(w[1]);
            tr.states.push(x.clone());
        }
    }
    Ok((x, traj))
}

/// Grid of an SDE run: the uniform stochastic grid plus the deterministic bridge to `t = 1`.
pub fn sde_grid(config: &SamplerConfig) -> Vec<f64> {
    let mut grid = config.grid();
    if config.t_end < 1.0 {
        grid.push(1.0);
    }
    grid
}

fn sde_integrate(
    field: &dyn VelocityField,
    schedule: Schedule,
    config: &SamplerConfig,
    mut x: Batch,
    offset: usize,
    rng: &mut impl Rng,
) -> Result<(Batch, Option<Trajectory>)> {
    let grid = sde_grid(config);
    let stochastic_steps = config.steps;
    let mut traj = config.record_trajectory.then(|| Trajectory {
        times: vec![grid[0]],
        states: vec![x.clone()],
    });
    for (i, w) in grid.windows(2).enumerate() {
        let (t, h) = (w[0], w[1] - w[0]);
        let v = field.velocity_at(&x, t, offset)?;
        let diffusion = if i < stochastic_steps { config.diffusion.at(t) } else { 0.0 };
        if diffusion == 0.0 {
            axpy(&mut x, h, &v);
        } else {
            let score = schedule
                .velocity_to_score(t, x.as_slice(), v.as_slice())
                .map_err(|e| match e {
                    Error::Singularity { .. } => Error::Integration {
                        step: i + 1,
                        t,
                        path: None,
                        detail: e.to_string(),
                    },
                    other => other,
                })?;
            let noise_scale = (diffusion * h).sqrt();
            // Forward-time drift u + ½·w̄·s keeps the marginals of the probability-flow ODE.
            for ((xi, &vi), &si) in x.as_mut_slice().iter_mut().zip(v.as_slice()).zip(&score) {
                let z: f64 = rng.sample(StandardNormal);
                *xi += h * (vi + 0.5 * diffusion * si) + noise_scale * z;
            }
        }
        check_state(&x, i + 1, w[1], offset)?;
        if let Some(tr) = traj.as_mut() {
            tr.times.push(w[1]);
            tr.states.push(x.clone());
        }
    }
    Ok((x, traj))
}

fn shard_starts(rows: usize) -> Vec<usize> {
    (0..rows.max(1)).step_by(SHARD_ROWS).collect()
}

fn run_sharded<F>(x0: &Batch, run: F) -> Result<(Batch, Option<Trajectory>)>
where
    F: Fn(usize, usize, Batch) -> Result<(Batch, Option<Trajectory>)> + Sync,
{
    let starts = shard_starts(x0.rows());
    let results: Vec<Result<(Batch, Option<Trajectory>)>> = starts
        .par_iter()
        .enumerate()
        .map(|(shard, &start)| {
            let end = (start + SHARD_ROWS).min(x0.rows());
            run(shard, start, x0.slice_rows(start, end))
        })
        .collect();
    let mut states = Vec::with_capacity(results.len());
    let mut trajs = Vec::with_capacity(results.len());
    for r in results {
        let (x, tr) = r?;
        states.push(x);
        if let Some(tr) = tr {
            trajs.push(tr);
        }
    }
    let out = Batch::concat(states)?;
    let traj = if trajs.is_empty() { None } else { Some(Trajectory::concat(trajs)?) };
    Ok((out, traj))
}

fn check_inputs(field: &dyn VelocityField, config: &SamplerConfig, x0: &Batch, method: Method) -> Result<()> {
    if config.method != method {
        return Err(Error::Config(format!(
            "sampler configured for {:?}, called as {method:?}",
            config.method
        )));
    }
    config.validate()?;
    if x0.dim() != field.data_dim() {
        return Err(Error::Shape(format!(
            "initial states have dim {}, field has {}",
            x0.dim(),
            field.data_dim()
        )));
    }
    Ok(())
}

pub fn euler_sample(
    field: &dyn VelocityField,
    config: &SamplerConfig,
    x0: &Batch,
) -> Result<(Batch, Option<Trajectory>)> {
    check_inputs(field, config, x0, Method::Euler)?;
    let grid = config.grid();
    run_sharded(x0, |_, offset, x| euler_integrate(field, &grid, x, offset, config.record_trajectory))
}

pub fn heun_sample(
    field: &dyn VelocityField,
    config: &SamplerConfig,
    x0: &Batch,
) -> Result<(Batch, Option<Trajectory>)> {
    check_inputs(field, config, x0, Method::Heun)?;
    let grid = config.grid();
    run_sharded(x0, |_, offset, x| heun_integrate(field, &grid, x, offset, config.record_trajectory))
}

/// Euler–Maruyama for `dx = [u + ½·w̄_t·s(x, t)]dt + √w̄_t dW`, then one Euler step to `t = 1`.
pub fn sde_sample(
    field: &dyn VelocityField,
    schedule: Schedule,
    config: &SamplerConfig,
    x0: &Batch,
) -> Result<(Batch, Option<Trajectory>)> {
    check_inputs(field, config, x0, Method::Sde)?;
    run_sharded(x0, |shard, offset, x| {
        let mut rng = stream(config.seed, Purpose::SdeNoise, shard as u64);
        sde_integrate(field, schedule, config, x, offset, &mut rng)
    })
}

pub fn epsilon_scaled_sample(
    field: &dyn VelocityField,
    schedule: Schedule,
    config: &SamplerConfig,
    x0: &Batch,
) -> Result<(Batch, Option<Trajectory>)> {
    check_inputs(field, config, x0, Method::EpsilonScaledEuler)?;
    run_sharded(x0, |_, offset, x| epsilon_integrate(field, schedule, config, x, offset))
}

/// Dispatch on `config.method`.
pub fn sample(
    field: &dyn VelocityField,
    schedule: Schedule,
    config: &SamplerConfig,
    x0: &Batch,
) -> Result<(Batch, Option<Trajectory>)> {
    match config.method {
        Method::Euler => euler_sample(field, config, x0),
        Method::Heun => heun_sample(field, config, x0),
        Method::Sde => sde_sample(field, schedule, config, x0),
        Method::EpsilonScaledEuler => epsilon_scaled_sample(field, schedule, config, x0),
    }
}

/// Standard normal initial states drawn from the sampling stream of `seed`.
pub fn initial_noise(seed: u64, rows: usize, dim: usize) -> Batch {
    let mut rng = stream(seed, Purpose::SampleNoise, 0);
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Batch::new(rows, dim, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Network;
    use crate::training::GaussianMixtureSpec;

    fn decay() -> FnField<impl Fn(&[f64], f64) -> Vec<f64> + Sync> {
        FnField::new(1, |x: &[f64], _t| vec![-x[0]])
    }

    fn cfg(method: Method, steps: usize) -> SamplerConfig {
        SamplerConfig::new(method, steps)
    }

    fn decay_error(method: Method, steps: usize) -> f64 {
        let (x, _) = sample(&decay(), Schedule::Linear, &cfg(method, steps), &Batch::from_scalars(vec![1.0])).unwrap();
        (x.as_slice()[0] - (-1f64).exp()).abs()
    }

    #[test]
    fn euler_constant_field_reaches_data() {
        let (x0, x1) = (0.7, -1.9);
        let field = FnField::new(1, move |_x: &[f64], _t| vec![x1 - x0]);
        for steps in [1, 7, 50] {
            let (x, _) = euler_sample(&field, &cfg(Method::Euler, steps), &Batch::from_scalars(vec![x0])).unwrap();
            assert!((x.as_slice()[0] - x1).abs() <= 1e-12, "{steps}");
        }
    }

    #[test]
    fn euler_hand_step() {
        let (x, _) = euler_sample(&decay(), &cfg(Method::Euler, 1), &Batch::from_scalars(vec![2.0])).unwrap();
        assert_eq!(x.as_slice(), &[0.0]);
    }

    #[test]
    fn empirical_orders() {
        for (method, order, tol) in [(Method::Euler, 1.0, 0.1), (Method::Heun, 2.0, 0.2)] {
            for pair in [10, 20, 40, 80].windows(2) {
                let p = (decay_error(method, pair[0]) / decay_error(method, pair[1])).log2();
                assert!((p - order).abs() <= tol, "{method:?} {pair:?}: {p}");
            }
        }
        let ratio = decay_error(Method::Euler, 10) / decay_error(Method::Euler, 20);
        assert!((ratio - 2.0).abs() <= 0.1, "{ratio}");
    }

    #[test]
    fn heun_hand_step_and_constant_field() {
        let mut c = cfg(Method::Heun, 1);
        c.t_end = 0.5;
        let (x, _) = heun_sample(&decay(), &c, &Batch::from_scalars(vec![1.0])).unwrap();
        assert!((x.as_slice()[0] - 0.625).abs() < 1e-15);

        let field = FnField::new(1, |_x: &[f64], _t| vec![0.37]);
        let x0 = Batch::from_scalars(vec![0.1, -2.0]);
        let (e, _) = euler_sample(&field, &cfg(Method::Euler, 9), &x0).unwrap();
        let (h, _) = heun_sample(&field, &cfg(Method::Heun, 9), &x0).unwrap();
        assert_eq!(e, h);
    }

    #[test]
    fn heun_exact_for_linear_in_time() {
        let ratio = decay_error(Method::Heun, 10) / decay_error(Method::Heun, 20);
        assert!((ratio - 4.0).abs() <= 0.4, "{ratio}");
        let field = FnField::new(1, |_x: &[f64], t| vec![0.5 - 3.0 * t]);
        let (x, _) = heun_sample(&field, &cfg(Method::Heun, 3), &Batch::from_scalars(vec![1.0])).unwrap();
        assert!((x.as_slice()[0] - (1.0 + 0.5 - 1.5)).abs() <= 1e-12);
    }

    #[test]
    fn reductions_are_bit_exact() {
        let net = Network::init(&[2, 16, 16, 1], 3).unwrap();
        let x0 = initial_noise(4, 3000, 1);
        for schedule in [Schedule::Linear, Schedule::Gvp] {
            let mut eps = cfg(Method::EpsilonScaledEuler, 20);
            eps.epsilon_k = 0.0;
            eps.epsilon_b = 1.0;
            let (a, _) = epsilon_scaled_sample(&net, schedule, &eps, &x0).unwrap();
            let (b, _) = euler_sample(&net, &cfg(Method::Euler, 20), &x0).unwrap();
            assert_eq!(a, b);

            let mut sde = cfg(Method::Sde, 20);
            sde.diffusion = Diffusion::Constant { value: 0.0 };
            let (s, _) = sde_sample(&net, schedule, &sde, &x0).unwrap();
            let (e, _) = run_sharded(&x0, |_, off, x| euler_integrate(&net, &sde_grid(&sde), x, off, false)).unwrap();
            assert_eq!(s, e);
        }
    }

    #[test]
    fn epsilon_scaling_hand_step() {
        // x = x0 = 1 at t = 0 under the linear schedule, exact velocity x1 − x0 with x1 = 3:
        // x̂0 = 1, λ = 2, so v' = 2 + (−1)(1)(1/2 − 1) = 2.5 and x after a step of 0.5 is 2.25.
        let field = FnField::new(1, |_x: &[f64], _t| vec![2.0]);
        let mut c = cfg(Method::EpsilonScaledEuler, 1);
        c.t_end = 0.5;
        c.epsilon_k = 0.0;
        c.epsilon_b = 2.0;
        let (x, _) = epsilon_scaled_sample(&field, Schedule::Linear, &c, &Batch::from_scalars(vec![1.0])).unwrap();
        assert!((x.as_slice()[0] - 2.25).abs() < 1e-15);
        // Equivalent: data estimate fixed at 3, noise estimate halved to 0.5: v' = 3 − 0.5.
        let v = epsilon_scaled_velocity(Schedule::Linear, 0.0, &Batch::from_scalars(vec![1.0]), &Batch::from_scalars(vec![2.0]), 2.0)
            .unwrap();
        assert_eq!(v.as_slice(), &[2.5]);
    }

    #[test]
    fn epsilon_lambda_must_be_positive() {
        let mut c = cfg(Method::EpsilonScaledEuler, 4);
        c.epsilon_k = -2.0;
        c.epsilon_b = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = cfg(Method::EpsilonScaledEuler, 4);
        assert_eq!((c.epsilon_k, c.epsilon_b), (1e-4, 1.005));
    }

    #[test]
    fn sde_rejects_late_end_and_is_deterministic() {
        let mut c = cfg(Method::Sde, 10);
        c.t_end = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(Method::Sde, 10);
        c.diffusion = Diffusion::Constant { value: 0.5 };
        c.seed = 3;
        let field = MixtureField { spec: GaussianMixtureSpec::toy(), schedule: Schedule::Linear };
        let x0 = initial_noise(1, 2500, 1);
        let (a, _) = sde_sample(&field, Schedule::Linear, &c, &x0).unwrap();
        let (b, _) = sde_sample(&field, Schedule::Linear, &c, &x0).unwrap();
        assert_eq!(a, b);
        c.seed = 4;
        let (d, _) = sde_sample(&field, Schedule::Linear, &c, &x0).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn sde_gaussian_terminal_moments() {
        // Exact velocity and score for N(μ, σ²) data; the SDE must keep the marginals.
        let (mu, sigma) = (1.5, 0.4);
        let spec = GaussianMixtureSpec::gaussian(mu, sigma);
        let field = MixtureField { spec, schedule: Schedule::Linear };
        let mut c = cfg(Method::Sde, 400);
        c.diffusion = Diffusion::Constant { value: 1.0 };
        c.seed = 11;
        let n = 100_000;
        let x0 = initial_noise(12, n, 1);
        let (x, _) = sde_sample(&field, Schedule::Linear, &c, &x0).unwrap();
        let xs = x.as_slice();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() <= 3.0 * se, "mean {mean}");
        assert!((var.sqrt() - sigma).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn trajectory_records_grid() {
        let mut c = cfg(Method::Euler, 4);
        c.record_trajectory = true;
        let (_, traj) = euler_sample(&decay(), &c, &Batch::from_scalars(vec![1.0, 2.0])).unwrap();
        let traj = traj.unwrap();
        assert_eq!(traj.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(traj.states.len(), 5);
        assert!(traj.times.windows(2).all(|w| w[0] < w[1]));
        let csv = traj.to_csv();
        assert!(csv.starts_with("path_id,t,x_0\n0,0,1\n0,0.25,0.75\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 5);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let field = FnField::new(1, |_x: &[f64], t| vec![if t > 0.4 { f64::INFINITY } else { 0.0 }]);
        let err = euler_sample(&field, &cfg(Method::Euler, 4), &Batch::from_scalars(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 3, path: Some(0), .. }), "{err}");
        let field = FnField::new(1, |x: &[f64], _t| vec![if x[0] == 1500.0 { f64::NAN } else { 0.0 }]);
        let x0 = Batch::from_scalars((0..2000).map(f64::from).collect());
        let err = euler_sample(&field, &cfg(Method::Euler, 4), &x0).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 1, path: Some(1500), .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(cfg(Method::Euler, 0).validate().is_err());
        let mut c = cfg(Method::Euler, 3);
        c.t_start = 0.6;
        c.t_end = 0.5;
        assert!(c.validate().is_err());
        let field = decay();
        assert!(matches!(
            heun_sample(&field, &cfg(Method::Euler, 3), &Batch::from_scalars(vec![1.0])),
            Err(Error::Config(_))
        ));
    }
}
