//! Single optimizer steps for the standard, MixFlow and Input Perturbation objectives.
//!
//! Random draws within a step always happen in the same order: the noise block
//! `x0` (rows × dim normals), then one training timestep per row, then the
//! variant's extra draw (one slowed timestep per row, or a rows × dim normal
//! block for the perturbation). This fixed order is what makes the γ = 0 and
//! strength = 0 reductions bit-identical to the standard step.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::net::{adam_step, Checkpoint};
use crate::schedules::Schedule;
use crate::training::timesteps::{sample_slowed, sample_t, SlowedDistribution, TimestepDistribution};
use crate::training::TrainVariant;

/// Network inputs, time conditions and regression targets for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub inputs: Batch,
    pub times: Vec<f64>,
    pub targets: Batch,
}

/// How a step builds its training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Standard {
        t_distribution: TimestepDistribution,
    },
    MixFlow {
        gamma: f64,
        t_distribution: TimestepDistribution,
        slowed: SlowedDistribution,
    },
    InputPerturbation {
        strength: f64,
    },
}

impl StepRule {
    pub fn variant(&self) -> TrainVariant {
        match self {
            StepRule::Standard { .. } => TrainVariant::Standard,
            StepRule::MixFlow { .. } => TrainVariant::MixFlow,
            StepRule::InputPerturbation { .. } => TrainVariant::InputPerturbation,
        }
    }
}

fn draw_noise(rng: &mut impl Rng, rows: usize, dim: usize) -> Batch {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Batch::new(rows, dim, data).expect("shape")
}

/// `α_s·x1 + β_s·x0` row by row, with per-row times `s`.
fn interpolate_rows(schedule: Schedule, s: &[f64], x0: &Batch, x1: &Batch) -> Batch {
    let dim = x1.dim();
    let mut out = Vec::with_capacity(x1.rows() * dim);
    for ((&si, n), d) in s.iter().zip(x0.iter_rows()).zip(x1.iter_rows()) {
        let c = schedule.coefficients_unchecked(si);
        out.extend(n.iter().zip(d).map(|(&n, &d)| c.alpha * d + c.beta * n));
    }
    Batch::new(x1.rows(), dim, out).expect("shape")
}

fn velocity_rows(schedule: Schedule, t: &[f64], x0: &Batch, x1: &Batch) -> Batch {
    let dim = x1.dim();
    let mut out = Vec::with_capacity(x1.rows() * dim);
    for ((&ti, n), d) in t.iter().zip(x0.iter_rows()).zip(x1.iter_rows()) {
        let c = schedule.coefficients_unchecked(ti);
        out.extend(n.iter().zip(d).map(|(&n, &d)| c.alpha_dot * d + c.beta_dot * n));
    }
    Batch::new(x1.rows(), dim, out).expect("shape")
}

/// MixFlow operands from explicit draws: input `x_{m_t}`, condition `t`, target `u*(x_t, t)`.
pub fn mixflow_operands(schedule: Schedule, x0: &Batch, x1: &Batch, t: &[f64], m: &[f64]) -> Result<TrainingBatch> {
    x0.same_shape(x1)?;
    if t.len() != x1.rows() || m.len() != x1.rows() {
        return Err(Error::Shape("one timestep and one slowed timestep per row".into()));
    }
    for &v in t.iter().chain(m) {
        schedule.coefficients(v)?;
    }
    Ok(TrainingBatch {
        inputs: interpolate_rows(schedule, m, x0, x1),
        times: t.to_vec(),
        targets: velocity_rows(schedule, t, x0, x1),
    })
}

pub fn standard_batch(
    schedule: Schedule,
    x1: &Batch,
    rng: &mut impl Rng,
    t_distribution: TimestepDistribution,
) -> TrainingBatch {
    let x0 = draw_noise(rng, x1.rows(), x1.dim());
    let t: Vec<f64> = (0..x1.rows()).map(|_| sample_t(rng, t_distribution)).collect();
    TrainingBatch {
        inputs: interpolate_rows(schedule, &t, &x0, x1),
        targets: velocity_rows(schedule, &t, &x0, x1),
        times: t,
    }
}

pub fn mixflow_batch(
    schedule: Schedule,
    x1: &Batch,
    rng: &mut impl Rng,
    gamma: f64,
    t_distribution: TimestepDistribution,
    slowed: SlowedDistribution,
) -> TrainingBatch {
    let x0 = draw_noise(rng, x1.rows(), x1.dim());
    let t: Vec<f64> = (0..x1.rows()).map(|_| sample_t(rng, t_distribution)).collect();
    let m: Vec<f64> = t.iter().map(|&ti| sample_slowed(rng, ti, gamma, slowed)).collect();
    TrainingBatch {
        inputs: interpolate_rows(schedule, &m, &x0, x1),
        targets: velocity_rows(schedule, &t, &x0, x1),
        times: t,
    }
}

/// Input `interpolate(t, x0 + strength·ξ, x1)`, target from the unperturbed noise, `t ~ U[0, 1)`.
pub fn input_perturbation_batch(schedule: Schedule, x1: &Batch, rng: &mut impl Rng, strength: f64) -> TrainingBatch {
    let x0 = draw_noise(rng, x1.rows(), x1.dim());
    let t: Vec<f64> = (0..x1.rows())
        .map(|_| sample_t(rng, TimestepDistribution::Uniform01))
        .collect();
    let xi = draw_noise(rng, x1.rows(), x1.dim());
    let mut perturbed = x0.clone();
    for (p, &e) in perturbed.as_mut_slice().iter_mut().zip(xi.as_slice()) {
        *p += strength * e;
    }
    TrainingBatch {
        inputs: interpolate_rows(schedule, &t, &perturbed, x1),
        targets: velocity_rows(schedule, &t, &x0, x1),
        times: t,
    }
}

pub fn build_batch(schedule: Schedule, x1: &Batch, rng: &mut impl Rng, rule: &StepRule) -> TrainingBatch {
    match *rule {
        StepRule::Standard { t_distribution } => standard_batch(schedule, x1, rng, t_distribution),
        StepRule::MixFlow {
            gamma,
            t_distribution,
            slowed,
        } => mixflow_batch(schedule, x1, rng, gamma, t_distribution, slowed),
        StepRule::InputPerturbation { strength } => input_perturbation_batch(schedule, x1, rng, strength),
    }
}

/// Loss, gradient and one Adam update. On error the checkpoint is untouched.
pub fn apply_update(checkpoint: &mut Checkpoint, batch: &TrainingBatch, variant: TrainVariant) -> Result<f64> {
    let iteration = checkpoint.iteration + 1;
    let with_iteration = |e: Error| match e {
        Error::Numeric { detail, .. } => Error::Numeric { iteration, detail },
        other => other,
    };
    let (loss, grads) = checkpoint
        .network
        .loss_and_grad(&batch.inputs, &batch.times, &batch.targets)
        .map_err(with_iteration)?;
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::Numeric {
            iteration,
            detail: "non-finite gradient".into(),
        });
    }
    let mut params = checkpoint.network.params().clone();
    let mut adam = checkpoint.adam.clone();
    adam_step(&mut params, &grads, &mut adam)?;
    if !params.iter().all(|p| p.is_finite()) {
        return Err(Error::Numeric {
            iteration,
            detail: "non-finite parameter after update".into(),
        });
    }
    *checkpoint.network.params_mut() = params;
    checkpoint.adam = adam;
    checkpoint.iteration = iteration;
    checkpoint.train_variant = variant;
    Ok(loss)
}

fn check_rule(rule: &StepRule) -> Result<()> {
    match *rule {
        StepRule::MixFlow { gamma, .. } if !(0.0..=1.0).contains(&gamma) => {
            Err(Error::Config(format!("gamma {gamma} outside [0, 1]")))
        }
        StepRule::InputPerturbation { strength } if !(strength >= 0.0) || !strength.is_finite() => {
            Err(Error::Config(format!("perturbation strength {strength} must be nonnegative")))
        }
        _ => Ok(()),
    }
}

pub fn train_step(checkpoint: &mut Checkpoint, x1: &Batch, rng: &mut impl Rng, rule: &StepRule) -> Result<f64> {
    check_rule(rule)?;
    if x1.dim() != checkpoint.network.data_dim() {
        return Err(Error::Shape(format!(
            "data has dim {}, network expects {}",
            x1.dim(),
            checkpoint.network.data_dim()
        )));
    }
    let batch = build_batch(checkpoint.schedule, x1, rng, rule);
    apply_update(checkpoint, &batch, rule.variant())
}

/// Slowed-interpolation mixture step with `t ~ Beta(2, 1)` and `m_t ~ U[(1 − γ)t, t]`.
pub fn mixflow_train_step(checkpoint: &mut Checkpoint, x1: &Batch, rng: &mut impl Rng, gamma: f64) -> Result<f64> {
    train_step(
        checkpoint,
        x1,
        rng,
        &StepRule::MixFlow {
            gamma,
            t_distribution: TimestepDistribution::Beta21,
            slowed: SlowedDistribution::Band,
        },
    )
}

pub fn standard_train_step(
    checkpoint: &mut Checkpoint,
    x1: &Batch,
    rng: &mut impl Rng,
    t_distribution: TimestepDistribution,
) -> Result<f64> {
    train_step(checkpoint, x1, rng, &StepRule::Standard { t_distribution })
}

pub fn input_perturbation_train_step(
    checkpoint: &mut Checkpoint,
    x1: &Batch,
    rng: &mut impl Rng,
    strength: f64,
) -> Result<f64> {
    train_step(checkpoint, x1, rng, &StepRule::InputPerturbation { strength })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Network;
    use crate::rng::{stream, Purpose};
    use crate::training::GaussianMixtureSpec;

    fn small_checkpoint(schedule: Schedule) -> Checkpoint {
        let net = Network::init(&[2, 16, 16, 1], 5).unwrap();
        Checkpoint::fresh(net, 1e-3, schedule, 5, TrainVariant::Standard)
    }

    fn data(rows: usize, seed: u64) -> Batch {
        GaussianMixtureSpec::toy().sample_batch(&mut stream(seed, Purpose::Eval, 0), rows)
    }

    #[test]
    fn gamma_zero_matches_standard_beta_step() {
        for schedule in [Schedule::Linear, Schedule::Gvp] {
            let x1 = data(64, 1);
            let (mut a, mut b) = (small_checkpoint(schedule), small_checkpoint(schedule));
            for i in 0..3 {
                let la = mixflow_train_step(&mut a, &x1, &mut stream(9, Purpose::Train, i), 0.0).unwrap();
                let lb = standard_train_step(&mut b, &x1, &mut stream(9, Purpose::Train, i), TimestepDistribution::Beta21)
                    .unwrap();
                assert_eq!(la.to_bits(), lb.to_bits());
            }
            assert_eq!(a.network, b.network);
        }
    }

    #[test]
    fn linear_target_is_data_minus_noise() {
        let x1 = data(32, 2);
        let mut rng = stream(3, Purpose::Train, 0);
        let batch = mixflow_batch(Schedule::Linear, &x1, &mut rng, 1.0, TimestepDistribution::Beta21, SlowedDistribution::Band);
        // Replay the noise block to recover x0.
        let x0 = draw_noise(&mut stream(3, Purpose::Train, 0), 32, 1);
        for i in 0..32 {
            assert_eq!(batch.targets.row(i)[0], x1.row(i)[0] - x0.row(i)[0]);
        }
    }

    #[test]
    fn hand_worked_mixflow_element() {
        let x0 = Batch::from_scalars(vec![1.0]);
        let x1 = Batch::from_scalars(vec![-1.0]);
        let b = mixflow_operands(Schedule::Linear, &x0, &x1, &[0.64], &[0.4]).unwrap();
        assert!((b.inputs.as_slice()[0] - 0.2).abs() < 1e-15);
        assert_eq!(b.targets.as_slice()[0], -2.0);
        assert_eq!(b.times, vec![0.64]);
    }

    #[test]
    fn zero_network_zero_gap_has_zero_loss() {
        let mut ckpt = small_checkpoint(Schedule::Linear);
        ckpt.network = ckpt.network.map_params(|_, _| 0.0);
        let x0 = Batch::from_scalars(vec![0.3, -1.2]);
        let b = mixflow_operands(Schedule::Linear, &x0, &x0, &[0.2, 0.9], &[0.2, 0.9]).unwrap();
        let (loss, _) = ckpt.network.loss_and_grad(&b.inputs, &b.times, &b.targets).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_strength_matches_standard_uniform_step() {
        let x1 = data(64, 4);
        let (mut a, mut b) = (small_checkpoint(Schedule::Linear), small_checkpoint(Schedule::Linear));
        for i in 0..3 {
            let la = input_perturbation_train_step(&mut a, &x1, &mut stream(2, Purpose::Train, i), 0.0).unwrap();
            let lb = standard_train_step(&mut b, &x1, &mut stream(2, Purpose::Train, i), TimestepDistribution::Uniform01)
                .unwrap();
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(a.network, b.network);
        assert_eq!(a.train_variant, TrainVariant::InputPerturbation);
    }

    #[test]
    fn perturbed_input_variance() {
        // Fixed t: Var(input) = α²·Var(x1) + β²(1 + s²).
        let spec = GaussianMixtureSpec::gaussian(0.5, 0.7);
        let (t, s, n) = (0.3, 0.15, 400_000);
        let mut rng = stream(8, Purpose::Train, 0);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let x1: f64 = spec.sample(&mut rng);
            let x0: f64 = rng.sample(StandardNormal);
            let xi: f64 = rng.sample(StandardNormal);
            values.push(t * x1 + (1.0 - t) * (x0 + s * xi));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = t * t * 0.49 + (1.0 - t) * (1.0 - t) * (1.0 + s * s);
        assert!((var - expected).abs() < 0.01 * expected, "{var} vs {expected}");

        // The batch builder produces the same law (t varies; check the conditional moment at t ≈ 0.3).
        let x1 = spec.sample_batch(&mut stream(9, Purpose::Eval, 0), 400_000);
        let b = input_perturbation_batch(Schedule::Linear, &x1, &mut stream(9, Purpose::Train, 0), s);
        let near: Vec<f64> = b
            .times
            .iter()
            .zip(b.inputs.as_slice())
            .filter(|(t, _)| (**t - 0.3).abs() < 0.01)
            .map(|(_, &x)| x)
            .collect();
        let m = near.iter().sum::<f64>() / near.len() as f64;
        let v = near.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (near.len() - 1) as f64;
        assert!((v - expected).abs() < 0.06 * expected, "{v} vs {expected} over {}", near.len());
    }

    #[test]
    fn gaussian_data_loss_floor() {
        // With exact marginal velocity the standard objective bottoms out at
        // E_t[σ²/(t²σ² + (1 − t)²)] for N(μ, σ²) data under the linear schedule.
        let (mu, sigma) = (1.0, 0.5);
        let spec = GaussianMixtureSpec::gaussian(mu, sigma);
        let rows = 400_000;
        let x1 = spec.sample_batch(&mut stream(10, Purpose::Eval, 0), rows);
        let b = standard_batch(Schedule::Linear, &x1, &mut stream(10, Purpose::Train, 0), TimestepDistribution::Uniform01);
        let loss = b
            .inputs
            .as_slice()
            .iter()
            .zip(&b.times)
            .zip(b.targets.as_slice())
            .map(|((&x, &t), &y)| (spec.marginal_velocity(Schedule::Linear, t, x).unwrap() - y).powi(2))
            .sum::<f64>()
            / rows as f64;
        let s2 = sigma * sigma;
        let n = 100_000;
        let floor = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) / n as f64;
                s2 / (t * t * s2 + (1.0 - t) * (1.0 - t))
            })
            .sum::<f64>()
            / n as f64;
        assert!(floor > 0.1);
        assert!((loss - floor).abs() < 0.02 * floor, "{loss} vs {floor}");
    }

    #[test]
    fn invalid_rules_rejected_without_mutation() {
        let x1 = data(8, 5);
        let mut ckpt = small_checkpoint(Schedule::Linear);
        let before = ckpt.clone();
        assert!(mixflow_train_step(&mut ckpt, &x1, &mut stream(0, Purpose::Train, 0), 1.5).is_err());
        assert!(input_perturbation_train_step(&mut ckpt, &x1, &mut stream(0, Purpose::Train, 0), -0.1).is_err());
        assert_eq!(ckpt, before);
    }

    #[test]
    fn non_finite_loss_keeps_checkpoint() {
        let mut ckpt = small_checkpoint(Schedule::Linear);
        let before = ckpt.clone();
        let x1 = Batch::from_scalars(vec![f64::NAN, 1.0]);
        let err = standard_train_step(&mut ckpt, &x1, &mut stream(0, Purpose::Train, 0), TimestepDistribution::Uniform01)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { iteration: 1, .. }), "{err}");
        assert_eq!(ckpt, before);
    }
}
