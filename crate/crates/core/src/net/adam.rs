use crate::error::{Error, Result};
use crate::net::mlp::Parameters;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Parameters,
    pub second_moment: Parameters,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dims: &[usize], lr: f64) -> Self {
        Self {
            first_moment: Parameters::zeros(dims),
            second_moment: Parameters::zeros(dims),
            step: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut Parameters, grads: &Parameters, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grads)
        || !params.same_shape(&state.first_moment)
        || !params.same_shape(&state.second_moment)
    {
        return Err(Error::Shape("adam: parameter, gradient and moment shapes differ".into()));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let correction1 = 1.0 - b1.powi(step);
    let correction2 = 1.0 - b2.powi(step);
    let lr = state.lr;
    let eps = state.eps;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
