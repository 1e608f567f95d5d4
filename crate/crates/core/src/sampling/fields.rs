//! Velocity fields the samplers can integrate.

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::schedules::Schedule;
use crate::training::GaussianMixtureSpec;

/// A time-dependent velocity field evaluated on a batch of states at a common time.
pub trait VelocityField: Sync {
    fn data_dim(&self) -> usize;

    /// Velocity for `x`, whose rows are global rows `offset..offset + x.rows()`.
    ///
    /// Fields that do not depend on row identity ignore `offset`.
    fn velocity_at(&self, x: &Batch, t: f64, offset: usize) -> Result<Batch>;

    fn velocity(&self, x: &Batch, t: f64) -> Result<Batch> {
        self.velocity_at(x, t, 0)
    }
}

impl VelocityField for Network {
    fn data_dim(&self) -> usize {
        Network::data_dim(self)
    }

    fn velocity_at(&self, x: &Batch, t: f64, _offset: usize) -> Result<Batch> {
        let times = vec![t; x.rows()];
        self.forward(x, &times)
    }
}

/// Row-wise closure field `f(x_row, t) -> v_row`.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn velocity_at(&self, x: &Batch, t: f64, _offset: usize) -> Result<Batch> {
        let mut out = Vec::with_capacity(x.rows() * self.dim);
        for row in x.iter_rows() {
            let v = (self.f)(row, t);
            if v.len() != self.dim {
                return Err(Error::Shape(format!("field returned {} values, expected {}", v.len(), self.dim)));
            }
            out.extend(v);
        }
        Batch::new(x.rows(), self.dim, out)
    }
}

/// Exact marginal velocity of a Gaussian-mixture dataset.
pub struct MixtureField {
    pub spec: GaussianMixtureSpec,
    pub schedule: Schedule,
}

impl VelocityField for MixtureField {
    fn data_dim(&self) -> usize {
        1
    }

    fn velocity_at(&self, x: &Batch, t: f64, _offset: usize) -> Result<Batch> {
        let v = x
            .as_slice()
            .iter()
            .map(|&xi| self.spec.marginal_velocity(self.schedule, t, xi))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Batch::from_scalars(v))
    }
}

/// Exact conditional velocity of fixed `(x0, x1)` pairs, one pair per row.
pub struct ConditionalField {
    pub schedule: Schedule,
    pub noise: Batch,
    pub data: Batch,
}

impl VelocityField for ConditionalField {
    fn data_dim(&self) -> usize {
        self.data.dim()
    }

    fn velocity_at(&self, x: &Batch, t: f64, offset: usize) -> Result<Batch> {
        if offset + x.rows() > self.data.rows() {
            return Err(Error::Shape("conditional field has fewer pairs than rows".into()));
        }
        let mut out = Vec::with_capacity(x.rows() * x.dim());
        for i in 0..x.rows() {
            out.extend(
                self.schedule
                    .target_velocity(t, self.noise.row(offset + i), self.data.row(offset + i))?,
            );
        }
        Batch::new(x.rows(), x.dim(), out)
    }
}
