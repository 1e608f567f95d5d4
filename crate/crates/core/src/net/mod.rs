//! Velocity network, optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{Layer, Network, Parameters};

/// Hidden widths of the toy velocity network: four hidden layers of 256 units.
pub const TOY_HIDDEN: [usize; 4] = [256, 256, 256, 256];

/// Layer dims for a `data_dim`-dimensional problem with the toy hidden stack.
pub fn toy_dims(data_dim: usize) -> Vec<usize> {
    let mut dims = vec![data_dim + 1];
    dims.extend_from_slice(&TOY_HIDDEN);
    dims.push(data_dim);
    dims
}
