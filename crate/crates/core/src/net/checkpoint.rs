//! Checkpoint persistence as a single JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::adam::AdamState;
use crate::net::mlp::{Layer, Network, Parameters};
use crate::schedules::Schedule;
use crate::training::TrainVariant;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub adam: AdamState,
    pub schedule: Schedule,
    /// Total optimizer updates applied to `network` across all runs.
    pub iteration: u64,
    pub rng_seed: u64,
    pub train_variant: TrainVariant,
}

#[derive(Serialize, Deserialize)]
struct MomentsFile {
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AdamFile {
    m: MomentsFile,
    v: MomentsFile,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    schedule_kind: Schedule,
    train_variant: TrainVariant,
    iteration: u64,
    rng_seed: u64,
    layer_dims: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    adam: AdamFile,
}

fn to_nested(params: &Parameters, dims: &[usize]) -> MomentsFile {
    let weights = params
        .layers
        .iter()
        .zip(dims.windows(2))
        .map(|(l, w)| l.weight.chunks_exact(w[0]).map(<[f64]>::to_vec).collect())
        .collect();
    let biases = params.layers.iter().map(|l| l.bias.clone()).collect();
    MomentsFile { weights, biases }
}

fn from_nested(file: MomentsFile, dims: &[usize]) -> Result<Parameters> {
    if file.weights.len() != dims.len() - 1 || file.biases.len() != dims.len() - 1 {
        return Err(Error::Shape(format!(
            "checkpoint has {} weight and {} bias layers for dims {dims:?}",
            file.weights.len(),
            file.biases.len()
        )));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (l, (rows, bias)) in file.weights.into_iter().zip(file.biases).enumerate() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        if rows.len() != fan_out || rows.iter().any(|r| r.len() != fan_in) || bias.len() != fan_out {
            return Err(Error::Shape(format!(
                "layer {l} does not match {fan_out}x{fan_in}"
            )));
        }
        layers.push(Layer {
            weight: rows.into_iter().flatten().collect(),
            bias,
        });
    }
    Ok(Parameters { layers })
}

impl Checkpoint {
    pub fn fresh(network: Network, lr: f64, schedule: Schedule, seed: u64, variant: TrainVariant) -> Self {
        let adam = AdamState::new(network.dims(), lr);
        Self {
            network,
            adam,
            schedule,
            iteration: 0,
            rng_seed: seed,
            train_variant: variant,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let dims = self.network.dims();
        let net = to_nested(self.network.params(), dims);
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            schedule_kind: self.schedule,
            train_variant: self.train_variant,
            iteration: self.iteration,
            rng_seed: self.rng_seed,
            layer_dims: dims.to_vec(),
            weights: net.weights,
            biases: net.biases,
            adam: AdamFile {
                m: to_nested(&self.adam.first_moment, dims),
                v: to_nested(&self.adam.second_moment, dims),
                step: self.adam.step,
                lr: self.adam.lr,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
        };
        serde_json::to_string(&file).map_err(|e| Error::json("serializing checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::json("parsing checkpoint", e))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                file.format_version
            )));
        }
        let dims = file.layer_dims;
        let params = from_nested(
            MomentsFile {
                weights: file.weights,
                biases: file.biases,
            },
            &dims,
        )?;
        let network = Network::from_parameters(&dims, params)?;
        let adam = AdamState {
            first_moment: from_nested(file.adam.m, &dims)?,
            second_moment: from_nested(file.adam.v, &dims)?,
            step: file.adam.step,
            lr: file.adam.lr,
            beta1: file.adam.beta1,
            beta2: file.adam.beta2,
            eps: file.adam.eps,
        };
        Ok(Self {
            network,
            adam,
            schedule: file.schedule_kind,
            iteration: file.iteration,
            rng_seed: file.rng_seed,
            train_variant: file.train_variant,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
