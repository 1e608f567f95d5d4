//! Fully connected velocity network `u_θ(x, t)`.
//!
//! The scalar time is appended to the state, so the first layer sees
//! `data_dim + 1` inputs and the last layer emits `data_dim` outputs. Hidden
//! layers use Swish (`z·σ(z)`), the output layer is affine.
//!
//! Dense products go through `matrixmultiply::dgemm`; no thread pool is used, so
//! every product is evaluated in a fixed order and results are reproducible.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// One affine layer. `weight` is row-major with shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter-shaped storage, used for weights, gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<Layer>,
}

impl Parameters {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    weight: vec![0.0; w[0] * w[1]],
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        }
    }

    /// Flat iteration order: layer by layer, weights before biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Parameters) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.len() == b.weight.len() && a.bias.len() == b.bias.len())
    }

    pub fn get(&self, index: usize) -> f64 {
        *self.iter().nth(index).expect("parameter index in range")
    }

    pub fn get_mut(&mut self, index: usize) -> &mut f64 {
        self.iter_mut().nth(index).expect("parameter index in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    dims: Vec<usize>,
    params: Parameters,
}

pub(crate) fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "network needs at least an input and an output layer, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("layer widths must be positive: {dims:?}")));
    }
    if dims[0] != dims[dims.len() - 1] + 1 {
        return Err(Error::Config(format!(
            "input width must be output width + 1 (state plus time), got {dims:?}"
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

/// Analytic derivative `σ(z) + z·σ(z)(1 − σ(z))`.
#[inline]
pub fn swish_derivative(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

/// `c = a · bᵀ (+ c when accumulate)`, with `a: m×k`, `b: n×k`, `c: m×n`, all row-major.
fn matmul_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe row-major layouts in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵀ · b`, with `a: k×m`, `b: k×n`, `c: m×n`.
fn matmul_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · b`, with `a: m×k`, `b: k×n`, `c: m×n`.
fn matmul_a_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Activations kept for the backward pass.
struct Tape {
    batch: usize,
    /// Input to each layer (`inputs[0]` is `[x; t]`).
    inputs: Vec<Vec<f64>>,
    /// Swish derivative at each hidden pre-activation.
    hidden_slope: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Network {
    /// Fan-in scaled uniform initialization: `W ~ U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut params = Parameters::zeros(dims);
        for (layer, w) in params.layers.iter_mut().zip(dims.windows(2)) {
            let bound = (6.0 / w[0] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in &mut layer.weight {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn from_parameters(dims: &[usize], params: Parameters) -> Result<Self> {
        validate_dims(dims)?;
        let expected = Parameters::zeros(dims);
        if !expected.same_shape(&params) {
            return Err(Error::Shape(format!(
                "parameters do not match layer dims {dims:?}"
            )));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                iteration: 0,
                detail: "non-finite network parameter".into(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    fn assemble_input(&self, x: &Batch, t: &[f64]) -> Result<Vec<f64>> {
        let d = self.data_dim();
        if x.dim() != d {
            return Err(Error::Shape(format!(
                "network expects {d}-dimensional states, got {}",
                x.dim()
            )));
        }
        if x.rows() != t.len() {
            return Err(Error::Shape(format!(
                "{} states but {} times",
                x.rows(),
                t.len()
            )));
        }
        let mut input = Vec::with_capacity(x.rows() * (d + 1));
        for (row, &ti) in x.iter_rows().zip(t) {
            input.extend_from_slice(row);
            input.push(ti);
        }
        Ok(input)
    }

    fn run(&self, x: &Batch, t: &[f64], keep_tape: bool) -> Result<Tape> {
        let batch = x.rows();
        let mut current = self.assemble_input(x, t)?;
        let n_layers = self.params.layers.len();
        let mut inputs = Vec::new();
        let mut hidden_slope = Vec::new();
        for (l, layer) in self.params.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let mut z = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                z.extend_from_slice(&layer.bias);
            }
            matmul_a_bt(batch, fan_in, fan_out, &current, &layer.weight, &mut z, true);
            if l + 1 == n_layers {
                if keep_tape {
                    inputs.push(current);
                }
                current = z;
            } else if keep_tape {
                let mut slope = z;
                let mut a = Vec::with_capacity(slope.len());
                for v in &mut slope {
                    let s = sigmoid(*v);
                    a.push(*v * s);
                    *v = s + *v * s * (1.0 - s);
                }
                inputs.push(std::mem::replace(&mut current, a));
                hidden_slope.push(slope);
            } else {
                current = z.iter().map(|&v| swish(v)).collect();
            }
        }
        if !current.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                iteration: 0,
                detail: "non-finite network output".into(),
            });
        }
        Ok(Tape {
            batch,
            inputs,
            hidden_slope,
            output: current,
        })
    }

    /// `u_θ(x, t)` for a batch of states with per-row times.
    pub fn forward(&self, x: &Batch, t: &[f64]) -> Result<Batch> {
        let tape = self.run(x, t, false)?;
        Batch::new(tape.batch, self.data_dim(), tape.output)
    }

    /// Vector-Jacobian product: given `∂L/∂output`, returns parameter and state gradients.
    fn backward(&self, tape: &Tape, upstream: Vec<f64>) -> (Parameters, Vec<f64>) {
        let batch = tape.batch;
        let mut grads = Parameters::zeros(&self.dims);
        let mut delta = upstream;
        for l in (0..self.params.layers.len()).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let g = &mut grads.layers[l];
            matmul_at_b(fan_out, batch, fan_in, &delta, &tape.inputs[l], &mut g.weight);
            for row in delta.chunks_exact(fan_out) {
                for (b, d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            let mut prev = vec![0.0; batch * fan_in];
            matmul_a_b(batch, fan_out, fan_in, &delta, &self.params.layers[l].weight, &mut prev);
            if l > 0 {
                for (p, &slope) in prev.iter_mut().zip(&tape.hidden_slope[l - 1]) {
                    *p *= slope;
                }
            }
            delta = prev;
        }
        (grads, delta)
    }

    /// Mean squared error over batch and output dimensions, and its exact gradient.
    pub fn loss_and_grad(&self, x: &Batch, t: &[f64], targets: &Batch) -> Result<(f64, Parameters)> {
        let tape = self.run(x, t, true)?;
        if targets.rows() != tape.batch || targets.dim() != self.data_dim() {
            return Err(Error::Shape(format!(
                "targets are {}x{}, network output is {}x{}",
                targets.rows(),
                targets.dim(),
                tape.batch,
                self.data_dim()
            )));
        }
        let count = tape.output.len() as f64;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(tape.output.len());
        for (&o, &y) in tape.output.iter().zip(targets.as_slice()) {
            let r = o - y;
            loss += r * r;
            upstream.push(2.0 * r / count);
        }
        loss /= count;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                iteration: 0,
                detail: format!("non-finite loss {loss}"),
            });
        }
        let (grads, _) = self.backward(&tape, upstream);
        Ok((loss, grads))
    }

    /// `∂(Σ w ⊙ u_θ)/∂x` for upstream weights `w`, one row per state.
    pub fn input_gradient(&self, x: &Batch, t: &[f64], upstream: &Batch) -> Result<Batch> {
        let tape = self.run(x, t, true)?;
        upstream.same_shape(&Batch::zeros(tape.batch, self.data_dim()))?;
        let (_, dinput) = self.backward(&tape, upstream.as_slice().to_vec());
        let d = self.data_dim();
        let mut out = Vec::with_capacity(tape.batch * d);
        for row in dinput.chunks_exact(d + 1) {
            out.extend_from_slice(&row[..d]);
        }
        Batch::new(tape.batch, d, out)
    }

    /// Draw-free helper for tests and tooling: a copy with every parameter set from `f(index)`.
    pub fn map_params(&self, mut f: impl FnMut(usize, f64) -> f64) -> Network {
        let mut out = self.clone();
        for (i, p) in out.params.iter_mut().enumerate() {
            *p = f(i, *p);
        }
        out
    }
}

/// Random batch of states and times, used by gradient checks.
pub fn random_batch(rng: &mut impl Rng, rows: usize, dim: usize) -> (Batch, Vec<f64>, Batch) {
    use rand_distr::StandardNormal;
    let x: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    let t: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    (
        Batch::new(rows, dim, x).expect("shape"),
        t,
        Batch::new(rows, dim, y).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(weight: Vec<f64>, bias: Vec<f64>) -> Network {
        Network::from_parameters(&[2, 1], Parameters { layers: vec![Layer { weight, bias }] }).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let dims = [2, 256, 256, 256, 256, 1];
        assert_eq!(Network::init(&dims, 7).unwrap(), Network::init(&dims, 7).unwrap());
        assert_ne!(Network::init(&dims, 7).unwrap(), Network::init(&dims, 8).unwrap());

        let net = Network::init(&[2, 4, 1], 0).unwrap();
        for (layer, w) in net.params().layers.iter().zip([2usize, 4]) {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            let bound = (6.0 / w as f64).sqrt();
            assert!(layer.weight.iter().all(|v| v.abs() <= bound));
            assert!(layer.weight.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn invalid_dims_rejected() {
        for dims in [&[][..], &[2][..], &[2, 0, 1][..], &[3, 4, 1][..]] {
            assert!(matches!(Network::init(dims, 0), Err(Error::Config(_))), "{dims:?}");
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::init(&[3, 8, 8, 2], 1).unwrap().map_params(|_, _| 0.0);
        let x = Batch::new(2, 2, vec![1.0, -2.0, 5.0, 0.5]).unwrap();
        let out = net.forward(&x, &[0.1, 0.9]).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_on_state_coordinate() {
        let net = single_layer(vec![1.0, 0.0], vec![0.0]);
        let out = net.forward(&Batch::from_scalars(vec![3.0]), &[0.9]).unwrap();
        assert_eq!(out.as_slice(), &[3.0]);
    }

    #[test]
    fn two_layer_hand_computed() {
        // dims [2, 2, 1]; hidden = swish(W1·[x; t] + b1), out = W2·hidden + b2
        let params = Parameters {
            layers: vec![
                Layer { weight: vec![0.5, -1.0, 2.0, 0.25], bias: vec![0.1, -0.2] },
                Layer { weight: vec![1.5, -0.75], bias: vec![0.3] },
            ],
        };
        let net = Network::from_parameters(&[2, 2, 1], params).unwrap();
        let (x, t) = (0.8, 0.4);
        let z1 = 0.5 * x - 1.0 * t + 0.1;
        let z2 = 2.0 * x + 0.25 * t - 0.2;
        let sw = |z: f64| z / (1.0 + (-z).exp());
        let expected = 1.5 * sw(z1) - 0.75 * sw(z2) + 0.3;
        let out = net.forward(&Batch::from_scalars(vec![x]), &[t]).unwrap();
        assert!((out.as_slice()[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn forward_shape_errors() {
        let net = Network::init(&[2, 4, 1], 0).unwrap();
        let x = Batch::from_scalars(vec![1.0, 2.0]);
        assert!(matches!(net.forward(&x, &[0.5]), Err(Error::Shape(_))));
        let x2 = Batch::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(net.forward(&x2, &[0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let net = Network::init(&[2, 16, 16, 1], 3).unwrap();
        let x = Batch::from_scalars(vec![-1.0, 0.3, 2.0]);
        let t = [0.1, 0.5, 0.9];
        let y = net.forward(&x, &t).unwrap();
        let (loss, grads) = net.loss_and_grad(&x, &t, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_hand_derivative() {
        // u(x) = w·x with input x_in = 1 and target 0: loss = w², dL/dw = 2w.
        let w = 0.7;
        let net = single_layer(vec![w, 0.0], vec![0.0]);
        let (loss, grads) = net
            .loss_and_grad(&Batch::from_scalars(vec![1.0]), &[0.0], &Batch::from_scalars(vec![0.0]))
            .unwrap();
        assert!((loss - w * w).abs() < 1e-15);
        assert!((grads.layers[0].weight[0] - 2.0 * w).abs() < 1e-15);
        assert_eq!(grads.layers[0].weight[1], 0.0);
        assert!((grads.layers[0].bias[0] - 2.0 * w).abs() < 1e-15);
    }

    #[test]
    fn swish_autodiff_matches_analytic() {
        assert_eq!(swish(0.0), 0.0);
        // dims [2, 1, 1] with unit weights: u(x, t) = swish(x), so ∂u/∂x = swish'(x).
        let params = Parameters {
            layers: vec![
                Layer { weight: vec![1.0, 0.0], bias: vec![0.0] },
                Layer { weight: vec![1.0], bias: vec![0.0] },
            ],
        };
        let net = Network::from_parameters(&[2, 1, 1], params).unwrap();
        for &x in &[-8.0, -2.5, -0.3, 0.0, 0.4, 1.7, 6.0] {
            let g = net
                .input_gradient(&Batch::from_scalars(vec![x]), &[0.5], &Batch::from_scalars(vec![1.0]))
                .unwrap()
                .as_slice()[0];
            let s = 1.0 / (1.0 + (-x as f64).exp());
            let analytic = s + x * s * (1.0 - s);
            assert!((g - analytic).abs() <= 1e-10, "x={x}: {g} vs {analytic}");
        }
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let net = single_layer(vec![1.0, 0.0], vec![0.0]);
        let x = Batch::from_scalars(vec![f64::INFINITY]);
        assert!(matches!(net.forward(&x, &[0.0]), Err(Error::Numeric { .. })));
    }
}
