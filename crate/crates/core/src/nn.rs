//! Dense feed-forward network with hand-written reverse mode, plus Adam.
//!
//! Weights are stored row-major (`out x in`). `forward` records a [`Tape`] of
//! layer inputs and hidden pre-activations; `backward` consumes it to produce
//! exact vector-Jacobian products for the parameters and the input. The
//! `*_batch` variants do the same for row-stacked inputs through GEMM.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            activation: Activation::Silu,
        }
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    #[inline]
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.fan_in).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

/// Learnable parameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub architecture: Architecture,
    pub layers: Vec<Layer>,
}

/// Parameter gradients, shape-congruent with an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub layers: Vec<Layer>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

/// Cached activations of a batched forward pass, rows stacked row-major.
#[derive(Debug, Clone)]
pub struct BatchTape {
    rows: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl BatchTape {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// `C ← A·B + beta·C` on strided row-major views; `(m, k, n)` are the
/// dimensions of `A (m×k)` and `B (k×n)`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], isize, isize),
    (b, rsb, csb): (&[f64], isize, isize),
    beta: f64,
    (c, rsc, csc): (&mut [f64], isize, isize),
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A too short");
    assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B too short");
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl Mlp {
    pub fn zeros(architecture: Architecture) -> Self {
        let layers = architecture.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect();
        Self { architecture, layers }
    }

    /// Kaiming-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init(seed: u64, architecture: Architecture) -> Result<Self> {
        architecture.validate()?;
        let mut rng = rng::stream(seed);
        let mut net = Self::zeros(architecture);
        for layer in &mut net.layers {
            let std = (2.0 / layer.fan_in as f64).sqrt();
            for w in &mut layer.weights {
                let z: f64 = rng.sample(StandardNormal);
                *w = std * z;
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input
    }

    pub fn output_dim(&self) -> usize {
        self.architecture.output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    /// Output only, without recording a tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let act = self.architecture.activation;
        let last = self.layers.len() - 1;
        let mut x = input.to_vec();
        let mut z = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.affine(&x, &mut z);
            if k < last {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            std::mem::swap(&mut x, &mut z);
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let act = self.architecture.activation;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.fan_out);
            layer.affine(&x, &mut z);
            inputs.push(x);
            if k < last {
                x = z.iter().map(|&v| act.apply(v)).collect();
                pre.push(z);
            } else {
                x = z;
            }
        }
        Ok((x, Tape { inputs, pre }))
    }

    /// Reverse pass; returns fresh parameter gradients and the input cotangent.
    pub fn backward(&self, tape: &Tape, output_cotangent: &[f64]) -> Result<(GradientBuffer, Vec<f64>)> {
        let mut grads = GradientBuffer::zeros_like(self);
        let input_cot = self.backward_into(tape, output_cotangent, 1.0, &mut grads)?;
        Ok((grads, input_cot))
    }

    /// Reverse pass accumulating `weight * dL/dθ` into `grads`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        output_cotangent: &[f64],
        weight: f64,
        grads: &mut GradientBuffer,
    ) -> Result<Vec<f64>> {
        if tape.inputs.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("tape or gradient buffer does not match network".into()));
        }
        if output_cotangent.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: output_cotangent.len(),
            });
        }
        let act = self.architecture.activation;
        let mut g: Vec<f64> = output_cotangent.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x = &tape.inputs[k];
            let gl = &mut grads.layers[k];
            let mut dx = vec![0.0; layer.fan_in];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let wgo = weight * go;
                gl.bias[o] += wgo;
                let row = o * layer.fan_in..(o + 1) * layer.fan_in;
                for ((gw, w), (xi, dxi)) in gl.weights[row.clone()]
                    .iter_mut()
                    .zip(&layer.weights[row])
                    .zip(x.iter().zip(dx.iter_mut()))
                {
                    *gw += wgo * xi;
                    *dxi += w * go;
                }
            }
            if k > 0 {
                for (d, &z) in dx.iter_mut().zip(&tape.pre[k - 1]) {
                    *d *= act.derivative(z);
                }
            }
            g = dx;
        }
        Ok(g)
    }

    /// Batched [`Mlp::eval`] over `rows` row-stacked inputs.
    pub fn eval_batch(&self, inputs: &[f64], rows: usize) -> Result<Vec<f64>> {
        Ok(self.run_batch(inputs, rows, false)?.0)
    }

    /// Batched [`Mlp::forward`] over `rows` row-stacked inputs.
    pub fn forward_batch(&self, inputs: &[f64], rows: usize) -> Result<(Vec<f64>, BatchTape)> {
        self.run_batch(inputs, rows, true)
    }

    fn run_batch(&self, inputs: &[f64], rows: usize, record: bool) -> Result<(Vec<f64>, BatchTape)> {
        if inputs.len() != rows * self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: rows * self.input_dim(),
                got: inputs.len(),
            });
        }
        let act = self.architecture.activation;
        let last = self.layers.len() - 1;
        let mut tape = BatchTape {
            rows,
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut x = inputs.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z: Vec<f64> = layer.bias.iter().copied().cycle().take(rows * layer.fan_out).collect();
            // Z = X·Wᵀ + B
            gemm(
                (rows, layer.fan_in, layer.fan_out),
                (&x, layer.fan_in as isize, 1),
                (&layer.weights, 1, layer.fan_in as isize),
                1.0,
                (&mut z, layer.fan_out as isize, 1),
            );
            let next = if k < last {
                z.iter().map(|&v| act.apply(v)).collect()
            } else {
                std::mem::take(&mut z)
            };
            if record {
                tape.inputs.push(std::mem::replace(&mut x, next));
                if k < last {
                    tape.pre.push(z);
                }
            } else {
                x = next;
            }
        }
        Ok((x, tape))
    }

    /// Batched reverse pass: accumulates the row-summed parameter gradients
    /// into `grads` and returns the row-stacked input cotangents. Per-row
    /// weights belong in `output_cotangents`.
    pub fn backward_batch_into(
        &self,
        tape: &BatchTape,
        output_cotangents: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<Vec<f64>> {
        if tape.inputs.len() != self.layers.len() || !grads.congruent(self) {
            return Err(Error::ShapeMismatch("tape or gradient buffer does not match network".into()));
        }
        let rows = tape.rows;
        if output_cotangents.len() != rows * self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: rows * self.output_dim(),
                got: output_cotangents.len(),
            });
        }
        let act = self.architecture.activation;
        let mut g = output_cotangents.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let gl = &mut grads.layers[k];
            for row in g.chunks_exact(fo) {
                for (b, go) in gl.bias.iter_mut().zip(row) {
                    *b += go;
                }
            }
            // dW += Gᵀ·X
            gemm(
                (fo, rows, fi),
                (&g, 1, fo as isize),
                (&tape.inputs[k], fi as isize, 1),
                1.0,
                (&mut gl.weights, fi as isize, 1),
            );
            // dX = G·W
            let mut dx = vec![0.0; rows * fi];
            gemm((rows, fo, fi), (&g, fo as isize, 1), (&layer.weights, fi as isize, 1), 0.0, (&mut dx, fi as isize, 1));
            if k > 0 {
                for (d, &z) in dx.iter_mut().zip(&tape.pre[k - 1]) {
                    *d *= act.derivative(z);
                }
            }
            g = dx;
        }
        Ok(g)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        ckpt.into_network()
    }
}

pub const CHECKPOINT_FORMAT: &str = "geoedit-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container for network parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub network: Mlp,
}

impl Checkpoint {
    pub fn into_network(self) -> Result<Mlp> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let net = self.network;
        let dims = net.architecture.layer_dims();
        let congruent = dims.len() == net.layers.len()
            && dims.iter().zip(&net.layers).all(|(&(i, o), l)| {
                l.fan_in == i && l.fan_out == o && l.weights.len() == i * o && l.bias.len() == o
            });
        if !congruent {
            return Err(Error::ShapeMismatch("checkpoint layers do not match architecture".into()));
        }
        Ok(net)
    }
}

impl GradientBuffer {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Layer::zeros(l.fan_in, l.fan_out)).collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn non_finite_count(&self) -> usize {
        self.values().filter(|v| !v.is_finite()).count()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub(crate) fn congruent(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: GradientBuffer,
    v: GradientBuffer,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: GradientBuffer::zeros_like(net),
            v: GradientBuffer::zeros_like(net),
        }
    }

    pub fn first_moment(&self) -> &GradientBuffer {
        &self.m
    }

    pub fn second_moment(&self) -> &GradientBuffer {
        &self.v
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave both the
/// parameters and the optimizer state untouched.
pub fn adam_step(params: &mut Mlp, grads: &GradientBuffer, state: &mut AdamState) -> Result<()> {
    if !grads.congruent(params) || !state.m.congruent(params) {
        return Err(Error::ShapeMismatch("adam buffers do not match parameters".into()));
    }
    let bad = grads.non_finite_count();
    if bad > 0 {
        return Err(Error::NonFiniteGradient { count: bad });
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .params_mut()
        .zip(grads.values())
        .zip(state.m.values_mut())
        .zip(state.v.values_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
