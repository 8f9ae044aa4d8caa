//! Classifier head with a hand-written backward pass, SGD with momentum and a
//! cosine learning-rate schedule.
//!
//! The head is either a single affine map `D -> K` or
//! `affine -> tanh -> affine` with a hidden width `H`.
//!
//! # Checkpoint format
//!
//! Little-endian binary:
//!
//! ```text
//! magic        8 bytes  "LPSHEAD\0"
//! version      u32      1
//! input_dim    u64
//! hidden       u64      0 for the linear head
//! output_dim   u64
//! per layer, input to output:
//!   weight     f64 * (fan_in * fan_out), row-major fan_in x fan_out
//!   bias       f64 * fan_out
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LPSHEAD\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Option<usize>,
    pub output_dim: usize,
}

impl Architecture {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: None,
            output_dim,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: Some(hidden),
            output_dim,
        }
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.hidden {
            None => vec![(self.input_dim, self.output_dim)],
            Some(h) => vec![(self.input_dim, h), (h, self.output_dim)],
        }
    }
}

/// One affine layer: `y = x W + b`, with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameters (or parameter-shaped gradients / buffers) of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
}

pub type Gradients = Model;

impl Model {
    pub fn zeros(arch: Architecture) -> Self {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Self { arch, layers }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut model = Self::zeros(arch);
        for layer in &mut model.layers {
            let std = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        }
        model
    }

    pub fn from_layers(arch: Architecture, layers: Vec<Layer>) -> Result<Self> {
        let shapes = arch.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "{} layers for an architecture with {}",
                layers.len(),
                shapes.len()
            )));
        }
        for (layer, (i, o)) in layers.iter().zip(shapes) {
            if layer.weight.dim() != (i, o) || layer.bias.len() != o {
                return Err(Error::Shape(format!(
                    "layer {:?}/{} does not match {i}x{o}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    fn affine(layer: &Layer, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&layer.weight) + &layer.bias
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(match self.layers.as_slice() {
            [out] => Self::affine(out, x),
            [hidden, out] => {
                let h = Self::affine(hidden, x).mapv(f64::tanh);
                Self::affine(out, h.view())
            }
            _ => unreachable!("architectures have one or two layers"),
        })
    }

    /// Gradient of `sum(grad_logits * forward(x))` with respect to every parameter.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        grad_logits: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        self.check_input(x)?;
        if grad_logits.dim() != (x.nrows(), self.arch.output_dim) {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match {} samples x {} classes",
                grad_logits.dim(),
                x.nrows(),
                self.arch.output_dim
            )));
        }
        let layers = match self.layers.as_slice() {
            [_] => vec![Layer {
                weight: x.t().dot(&grad_logits),
                bias: grad_logits.sum_axis(Axis(0)),
            }],
            [hidden, out] => {
                let h = Self::affine(hidden, x).mapv(f64::tanh);
                let out_grad = Layer {
                    weight: h.t().dot(&grad_logits),
                    bias: grad_logits.sum_axis(Axis(0)),
                };
                let mut pre = grad_logits.dot(&out.weight.t());
                pre.zip_mut_with(&h, |g, &a| *g *= 1.0 - a * a);
                let hidden_grad = Layer {
                    weight: x.t().dot(&pre),
                    bias: pre.sum_axis(Axis(0)),
                };
                vec![hidden_grad, out_grad]
            }
            _ => unreachable!("architectures have one or two layers"),
        };
        Ok(Model {
            arch: self.arch,
            layers,
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Model) {
        assert_eq!(self.arch, other.arch, "architectures differ");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        let mut model = Self::zeros(arch);
        if flat.len() != model.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                model.num_params()
            )));
        }
        let mut pos = 0;
        for layer in &mut model.layers {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = flat[pos];
                pos += 1;
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch.input_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.arch.hidden.unwrap_or(0) as u64).to_le_bytes());
        out.extend_from_slice(&(self.arch.output_dim as u64).to_le_bytes());
        for v in self.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidInput(format!("checkpoint: {msg}"));
        if bytes.len() < 36 || &bytes[..8] != MAGIC {
            return Err(bad("missing header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let read_u64 =
            |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
        let input_dim = read_u64(12);
        let hidden = read_u64(20);
        let output_dim = read_u64(28);
        if input_dim == 0 || output_dim == 0 {
            return Err(bad("zero-sized architecture"));
        }
        let arch = Architecture {
            input_dim,
            hidden: (hidden > 0).then_some(hidden),
            output_dim,
        };
        let body = &bytes[36..];
        if !body.len().is_multiple_of(8) {
            return Err(bad("truncated parameter block"));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(arch, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `lr0 * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let progress = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// SGD with classic momentum: `v <- mu v + g + wd theta`, `theta <- theta - lr(t) v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Model,
    total_steps: usize,
    step: usize,
}

impl Sgd {
    pub fn new(config: SgdConfig, arch: Architecture, total_steps: usize) -> Self {
        Self {
            config,
            velocity: Model::zeros(arch),
            total_steps,
            step: 0,
        }
    }

    pub fn velocity(&self) -> &Model {
        &self.velocity
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.config.lr0)
    }

    pub fn step(&mut self, params: &mut Model, grads: &Gradients) {
        let lr = self.current_lr();
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, g), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity.layers)
        {
            ndarray::Zip::from(&mut v.weight)
                .and(&g.weight)
                .and(&p.weight)
                .for_each(|v, &g, &p| *v = momentum * *v + g + weight_decay * p);
            ndarray::Zip::from(&mut v.bias)
                .and(&g.bias)
                .and(&p.bias)
                .for_each(|v, &g, &p| *v = momentum * *v + g + weight_decay * p);
            p.weight.scaled_add(-lr, &v.weight);
            p.bias.scaled_add(-lr, &v.bias);
        }
        self.step += 1;
    }
}
