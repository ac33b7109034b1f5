//! Trainable networks. Every model keeps its parameter values as constant
//! tensors; a forward pass takes the parameters explicitly so callers can
//! pass either those constants or leaves registered on a [`Tape`].

mod batchnorm;
mod checkpoint;
mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use batchnorm::BatchNormLite;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use optim::{lr_schedule, Adam};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Batch-normalisation behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Normalise with batch statistics and update the running estimates.
    TrainClean,
    /// Normalise with the running estimates and leave them untouched.
    TrainFrozenStats,
    Eval,
}

/// A classifier producing per-row logits over the last axis.
pub trait Model: Clone + Send {
    fn classes(&self) -> usize;

    fn params(&self) -> &[Tensor];

    fn params_mut(&mut self) -> &mut [Tensor];

    fn param_names(&self) -> Vec<String>;

    fn logits(&mut self, tape: &mut Tape, params: &[Tensor], x: &Tensor, mode: BnMode) -> Result<Tensor>;

    /// Non-trainable state (batch-norm running statistics), if any.
    fn buffers(&self) -> Vec<&BatchNormLite> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut BatchNormLite> {
        Vec::new()
    }

    /// Class probabilities.
    fn forward(&mut self, tape: &mut Tape, params: &[Tensor], x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let z = self.logits(tape, params, x, mode)?;
        tape.softmax(&z)
    }

    /// Evaluation-mode probabilities with the model's own parameters.
    fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let params = self.params().to_vec();
        let mut tape = Tape::new();
        self.forward(&mut tape, &params, x, BnMode::Eval)
    }

    /// Named parameters followed by named running statistics.
    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self
            .param_names()
            .into_iter()
            .zip(self.params().iter().cloned())
            .collect();
        for (i, bn) in self.buffers().into_iter().enumerate() {
            let c = bn.channels();
            out.push((
                format!("bn{i}.running_mean"),
                Tensor::new(vec![c], bn.running_mean().to_vec()).expect("length c"),
            ));
            out.push((
                format!("bn{i}.running_var"),
                Tensor::new(vec![c], bn.running_var().to_vec()).expect("length c"),
            ));
        }
        out
    }

    /// Inverse of [`Model::state`]; names and shapes must match exactly.
    fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state();
        if state.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                state.len()
            )));
        }
        for ((name, t), (want, cur)) in state.iter().zip(&expected) {
            if name != want || t.shape() != cur.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        let n = self.params().len();
        for (p, (_, t)) in self.params_mut().iter_mut().zip(state) {
            *p = t.detach();
        }
        for (i, bn) in self.buffers_mut().into_iter().enumerate() {
            let mean = state[n + 2 * i].1.to_vec();
            let var = state[n + 2 * i + 1].1.to_vec();
            bn.set_running(mean, var)?;
        }
        Ok(())
    }
}

fn check_params(params: &[Tensor], expected: usize) -> Result<()> {
    if params.len() != expected {
        return Err(Error::invalid(format!(
            "model takes {expected} parameter tensors, got {}",
            params.len()
        )));
    }
    Ok(())
}

fn check_input(x: &Tensor, rank: usize, features: usize, what: &str) -> Result<()> {
    if x.rank() != rank || x.shape()[rank - 1] != features {
        return Err(Error::invalid(format!(
            "{what} expects rank-{rank} input with {features} features on the last axis, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Fan-in scaled uniform weights on `[-√(1/fan_in), √(1/fan_in)]`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Fully connected ReLU network over `[N, widths[0]]` inputs.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<Tensor>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid MLP widths {widths:?}")));
        }
        let mut params = Vec::new();
        for pair in widths.windows(2) {
            params.push(init_uniform(rng, &[pair[0], pair[1]], pair[0]));
            params.push(Tensor::zeros(vec![pair[1]]));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
}

impl Model for Mlp {
    fn classes(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.widths.len() - 1)
            .flat_map(|l| [format!("fc{l}.weight"), format!("fc{l}.bias")])
            .collect()
    }

    fn logits(&mut self, tape: &mut Tape, params: &[Tensor], x: &Tensor, _mode: BnMode) -> Result<Tensor> {
        check_params(params, self.params.len())?;
        check_input(x, 2, self.widths[0], "MLP")?;
        let layers = params.len() / 2;
        let mut h = x.clone();
        for (l, wb) in params.chunks_exact(2).enumerate() {
            h = tape.matmul(&h, &wb[0])?;
            h = tape.add(&h, &wb[1])?;
            if l + 1 < layers {
                h = tape.relu(&h);
            }
        }
        Ok(h)
    }
}

/// Fully convolutional net of same-padded 3×3 convolutions over NHWC
/// input. `channels` runs from the input channels to the class count; an
/// optional [`BatchNormLite`] follows every hidden convolution.
#[derive(Debug, Clone)]
pub struct TinyFcn {
    channels: Vec<usize>,
    params: Vec<Tensor>,
    norms: Vec<BatchNormLite>,
}

impl TinyFcn {
    pub fn new<R: Rng + ?Sized>(channels: &[usize], batch_norm: bool, rng: &mut R) -> Result<Self> {
        if channels.len() < 2 || channels.contains(&0) {
            return Err(Error::invalid(format!("invalid TinyFcn channels {channels:?}")));
        }
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let hidden = channels.len() - 2;
        for (l, pair) in channels.windows(2).enumerate() {
            let (ci, co) = (pair[0], pair[1]);
            params.push(init_uniform(rng, &[3, 3, ci, co], 9 * ci));
            params.push(Tensor::zeros(vec![co]));
            if batch_norm && l < hidden {
                params.push(Tensor::ones(vec![co]));
                params.push(Tensor::zeros(vec![co]));
                norms.push(BatchNormLite::new(co));
            }
        }
        Ok(TinyFcn {
            channels: channels.to_vec(),
            params,
            norms,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.norms.is_empty()
    }
}

impl Model for TinyFcn {
    fn classes(&self) -> usize {
        *self.channels.last().expect("at least two entries")
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        let hidden = self.channels.len() - 2;
        let mut names = Vec::new();
        for l in 0..self.channels.len() - 1 {
            names.push(format!("conv{l}.weight"));
            names.push(format!("conv{l}.bias"));
            if self.has_batch_norm() && l < hidden {
                names.push(format!("bn{l}.scale"));
                names.push(format!("bn{l}.shift"));
            }
        }
        names
    }

    fn logits(&mut self, tape: &mut Tape, params: &[Tensor], x: &Tensor, mode: BnMode) -> Result<Tensor> {
        check_params(params, self.params.len())?;
        check_input(x, 4, self.channels[0], "TinyFcn")?;
        let hidden = self.channels.len() - 2;
        let mut rest = params;
        let mut h = x.clone();
        for l in 0..=hidden {
            h = tape.conv3x3(&h, &rest[0])?;
            h = tape.add(&h, &rest[1])?;
            rest = &rest[2..];
            if l < hidden {
                if let Some(bn) = self.norms.get_mut(l) {
                    h = bn.apply(tape, &h, &rest[0], &rest[1], mode)?;
                    rest = &rest[2..];
                }
                h = tape.relu(&h);
            }
        }
        Ok(h)
    }

    fn buffers(&self) -> Vec<&BatchNormLite> {
        self.norms.iter().collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut BatchNormLite> {
        self.norms.iter_mut().collect()
    }
}

/// Per-pixel linear classifier (a 1×1 convolution) over NHWC input. It is
/// exactly equivariant to any pixel permutation, including translations.
#[derive(Debug, Clone)]
pub struct Pointwise {
    in_channels: usize,
    classes: usize,
    params: Vec<Tensor>,
}

impl Pointwise {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, classes: usize, bias: bool, rng: &mut R) -> Self {
        let mut params = vec![init_uniform(rng, &[in_channels, classes], in_channels)];
        if bias {
            params.push(Tensor::zeros(vec![classes]));
        }
        Pointwise {
            in_channels,
            classes,
            params,
        }
    }
}

impl Model for Pointwise {
    fn classes(&self) -> usize {
        self.classes
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        ["linear.weight", "linear.bias"][..self.params.len()]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn logits(&mut self, tape: &mut Tape, params: &[Tensor], x: &Tensor, _mode: BnMode) -> Result<Tensor> {
        check_params(params, self.params.len())?;
        check_input(x, 4, self.in_channels, "Pointwise")?;
        let s = x.shape();
        let rows = s[0] * s[1] * s[2];
        let flat = tape.reshape(x, &[rows, self.in_channels])?;
        let mut z = tape.matmul(&flat, &params[0])?;
        if let Some(b) = params.get(1) {
            z = tape.add(&z, b)?;
        }
        tape.reshape(&z, &[s[0], s[1], s[2], self.classes])
    }
}
