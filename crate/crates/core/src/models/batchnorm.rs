use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

use super::BnMode;

/// Per-channel normalisation over every axis but the last. Scale and shift
/// are ordinary trainable parameters owned by the enclosing model; this
/// struct holds only the running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLite {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
}

impl BatchNormLite {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormLite {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn set_running(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::invalid("running statistics have the wrong channel count"));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// `stats ← β·stats + (1−β)·other.stats`.
    pub fn ema_from(&mut self, other: &BatchNormLite, beta: f64) {
        for (a, b) in self.running_mean.iter_mut().zip(&other.running_mean) {
            *a = beta * *a + (1.0 - beta) * b;
        }
        for (a, b) in self.running_var.iter_mut().zip(&other.running_var) {
            *a = beta * *a + (1.0 - beta) * b;
        }
    }

    pub fn apply(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        mode: BnMode,
    ) -> Result<Tensor> {
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return Err(Error::shape("batch_norm", x.shape(), &[c]));
        }
        let rows = x.numel() / c;
        let flat = tape.reshape(x, &[rows, c])?;
        let normed = match mode {
            BnMode::TrainClean => {
                let inv_n = 1.0 / rows as f64;
                let total = tape.sum_axis(&flat, 0)?;
                let mean = tape.scale(&total, inv_n)?;
                let centered = tape.sub(&flat, &mean)?;
                let sq = tape.mul(&centered, &centered)?;
                let sq_total = tape.sum_axis(&sq, 0)?;
                let var = tape.scale(&sq_total, inv_n)?;
                let shifted = tape.add(&var, &Tensor::scalar(self.eps))?;
                let log_var = tape.log(&shifted);
                let half = tape.scale(&log_var, -0.5)?;
                let inv_std = tape.exp(&half);
                let unbiased = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
                let m = self.momentum;
                for (k, r) in self.running_mean.iter_mut().enumerate() {
                    *r = (1.0 - m) * *r + m * mean.data()[k];
                }
                for (k, r) in self.running_var.iter_mut().enumerate() {
                    *r = (1.0 - m) * *r + m * var.data()[k] * unbiased;
                }
                tape.mul(&centered, &inv_std)?
            }
            BnMode::TrainFrozenStats | BnMode::Eval => {
                let mean = Tensor::new(vec![c], self.running_mean.clone())?;
                let inv_std: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let centered = tape.sub(&flat, &mean)?;
                tape.mul(&centered, &Tensor::new(vec![c], inv_std)?)?
            }
        };
        let y = tape.mul(&normed, scale)?;
        let y = tape.add(&y, shift)?;
        tape.reshape(&y, x.shape())
    }
}
