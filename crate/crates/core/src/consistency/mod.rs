//! The semi-supervised objective: masked KL consistency, cross-entropy,
//! the four consistency wirings and the per-step gradient computation.

mod objective;
mod perturbation;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use objective::{
    consistency_loss, routing_audit, semisup_loss_gradient, ConsistencyTerm, RoutingAudit, SemisupStep, Teacher,
};
pub use perturbation::{Perturbation, PerturbationKind, PerturbationParams, PerturbationSampler, Perturbed};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::IGNORE_LABEL;
use crate::models::Model;
use crate::warp::ValidityMask;

/// Probability floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsistencyVariant {
    /// Frozen target from the clean input, trainable branch on `T(x)`.
    #[serde(rename = "1w-ct")]
    OneWayCleanTeacher,
    /// Frozen target from `T(x)`, trainable branch on the clean input.
    #[serde(rename = "1w-cs")]
    OneWayCleanStudent,
    /// One parameter set, gradients through both branches.
    #[serde(rename = "2w-c1")]
    TwoWayOneClean,
    /// Both branches perturbed independently, frozen target re-aligned.
    #[serde(rename = "1w-p2")]
    OneWayBothPerturbed,
}

impl ConsistencyVariant {
    pub const ALL: [ConsistencyVariant; 4] = [
        ConsistencyVariant::OneWayCleanTeacher,
        ConsistencyVariant::OneWayCleanStudent,
        ConsistencyVariant::TwoWayOneClean,
        ConsistencyVariant::OneWayBothPerturbed,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ConsistencyVariant::OneWayCleanTeacher => "1w-ct",
            ConsistencyVariant::OneWayCleanStudent => "1w-cs",
            ConsistencyVariant::TwoWayOneClean => "2w-c1",
            ConsistencyVariant::OneWayBothPerturbed => "1w-p2",
        }
    }

    /// Whether the target branch is a frozen teacher.
    pub fn is_one_way(self) -> bool {
        self != ConsistencyVariant::TwoWayOneClean
    }

    pub fn needs_second_perturbation(self) -> bool {
        self == ConsistencyVariant::OneWayBothPerturbed
    }
}

impl fmt::Display for ConsistencyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ConsistencyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConsistencyVariant::ALL
            .into_iter()
            .find(|v| v.code() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown consistency variant {s:?} (1w-ct, 1w-cs, 2w-c1, 1w-p2)"
                ))
            })
    }
}

/// How teacher parameters relate to the student's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TeacherMode {
    /// Frozen copy of the current student parameters.
    Simple,
    /// Exponential moving average of student parameters and statistics.
    MeanTeacher { momentum: f64 },
}

impl TeacherMode {
    pub const DEFAULT_MOMENTUM: f64 = 0.99;

    pub fn validate(self, variant: ConsistencyVariant) -> Result<()> {
        if let TeacherMode::MeanTeacher { momentum } = self {
            if !(momentum > 0.0 && momentum < 1.0) {
                return Err(Error::Config(format!("EMA momentum {momentum} outside (0, 1)")));
            }
            if variant == ConsistencyVariant::TwoWayOneClean {
                return Err(Error::Config(
                    "two-way consistency is not possible with Mean Teacher".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-pixel class probabilities of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePrediction {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl DensePrediction {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * classes || classes == 0 {
            return Err(Error::invalid(format!(
                "{height}x{width}x{classes} prediction needs {} values, got {}",
                height * width * classes,
                probs.len()
            )));
        }
        for (i, row) in probs.chunks_exact(classes).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| p.is_nan() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "pixel {i} is not a probability vector: {row:?}"
                )));
            }
        }
        Ok(DensePrediction {
            height,
            width,
            classes,
            probs,
        })
    }

    /// From a `[H, W, C]` or `[1, H, W, C]` probability tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] | [1, h, w, c] => Self::new(h, w, c, t.to_vec()),
            _ => Err(Error::invalid(format!(
                "expected [H, W, C] probabilities, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.classes;
        &self.probs[o..o + self.classes]
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.probs.chunks_exact(self.classes).map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked mean KL divergence and whether the mask was empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedKl {
    pub value: f64,
    /// No valid pixel: the value is 0 and carries no constraint.
    pub empty_mask: bool,
}

/// A student probability of exactly zero is replaced by `min(PROB_FLOOR, pt)`,
/// which keeps the value finite without making any term negative.
fn kl_row(t: &[f64], s: &[f64]) -> f64 {
    t.iter()
        .zip(s)
        .filter(|(&pt, _)| pt > 0.0)
        .map(|(&pt, &ps)| {
            let ps = if ps > 0.0 { ps } else { PROB_FLOOR.min(pt) };
            pt * (pt.ln() - ps.ln())
        })
        .sum()
}

/// `(1/Σv) Σ v_ij D_KL(p_t[ij] ‖ p_s[ij])`.
pub fn masked_kl(p_t: &DensePrediction, p_s: &DensePrediction, v: &ValidityMask) -> Result<MaskedKl> {
    let dims = |p: &DensePrediction| [p.height, p.width, p.classes];
    if dims(p_t) != dims(p_s) {
        return Err(Error::shape("masked_kl", &dims(p_t), &dims(p_s)));
    }
    if (v.height(), v.width()) != (p_t.height, p_t.width) {
        return Err(Error::shape("masked_kl", &dims(p_t), &[v.height(), v.width()]));
    }
    let c = p_t.classes;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &ok) in v.as_slice().iter().enumerate() {
        if ok {
            total += kl_row(&p_t.probs[i * c..(i + 1) * c], &p_s.probs[i * c..(i + 1) * c]);
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("masked_kl: validity mask is empty");
        return Ok(MaskedKl {
            value: 0.0,
            empty_mask: true,
        });
    }
    Ok(MaskedKl {
        value: total / count as f64,
        empty_mask: false,
    })
}

/// Recorded masked KL. `target` holds probabilities (it may carry
/// gradient), `student_log_probs` log-probabilities over the same rows, and
/// `mask` one flag per row. Returns the scalar loss and the number of
/// valid rows; with no valid row the loss is a constant 0.
pub fn masked_kl_loss(
    tape: &mut Tape,
    target: &Tensor,
    student_log_probs: &Tensor,
    mask: &[bool],
) -> Result<(Tensor, usize)> {
    kl_loss(tape, target, student_log_probs, mask, true)
}

pub(crate) fn kl_loss(
    tape: &mut Tape,
    target: &Tensor,
    student_log_probs: &Tensor,
    mask: &[bool],
    with_entropy: bool,
) -> Result<(Tensor, usize)> {
    if target.shape() != student_log_probs.shape() || target.rank() == 0 {
        return Err(Error::shape("masked_kl", target.shape(), student_log_probs.shape()));
    }
    let axis = target.rank() - 1;
    let rows = target.numel() / target.shape()[axis].max(1);
    if mask.len() != rows {
        return Err(Error::shape("masked_kl", target.shape(), &[mask.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("masked_kl: validity mask is empty");
        return Ok((Tensor::scalar(0.0), 0));
    }
    let s_log = tape.max_scalar(student_log_probs, PROB_FLOOR.ln());
    let integrand = if with_entropy {
        let t_log = if target.requires_grad() {
            let floored = tape.max_scalar(target, PROB_FLOOR);
            tape.log(&floored)
        } else {
            target.map(|t| t.max(PROB_FLOOR).ln())
        };
        tape.sub(&t_log, &s_log)?
    } else {
        tape.scale(&s_log, -1.0)?
    };
    let weighted = tape.mul(target, &integrand)?;
    let per_row = tape.sum_axis(&weighted, axis)?;
    let weights = Tensor::new(
        per_row.shape().to_vec(),
        mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
    )?;
    let masked = tape.mul(&per_row, &weights)?;
    let total = tape.sum(&masked);
    Ok((tape.scale(&total, 1.0 / count as f64)?, count))
}

fn check_labels(labels: &[u8], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid(format!(
            "{} labels for {rows} predictions",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize > classes) {
        return Err(Error::invalid(format!("label {bad} outside 1..={classes}")));
    }
    Ok(())
}

/// Mean of `−ln p[y]` over rows whose label is not [`IGNORE_LABEL`].
/// Labels are 1-based.
pub fn cross_entropy(labels: &[u8], probs: &[f64], classes: usize) -> Result<f64> {
    if classes == 0 || !probs.len().is_multiple_of(classes) {
        return Err(Error::invalid("probabilities do not divide into rows"));
    }
    check_labels(labels, probs.len() / classes, classes)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &y) in probs.chunks_exact(classes).zip(labels) {
        if y != IGNORE_LABEL {
            total -= row[y as usize - 1].max(PROB_FLOOR).ln();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Recorded cross-entropy from logits (last axis = classes).
pub fn cross_entropy_loss(tape: &mut Tape, logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let classes = *logits.shape().last().ok_or_else(|| Error::invalid("scalar logits"))?;
    let rows = logits.numel() / classes.max(1);
    check_labels(labels, rows, classes)?;
    let count = labels.iter().filter(|&&y| y != IGNORE_LABEL).count();
    if count == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut onehot = vec![0.0; logits.numel()];
    for (r, &y) in labels.iter().enumerate() {
        if y != IGNORE_LABEL {
            onehot[r * classes + y as usize - 1] = 1.0;
        }
    }
    let log_p = tape.log_softmax(logits)?;
    let log_p = tape.max_scalar(&log_p, PROB_FLOOR.ln());
    let picked = tape.mul(&log_p, &Tensor::new(logits.shape().to_vec(), onehot)?)?;
    let total = tape.sum(&picked);
    tape.scale(&total, -1.0 / count as f64)
}

/// `θ′ ← β·θ′ + (1−β)·θ`.
pub fn ema_update(teacher: &mut [Tensor], student: &[Tensor], beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("EMA momentum {beta} outside (0, 1)")));
    }
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "teacher has {} tensors, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if let Some((t, s)) = teacher.iter().zip(student).find(|(t, s)| t.shape() != s.shape()) {
        return Err(Error::shape("ema_update", t.shape(), s.shape()));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        let data = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| beta * a + (1.0 - beta) * b)
            .collect();
        *t = Tensor::new(t.shape().to_vec(), data)?;
    }
    Ok(())
}

/// EMA of both parameters and batch-norm running statistics.
pub fn ema_update_model<M: Model>(teacher: &mut M, student: &M, beta: f64) -> Result<()> {
    ema_update(teacher.params_mut(), student.params(), beta)?;
    for (t, s) in teacher.buffers_mut().into_iter().zip(student.buffers()) {
        t.ema_from(s, beta);
    }
    Ok(())
}
