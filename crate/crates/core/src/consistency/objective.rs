use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::{BnMode, Model};
use crate::warp::{apply_taps, forward_splat_field, SPLAT_WEIGHT_FLOOR};

use super::perturbation::{prepare, Perturbation, Prepared};
use super::{argmax, cross_entropy_loss, kl_loss, ConsistencyVariant, TeacherMode, PROB_FLOOR};

/// A frozen target network and the parameter values it runs with.
pub struct Teacher<'a, M> {
    pub model: &'a mut M,
    pub params: &'a [Tensor],
}

#[derive(Debug, Clone)]
pub struct ConsistencyTerm {
    pub loss: Tensor,
    /// Rows (pixels or points) that entered the mean.
    pub valid: usize,
    /// Share of valid rows of the perturbed branch that agree with its most
    /// frequent argmax class.
    pub perturbed_argmax_share: f64,
    /// Entries the teacher forward pass appended to the tape.
    pub teacher_record_growth: usize,
}

impl ConsistencyTerm {
    pub fn empty_mask(&self) -> bool {
        self.valid == 0
    }
}

fn argmax_share(probs_or_logits: &Tensor, mask: &[bool]) -> f64 {
    let c = *probs_or_logits.shape().last().unwrap_or(&1);
    let mut counts = vec![0usize; c];
    for (row, &ok) in probs_or_logits.data().chunks_exact(c.max(1)).zip(mask) {
        if ok {
            counts[argmax(row)] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    match total {
        0 => 0.0,
        _ => *counts.iter().max().unwrap() as f64 / total as f64,
    }
}

fn warp_predictions(tape: &mut Tape, probs: &Tensor, prepared: &Prepared) -> Result<Tensor> {
    match &prepared.warp {
        Some(map) => tape.resample(probs, map),
        None => Ok(probs.clone()),
    }
}

/// Target for 1w-p2: teacher probabilities on `T_τ1(x)` are forward-splatted
/// back to the clean frame, then warped by the geometric part of `τ2`.
/// Returns the target and the validity intersection.
fn realign(teacher_probs: &Tensor, first: &Prepared, second: &Prepared) -> Result<(Tensor, Vec<bool>)> {
    if first.parts.is_empty() {
        let rows = teacher_probs.numel() / teacher_probs.shape().last().copied().unwrap_or(1).max(1);
        return Ok((teacher_probs.clone(), vec![true; rows]));
    }
    let preds = Image::unstack(teacher_probs)?;
    let mut out = Vec::with_capacity(preds.len());
    let mut mask = Vec::new();
    for ((pred, a), b) in preds.iter().zip(&first.parts).zip(&second.parts) {
        let (clean, weights) = forward_splat_field(pred, &a.field.negated(), Some(&a.mask))?;
        out.push(apply_taps(&clean, &b.taps));
        for (pixel, &ok) in b.mask.as_slice().iter().enumerate() {
            let covered = b
                .taps
                .taps_for(0, pixel)
                .iter()
                .all(|&(src, wt)| wt == 0.0 || weights[src as usize] > SPLAT_WEIGHT_FLOOR);
            mask.push(ok && covered);
        }
    }
    let refs: Vec<&Image> = out.iter().collect();
    Ok((Image::stack(&refs)?, mask))
}

/// Consistency term for one batch `x` under the given wiring.
///
/// The student runs with `student_params` (normally tape leaves). One-way
/// variants evaluate `teacher` without recording; the two-way variant
/// ignores it and runs both branches through the student. Clean-input
/// branches of the student use batch statistics, perturbed ones the frozen
/// running estimates.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss<M: Model>(
    tape: &mut Tape,
    variant: ConsistencyVariant,
    mode: TeacherMode,
    student: &mut M,
    student_params: &[Tensor],
    teacher: Option<Teacher<'_, M>>,
    x: &Tensor,
    tau: &Perturbation,
    tau2: Option<&Perturbation>,
) -> Result<ConsistencyTerm> {
    mode.validate(variant)?;
    let prepared = prepare(x, tau)?;
    let rows = x.numel() / x.shape().last().copied().unwrap_or(1).max(1);
    let mut growth = 0;
    let mut run_teacher = |tape: &mut Tape, input: &Tensor, teacher: Option<Teacher<'_, M>>| -> Result<Tensor> {
        let t = teacher.ok_or_else(|| Error::invalid(format!("{variant} needs a teacher network")))?;
        let before = tape.len();
        let p = tape.no_grad(|tape| t.model.forward(tape, t.params, input, BnMode::Eval))?;
        growth = tape.len() - before;
        Ok(p)
    };
    let (loss, valid, share) = match variant {
        ConsistencyVariant::OneWayCleanTeacher => {
            let clean = run_teacher(tape, x, teacher)?;
            let target = tape.no_grad(|tape| warp_predictions(tape, &clean, &prepared))?;
            let logits = student.logits(tape, student_params, &prepared.input, BnMode::TrainFrozenStats)?;
            let log_p = tape.log_softmax(&logits)?;
            let mask = prepared.mask_rows(target.numel() / target.shape().last().unwrap());
            let share = argmax_share(&logits, &mask);
            let (loss, valid) = kl_loss(tape, &target, &log_p, &mask, true)?;
            (loss, valid, share)
        }
        ConsistencyVariant::OneWayCleanStudent => {
            let target = run_teacher(tape, &prepared.input, teacher)?;
            let probs = student.forward(tape, student_params, x, BnMode::TrainClean)?;
            let warped = warp_predictions(tape, &probs, &prepared)?;
            let floored = tape.max_scalar(&warped, PROB_FLOOR);
            let log_p = tape.log(&floored);
            let mask = prepared.mask_rows(target.numel() / target.shape().last().unwrap());
            let share = argmax_share(&target, &mask);
            let (loss, valid) = kl_loss(tape, &target, &log_p, &mask, true)?;
            (loss, valid, share)
        }
        ConsistencyVariant::TwoWayOneClean => {
            let clean = student.forward(tape, student_params, x, BnMode::TrainClean)?;
            let target = warp_predictions(tape, &clean, &prepared)?;
            let logits = student.logits(tape, student_params, &prepared.input, BnMode::TrainFrozenStats)?;
            let log_p = tape.log_softmax(&logits)?;
            let mask = prepared.mask_rows(target.numel() / target.shape().last().unwrap());
            let share = argmax_share(&logits, &mask);
            let (loss, valid) = kl_loss(tape, &target, &log_p, &mask, true)?;
            (loss, valid, share)
        }
        ConsistencyVariant::OneWayBothPerturbed => {
            let tau2 = tau2.ok_or_else(|| Error::invalid("1w-p2 needs a second perturbation"))?;
            let second = prepare(x, tau2)?;
            let first_probs = run_teacher(tape, &prepared.input, teacher)?;
            let (target, mask) = realign(&first_probs, &prepared, &second)?;
            let logits = student.logits(tape, student_params, &second.input, BnMode::TrainFrozenStats)?;
            let log_p = tape.log_softmax(&logits)?;
            let share = argmax_share(&logits, &mask);
            let (loss, valid) = kl_loss(tape, &target, &log_p, &mask, true)?;
            (loss, valid, share)
        }
    };
    debug_assert!(valid <= rows);
    Ok(ConsistencyTerm {
        loss,
        valid,
        perturbed_argmax_share: share,
        teacher_record_growth: growth,
    })
}

/// Gradient and diagnostics of one semi-supervised step.
#[derive(Debug, Clone)]
pub struct SemisupStep {
    /// Gradient of `CE + α·consistency` for each student parameter.
    pub grads: Vec<Tensor>,
    pub supervised_loss: f64,
    /// `None` when α = 0 and the consistency pass is skipped.
    pub consistency: Option<ConsistencyTerm>,
}

impl SemisupStep {
    pub fn consistency_loss(&self) -> f64 {
        self.consistency.as_ref().map_or(0.0, |c| c.loss.item())
    }
}

/// Gradient of the semi-supervised objective for one step.
///
/// The supervised pass is recorded, differentiated and discarded before the
/// consistency pass is recorded, so only one pass's intermediates are alive
/// at a time. With [`TeacherMode::Simple`] the teacher is the current
/// student frozen and `teacher` may be `None`; Mean Teacher requires the
/// EMA network. With `alpha == 0` the consistency pass is skipped.
#[allow(clippy::too_many_arguments)]
pub fn semisup_loss_gradient<M: Model>(
    variant: ConsistencyVariant,
    mode: TeacherMode,
    student: &mut M,
    teacher: Option<&mut M>,
    x_l: &Tensor,
    y_l: &[u8],
    x_u: &Tensor,
    tau: &Perturbation,
    tau2: Option<&Perturbation>,
    alpha: f64,
) -> Result<SemisupStep> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "consistency weight {alpha} must be nonnegative"
        )));
    }
    mode.validate(variant)?;
    if x_l.rank() < 2 || x_l.shape()[1..] != x_u.shape()[1..] || x_l.shape()[0] == 0 || x_u.shape()[0] == 0 {
        return Err(Error::shape("semisup_loss_gradient", x_l.shape(), x_u.shape()));
    }
    let mut tape = Tape::new();
    let leaves = tape.leaves(student.params());

    let logits = student.logits(&mut tape, &leaves, x_l, BnMode::TrainClean)?;
    let ce = cross_entropy_loss(&mut tape, &logits, y_l)?;
    let supervised = tape.backward(&ce)?.for_all(&leaves);
    tape.clear();

    if alpha == 0.0 {
        return Ok(SemisupStep {
            grads: supervised,
            supervised_loss: ce.item(),
            consistency: None,
        });
    }

    let mut frozen;
    let teacher_model: Option<&mut M> = match (mode, teacher) {
        _ if !variant.is_one_way() => None,
        (TeacherMode::Simple, _) => {
            frozen = student.clone();
            Some(&mut frozen)
        }
        (TeacherMode::MeanTeacher { .. }, Some(t)) => Some(t),
        (TeacherMode::MeanTeacher { .. }, None) => {
            return Err(Error::invalid("Mean Teacher mode needs the EMA network"));
        }
    };
    let teacher_params: Vec<Tensor> = teacher_model.as_ref().map(|t| t.params().to_vec()).unwrap_or_default();
    let teacher_ref = teacher_model.map(|model| Teacher {
        model,
        params: &teacher_params,
    });
    let term = consistency_loss(&mut tape, variant, mode, student, &leaves, teacher_ref, x_u, tau, tau2)?;
    let weighted = tape.scale(&term.loss, alpha)?;
    let consistency = tape.backward(&weighted)?.for_all(&leaves);
    let grads = supervised
        .iter()
        .zip(&consistency)
        .map(|(a, b)| {
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemisupStep {
        grads,
        supervised_loss: ce.item(),
        consistency: Some(term),
    })
}

/// Gradient norms observed by [`routing_audit`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoutingAudit {
    pub loss: f64,
    pub student_grad_norm: f64,
    pub teacher_grad_norm: f64,
    /// Gradient reaching the clean branch of `2w-c1`, measured as the
    /// difference to the perturbed-branch-only gradient.
    pub clean_branch_grad_norm: Option<f64>,
    pub teacher_record_growth: usize,
}

impl RoutingAudit {
    /// Fails if gradient flows where the variant forbids it or is missing
    /// where it must flow. Missing gradient is only reported for a positive
    /// loss, since a zero loss legitimately has a zero gradient.
    pub fn check(&self, variant: ConsistencyVariant) -> Result<()> {
        let fail = |what: &str| {
            Err(Error::invalid(format!(
                "gradient routing audit failed for {variant}: {what}"
            )))
        };
        if self.teacher_grad_norm != 0.0 {
            return fail("teacher parameters received gradient");
        }
        if self.teacher_record_growth != 0 {
            return fail("teacher forward pass was recorded");
        }
        if self.loss > 0.0 {
            if self.student_grad_norm == 0.0 {
                return fail("student received no gradient");
            }
            if self.clean_branch_grad_norm == Some(0.0) {
                return fail("clean branch received no gradient");
            }
        }
        Ok(())
    }
}

fn grad_norm(gs: &[Tensor]) -> f64 {
    gs.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Differentiates the consistency term with respect to both student and
/// teacher parameters on copies of the networks.
#[allow(clippy::too_many_arguments)]
pub fn routing_audit<M: Model>(
    variant: ConsistencyVariant,
    mode: TeacherMode,
    student: &M,
    teacher: &M,
    x: &Tensor,
    tau: &Perturbation,
    tau2: Option<&Perturbation>,
) -> Result<RoutingAudit> {
    let run = |variant: ConsistencyVariant| -> Result<(f64, Vec<Tensor>, Vec<Tensor>, usize)> {
        let mut tape = Tape::new();
        let s_leaves = tape.leaves(student.params());
        let t_leaves = tape.leaves(teacher.params());
        let (mut s, mut t) = (student.clone(), teacher.clone());
        let term = consistency_loss(
            &mut tape,
            variant,
            mode,
            &mut s,
            &s_leaves,
            Some(Teacher {
                model: &mut t,
                params: &t_leaves,
            }),
            x,
            tau,
            tau2,
        )?;
        let g = tape.backward(&term.loss)?;
        Ok((
            term.loss.item(),
            g.for_all(&s_leaves),
            g.for_all(&t_leaves),
            term.teacher_record_growth,
        ))
    };
    let (loss, gs, gt, growth) = run(variant)?;
    let clean_branch_grad_norm = if variant == ConsistencyVariant::TwoWayOneClean {
        let (_, perturbed_only, _, _) = run(ConsistencyVariant::OneWayCleanTeacher)?;
        let diff: Vec<f64> = gs
            .iter()
            .zip(&perturbed_only)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x - y))
            .collect();
        Some(diff.iter().map(|v| v * v).sum::<f64>().sqrt())
    } else {
        None
    };
    Ok(RoutingAudit {
        loss,
        student_grad_norm: grad_norm(&gs),
        teacher_grad_norm: grad_norm(&gt),
        clean_branch_grad_norm,
        teacher_record_growth: growth,
    })
}
