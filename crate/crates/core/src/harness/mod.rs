//! Experiment driver: configs, training loops for the two toy tasks, the
//! standalone warp tool, metrics and the sweep runner.

mod config;
mod dense;
mod metrics;
mod moons;
mod sweep;
mod warp_tool;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{DenseConfig, ExperimentConfig, MoonsConfig, PerturbationConfig, Task};
pub use dense::{run_dense, COLLAPSE_THRESHOLD};
pub use metrics::{compute_miou, read_metrics, JsonLines, MetricsRecord, MiouResult, TimingRecord};
pub use moons::run_moons;
pub use sweep::{cell_seed, run_sweep, SweepArm, SweepCell, SweepConfig, SweepSummary};
pub use warp_tool::{run_warp_cli, WarpOptions, WarpReport};

use crate::autodiff::Tensor;
use crate::consistency::{
    ema_update_model, routing_audit, semisup_loss_gradient, ConsistencyVariant, Perturbation, RoutingAudit,
    SemisupStep, TeacherMode,
};
use crate::error::{Error, Result};
use crate::models::{lr_schedule, Adam, Model};

/// What a finished run reports besides its files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: Task,
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    /// Test accuracy (moons) or validation mIoU (dense), in [0, 1].
    pub score: f64,
    pub final_record: MetricsRecord,
    pub audit: Option<RoutingAudit>,
    /// Set when the perturbed branch concentrated on one class.
    pub collapse: bool,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    match config.task {
        Task::Moons => run_moons(config),
        Task::Dense => run_dense(config),
    }
}

pub(crate) fn prepare_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Student, optional EMA teacher and optimiser.
pub(crate) struct Trainer<M: Model> {
    pub student: M,
    pub teacher: Option<M>,
    adam: Adam,
    variant: ConsistencyVariant,
    mode: TeacherMode,
    alpha: f64,
    lr: f64,
    cosine: bool,
    total_steps: usize,
    pub steps: usize,
}

impl<M: Model> Trainer<M> {
    pub fn new(student: M, config: &ExperimentConfig, total_steps: usize) -> Self {
        let teacher = config::ema_momentum(config.teacher).map(|_| student.clone());
        Trainer {
            student,
            teacher,
            adam: Adam::with_weight_decay(config.weight_decay),
            variant: config.variant,
            mode: config.teacher,
            alpha: config.alpha(),
            lr: config.lr(),
            cosine: config.cosine_schedule(),
            total_steps,
            steps: 0,
        }
    }

    /// Checks on copies of the networks that gradient reaches exactly the
    /// parameters the variant allows.
    pub fn audit(&self, x_u: &Tensor, tau: &Perturbation, tau2: Option<&Perturbation>) -> Result<RoutingAudit> {
        let teacher = self.teacher.as_ref().unwrap_or(&self.student);
        let audit = routing_audit(self.variant, self.mode, &self.student, teacher, x_u, tau, tau2)?;
        audit.check(self.variant)?;
        Ok(audit)
    }

    pub fn step(
        &mut self,
        x_l: &Tensor,
        y_l: &[u8],
        x_u: &Tensor,
        tau: &Perturbation,
        tau2: Option<&Perturbation>,
    ) -> Result<SemisupStep> {
        let out = semisup_loss_gradient(
            self.variant,
            self.mode,
            &mut self.student,
            self.teacher.as_mut(),
            x_l,
            y_l,
            x_u,
            tau,
            tau2,
            self.alpha,
        )?;
        if !out.supervised_loss.is_finite() || !out.consistency_loss().is_finite() {
            return Err(Error::invalid(format!("loss diverged at step {}", self.steps)));
        }
        let lr = if self.cosine {
            lr_schedule(self.steps as f64 / self.total_steps.max(1) as f64, self.lr)?
        } else {
            self.lr
        };
        self.adam.step(self.student.params_mut(), &out.grads, lr)?;
        if let (Some(teacher), Some(beta)) = (self.teacher.as_mut(), config::ema_momentum(self.mode)) {
            ema_update_model(teacher, &self.student, beta)?;
        }
        self.steps += 1;
        Ok(out)
    }
}

/// Loss averages between two metrics records.
#[derive(Debug, Default)]
pub(crate) struct Window {
    supervised: f64,
    consistency: f64,
    steps: usize,
    share: f64,
    share_steps: usize,
    empty: usize,
}

impl Window {
    pub fn add(&mut self, step: &SemisupStep) {
        self.supervised += step.supervised_loss;
        self.consistency += step.consistency_loss();
        self.steps += 1;
        if let Some(c) = &step.consistency {
            if c.empty_mask() {
                self.empty += 1;
            } else {
                self.share += c.perturbed_argmax_share;
                self.share_steps += 1;
            }
        }
    }

    pub fn mean_share(&self) -> Option<f64> {
        (self.share_steps > 0).then(|| self.share / self.share_steps as f64)
    }

    /// Record of the window, which is then reset.
    pub fn take(&mut self, step: usize, epoch: usize, variant: &str) -> MetricsRecord {
        let n = self.steps.max(1) as f64;
        let record = MetricsRecord {
            step,
            epoch,
            variant: variant.to_string(),
            supervised_loss: self.supervised / n,
            consistency_loss: self.consistency / n,
            accuracy: None,
            miou: None,
            per_class_iou: None,
            perturbed_argmax_share: self.mean_share(),
            empty_mask_steps: self.empty,
        };
        *self = Window::default();
        record
    }
}

/// `metrics.jsonl` plus wall-clock `timing.jsonl` for one run.
pub(crate) struct RunLog {
    metrics: JsonLines,
    timing: JsonLines,
    start: Instant,
}

impl RunLog {
    pub fn create(dir: &Path) -> Result<Self> {
        Ok(RunLog {
            metrics: JsonLines::create(dir.join("metrics.jsonl"))?,
            timing: JsonLines::create(dir.join("timing.jsonl"))?,
            start: Instant::now(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.metrics.write(record)?;
        self.timing.write(&TimingRecord {
            step: record.step,
            seconds: self.start.elapsed().as_secs_f64(),
        })?;
        log::info!(
            "step {} epoch {}: supervised {:.4} consistency {:.4}",
            record.step,
            record.epoch,
            record.supervised_loss,
            record.consistency_loss
        );
        Ok(())
    }
}

pub(crate) fn output_path(config: &ExperimentConfig, name: &str) -> PathBuf {
    config.output_dir.join(name)
}
