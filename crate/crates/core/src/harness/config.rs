use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::{ConsistencyVariant, PerturbationKind, PerturbationSampler, TeacherMode};
use crate::datasets::SceneStyle;
use crate::error::{Error, Result};
use crate::photometric::PhotometricRanges;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Moons,
    Dense,
}

/// Perturbation settings for both tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Ablation for dense runs: photometric, geometric or both.
    pub kind: PerturbationKind,
    /// TPS displacement bound as a fraction of image height.
    pub radius_fraction: f64,
    pub photometric: PhotometricRanges,
    /// Standard deviation σ_T of the additive jitter used on two-moons.
    pub moons_noise_sd: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            kind: PerturbationKind::PhTps,
            radius_fraction: 0.05,
            photometric: PhotometricRanges::default(),
            moons_noise_sd: 0.2,
        }
    }
}

impl PerturbationConfig {
    pub fn sampler(&self) -> PerturbationSampler {
        PerturbationSampler {
            kind: self.kind,
            radius_fraction: self.radius_fraction,
            photometric: self.photometric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoonsConfig {
    /// Training points (labeled and unlabeled together).
    pub points: usize,
    /// Noise of the moons themselves.
    pub data_noise_sd: f64,
    pub test_points: usize,
    pub hidden: Vec<usize>,
    /// Side of the square decision-boundary raster.
    pub raster_size: usize,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        MoonsConfig {
            points: 200,
            data_noise_sd: 0.08,
            test_points: 1000,
            hidden: vec![100, 100],
            raster_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub height: usize,
    pub width: usize,
    /// Hidden convolution widths.
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    /// Seed of the scene generator, shared by all runs so that seeds vary
    /// only the split, initialisation and perturbations.
    pub data_seed: u64,
    /// Validation scenes written as predicted-label PGMs.
    pub saved_predictions: usize,
    pub style: SceneStyle,
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            train_scenes: 200,
            val_scenes: 50,
            height: 64,
            width: 64,
            hidden: vec![16, 16],
            batch_norm: false,
            data_seed: 2024,
            saved_predictions: 8,
            style: SceneStyle::default(),
        }
    }
}

/// One experiment. Optional fields fall back to task-specific defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub variant: ConsistencyVariant,
    pub teacher: TeacherMode,
    /// Consistency weight; 0 trains the supervised baseline.
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_labeled: Option<usize>,
    pub batch_unlabeled: Option<usize>,
    pub lr: Option<f64>,
    /// Cosine decay of the learning rate over training.
    pub cosine_schedule: Option<bool>,
    pub weight_decay: f64,
    pub seed: u64,
    pub perturbation: PerturbationConfig,
    /// Labeled fraction of the dense training scenes.
    pub label_proportion: f64,
    /// Training records are written every this many epochs.
    pub log_every: Option<usize>,
    pub output_dir: PathBuf,
    pub moons: MoonsConfig,
    pub dense: DenseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Moons,
            variant: ConsistencyVariant::OneWayCleanTeacher,
            teacher: TeacherMode::Simple,
            alpha: None,
            epochs: None,
            batch_labeled: None,
            batch_unlabeled: None,
            lr: None,
            cosine_schedule: None,
            weight_decay: 0.0,
            seed: 0,
            perturbation: PerturbationConfig::default(),
            label_proportion: 0.125,
            log_every: None,
            output_dir: PathBuf::from("runs"),
            moons: MoonsConfig::default(),
            dense: DenseConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        ExperimentConfig {
            task,
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.task {
            Task::Moons => 1.0,
            Task::Dense => 0.5,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            Task::Moons => 4000,
            Task::Dense => 60,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.task {
            Task::Moons => 1e-3,
            Task::Dense => 4e-3,
        })
    }

    pub fn cosine_schedule(&self) -> bool {
        self.cosine_schedule.unwrap_or(self.task == Task::Dense)
    }

    /// Labeled batch size; `None` means the whole labeled set.
    pub fn batch_labeled(&self) -> Option<usize> {
        self.batch_labeled.or(match self.task {
            Task::Moons => None,
            Task::Dense => Some(4),
        })
    }

    pub fn batch_unlabeled(&self) -> Option<usize> {
        self.batch_unlabeled.or(match self.task {
            Task::Moons => None,
            Task::Dense => Some(4),
        })
    }

    pub fn log_every(&self) -> usize {
        self.log_every.unwrap_or(match self.task {
            Task::Moons => 500,
            Task::Dense => 5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.teacher.validate(self.variant)?;
        self.perturbation.photometric.validate()?;
        let alpha = self.alpha();
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return bad(format!("alpha must be a nonnegative number, got {alpha}"));
        }
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("lr must be positive, got {lr}"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_labeled() == Some(0) || self.batch_unlabeled() == Some(0) {
            return bad("batch sizes must be positive".into());
        }
        if self.log_every() == 0 {
            return bad("log_every must be positive".into());
        }
        let p = &self.perturbation;
        if !(p.radius_fraction > 0.0 && p.radius_fraction < 0.5) {
            return bad(format!(
                "radius_fraction must be in (0, 0.5), got {}",
                p.radius_fraction
            ));
        }
        if !(p.moons_noise_sd >= 0.0 && p.moons_noise_sd.is_finite()) {
            return bad(format!("moons_noise_sd must be nonnegative, got {}", p.moons_noise_sd));
        }
        match self.task {
            Task::Moons => {
                let m = &self.moons;
                if m.points < 6 || !m.points.is_multiple_of(2) {
                    return bad(format!("moons.points must be even and at least 6, got {}", m.points));
                }
                if m.test_points == 0 || !m.test_points.is_multiple_of(2) {
                    return bad("moons.test_points must be even and positive".into());
                }
                if m.hidden.contains(&0) || m.raster_size == 0 || m.data_noise_sd.is_nan() || m.data_noise_sd < 0.0 {
                    return bad("moons network widths, raster size and noise must be positive".into());
                }
            }
            Task::Dense => {
                let d = &self.dense;
                if !(self.label_proportion > 0.0 && self.label_proportion <= 1.0) {
                    return bad(format!(
                        "label_proportion must be in (0, 1], got {}",
                        self.label_proportion
                    ));
                }
                if d.height < 16 || d.width < 16 {
                    return bad("dense scenes must be at least 16x16".into());
                }
                d.style
                    .validate()
                    .map_err(|e| Error::Config(format!("dense.style: {e}")))?;
                if d.train_scenes == 0 || d.val_scenes == 0 || d.hidden.contains(&0) {
                    return bad("dense scene counts and widths must be positive".into());
                }
                if ((d.train_scenes as f64 * self.label_proportion) + 1e-9).floor() < 1.0 {
                    return bad("label proportion selects no training scene".into());
                }
            }
        }
        Ok(())
    }
}

/// Mean Teacher momentum for a config, if it uses one.
pub(crate) fn ema_momentum(mode: TeacherMode) -> Option<f64> {
    match mode {
        TeacherMode::Simple => None,
        TeacherMode::MeanTeacher { momentum } => Some(momentum),
    }
}

pub(crate) fn variant_label(config: &ExperimentConfig) -> String {
    if config.alpha() == 0.0 {
        "supervised".into()
    } else {
        config.variant.code().into()
    }
}
