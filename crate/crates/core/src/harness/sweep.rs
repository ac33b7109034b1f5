use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_experiment, write_json, ExperimentConfig, RunSummary};
use crate::consistency::{ConsistencyVariant, PerturbationKind, TeacherMode};
use crate::error::{Error, Result};

/// One row of a sweep: overrides applied to the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArm {
    pub name: String,
    #[serde(default)]
    pub variant: Option<ConsistencyVariant>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub teacher: Option<TeacherMode>,
    #[serde(default)]
    pub perturbation: Option<PerturbationKind>,
}

impl SweepArm {
    pub fn new(name: impl Into<String>) -> Self {
        SweepArm {
            name: name.into(),
            variant: None,
            alpha: None,
            teacher: None,
            perturbation: None,
        }
    }

    pub fn variant(mut self, v: ConsistencyVariant) -> Self {
        self.variant = Some(v);
        self
    }

    pub fn alpha(mut self, a: f64) -> Self {
        self.alpha = Some(a);
        self
    }

    pub fn perturbation(mut self, k: PerturbationKind) -> Self {
        self.perturbation = Some(k);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub arms: Vec<SweepArm>,
    pub seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub arm: String,
    pub replicate: usize,
    pub seed: u64,
    pub score: f64,
    pub collapse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
    pub arms: Vec<ArmSummary>,
}

impl SweepSummary {
    pub fn mean(&self, arm: &str) -> Option<f64> {
        self.arms.iter().find(|a| a.name == arm).map(|a| a.mean)
    }
}

/// Seed of replicate `index` (SplitMix64 of the master seed and index).
///
/// Replicate `k` gets the same seed in every arm, so arms are compared on
/// the same splits, initialisations and data.
pub fn cell_seed(master: u64, index: usize) -> u64 {
    let mut z = master ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SweepConfig {
    /// Cell configs in arm-major order.
    pub fn cells(&self) -> Result<Vec<(String, usize, ExperimentConfig)>> {
        if self.arms.is_empty() || self.seeds == 0 {
            return Err(Error::Config("a sweep needs at least one arm and one seed".into()));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.arms.len() {
            return Err(Error::Config("sweep arm names must be unique".into()));
        }
        let mut out = Vec::new();
        for arm in &self.arms {
            if arm.name.is_empty() || arm.name.contains(['/', '\\']) || arm.name.starts_with('.') {
                return Err(Error::Config(format!(
                    "sweep arm name {:?} is not a plain directory name",
                    arm.name
                )));
            }
            for k in 0..self.seeds {
                let mut c = self.base.clone();
                if let Some(v) = arm.variant {
                    c.variant = v;
                }
                if arm.alpha.is_some() {
                    c.alpha = arm.alpha;
                }
                if let Some(t) = arm.teacher {
                    c.teacher = t;
                }
                if let Some(kind) = arm.perturbation {
                    c.perturbation.kind = kind;
                }
                c.seed = cell_seed(self.master_seed, k);
                c.output_dir = self.base.output_dir.join(&arm.name).join(format!("seed{k}"));
                c.validate()?;
                out.push((arm.name.clone(), k, c));
            }
        }
        Ok(out)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Runs every (arm, replicate) cell on the rayon pool and writes
/// `sweep.json` to the base output directory.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepSummary> {
    let cells = config.cells()?;
    let results: Vec<Result<RunSummary>> = cells.par_iter().map(|(_, _, c)| run_experiment(c)).collect();
    let mut done = Vec::with_capacity(cells.len());
    for ((arm, k, c), r) in cells.iter().zip(results) {
        let r = r?;
        done.push(SweepCell {
            arm: arm.clone(),
            replicate: *k,
            seed: c.seed,
            score: r.score,
            collapse: r.collapse,
        });
    }
    let arms = config
        .arms
        .iter()
        .map(|a| {
            let scores: Vec<f64> = done.iter().filter(|c| c.arm == a.name).map(|c| c.score).collect();
            let (mean, std) = mean_std(&scores);
            ArmSummary {
                name: a.name.clone(),
                scores,
                mean,
                std,
            }
        })
        .collect();
    let summary = SweepSummary { cells: done, arms };
    std::fs::create_dir_all(&config.base.output_dir)?;
    write_json(&config.base.output_dir.join("sweep.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Task;

    fn tiny(dir: &std::path::Path) -> SweepConfig {
        let mut base = ExperimentConfig::for_task(Task::Moons);
        base.epochs = Some(5);
        base.moons.points = 20;
        base.moons.hidden = vec![4];
        base.moons.raster_size = 8;
        base.output_dir = dir.to_path_buf();
        SweepConfig {
            base,
            arms: vec![
                SweepArm::new("ct"),
                SweepArm::new("sup").alpha(0.0),
                SweepArm::new("cs").variant(ConsistencyVariant::OneWayCleanStudent),
            ],
            seeds: 2,
            master_seed: 9,
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..100).map(|i| cell_seed(3, i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_eq!(cell_seed(3, 7), seeds[7]);
        assert_ne!(cell_seed(4, 7), seeds[7]);
    }

    #[test]
    fn sweep_runs_all_cells_and_matches_single_runs() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny(dir.path());
        let summary = run_sweep(&config).unwrap();
        assert_eq!(summary.cells.len(), 6);
        assert_eq!(summary.arms.len(), 3);
        // a cell rerun alone gives the same score
        let cells = config.cells().unwrap();
        let (_, _, c) = &cells[3];
        let mut alone = c.clone();
        alone.output_dir = dir.path().join("alone");
        assert_eq!(run_experiment(&alone).unwrap().score, summary.cells[3].score);
        assert!(dir.path().join("sup/seed1/metrics.jsonl").exists());
        assert!(dir.path().join("sweep.json").exists());
    }

    #[test]
    fn rejects_bad_arms() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny(dir.path());
        config.arms.push(SweepArm::new("ct"));
        assert!(config.cells().is_err());
        let mut config = tiny(dir.path());
        config.arms[0].name = "../x".into();
        assert!(config.cells().is_err());
        let mut config = tiny(dir.path());
        config.arms[0].variant = Some(ConsistencyVariant::TwoWayOneClean);
        config.arms[0].teacher = Some(TeacherMode::MeanTeacher { momentum: 0.99 });
        assert!(matches!(config.cells(), Err(Error::Config(_))));
    }
}
