use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::variant_label;
use super::{output_path, prepare_output_dir, write_json, ExperimentConfig, RunLog, RunSummary, Task, Trainer, Window};
use crate::autodiff::Tensor;
use crate::consistency::{argmax, Perturbation};
use crate::datasets::{two_moons, MoonsDataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::{Mlp, Model};
use crate::netpbm::save_ppm;

/// Offset separating the test-set seed from the training-set seed.
const TEST_SEED_OFFSET: u64 = 0x07e5_75e7;

/// Region drawn in the boundary raster: x range, then y range.
const VIEW: [(f64, f64); 2] = [(-1.5, 2.5), (-1.25, 1.75)];

fn noise<R: Rng>(rng: &mut R, rows: usize, sd: f64) -> Perturbation {
    let normal = Normal::new(0.0, sd).expect("validated sd");
    Perturbation::Noise(
        Tensor::new(vec![rows, 2], (0..rows * 2).map(|_| normal.sample(rng)).collect()).expect("rows x 2"),
    )
}

fn subset<R: Rng>(rng: &mut R, all: &[usize], batch: Option<usize>) -> Vec<usize> {
    match batch {
        Some(b) if b < all.len() => {
            let mut picked: Vec<usize> = index::sample(rng, all.len(), b).into_iter().map(|i| all[i]).collect();
            picked.sort_unstable();
            picked
        }
        _ => all.to_vec(),
    }
}

/// Trains the MLP on two-moons with six labeled points.
pub fn run_moons(config: &ExperimentConfig) -> Result<RunSummary> {
    if config.task != Task::Moons {
        return Err(Error::Config("run_moons needs task = moons".into()));
    }
    config.validate()?;
    prepare_output_dir(&config.output_dir)?;
    let m = &config.moons;
    let label = variant_label(config);
    let data = two_moons(m.points, m.data_noise_sd, config.seed)?;
    let test = two_moons(
        m.test_points,
        m.data_noise_sd,
        config.seed.wrapping_add(TEST_SEED_OFFSET),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut widths = vec![2];
    widths.extend(&m.hidden);
    widths.push(2);
    let epochs = config.epochs();
    let mut trainer = Trainer::new(Mlp::new(&widths, &mut rng)?, config, epochs);
    let all: Vec<usize> = (0..data.len()).collect();
    let sd = config.perturbation.moons_noise_sd;
    let alpha = config.alpha();

    let mut log = RunLog::create(&config.output_dir)?;
    let mut window = Window::default();
    let mut audit = None;
    for epoch in 0..epochs {
        let li = subset(&mut rng, &data.labeled, config.batch_labeled());
        let ui = subset(&mut rng, &all, config.batch_unlabeled());
        let (x_l, y_l, x_u) = (data.tensor(Some(&li)), data.labels_of(&li), data.tensor(Some(&ui)));
        let tau = noise(&mut rng, ui.len(), sd);
        let tau2 = config
            .variant
            .needs_second_perturbation()
            .then(|| noise(&mut rng, ui.len(), sd));
        if epoch == 0 && alpha > 0.0 {
            audit = Some(trainer.audit(&x_u, &tau, tau2.as_ref())?);
        }
        let out = trainer.step(&x_l, &y_l, &x_u, &tau, tau2.as_ref())?;
        window.add(&out);
        if (epoch + 1) % config.log_every() == 0 && epoch + 1 < epochs {
            log.write(&window.take(trainer.steps, epoch + 1, &label))?;
        }
    }

    let accuracy = accuracy(&mut trainer.student, &test)?;
    let mut record = window.take(trainer.steps, epochs, &label);
    record.accuracy = Some(accuracy);
    log.write(&record)?;
    log::info!("{label} seed {}: test accuracy {accuracy:.4}", config.seed);

    let raster = boundary_raster(&mut trainer.student, &data, m.raster_size)?;
    save_ppm(output_path(config, "boundary.ppm"), &raster)?;
    let summary = RunSummary {
        task: Task::Moons,
        variant: label,
        seed: config.seed,
        steps: trainer.steps,
        score: accuracy,
        final_record: record,
        audit,
        collapse: false,
    };
    write_json(&output_path(config, "summary.json"), &summary)?;
    Ok(summary)
}

fn predicted_classes<M: Model>(model: &mut M, x: &Tensor) -> Result<Vec<u8>> {
    let probs = model.predict(x)?;
    let c = model.classes();
    Ok(probs.data().chunks(c).map(|row| argmax(row) as u8 + 1).collect())
}

pub(crate) fn accuracy<M: Model>(model: &mut M, set: &MoonsDataset) -> Result<f64> {
    let pred = predicted_classes(model, &set.tensor(None))?;
    let hits = pred.iter().zip(&set.labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / set.len() as f64)
}

const CLASS_FILL: [[f64; 3]; 2] = [[0.98, 0.78, 0.74], [0.76, 0.84, 0.98]];
const CLASS_MARK: [[f64; 3]; 2] = [[0.85, 0.1, 0.1], [0.1, 0.25, 0.85]];

/// Class-coloured decision regions with the boundary darkened, unlabeled
/// points as grey dots and labeled points as outlined squares.
fn boundary_raster<M: Model>(model: &mut M, data: &MoonsDataset, size: usize) -> Result<Image> {
    let [(x0, x1), (y0, y1)] = VIEW;
    let to_world = |r: usize, c: usize| {
        [
            x0 + (c as f64 + 0.5) / size as f64 * (x1 - x0),
            y1 - (r as f64 + 0.5) / size as f64 * (y1 - y0),
        ]
    };
    let grid: Vec<f64> = (0..size * size).flat_map(|i| to_world(i / size, i % size)).collect();
    let probs = model.predict(&Tensor::new(vec![size * size, 2], grid)?)?;
    let mut image = Image::zeros(size, size, 3);
    for (i, p) in probs.data().chunks(2).enumerate() {
        let class = usize::from(p[1] > p[0]);
        let edge = (p[1] - p[0]).abs() < 0.08;
        let px = image.pixel_mut(i / size, i % size);
        for (k, v) in px.iter_mut().enumerate() {
            *v = if edge { 0.35 } else { CLASS_FILL[class][k] };
        }
    }
    let to_pixel = |pt: [f64; 2]| -> Option<(usize, usize)> {
        let c = ((pt[0] - x0) / (x1 - x0) * size as f64).floor();
        let r = ((y1 - pt[1]) / (y1 - y0) * size as f64).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < size && (r as usize) < size).then_some((r as usize, c as usize))
    };
    for pt in &data.points {
        if let Some((r, c)) = to_pixel(*pt) {
            image.pixel_mut(r, c).copy_from_slice(&[0.45; 3]);
        }
    }
    let half = (size / 128).max(1) as isize + 1;
    for &i in &data.labeled {
        let Some((r, c)) = to_pixel(data.points[i]) else {
            continue;
        };
        let class = usize::from(data.labels[i]) - 1;
        for dr in -half - 1..=half + 1 {
            for dc in -half - 1..=half + 1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= size as isize || cc >= size as isize {
                    continue;
                }
                let border = dr.abs() > half || dc.abs() > half;
                let colour = if border { [0.0; 3] } else { CLASS_MARK[class] };
                image.pixel_mut(rr as usize, cc as usize).copy_from_slice(&colour);
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(dir: &std::path::Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::for_task(Task::Moons);
        c.epochs = Some(30);
        c.log_every = Some(10);
        c.moons.points = 40;
        c.moons.hidden = vec![8];
        c.moons.raster_size = 32;
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn writes_outputs_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_moons(&quick(dir.path())).unwrap();
        let records = super::super::read_metrics(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records.last().unwrap().accuracy, Some(s.score));
        assert_eq!(s.steps, 30);
        let audit = s.audit.unwrap();
        assert!(audit.student_grad_norm > 0.0 && audit.teacher_grad_norm == 0.0);
        let raster = crate::netpbm::load_ppm(dir.path().join("boundary.ppm")).unwrap();
        assert_eq!((raster.height(), raster.width()), (32, 32));
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let dir = tempfile::tempdir().unwrap();
        let mut scores = Vec::new();
        for seed in 0..8 {
            let mut c = quick(dir.path());
            c.epochs = Some(0);
            c.seed = seed;
            c.moons.hidden = vec![100, 100];
            scores.push(run_moons(&c).unwrap().score);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "{scores:?}");
    }

    #[test]
    fn rejects_wrong_task() {
        let c = ExperimentConfig::for_task(Task::Dense);
        assert!(matches!(run_moons(&c), Err(Error::Config(_))));
    }
}
