use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::variant_label;
use super::metrics::compute_miou;
use super::{output_path, prepare_output_dir, write_json, ExperimentConfig, RunLog, RunSummary, Task, Trainer, Window};
use crate::consistency::{argmax, Perturbation, PerturbationSampler};
use crate::datasets::{synth_scenes_with, SceneDataset};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::models::{Model, TinyFcn};
use crate::netpbm::save_pgm;

/// Runs whose perturbed branch puts more than this share of valid pixels in
/// one argmax class during the final epoch are flagged as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.9;

const EVAL_BATCH: usize = 10;

/// Endless shuffled pass over a set of indices, reshuffled at each wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(items: Vec<usize>) -> Self {
        let pos = items.len();
        Cycler { order: items, pos }
    }

    fn take(&mut self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn batch(data: &SceneDataset, idx: &[usize]) -> Result<(crate::autodiff::Tensor, Vec<u8>)> {
    let images: Vec<&Image> = idx.iter().map(|&i| &data.images[i]).collect();
    let labels = idx
        .iter()
        .flat_map(|&i| data.labels[i].data().iter().copied())
        .collect();
    Ok((Image::stack(&images)?, labels))
}

fn sample_tau(
    sampler: &PerturbationSampler,
    rng: &mut ChaCha8Rng,
    n: usize,
    h: usize,
    w: usize,
) -> Result<Perturbation> {
    Ok(Perturbation::Dense(
        (0..n).map(|_| sampler.sample(rng, h, w)).collect::<Result<_>>()?,
    ))
}

#[derive(Serialize)]
struct IouReport<'a> {
    variant: &'a str,
    seed: u64,
    classes: usize,
    per_class_iou: &'a [Option<f64>],
    miou: f64,
}

/// Trains the small FCN on synthetic scenes with a labeled split.
pub fn run_dense(config: &ExperimentConfig) -> Result<RunSummary> {
    if config.task != Task::Dense {
        return Err(Error::Config("run_dense needs task = dense".into()));
    }
    config.validate()?;
    prepare_output_dir(&config.output_dir)?;
    let d = &config.dense;
    let label = variant_label(config);
    let train = synth_scenes_with(d.train_scenes, d.height, d.width, d.data_seed, &d.style)?;
    let val = synth_scenes_with(d.val_scenes, d.height, d.width, d.data_seed.wrapping_add(1), &d.style)?;
    let labeled = train.labeled_split(config.label_proportion, config.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut channels = vec![3];
    channels.extend(&d.hidden);
    channels.push(train.classes);
    let model = TinyFcn::new(&channels, d.batch_norm, &mut rng)?;

    let b_l = config.batch_labeled().unwrap_or(labeled.len()).min(labeled.len());
    let b_u = config.batch_unlabeled().unwrap_or(train.len()).min(train.len());
    let steps_per_epoch = (labeled.len() / b_l).max(1);
    let epochs = config.epochs();
    let mut trainer = Trainer::new(model, config, epochs * steps_per_epoch);
    let sampler = config.perturbation.sampler();
    let alpha = config.alpha();
    let mut labeled_order = Cycler::new(labeled.clone());
    let mut unlabeled_order = Cycler::new((0..train.len()).collect());

    let mut log = RunLog::create(&config.output_dir)?;
    let mut window = Window::default();
    let mut last_epoch = Window::default();
    let mut audit = None;
    for epoch in 0..epochs {
        last_epoch = Window::default();
        for _ in 0..steps_per_epoch {
            let li = labeled_order.take(&mut rng, b_l);
            let ui = unlabeled_order.take(&mut rng, b_u);
            let (x_l, y_l) = batch(&train, &li)?;
            let (x_u, _) = batch(&train, &ui)?;
            let tau = sample_tau(&sampler, &mut rng, b_u, d.height, d.width)?;
            let tau2 = match config.variant.needs_second_perturbation() {
                true => Some(sample_tau(&sampler, &mut rng, b_u, d.height, d.width)?),
                false => None,
            };
            if trainer.steps == 0 && alpha > 0.0 {
                audit = Some(trainer.audit(&x_u, &tau, tau2.as_ref())?);
            }
            let out = trainer.step(&x_l, &y_l, &x_u, &tau, tau2.as_ref())?;
            window.add(&out);
            last_epoch.add(&out);
        }
        if (epoch + 1) % config.log_every() == 0 && epoch + 1 < epochs {
            log.write(&window.take(trainer.steps, epoch + 1, &label))?;
        }
    }

    let predictions = predict_labels(&mut trainer.student, &val)?;
    let pred_flat: Vec<u8> = predictions.iter().flat_map(|p| p.data().iter().copied()).collect();
    let truth_flat: Vec<u8> = val.labels.iter().flat_map(|p| p.data().iter().copied()).collect();
    let iou = compute_miou(&pred_flat, &truth_flat, val.classes)?;

    let share = last_epoch.mean_share();
    let collapse = share.is_some_and(|s| s > COLLAPSE_THRESHOLD);
    if collapse {
        log::warn!(
            "{label} seed {}: perturbed predictions collapsed onto one class ({:.1}% of pixels)",
            config.seed,
            100.0 * share.unwrap_or_default()
        );
    }
    let mut record = window.take(trainer.steps, epochs, &label);
    record.perturbed_argmax_share = share;
    record.miou = Some(iou.miou);
    record.per_class_iou = Some(iou.per_class.clone());
    log.write(&record)?;
    log::info!("{label} seed {}: validation mIoU {:.2}", config.seed, 100.0 * iou.miou);

    write_json(
        &output_path(config, "iou.json"),
        &IouReport {
            variant: &label,
            seed: config.seed,
            classes: val.classes,
            per_class_iou: &iou.per_class,
            miou: iou.miou,
        },
    )?;
    for (i, p) in predictions.iter().take(d.saved_predictions).enumerate() {
        save_pgm(output_path(config, &format!("pred_{i:02}.pgm")), p)?;
    }
    let summary = RunSummary {
        task: Task::Dense,
        variant: label,
        seed: config.seed,
        steps: trainer.steps,
        score: iou.miou,
        final_record: record,
        audit,
        collapse,
    };
    write_json(&output_path(config, "summary.json"), &summary)?;
    Ok(summary)
}

/// Per-pixel argmax labels (1-based) in evaluation mode.
pub(crate) fn predict_labels<M: Model>(model: &mut M, data: &SceneDataset) -> Result<Vec<LabelMap>> {
    let c = model.classes();
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, _) = batch(data, chunk)?;
        let probs = model.predict(&x)?;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        for image in probs.data().chunks(h * w * c) {
            let labels = image.chunks(c).map(|row| argmax(row) as u8 + 1).collect();
            out.push(LabelMap::new(h, w, labels)?);
        }
    }
    Ok(out)
}
