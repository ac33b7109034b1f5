use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sslab_core::consistency::{ConsistencyVariant, PerturbationKind, TeacherMode};
use sslab_core::harness::{
    compute_miou, run_dense, run_moons, run_sweep, run_warp_cli, ExperimentConfig, SweepConfig, Task, WarpOptions,
};
use sslab_core::netpbm::load_pgm;
use sslab_core::Error;

#[derive(Parser)]
#[command(name = "sslab", version, about = "Semi-supervised consistency experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a random (or identity) perturbation to a PPM image.
    Warp(WarpArgs),
    /// Train the two-moons MLP.
    TrainMoons(TrainArgs),
    /// Train the small FCN on synthetic scenes.
    TrainDense(TrainArgs),
    /// Run every (arm, seed) cell of a sweep config.
    Sweep(SweepArgs),
    /// Score a predicted label map against ground truth.
    Miou(MiouArgs),
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    identity: bool,
    /// ph, tps or phtps.
    #[arg(long, default_value = "phtps")]
    perturbation: PerturbationKind,
    #[arg(long, default_value_t = 0.05)]
    radius_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file mirroring the experiment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 1w-ct, 1w-cs, 2w-c1 or 1w-p2.
    #[arg(long)]
    variant: Option<ConsistencyVariant>,
    /// Train on labels only (alpha = 0).
    #[arg(long, conflicts_with = "alpha")]
    supervised: bool,
    /// Use a Mean Teacher with this EMA momentum.
    #[arg(long)]
    mean_teacher: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    /// Dense ablation: ph, tps or phtps.
    #[arg(long)]
    perturbation: Option<PerturbationKind>,
    #[arg(long)]
    radius_fraction: Option<f64>,
    /// Two-moons jitter standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    label_proportion: Option<f64>,
    #[arg(long)]
    batch_norm: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the base output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MiouArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn experiment(task: Task, args: &TrainArgs) -> Result<ExperimentConfig, Error> {
    let mut c = match &args.config {
        Some(path) => {
            let c: ExperimentConfig = load_json(path)?;
            if c.task != task {
                return Err(Error::Config(format!("config is for task {:?}", c.task)));
            }
            c
        }
        None => ExperimentConfig::for_task(task),
    };
    if args.config.is_none() {
        c.output_dir = PathBuf::from("runs").join(match task {
            Task::Moons => "moons",
            Task::Dense => "dense",
        });
    }
    if let Some(v) = args.variant {
        c.variant = v;
    }
    if args.supervised {
        c.alpha = Some(0.0);
    }
    if let Some(m) = args.mean_teacher {
        c.teacher = TeacherMode::MeanTeacher { momentum: m };
    }
    c.alpha = args.alpha.or(c.alpha);
    c.epochs = args.epochs.or(c.epochs);
    c.lr = args.lr.or(c.lr);
    c.seed = args.seed.unwrap_or(c.seed);
    c.batch_labeled = args.batch_labeled.or(c.batch_labeled);
    c.batch_unlabeled = args.batch_unlabeled.or(c.batch_unlabeled);
    if let Some(k) = args.perturbation {
        c.perturbation.kind = k;
    }
    if let Some(r) = args.radius_fraction {
        c.perturbation.radius_fraction = r;
    }
    if let Some(s) = args.sigma {
        c.perturbation.moons_noise_sd = s;
    }
    if let Some(p) = args.label_proportion {
        c.label_proportion = p;
    }
    c.dense.batch_norm |= args.batch_norm;
    if let Some(o) = &args.output {
        c.output_dir = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Warp(a) => {
            let options = WarpOptions {
                seed: a.seed,
                identity: a.identity,
                kind: a.perturbation,
                radius_fraction: a.radius_fraction,
                ..WarpOptions::default()
            };
            if !(options.radius_fraction > 0.0 && options.radius_fraction < 0.5) {
                return Err(Error::Config(format!(
                    "radius fraction {} outside (0, 0.5)",
                    options.radius_fraction
                )));
            }
            let report = run_warp_cli(&a.input, &a.output, &a.mask, &options)?;
            print_json(&report.tau)
        }
        Command::TrainMoons(a) => print_json(&run_moons(&experiment(Task::Moons, &a)?)?),
        Command::TrainDense(a) => print_json(&run_dense(&experiment(Task::Dense, &a)?)?),
        Command::Sweep(a) => {
            let mut config: SweepConfig = load_json(&a.config)?;
            if let Some(o) = a.output {
                config.base.output_dir = o;
            }
            print_json(&run_sweep(&config)?)
        }
        Command::Miou(a) => {
            let (pred, truth) = (load_pgm(&a.pred)?, load_pgm(&a.truth)?);
            if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
                return Err(Error::Format("prediction and truth differ in size".into()));
            }
            print_json(&compute_miou(pred.data(), truth.data(), a.classes)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
