//! Command-line entry points for dataset generation, training, inference,
//! editing, evaluation, and gradient diagnostics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scmnet::gradsuite::{run_suite, SUITE_TOL};
use scmnet::io::write_png;
use scmnet::synthfig::{
    make_dataset, perturb_pose, read_dataset, render_at, sample_seed, FigureSample,
    REGION_NAMES,
};
use scmnet::trainer::{TrainConfig, Trainer, METRICS_HEADER};
use scmnet::Tensor;

#[derive(Parser)]
#[command(name = "scmnet", version, about = "Pose-transfer network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic figure dataset file.
    GenData(GenDataArgs),
    /// Train a model, logging one metrics CSV line per step.
    Train(TrainArgs),
    /// Self-reconstruct one sample and write the output PNG.
    Reconstruct(ReconstructArgs),
    /// Transfer a source sample's appearance onto a target pose.
    Transfer(TransferArgs),
    /// Replace one semantic region's style with a reference sample's.
    Edit(EditArgs),
    /// Print self-reconstruction metrics over a dataset as one CSV line.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite on a reduced configuration.
    Gradcheck,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Dataset seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of half-body crops.
    #[arg(long, default_value_t = 0.25)]
    half_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Where to save the final checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV file; stdout when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample index within the dataset.
    #[arg(long)]
    source: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Style source sample index.
    #[arg(long)]
    source: usize,
    /// Take the target pose from this dataset index.
    #[arg(long, conflicts_with = "pose_seed")]
    pose_from: Option<usize>,
    /// Sample a perturbed variant of the source pose from this seed.
    #[arg(long)]
    pose_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample to edit.
    #[arg(long)]
    source: usize,
    /// Sample providing the replacement region style.
    #[arg(long = "ref")]
    reference: usize,
    /// Semantic region name to replace.
    #[arg(long)]
    region: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl From<scmnet::ScmError> for CliError {
    fn from(e: scmnet::ScmError) -> Self {
        CliError::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Transfer(a) => transfer(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck => gradcheck(),
    }
}

/// Usage-check that an input file exists before any work starts.
fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("{} not found: {}", what, path.display())));
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Vec<FigureSample>, CliError> {
    require_file(path, "dataset")?;
    Ok(read_dataset(path)?)
}

fn load_trainer(path: &Path) -> Result<Trainer, CliError> {
    require_file(path, "checkpoint")?;
    Ok(Trainer::load(path)?)
}

fn sample_at<'a>(dataset: &'a [FigureSample], idx: usize, what: &str) -> Result<&'a FigureSample, CliError> {
    dataset.get(idx).ok_or_else(|| {
        CliError::usage(format!(
            "{} index {} out of range for dataset of {} samples",
            what,
            idx,
            dataset.len()
        ))
    })
}

fn save_png(path: &Path, image: &Tensor) -> Result<(), CliError> {
    write_png(path, image)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::usage("--n must be >= 1"));
    }
    if !(0.0..=1.0).contains(&a.half_fraction) {
        return Err(CliError::usage("--half-fraction must be in [0, 1]"));
    }
    make_dataset(&a.out, a.n, a.seed, a.half_fraction)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(path) => {
            require_file(path, "config")?;
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config: {}", e)))?;
            TrainConfig::from_kv(&text).map_err(|e| CliError::usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    let dataset = load_dataset(&a.data)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = load_trainer(path)?;
            if a.config.is_some() {
                // A config passed alongside --resume may only change the step
                // budget; everything else must match the checkpoint.
                let mut want = cfg.clone();
                let mut have = t.cfg.clone();
                want.steps = 0;
                have.steps = 0;
                if want != have {
                    return Err(CliError::usage(
                        "--config may only change `steps` when resuming; \
                         other fields conflict with the checkpoint",
                    ));
                }
                t.cfg.steps = cfg.steps;
            }
            t
        }
        None => Trainer::new(cfg.clone())?,
    };

    let mut sink: Box<dyn std::io::Write> = match &a.metrics {
        Some(path) => Box::new(
            fs::File::create(path)
                .map_err(|e| CliError::runtime(format!("cannot create metrics file: {}", e)))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    writeln!(sink, "{}", METRICS_HEADER)
        .map_err(|e| CliError::runtime(format!("metrics write failed: {}", e)))?;
    let mut write_err = None;
    trainer.train(&dataset, |m| {
        if write_err.is_none() {
            if let Err(e) = writeln!(sink, "{}", m.csv_line()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::runtime(format!("metrics write failed: {}", e)));
    }
    trainer.save(&a.out)?;
    println!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<(), CliError> {
    let trainer = load_trainer(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let sample = sample_at(&dataset, a.source, "--source")?;
    let image = trainer.infer_reconstruct(sample)?;
    save_png(&a.out, &image)
}

fn transfer(a: TransferArgs) -> Result<(), CliError> {
    let trainer = load_trainer(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let source = sample_at(&dataset, a.source, "--source")?;
    let skeleton = match (a.pose_from, a.pose_seed) {
        (Some(idx), None) => sample_at(&dataset, idx, "--pose-from")?.skeleton.clone(),
        (None, Some(seed)) => {
            let spec = perturb_pose(&source.spec, sample_seed(seed, 0));
            render_at(&spec, trainer.cfg.image_res).skeleton
        }
        _ => {
            return Err(CliError::usage(
                "exactly one of --pose-from or --pose-seed is required",
            ))
        }
    };
    let image = trainer.infer_transfer(source, &skeleton)?;
    save_png(&a.out, &image)
}

fn edit(a: EditArgs) -> Result<(), CliError> {
    let region = REGION_NAMES.iter().position(|n| *n == a.region).ok_or_else(|| {
        CliError::usage(format!(
            "unknown region '{}'; valid names: {}",
            a.region,
            REGION_NAMES.join(", ")
        ))
    })?;
    let trainer = load_trainer(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let source = sample_at(&dataset, a.source, "--source")?;
    let reference = sample_at(&dataset, a.reference, "--ref")?;
    let image = trainer.infer_edit(source, reference, region)?;
    save_png(&a.out, &image)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let trainer = load_trainer(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let m = trainer.evaluate(&dataset)?;
    println!("{:.6},{:.6},{:.6}", m.l1, m.psnr, m.ssim);
    Ok(())
}

fn gradcheck() -> Result<(), CliError> {
    let results = run_suite()?;
    let mut failed = false;
    for (name, err) in &results {
        let status = if *err <= SUITE_TOL { "ok" } else { "FAIL" };
        println!("{:<24} {:>12.3e}  {}", name, err, status);
        if *err > SUITE_TOL {
            failed = true;
        }
    }
    if failed {
        return Err(CliError::runtime(format!(
            "gradient check exceeded tolerance {:.0e}",
            SUITE_TOL
        )));
    }
    Ok(())
}
