mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hazesplit_core::solver::SolverConfig;

use crate::config::ConfigFile;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "hazesplit", version, about = "Untrained single-image dehazing by layer disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split hazy images into radiance, transmission and airlight.
    Dehaze(RunArgs),
    /// Take the haze of one image and apply it to a clean image.
    Transfer(TransferArgs),
    /// Print PSNR/SSIM of predictions against references.
    Eval(EvalArgs),
    /// Rerun with each loss term removed and tabulate the scores.
    Ablate(RunArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Precision as ValueEnum>::from_str(s, true)
    }
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Args, Clone, Default)]
pub struct RunArgs {
    /// Hazy input image (PNG or JPEG); repeat for several images.
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Ground-truth image for scoring; repeat once per input.
    #[arg(long = "ref")]
    reference: Vec<PathBuf>,
    /// Output directory (one subdirectory per image when several are given).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimization epochs per image [default: 500]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the airlight smoothness term [default: 0.1]
    #[arg(long)]
    lambda: Option<f64>,
    /// Seed for weight init and latent sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Floating-point precision of the solver [default: f32]
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Allow overwriting existing output files.
    #[arg(long)]
    force: bool,
    /// `key = value` file providing defaults for any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of images (or ablation variants) processed in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Clean image that receives the haze.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Reuse a saved style directory instead of extracting from --input.
    #[arg(long)]
    style: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted image; repeat for several pairs.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Reference image; one per --pred.
    #[arg(long = "ref", required = true)]
    reference: Vec<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

/// Flags merged with the config file.
pub struct Settings {
    pub inputs: Vec<PathBuf>,
    pub references: Vec<PathBuf>,
    pub clean: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub out: PathBuf,
    pub solver: SolverConfig,
    pub precision: Precision,
    pub force: bool,
    pub jobs: usize,
}

fn pick<T: std::str::FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>, CliError> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

fn pick_paths(flag: Vec<PathBuf>, file: &ConfigFile, key: &str) -> Vec<PathBuf> {
    if flag.is_empty() {
        file.paths(key)
    } else {
        flag
    }
}

impl Settings {
    fn resolve(args: RunArgs, clean: Option<PathBuf>, style: Option<PathBuf>) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut solver = SolverConfig::default();
        if let Some(e) = pick(args.epochs, &file, "epochs")? {
            solver.epochs = e;
        }
        if let Some(lr) = pick(args.lr, &file, "lr")? {
            solver.learning_rate = lr;
        }
        if let Some(l) = pick(args.lambda, &file, "lambda")? {
            solver.loss.lambda_reg = l;
        }
        if let Some(s) = pick(args.seed, &file, "seed")? {
            solver.seed = s;
        }
        solver.validate()?;
        let out = pick(args.out, &file, "out")?.ok_or_else(|| CliError::Usage("--out is required".into()))?;
        let jobs = pick(args.jobs, &file, "jobs")?.unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        Ok(Settings {
            inputs: pick_paths(args.input, &file, "input"),
            references: pick_paths(args.reference, &file, "ref"),
            clean: pick(clean, &file, "clean")?,
            style: pick(style, &file, "style")?,
            out,
            solver,
            precision: pick(args.precision, &file, "precision")?.unwrap_or(Precision::F32),
            force: args.force || file.get::<bool>("force")?.unwrap_or(false),
            jobs,
        })
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Dehaze(args) => commands::dehaze(&Settings::resolve(args, None, None)?),
        Command::Ablate(args) => commands::ablate(&Settings::resolve(args, None, None)?),
        Command::Transfer(t) => commands::transfer(&Settings::resolve(t.run, t.clean, t.style)?),
        Command::Eval(e) => commands::eval(&e.pred, &e.reference),
        Command::Gradcheck(g) => commands::gradcheck(g.probes, g.seed, g.tolerance, g.step),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hazesplit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
