//! `biplanar`: phantoms, radiographs, datasets, training, reconstruction,
//! evaluation, ablations and the gradient self-test from one binary.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use biplanar_core::Exec;

#[derive(Debug, Parser)]
#[command(name = "biplanar", version, about = "Biplanar X-ray to CT slice reconstruction toolkit")]
struct Cli {
    /// Worker threads for data-parallel loops; 1 runs everything in one stream.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate procedural torso phantoms.
    Phantom(PhantomArgs),
    /// Render the PA and lateral radiographs of a volume.
    Drr(DrrArgs),
    /// Build a train/val/test dataset with a manifest.
    Dataset(DatasetArgs),
    /// Train a reconstruction model.
    Train(TrainArgs),
    /// Reconstruct one slice (or a window of it) from a radiograph pair.
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score the projection x positional-encoding x global grid.
    Ablate(AblateArgs),
    /// Check every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the first phantom; later ones use consecutive seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Volume dims `D H W`.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub organs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DrrArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Volume file to render.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub source_dist: Option<f64>,
    #[arg(long)]
    pub focal: Option<f64>,
    /// Detector size `ROWS COLS`.
    #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"])]
    pub res: Option<Vec<usize>>,
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"])]
    pub res: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Overrides shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Probability of training on a random window of the slice.
    #[arg(long)]
    pub p_part: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the feature-space term of the objective.
    #[arg(long)]
    pub perceptual: Option<f64>,
    /// Slices drawn per training volume and epoch (0 = all).
    #[arg(long)]
    pub slices_per_volume: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding `manifest.json`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// `perspective` or `orthogonal`.
    #[arg(long)]
    pub projection: Option<String>,
    #[arg(long)]
    pub no_pe: bool,
    #[arg(long)]
    pub no_global: bool,
    #[arg(long)]
    pub no_attention: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// PA radiograph (raw image file).
    #[arg(long)]
    pub pa: Option<PathBuf>,
    /// Lateral radiograph (raw image file).
    #[arg(long)]
    pub lat: Option<PathBuf>,
    /// `axial`, `coronal` or `sagittal`.
    #[arg(long)]
    pub plane: Option<String>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Window `ROW0,COL0,ROWS,COLS` in native slice pixels.
    #[arg(long)]
    pub crop: Option<String>,
    /// Ground-truth volume; adds the reference and error panels.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Volume dims `D H W` when no ground truth is given.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub source_dist: Option<f64>,
    #[arg(long)]
    pub focal: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    pub split: Option<String>,
    /// Evenly spaced slices per volume (0 = all).
    #[arg(long)]
    pub slices_per_volume: Option<usize>,
    /// Also score centered half and quarter windows.
    #[arg(long)]
    pub crop_suite: bool,
    /// Output CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Evenly spaced test slices per volume (0 = all).
    #[arg(long)]
    pub eval_slices_per_volume: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random seeds per case.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = biplanar_core::selftest::TOLERANCE)]
    pub tol: f64,
}

fn configure_threads(threads: Option<usize>) -> Result<Exec, commands::CliError> {
    match threads {
        Some(0) => Err(commands::CliError::Usage("--threads must be at least 1".into())),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| commands::CliError::Usage(format!("cannot start {n} threads: {e}")))?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Exec::Sequential),
        None => Ok(Exec::Parallel),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads(cli.threads).and_then(|exec| match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Drr(a) => commands::drr(a, exec),
        Command::Dataset(a) => commands::dataset(a),
        Command::Train(a) => commands::train_cmd(a, exec),
        Command::Reconstruct(a) => commands::reconstruct(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Ablate(a) => commands::ablate(a, exec),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(schema) = e.schema() {
                eprintln!("expected a JSON config like:\n{schema}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
