//! `epd`: data generation, training, sampling, evaluation, benchmarking and
//! plotting for polynomial-representation traffic scene diffusion.
use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epd_core::diffusion::Representation;

pub mod bench;
pub mod commands;
pub mod config;
pub mod plot;

use config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Data(m) => write!(f, "{m}"),
        }
    }
}

impl From<epd_core::Error> for CliError {
    fn from(e: epd_core::Error) -> Self {
        match e {
            epd_core::Error::Config(m) => Self::Config(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Data(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReprArg {
    Polynomial,
    Sequence,
}

impl From<ReprArg> for Representation {
    fn from(r: ReprArg) -> Self {
        match r {
            ReprArg::Polynomial => Representation::Polynomial,
            ReprArg::Sequence => Representation::Sequence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    /// The trained network given by `--model`.
    Model,
    /// Straight-line extrapolation of each agent's final velocity.
    Cv,
}

#[derive(Debug, Parser)]
#[command(name = "epd", version, about = "Polynomial scene diffusion experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Samples per scene.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub ddim_steps: Option<usize>,
    /// Prediction horizon in seconds.
    #[arg(long, global = true)]
    pub horizon: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub representation: Option<ReprArg>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus.
    Datagen {
        /// Number of scenes (overrides the config).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train the encoder and denoiser on a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write generated futures for every scene as JSONL.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
    },
    /// Score generated futures against the ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Samples written by `sample`; otherwise they are generated.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
    },
    /// List the scenes the constant-velocity model handles worst.
    SelectHard {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
    },
    /// Inference latency against the number of DDIM steps.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated DDIM step counts.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Render a scene and its kinematic profiles as SVG.
    Plot {
        #[arg(long)]
        data: PathBuf,
        /// Scene id; defaults to the first scene.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            samples: self.samples,
            ddim_steps: self.ddim_steps,
            horizon: self.horizon,
            representation: self.representation.map(Into::into),
        }
    }
}

fn init_threads() -> Result<Option<usize>, CliError> {
    let Ok(v) = std::env::var("EPD_THREADS") else { return Ok(None) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("EPD_THREADS must be a positive integer, got {v:?}")))?;
    // a pool may already exist when `run` is called more than once in a process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = init_threads()?;
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?.resolve(&cli.global.overrides())?;
    if let Some(n) = threads {
        cfg.bench.threads = n;
    }
    match &cli.command {
        Command::Datagen { scenes: Some(n) } => cfg.datagen.n_scenes = *n,
        Command::Train { epochs: Some(n), .. } => {
            cfg.train.epochs = *n;
            cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(*n);
        }
        _ => {}
    }
    if cli.global.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let out = &cli.global.out;
    match cli.command {
        Command::Datagen { .. } => commands::datagen(&cfg, out),
        Command::Train { data, .. } => commands::train(&cfg, &data, out),
        Command::Sample { data, model, sampler } => commands::sample(&cfg, &data, model.as_deref(), sampler, out),
        Command::Eval { data, predictions, model, sampler } => {
            commands::eval(&cfg, &data, predictions.as_deref(), model.as_deref(), sampler, out)
        }
        Command::SelectHard { data, n } => commands::select_hard(&cfg, &data, n, out),
        Command::Bench { model, ks } => {
            if let Some(ks) = ks {
                cfg.bench.ddim_steps = ks;
            }
            if let Some(n) = cli.global.samples {
                cfg.bench.samples = n;
            }
            bench::run_bench(&cfg, model.as_deref(), out)
        }
        Command::Plot { data, scene, predictions } => {
            plot::run_plot(&cfg, &data, scene.as_deref(), predictions.as_deref(), out)
        }
    }
}
