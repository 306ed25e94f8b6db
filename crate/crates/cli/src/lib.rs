//! Command-line surface: argument parsing, dispatch, and exit codes.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 when a run
//! fails or a verification does not pass.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use modicl_core::construction::{verify_dims, ConstructionReport};
use modicl_core::experiments::{
    generate_dataset, run_connectivity_experiment, run_construction_probe, run_control_eval, run_evaluation,
    run_probe_eval, run_training_in, ProbeOptions, RunConfig, PROBE_EPISODES,
};
use modicl_core::taskgen::dataset::{write_dataset, DatasetFormat};
use modicl_core::taskgen::{DistributionName, Split, TeacherDims};
use modicl_core::{rng, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "modicl", version, about = "Modular in-context regression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model online and write metrics, checkpoint and manifest.
    Train(RunArgs),
    /// Score a checkpoint's R² on one task distribution.
    Evaluate(EvaluateArgs),
    /// Fit a ridge probe from residual activations to task latents.
    Probe(ProbeArgs),
    /// Score a checkpoint on tasks from a freshly drawn teacher.
    Control(ControlArgs),
    /// Train on the connected and disconnected supports and compare.
    Connectivity(RunArgs),
    /// Check the hand-built attention block against the teacher.
    VerifyConstruction(VerifyArgs),
    /// Export sampled episodes to a file.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `model.layers=3`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> modicl_core::Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        match &self.config {
            Some(path) => RunConfig::from_file(path, &overrides),
            None => RunConfig::from_sources(None, &overrides),
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; beats the environment and the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task distribution; defaults to the run's held-out set.
    #[arg(long)]
    pub distribution: Option<String>,
    #[arg(long, default_value_t = 2_000)]
    pub episodes: usize,
    /// Episode seed; defaults to one derived from the run's evaluation seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Trained checkpoint to probe.
    #[arg(long, required_unless_present = "construction", conflicts_with = "construction")]
    pub checkpoint: Option<PathBuf>,
    /// Probe the hand-built block for the configured teacher instead.
    #[arg(long)]
    pub construction: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = PROBE_EPISODES)]
    pub fit_episodes: usize,
    #[arg(long, default_value_t = PROBE_EPISODES)]
    pub eval_episodes: usize,
    /// Residual tap; 0 is the embedding.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Episode seed; defaults to the run's evaluation seed.
    #[arg(long = "probe-seed")]
    pub probe_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed of the fresh teacher.
    #[arg(long, default_value_t = 0)]
    pub control_seed: u64,
    #[arg(long, default_value_t = 2_000)]
    pub episodes: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Teacher shape `M,d,h,o`; repeatable. Defaults to three shapes.
    #[arg(long = "dims", value_name = "M,d,h,o", value_parser = parse_dims)]
    pub dims: Vec<TeacherDims>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Binary,
    Json,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Destination file.
    #[arg(long)]
    pub output: PathBuf,
    /// Task distribution; defaults to the training distribution.
    #[arg(long)]
    pub distribution: Option<String>,
    #[arg(long, default_value_t = 1_000)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
    pub format: FormatArg,
    /// Episode seed; defaults to one derived from the master seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

/// Shapes checked when none are given: the default teacher and two others.
pub const DEFAULT_VERIFY_DIMS: [TeacherDims; 3] = [
    TeacherDims {
        modules: 6,
        input: 16,
        hidden: 16,
        output: 1,
    },
    TeacherDims {
        modules: 1,
        input: 2,
        hidden: 2,
        output: 1,
    },
    TeacherDims {
        modules: 3,
        input: 4,
        hidden: 5,
        output: 2,
    },
];

fn parse_dims(s: &str) -> Result<TeacherDims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [modules, input, hidden, output] if !v.contains(&0) => Ok(TeacherDims {
            modules,
            input,
            hidden,
            output,
        }),
        _ => Err("expected four positive integers M,d,h,o".into()),
    }
}

#[derive(Debug, Serialize)]
pub struct VerifySummary {
    pub pass: bool,
    pub reports: Vec<ConstructionReport>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_validation() => EXIT_USAGE,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(_) | CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serialises"));
}

fn existing(path: &Path) -> Result<&Path, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

fn distribution(name: Option<&str>) -> Result<Option<DistributionName>, CliError> {
    name.map(|n| n.parse().map_err(CliError::Core)).transpose()
}

fn output_dir(args: &RunArgs, config: &mut RunConfig) -> PathBuf {
    let dir = args.out.clone().unwrap_or_else(|| config.resolved_output_dir());
    config.output_dir = dir.clone();
    dir
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => {
            let mut config = args.config.resolve()?;
            let dir = output_dir(&args, &mut config);
            print_json(&run_training_in(&config, &dir)?);
        }
        Command::Connectivity(args) => {
            let mut config = args.config.resolve()?;
            let dir = output_dir(&args, &mut config);
            print_json(&run_connectivity_experiment(&config, &dir)?);
        }
        Command::Evaluate(args) => {
            let ckpt = existing(&args.checkpoint)?;
            let (_, config) = modicl_core::experiments::load_run(ckpt)?;
            let dist = match distribution(args.distribution.as_deref())? {
                Some(d) => d,
                None => config.task.ood()?,
            };
            let seed = args
                .seed
                .unwrap_or_else(|| rng::derive_seed(config.seeds().eval, &Split::of(dist).to_string()));
            print_json(&run_evaluation(ckpt, dist, args.episodes, seed)?);
        }
        Command::Probe(args) => {
            let options = ProbeOptions {
                fit_n: args.fit_episodes,
                eval_n: args.eval_episodes,
                layer: args.layer,
                lambda: args.lambda,
                seed: args.probe_seed,
            };
            let report = match &args.checkpoint {
                Some(ckpt) => run_probe_eval(existing(ckpt)?, options)?,
                None => run_construction_probe(&args.config.resolve()?, args.layer.unwrap_or(0), options)?,
            };
            print_json(&report);
        }
        Command::Control(args) => {
            print_json(&run_control_eval(
                existing(&args.checkpoint)?,
                args.control_seed,
                args.episodes,
            )?);
        }
        Command::VerifyConstruction(args) => {
            let dims = if args.dims.is_empty() {
                DEFAULT_VERIFY_DIMS.to_vec()
            } else {
                args.dims
            };
            let reports = dims
                .iter()
                .enumerate()
                .map(|(i, &d)| verify_dims(d, args.trials, args.tolerance, args.seed.wrapping_add(i as u64)))
                .collect::<modicl_core::Result<Vec<_>>>()?;
            let summary = VerifySummary {
                pass: reports.iter().all(|r| r.pass),
                reports,
            };
            print_json(&summary);
            if !summary.pass {
                return Err(CliError::Failed(
                    "construction differs from the teacher beyond tolerance".into(),
                ));
            }
        }
        Command::GenData(args) => {
            let config = args.config.resolve()?;
            let dist = distribution(args.distribution.as_deref())?.unwrap_or(config.task.train_distribution);
            let seed = args
                .data_seed
                .unwrap_or_else(|| rng::derive_seed(config.seed, "export"));
            let data = generate_dataset(&config, dist, args.episodes, seed)?;
            let format = match args.format {
                FormatArg::Binary => DatasetFormat::Binary,
                FormatArg::Json => DatasetFormat::Json,
            };
            write_dataset(&args.output, &data, format)?;
            eprintln!(
                "wrote {} episodes of {dist} to {}",
                args.episodes,
                args.output.display()
            );
        }
    }
    Ok(())
}
