//! `vidctl`: data generation, training, sampling, noise inspection,
//! evaluation and the threshold ablation, each run leaving a manifest.

pub mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use manifest::{hash_input, hash_tree, versions, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Bad input from the user (exit code 1).
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub fn user_error(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "vidctl", version, about = "Controllable text-to-video diffusion at toy scale", arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads for tensor kernels.
    #[arg(long, global = true, env = "VIDCTL_THREADS")]
    pub threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic moving-shape corpus with control maps.
    MakeData(MakeDataArgs),
    /// Train codec (learned mode) and denoiser; checkpoint under OUT/checkpoint.
    Train(TrainArgs),
    /// Sample one video: first frame, then the remaining frames.
    Sample(SampleArgs),
    /// Sample a long video auto-regressively.
    SampleLong(SampleLongArgs),
    /// Show residual masks and initial noise statistics for a clip.
    InspectNoise(InspectNoiseArgs),
    /// Sample every scene of a dataset and report metrics.
    Evaluate(EvaluateArgs),
    /// Sample one scene at several noise thresholds and compare flicker.
    AblateThreshold(AblateArgs),
    /// Re-run a recorded command and check its outputs are byte-identical.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeData(_) => "make-data",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::SampleLong(_) => "sample-long",
            Command::InspectNoise(_) => "inspect-noise",
            Command::Evaluate(_) => "evaluate",
            Command::AblateThreshold(_) => "ablate-threshold",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = "VIDCTL_OUT_DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Canvas height and width.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-frame Gaussian capture noise (std) on RGB values.
    #[arg(long, default_value_t = 0.0)]
    pub sensor_noise: f32,
    #[arg(long)]
    pub antialias: bool,
    /// Scene-distribution JSON; overrides --frames/--size/--sensor-noise/--antialias.
    #[arg(long)]
    pub sampler: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArg,
    /// Training config JSON; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root written by make-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from OUT/checkpoint when it holds trainer state.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    Dual,
    TextOnly,
}

#[derive(Debug, Args)]
pub struct GuidanceArgs {
    /// Residual threshold R_thres for noise initialization.
    #[arg(long = "thres", default_value_t = 0.1)]
    pub thres: f32,
    /// Text guidance scale.
    #[arg(long = "wt", default_value_t = 10.0)]
    pub wt: f64,
    /// Video (first-frame) guidance scale.
    #[arg(long = "wv", default_value_t = 1.5)]
    pub wv: f64,
    #[arg(long, value_enum, default_value_t = GuidanceArg::Dual)]
    pub guidance: GuidanceArg,
    /// DDIM steps (default from the checkpoint's schedule).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Directory of control PNGs (`depth_000.png`, ... for a depth model).
    #[arg(long)]
    pub controls: PathBuf,
    /// Use this image as frame 0 instead of sampling it.
    #[arg(long)]
    pub first_frame: Option<PathBuf>,
    /// Compute residual masks from this clip's `frame_*.png` instead of the controls.
    #[arg(long)]
    pub source_video: Option<PathBuf>,
    /// Frames to generate (default: one per control map).
    #[arg(long)]
    pub frames: Option<usize>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Debug, Args)]
pub struct SampleLongArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub controls: PathBuf,
    #[arg(long)]
    pub first_frame: Option<PathBuf>,
    #[arg(long)]
    pub source_video: Option<PathBuf>,
    #[arg(long)]
    pub iterations: usize,
    /// Frames per iteration, including the shared boundary frame.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Debug, Args)]
pub struct InspectNoiseArgs {
    #[command(flatten)]
    pub out: OutArg,
    /// Clip directory.
    #[arg(long)]
    pub video: PathBuf,
    /// PNG prefix inside the clip directory.
    #[arg(long, default_value = "frame")]
    pub prefix: String,
    #[arg(long = "thres", default_value_t = 0.1)]
    pub thres: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pixel-to-latent downsample factor.
    #[arg(long, default_value_t = 1)]
    pub factor: usize,
    #[arg(long, default_value_t = 3)]
    pub latent_channels: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Attribute classifier JSON; fitted on nothing when absent (alignment omitted).
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Evaluate only the first N scenes.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene directory; masks come from its frames.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0f32, 0.1, 1.0])]
    pub thresholds: Vec<f32>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long = "wt", default_value_t = 10.0)]
    pub wt: f64,
    #[arg(long = "wv", default_value_t = 1.5)]
    pub wv: f64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the replay writes; defaults to `<recorded out>-replay`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a command reports for its manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
}

/// Arguments after the subcommand name with `--out` removed.
fn recorded_args(argv: &[String], command: &str) -> Vec<String> {
    let start = argv.iter().position(|a| a == command).map_or(argv.len(), |i| i + 1);
    let mut out = Vec::new();
    let mut skip = false;
    for a in &argv[start..] {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" {
            skip = true;
            continue;
        }
        if a.starts_with("--out=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::MakeData(a) => Some(&a.out.out),
        Command::Train(a) => Some(&a.out.out),
        Command::Sample(a) => Some(&a.out.out),
        Command::SampleLong(a) => Some(&a.out.out),
        Command::InspectNoise(a) => Some(&a.out.out),
        Command::Evaluate(a) => Some(&a.out.out),
        Command::AblateThreshold(a) => Some(&a.out.out),
        Command::Replay(_) => None,
    }
}

fn execute(cli: &Cli, argv: &[String]) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(user_error("--threads must be at least 1"));
        }
        // Read by the tensor backend when it first sizes its pool.
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    if let Command::Replay(r) = &cli.command {
        return replay(r);
    }
    let out = out_dir(&cli.command).expect("non-replay commands have an output dir").to_path_buf();
    std::fs::create_dir_all(&out).map_err(|e| user_error(format!("cannot create {}: {e}", out.display())))?;
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::MakeData(a) => commands::make_data(a)?,
        Command::Train(a) => commands::train(a)?,
        Command::Sample(a) => commands::sample(a)?,
        Command::SampleLong(a) => commands::sample_long(a)?,
        Command::InspectNoise(a) => commands::inspect_noise(a)?,
        Command::Evaluate(a) => commands::evaluate(a)?,
        Command::AblateThreshold(a) => commands::ablate(a)?,
        Command::Replay(_) => unreachable!(),
    };
    let mut inputs = std::collections::BTreeMap::new();
    for p in &outcome.inputs {
        hash_input(p, &mut inputs)?;
    }
    let manifest = RunManifest {
        schema: manifest::MANIFEST_SCHEMA,
        command: cli.command.name().to_string(),
        args: recorded_args(argv, cli.command.name()),
        cwd: std::env::current_dir()?,
        threads: cli.threads,
        config: outcome.config,
        seeds: outcome.seeds,
        inputs,
        outputs: hash_tree(&out)?,
        wall_time_secs: start.elapsed().as_secs_f64(),
        versions: versions(),
    };
    manifest.write(&out)
}

fn replay(r: &ReplayArgs) -> anyhow::Result<()> {
    let recorded = RunManifest::read(&r.manifest).map_err(|e| user_error(format!("{e:#}")))?;
    if recorded.command == "replay" {
        return Err(user_error("cannot replay a replay"));
    }
    let recorded_out = r.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = match &r.out {
        Some(o) => o.clone(),
        None => {
            let mut name = recorded_out.file_name().unwrap_or_default().to_os_string();
            name.push("-replay");
            recorded_out.with_file_name(name)
        }
    };
    let out = std::path::absolute(&out)?;
    std::env::set_current_dir(&recorded.cwd)
        .map_err(|e| user_error(format!("recorded working directory {}: {e}", recorded.cwd.display())))?;
    let mut now_inputs = std::collections::BTreeMap::new();
    for key in recorded.inputs.keys() {
        let path = Path::new(key);
        if path.exists() {
            hash_input(path, &mut now_inputs)?;
        }
    }
    let changed: Vec<_> = recorded.inputs.iter().filter(|(k, v)| now_inputs.get(*k) != Some(v)).map(|(k, _)| k.as_str()).collect();
    if !changed.is_empty() {
        return Err(user_error(format!("inputs changed since the recorded run: {}", changed.join(", "))));
    }
    let mut argv = vec!["vidctl".to_string()];
    if let Some(t) = recorded.threads {
        argv.push(format!("--threads={t}"));
    }
    argv.push(recorded.command.clone());
    argv.extend(recorded.args.iter().cloned());
    argv.push(format!("--out={}", out.display()));
    let cli = Cli::try_parse_from(&argv).map_err(|e| user_error(format!("recorded arguments no longer parse: {e}")))?;
    execute(&cli, &argv)?;
    let fresh = RunManifest::read(&out.join(manifest::MANIFEST_FILE))?;
    let diff = recorded.output_differences(&fresh.outputs);
    if !diff.is_empty() {
        anyhow::bail!("replay outputs differ from the recording: {}", diff.join(", "));
    }
    println!("replay of `{}` reproduced {} output files in {}", recorded.command, fresh.outputs.len(), out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return EXIT_USER;
        }
        if let Some(e) = cause.downcast_ref::<vidctl_core::Error>() {
            return if e.is_user_error() { EXIT_USER } else { EXIT_INTERNAL };
        }
    }
    EXIT_INTERNAL
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<String> = args.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
