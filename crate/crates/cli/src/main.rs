use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use volreg::synth::Scenario;
use volreg::Transform;

mod commands;

/// Tumor-volume-preserving deformable registration of 3D volumes.
#[derive(Parser, Debug)]
#[command(name = "volreg", version)]
struct Cli {
    /// Number of independent cases processed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Estimate the soft tumor mask of a pair.
    EstimateMask(EstimateArgs),
    /// Mask estimation followed by volume-preserving registration.
    Pipeline(PipelineArgs),
    /// Write a synthetic phantom case directory.
    Synth(SynthArgs),
    /// Warp a volume or mask with a displacement field.
    Warp(WarpArgs),
    /// Evaluate a displacement field against annotations.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug, Clone)]
struct Inputs {
    /// Case directory as written by `volreg synth`; explicit paths override its files.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    moving: Option<PathBuf>,
    #[arg(long)]
    fixed: Option<PathBuf>,
    /// Organ mask of the moving image.
    #[arg(long)]
    organ: Option<PathBuf>,
    /// Organ mask of the fixed image (enables the metrics report).
    #[arg(long)]
    organ_fixed: Option<PathBuf>,
    /// Tumor mask of the moving image.
    #[arg(long)]
    tumor: Option<PathBuf>,
    /// Landmark CSV with `id,space,x,y,z` rows.
    #[arg(long)]
    landmarks: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Library defaults.
    Default,
    /// Settings tuned on the synthetic phantoms.
    Calibrated,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON file with registration settings; keys not present keep the preset value.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Mask transform: sigmoid, sin or hard:<threshold>.
    #[arg(long, value_parser = parse_transform)]
    transform: Option<Transform>,
}

fn parse_transform(s: &str) -> Result<Transform, String> {
    s.parse().map_err(|e: volreg::Error| e.to_string())
}

#[derive(Clone, Debug, PartialEq)]
enum MaskSource {
    None,
    File(PathBuf),
    Organ,
    Estimated,
}

fn parse_mask_source(s: &str) -> Result<MaskSource, String> {
    match s {
        "none" => Ok(MaskSource::None),
        "organ" => Ok(MaskSource::Organ),
        "estimated" => Ok(MaskSource::Estimated),
        _ => match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(MaskSource::File(p.into())),
            _ => Err(format!("expected none, organ, estimated or file:<path>, got {s:?}")),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Soft tumor mask: none, organ, estimated or file:<path>.
    #[arg(long, value_parser = parse_mask_source, default_value = "none")]
    mask_source: MaskSource,
    /// Volume-preserving term.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    vp: Switch,
    /// Skip the edge-aligning pass when the mask is estimated.
    #[arg(long)]
    skip_prereg: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Estimate without the bilateral pre-registration pass.
    #[arg(long)]
    skip_prereg: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Case directories; each gets its own subdirectory of `--out` when several are given.
    #[arg(long = "cases", num_args = 1.., conflicts_with = "case")]
    cases: Vec<PathBuf>,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    skip_prereg: bool,
    /// Also run the regular registration and write both reports.
    #[arg(long)]
    compare_regular: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Voxels per axis.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Add uneven bumps to the fixed organ outline.
    #[arg(long)]
    boundary_mismatch: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: volreg::Error| e.to_string())
}

#[derive(Args, Debug)]
struct WarpArgs {
    /// Scalar volume or binary mask.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Flag combinations that parse but make no sense together.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<UsageError>().is_some() {
        return ("usage", EXIT_USAGE);
    }
    match err.chain().find_map(|e| e.downcast_ref::<volreg::Error>()) {
        Some(e) if e.is_numerical() => ("numerical", EXIT_NUMERICAL),
        _ => ("validation", EXIT_VALIDATION),
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("VOLREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("VOLREG_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    if cli.jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    match cli.command {
        Command::Register(a) => commands::register(a),
        Command::EstimateMask(a) => commands::estimate_mask(a),
        Command::Pipeline(a) => commands::pipeline(a, cli.jobs),
        Command::Synth(a) => commands::synth(a),
        Command::Warp(a) => commands::warp(a),
        Command::Metrics(a) => commands::metrics(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}
