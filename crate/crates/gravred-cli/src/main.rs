use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, ArgGroup, Args, Parser, Subcommand, ValueEnum};
use gravred::constants::WATER_DENSITY;
use gravred::corrsig::DEFAULT_MARGIN;
use gravred::dpcore::CorrelationPolicy;
use gravred::relfield::Evaluator;

mod commands;

use commands::{CommandResult, Failure};

/// Gravity-induced state reduction experiments as reproducible batch commands.
///
/// Every command writes its tables into --out and prints a one-line summary on stdout.
/// Logs go to stderr. Exit codes: 0 ok, 2 invalid input, 3 numeric failure,
/// 4 assertion failure.
#[derive(Debug, Parser)]
#[command(name = "gravred", version)]
struct Cli {
    /// Directory for output files, created if missing.
    #[arg(long, global = true, default_value = "gravred-out")]
    out: PathBuf,

    /// Table format of the output files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Coupling energies and decay times between the states of a spec or a sphere preset.
    Couplings(CouplingsArgs),
    /// Exact decay tree and final-state probabilities.
    Tree(TreeArgs),
    /// Monte Carlo histories: frequency table plus a JSON-lines run store.
    Simulate(SimulateArgs),
    /// Couplings field over the space-time grid, plus the bundle map.
    FieldMap(FieldMapArgs),
    /// Judge a correlated reduction against the signaling constraint.
    CheckSignaling(SignalingArgs),
    /// Reducer probabilities attenuated with detector distance.
    Predict(PredictArgs),
    /// Check the detector / reducer / light-travel time-scale window.
    Design(DesignArgs),
    /// Write a built-in experiment as an editable spec file.
    Spec(SpecArgs),
}

/// Grid overrides shared by the grid-based commands.
#[derive(Debug, Args)]
pub struct GridFlags {
    /// Replace the experiment grid: cell width (m), time step (s) and spatial extent (m) from x_min.
    #[arg(long, value_name = "DX,DT,EXTENT", value_parser = parse_grid)]
    pub grid: Option<[f64; 3]>,

    /// Replace the grid time step, s (applied after --grid).
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// A water sphere superposed with its translate.
    WaterSphere,
    /// Two positions of a homogeneous sphere of the given density.
    SpherePair,
    /// The same sphere twice: all couplings vanish.
    IdenticalPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Analytic,
    Quadrature,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["spec", "preset"])))]
pub struct CouplingsArgs {
    /// Built-in experiment name or spec file.
    pub spec: Option<String>,

    /// Sphere geometry instead of a spec.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,

    /// Sphere diameter for the presets, m.
    #[arg(long, default_value_t = 1e-6)]
    pub diameter: f64,

    /// Centre distance between the two positions, m [default: 5 diameters].
    #[arg(long)]
    pub separation: Option<f64>,

    /// Sphere density for sphere-pair, kg/m³ (water-sphere always uses water).
    #[arg(long, default_value_t = WATER_DENSITY)]
    pub density: f64,

    /// Integration method for the coupling energies.
    #[arg(long, value_enum, default_value_t = MethodArg::Analytic)]
    pub method: MethodArg,
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    /// Built-in experiment name or spec file.
    pub spec: String,

    /// Correlation policy: none, first-winner or born-fallback.
    #[arg(long, default_value = "none")]
    pub policy: CorrelationPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    /// Non-relativistic jump process with exact waiting times.
    Nonrel,
    /// Reduction waves over the space-time grid (correlations off).
    Waves,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Nonrel => "nonrel",
            Engine::Waves => "waves",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in experiment name or spec file.
    pub spec: String,

    #[arg(long, value_enum, default_value_t = Engine::Nonrel)]
    pub engine: Engine,

    /// Number of histories [default: the experiment's policies.runs].
    #[arg(long)]
    pub runs: Option<u64>,

    /// Base seed; run i draws from stream i [default: the experiment's policies.seed].
    #[arg(long)]
    pub seed: Option<u64>,

    /// Correlation policy of the nonrel engine: none, first-winner or born-fallback.
    #[arg(long, default_value = "none")]
    pub policy: CorrelationPolicy,

    /// Largest sweep step of the waves engine, s [default: half the grid time step].
    #[arg(long)]
    pub dtr: Option<f64>,

    #[command(flatten)]
    pub grid: GridFlags,
}

#[derive(Debug, Args)]
pub struct FieldMapArgs {
    /// Built-in experiment name or spec file.
    pub spec: String,

    /// Only the bundle pair separating these two scenario labels, e.g. 1,2.
    #[arg(long, value_name = "K,L", value_parser = parse_pair)]
    pub pair: Option<(String, String)>,

    /// Field evaluator: quasistatic or retarded [default: the experiment's policies.evaluator].
    #[arg(long)]
    pub evaluator: Option<Evaluator>,

    #[command(flatten)]
    pub grid: GridFlags,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["preset", "spec"])))]
pub struct SignalingArgs {
    /// Ready-made geometry.
    #[arg(long, value_parser = ["fig23a", "fig23b", "colocated"])]
    pub preset: Option<String>,

    /// Replay a waves-engine history of this spec and judge two of its events.
    #[arg(long, requires_all = ["stim", "corr"])]
    pub spec: Option<String>,

    /// Run index of the replayed history.
    #[arg(long, default_value_t = 0)]
    pub run: u64,

    /// Base seed of the replayed history [default: the experiment's policies.seed].
    #[arg(long)]
    pub seed: Option<u64>,

    /// Index of the stimulating event in the history.
    #[arg(long)]
    pub stim: Option<usize>,

    /// Index of the correlated event in the history.
    #[arg(long)]
    pub corr: Option<usize>,

    /// Largest sweep step of the replay, s [default: half the grid time step].
    #[arg(long)]
    pub dtr: Option<f64>,

    #[command(flatten)]
    pub grid: GridFlags,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("distances").required(true).args(["d", "sweep"])))]
pub struct PredictArgs {
    /// Built-in experiment name or spec file of the reducer setup.
    #[arg(long, default_value = "fig21")]
    pub spec: String,

    /// Detector to reducer distances, m (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub d: Vec<f64>,

    /// Evenly spaced distances instead: start,stop,count.
    #[arg(long, value_name = "START,STOP,COUNT", value_parser = parse_sweep)]
    pub sweep: Option<(f64, f64, usize)>,

    /// Reducer decay time, s.
    #[arg(long)]
    pub tau_red: f64,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Detector superposition lifetime, s.
    #[arg(long)]
    pub tau_det: f64,

    /// Reducer decay time, s.
    #[arg(long)]
    pub tau_red: f64,

    /// Detector to reducer distance, m.
    #[arg(long, default_value_t = 0.3)]
    pub d: f64,

    /// Required factor between neighbouring rates.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// Built-in experiment name or spec file.
    pub spec: String,
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", v.len()));
    }
    Ok(v)
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once(',') {
        Some((k, l)) if !k.trim().is_empty() && !l.trim().is_empty() => Ok((k.trim().into(), l.trim().into())),
        _ => Err("expected two scenario labels as K,L".into()),
    }
}

fn parse_grid(s: &str) -> Result<[f64; 3], String> {
    let v = parse_floats(s, 3)?;
    Ok([v[0], v[1], v[2]])
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize), String> {
    let v = parse_floats(s, 3)?;
    if v[2] < 1.0 || v[2].fract() != 0.0 {
        return Err("count must be a positive integer".into());
    }
    Ok((v[0], v[1], v[2] as usize))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    let out = commands::Output {
        dir: cli.out,
        format: cli.format,
    };
    let result = match cli.command {
        Command::Couplings(a) => commands::couplings(&out, a),
        Command::Tree(a) => commands::tree(&out, a),
        Command::Simulate(a) => commands::simulate(&out, a),
        Command::FieldMap(a) => commands::field_map(&out, a),
        Command::CheckSignaling(a) => commands::check_signaling(&out, a),
        Command::Predict(a) => commands::predict(&out, a),
        Command::Design(a) => commands::design(&out, a),
        Command::Spec(a) => commands::spec(&out, a),
    };
    match result {
        Ok(r) => report(r),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn report(r: CommandResult) -> ExitCode {
    let files: Vec<String> = r.files.iter().map(|p| p.display().to_string()).collect();
    println!("{} [{}]", r.summary, files.join(", "));
    if let Some(why) = &r.assertion_failed {
        eprintln!("assertion failed: {why}");
    }
    ExitCode::from(r.exit_code())
}

impl From<gravred::Error> for Failure {
    fn from(e: gravred::Error) -> Self {
        use gravred::Error as E;
        match e {
            E::InvalidInput(_) | E::Schema(_) | E::Io { .. } | E::InsufficientHistory(_) => Failure::Input(e.to_string()),
            E::NumericFailure { .. } | E::StepTooLarge { .. } | E::InvalidState(_) | E::Timeout { .. } => {
                Failure::Numeric(e.to_string())
            }
        }
    }
}
