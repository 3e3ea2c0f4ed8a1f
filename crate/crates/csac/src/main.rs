//! Command-line experiment driver.
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, bad config
//! file, invalid maze), 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use csac::coop::{CoopError, Method};
use csac::harness::{
    self, HarnessError, MazeChoice, RunDir, SweepSpec, TrainConfig, TrainConfigFile,
};
use csac::maze::{builtin_maze, MazeError, MazeSpec, Scale};

#[derive(Parser)]
#[command(
    name = "csac",
    version,
    about = "Cooperative Soft Actor-Critic on the multi-room maze",
    long_about = "Trains cooperative, uncooperative or single-agent soft actor-critic \
                  on the multi-room maze domain, sweeps the cooperative ratio, and \
                  exports metrics, checkpoints and trajectories.\n\n\
                  Every run is deterministic in --seed: identical config and seed give \
                  byte-identical metrics. --scale desk shrinks the domain and budget \
                  to desktop size; --scale paper uses the full-size domain and budget. \
                  --out-dir receives metrics.csv, run_manifest.toml and checkpoints; \
                  an interrupted run restarts from its last resume checkpoint when \
                  re-invoked with the same config."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration.
    Train(TrainArgs),
    /// Run a cooperative-ratio sweep (grid x seeds, parallel workers).
    Sweep(SweepArgs),
    /// Evaluate a checkpoint: success rate over evaluation episodes.
    Eval(EvalArgs),
    /// Export evaluation trajectories from a checkpoint as CSV.
    ExportTraj(ExportTrajArgs),
    /// Check a maze layout's structural invariants.
    ValidateMaze(ValidateMazeArgs),
}

#[derive(Args)]
#[command(group = ArgGroup::new("maze").args(["rooms", "layout"]))]
struct MazeArgs {
    /// Builtin maze size (2, 3 or 4 rooms).
    #[arg(long)]
    rooms: Option<usize>,
    /// Maze layout file (TOML) instead of a builtin.
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (TOML); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[command(flatten)]
    maze: MazeArgs,
    /// Shared cooperative ratio, broadcast to every cooperative policy.
    #[arg(long)]
    coop_ratio: Option<f64>,
    /// Comma-separated per-policy cooperative ratios (overrides --coop-ratio).
    #[arg(long, value_parser = parse_f64_list)]
    coop_ratios: Option<std::vec::Vec<f64>>,
    /// desk | paper.
    #[arg(long, value_parser = parse_scale)]
    scale: Scale,
    /// Master seed; all run randomness derives from it.
    #[arg(long)]
    seed: u64,
    /// Output directory for metrics, manifest and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Suppress the per-epoch progress line.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Base config file (TOML); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[command(flatten)]
    maze: MazeArgs,
    /// Comma-separated ratio axis, broadcast over all cooperative policies.
    #[arg(long, value_parser = parse_f64_list)]
    etas: Option<std::vec::Vec<f64>>,
    /// Per-policy axes, one flag per policy: --axis "0.0,0.5" --axis "0.5,1.0".
    #[arg(long, value_parser = parse_f64_list)]
    axis: Vec<std::vec::Vec<f64>>,
    /// Comma-separated seeds, one full run per grid point and seed.
    #[arg(long, value_parser = parse_u64_list)]
    seeds: std::vec::Vec<u64>,
    /// Trailing epochs averaged into each point's success rate.
    #[arg(long, default_value_t = 50)]
    window: usize,
    #[arg(long, value_parser = parse_scale)]
    scale: Scale,
    /// Base seed used for config resolution (per-run seeds come from --seeds).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Networks checkpoint (ckpt_final.ckpt or an epoch checkpoint).
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    maze: MazeArgs,
    #[arg(long, value_parser = parse_scale, default_value = "desk")]
    scale: Scale,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct ExportTrajArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    maze: MazeArgs,
    #[arg(long, value_parser = parse_scale, default_value = "desk")]
    scale: Scale,
    /// Number of evaluation episodes to export.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// 1-based subtask index whose critic colours the rows.
    #[arg(long, default_value_t = 2)]
    critic: usize,
    #[arg(long)]
    seed: u64,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateMazeArgs {
    /// Layout file to validate; or use --rooms/--scale for a builtin.
    path: Option<PathBuf>,
    #[command(flatten)]
    maze: MazeArgs,
    #[arg(long, value_parser = parse_scale, default_value = "desk")]
    scale: Scale,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "csac" => Ok(Method::Csac),
        "uncooperative" => Ok(Method::Uncooperative),
        "single" => Ok(Method::Single),
        _ => Err(format!("unknown method {s:?} (csac | uncooperative | single)")),
    }
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    match s {
        "desk" => Ok(Scale::Desk),
        "paper" => Ok(Scale::Paper),
        _ => Err(format!("unknown scale {s:?} (desk | paper)")),
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad number {p:?}: {e}")))
        .collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed {p:?}: {e}")))
        .collect()
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> CliError {
        match &e {
            HarnessError::Config(_) => CliError::Config(e.to_string()),
            HarnessError::Maze(
                MazeError::InvalidLayout(_)
                | MazeError::LayoutFile(_)
                | MazeError::UnsupportedRoomCount(_),
            ) => CliError::Config(e.to_string()),
            HarnessError::Coop(CoopError::EtaOutOfRange(_) | CoopError::RatioCount { .. }) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MazeError> for CliError {
    fn from(e: MazeError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, anything else is a
            // usage/config error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(args) => train(args),
        Cmd::Sweep(args) => sweep(args),
        Cmd::Eval(args) => eval(args),
        Cmd::ExportTraj(args) => export_traj(args),
        Cmd::ValidateMaze(args) => validate_maze(args),
    }
}

fn load_config_file(path: &Option<PathBuf>) -> Result<TrainConfigFile, CliError> {
    match path {
        None => Ok(TrainConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            TrainConfigFile::from_toml(&text).map_err(CliError::from)
        }
    }
}

fn resolve_config(
    file: TrainConfigFile,
    method: Option<Method>,
    maze: &MazeArgs,
    coop_ratio: Option<f64>,
    coop_ratios: Option<Vec<f64>>,
    scale: Scale,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<TrainConfig, CliError> {
    let mut file = file;
    if method.is_some() {
        file.method = method;
    }
    if maze.rooms.is_some() {
        file.rooms = maze.rooms;
        file.layout = None;
    }
    if let Some(p) = &maze.layout {
        file.layout = Some(p.clone());
        file.rooms = None;
    }
    if coop_ratio.is_some() {
        file.coop_ratio = coop_ratio;
        file.coop_ratios = None;
    }
    if coop_ratios.is_some() {
        file.coop_ratios = coop_ratios;
    }
    file.scale = Some(scale);
    if seed.is_some() {
        file.seed = seed;
    }
    if epochs.is_some() {
        file.hyper.epochs = epochs;
    }
    file.resolve(None).map_err(CliError::from)
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let file = load_config_file(&args.config)?;
    let config = resolve_config(
        file,
        args.method,
        &args.maze,
        args.coop_ratio,
        args.coop_ratios,
        args.scale,
        Some(args.seed),
        args.epochs,
    )?;
    let dir = RunDir::create(&args.out_dir)?;
    let run = harness::run_to_completion(config, &dir, !args.quiet)?;
    let last = run.stats.last();
    println!(
        "done: {} epochs, final success rate {}",
        run.completed_epochs,
        last.map_or(0.0, |s| s.eval_success_rate)
    );
    println!("metrics: {}", dir.metrics_path().display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let file = load_config_file(&args.config)?;
    let config = resolve_config(
        file,
        args.method,
        &args.maze,
        None,
        None,
        args.scale,
        Some(args.seed),
        args.epochs,
    )?;
    let axes = if !args.axis.is_empty() {
        args.axis.clone()
    } else if let Some(e) = &args.etas {
        vec![e.clone()]
    } else {
        return Err(CliError::Config("sweep needs --etas or --axis".into()));
    };
    if args.seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed in --seeds".into()));
    }
    let spec = SweepSpec { axes, seeds: args.seeds.clone(), trailing_epochs: args.window };
    let threads = args.threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let rows = harness::run_sweep(&spec, &config, &args.out_dir, threads)?;
    println!("point etas | seed | trailing success");
    for row in &rows {
        let etas = row.etas.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>().join(",");
        match row.trailing_success {
            Some(s) => println!("{etas} | {} | {s:.3}", row.seed),
            None => println!("{etas} | {} | FAILED", row.seed),
        }
    }
    println!("table: {}", args.out_dir.join("sweep.csv").display());
    Ok(())
}

fn load_maze_choice(maze: &MazeArgs, scale: Scale) -> Result<MazeSpec, CliError> {
    match (&maze.rooms, &maze.layout) {
        (Some(r), None) => Ok(builtin_maze(*r, scale)?),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            Ok(MazeSpec::from_layout_toml(&text)?)
        }
        _ => Err(CliError::Config("specify exactly one of --rooms or --layout".into())),
    }
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let spec = load_maze_choice(&args.maze, args.scale)?;
    let config = TrainConfig {
        method: Method::Csac,
        maze: MazeChoice::Rooms(spec.room_count()),
        scale: args.scale,
        seed: args.seed,
        coop_ratios: vec![1.0; spec.room_count() - 1],
        hyper: harness::Hyper::defaults_for(args.scale),
    };
    let rate = harness::evaluate_checkpoint(&args.checkpoint, &spec, &config, args.episodes)?;
    println!("success rate over {} episodes: {rate}", args.episodes);
    Ok(())
}

fn export_traj(args: ExportTrajArgs) -> Result<(), CliError> {
    let spec = load_maze_choice(&args.maze, args.scale)?;
    let csv =
        harness::export_trajectories(&args.checkpoint, &spec, args.count, args.critic, args.seed)?;
    match &args.out {
        Some(p) => {
            std::fs::write(p, csv)?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn validate_maze(args: ValidateMazeArgs) -> Result<(), CliError> {
    let spec = if let Some(p) = &args.path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
        MazeSpec::from_layout_toml(&text)?
    } else {
        load_maze_choice(&args.maze, args.scale)?
    };
    spec.validate()?;
    let dead_ends = spec
        .transitions
        .iter()
        .map(|t| t.doors.iter().filter(|d| d.dead_end).count())
        .sum::<usize>();
    println!(
        "valid: {} rooms, {} transitions, {} dead-end pockets, {} wall segments",
        spec.room_count(),
        spec.transitions.len(),
        dead_ends,
        spec.walls.len()
    );
    Ok(())
}
