//! Epoch-based experiment driver.
//!
//! An epoch is a block of evaluation steps (start-area resets, nothing
//! stored), a block of exploration steps (random-location resets, stored in
//! the replay buffers), and a block of training passes. The driver writes
//! one metrics row per epoch, keeps a rolling full-state checkpoint for
//! resumption, and can sweep the cooperative ratio over a grid of values
//! and seeds in parallel.
//!
//! Determinism contract: a run is a pure function of its resolved config
//! (including the seed); two identical runs produce byte-identical
//! `metrics.csv` files. The `seconds` column therefore reports simulated
//! time (cumulative environment steps times the control period `dt`), not
//! wall-clock time; per-epoch wall-clock durations go to stdout only.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::{self, Checkpoint, CkptError};
use crate::coop::{CoopError, CoopRatios, Method, Trainer};
use crate::maze::{builtin_maze, MazeEnv, MazeError, MazeSpec, ResetMode, Scale};
use crate::replay::{ReplayBuffer, TransitionRecord};
use crate::sac::{SacConfig, SacError};
use crate::seeding::{seeded_rng, STREAM_ENV};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error(transparent)]
    Coop(#[from] CoopError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

// ── configuration ───────────────────────────────────────────────────

/// All training hyperparameters. The standard values are the full-scale
/// defaults; desk scale shrinks the budget so one run fits a desktop core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_episode_len: usize,
    pub tau: f64,
    pub eval_steps_per_epoch: usize,
    pub explore_steps_per_epoch: usize,
    /// Episode cap during exploration only; shorter episodes mean more
    /// random spawns per epoch. `None` uses `max_episode_len`.
    pub explore_episode_len: Option<usize>,
    pub train_loops_per_epoch: usize,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    /// Records required per buffer before its bundle trains; defaults to
    /// `max(batch_size, 1000)`.
    pub warmup: Option<usize>,
    pub auto_alpha: bool,
    pub init_alpha: f64,
    pub literal_target_form: bool,
    /// Write a networks-only checkpoint every this many epochs (0 = only
    /// the final one).
    pub checkpoint_every: usize,
    /// Write the full resumable state every this many epochs (0 = never).
    pub resume_every: usize,
}

impl Hyper {
    pub fn paper_defaults() -> Hyper {
        Hyper {
            gamma: 0.95,
            buffer_capacity: 1_000_000,
            batch_size: 256,
            learning_rate: 3e-4,
            max_episode_len: 1000,
            tau: 0.005,
            eval_steps_per_epoch: 5000,
            explore_steps_per_epoch: 5000,
            explore_episode_len: None,
            train_loops_per_epoch: 1000,
            epochs: 3000,
            hidden: vec![256, 256],
            warmup: None,
            auto_alpha: true,
            init_alpha: 1.0,
            literal_target_form: false,
            checkpoint_every: 100,
            resume_every: 10,
        }
    }

    pub fn desk_defaults() -> Hyper {
        Hyper {
            buffer_capacity: 60_000,
            batch_size: 192,
            max_episode_len: 300,
            eval_steps_per_epoch: 1600,
            explore_steps_per_epoch: 1000,
            explore_episode_len: Some(80),
            train_loops_per_epoch: 300,
            epochs: 300,
            hidden: vec![48, 48],
            checkpoint_every: 0,
            resume_every: 0,
            ..Hyper::paper_defaults()
        }
    }

    pub fn defaults_for(scale: Scale) -> Hyper {
        match scale {
            Scale::Paper => Hyper::paper_defaults(),
            Scale::Desk => Hyper::desk_defaults(),
        }
    }

    pub fn warmup_records(&self) -> usize {
        self.warmup.unwrap_or(self.batch_size.max(1000))
    }
}

/// Which maze to run: a builtin room count or a layout file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MazeChoice {
    Rooms(usize),
    Layout(PathBuf),
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub maze: MazeChoice,
    pub scale: Scale,
    pub seed: u64,
    /// Per-cooperative-policy ratios (length = room count - 1). Ignored
    /// unless `method = csac`.
    pub coop_ratios: Vec<f64>,
    pub hyper: Hyper,
}

/// The on-disk config file: everything optional on top of the scale's
/// defaults. CLI flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub method: Option<Method>,
    pub rooms: Option<usize>,
    pub layout: Option<PathBuf>,
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
    /// One shared ratio, broadcast to every cooperative policy.
    pub coop_ratio: Option<f64>,
    /// Per-policy ratios; takes precedence over `coop_ratio`.
    pub coop_ratios: Option<Vec<f64>>,
    #[serde(default)]
    pub hyper: HyperOverrides,
}

/// Field-by-field overrides of [`Hyper`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    pub gamma: Option<f64>,
    pub buffer_capacity: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_episode_len: Option<usize>,
    pub tau: Option<f64>,
    pub eval_steps_per_epoch: Option<usize>,
    pub explore_steps_per_epoch: Option<usize>,
    pub explore_episode_len: Option<usize>,
    pub train_loops_per_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub warmup: Option<usize>,
    pub auto_alpha: Option<bool>,
    pub init_alpha: Option<f64>,
    pub literal_target_form: Option<bool>,
    pub checkpoint_every: Option<usize>,
    pub resume_every: Option<usize>,
}

impl HyperOverrides {
    pub fn apply(&self, base: &mut Hyper) {
        macro_rules! ov {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { base.$f = v.clone(); } )* };
        }
        ov!(
            gamma,
            buffer_capacity,
            batch_size,
            learning_rate,
            max_episode_len,
            tau,
            eval_steps_per_epoch,
            explore_steps_per_epoch,
            train_loops_per_epoch,
            epochs,
            hidden,
            auto_alpha,
            init_alpha,
            literal_target_form,
            checkpoint_every,
            resume_every
        );
        if self.warmup.is_some() {
            base.warmup = self.warmup;
        }
        if self.explore_episode_len.is_some() {
            base.explore_episode_len = self.explore_episode_len;
        }
    }
}

impl TrainConfigFile {
    pub fn from_toml(text: &str) -> Result<TrainConfigFile, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Resolves against the scale defaults into a full config. The maze is
    /// loaded separately via [`TrainConfig::load_maze`].
    pub fn resolve(&self, room_count_hint: Option<usize>) -> Result<TrainConfig, HarnessError> {
        let scale = self.scale.unwrap_or(Scale::Desk);
        let mut hyper = Hyper::defaults_for(scale);
        self.hyper.apply(&mut hyper);
        let method = self.method.unwrap_or(Method::Csac);
        let maze = match (&self.rooms, &self.layout) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::Config("set either rooms or layout, not both".into()))
            }
            (Some(r), None) => MazeChoice::Rooms(*r),
            (None, Some(p)) => MazeChoice::Layout(p.clone()),
            (None, None) => MazeChoice::Rooms(room_count_hint.unwrap_or(2)),
        };
        let rooms_for_ratios = match &maze {
            MazeChoice::Rooms(r) => *r,
            MazeChoice::Layout(p) => {
                let text = fs::read_to_string(p)?;
                MazeSpec::from_layout_toml(&text)?.room_count()
            }
        };
        let coop_ratios = match (&self.coop_ratios, self.coop_ratio) {
            (Some(v), _) => v.clone(),
            (None, Some(e)) => vec![e; rooms_for_ratios.saturating_sub(1)],
            (None, None) => vec![0.1; rooms_for_ratios.saturating_sub(1)],
        };
        Ok(TrainConfig {
            method,
            maze,
            scale,
            seed: self.seed.unwrap_or(0),
            coop_ratios,
            hyper,
        })
    }
}

impl TrainConfig {
    /// Loads and validates the maze, with the episode cap overridden by the
    /// hyperparameters.
    pub fn load_maze(&self) -> Result<MazeSpec, HarnessError> {
        let mut spec = match &self.maze {
            MazeChoice::Rooms(r) => builtin_maze(*r, self.scale)?,
            MazeChoice::Layout(p) => {
                let text = fs::read_to_string(p)?;
                MazeSpec::from_layout_toml(&text)?
            }
        };
        spec.max_episode_steps = self.hyper.max_episode_len;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            gamma: self.hyper.gamma,
            tau: self.hyper.tau,
            learning_rate: self.hyper.learning_rate,
            hidden: self.hyper.hidden.clone(),
            activation: crate::nn::Activation::Relu,
            auto_alpha: self.hyper.auto_alpha,
            init_alpha: self.hyper.init_alpha,
            target_entropy: None,
            literal_target_form: self.hyper.literal_target_form,
        }
    }
}

// ── per-epoch statistics ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Cumulative environment steps (evaluation + exploration).
    pub env_steps: u64,
    /// Successful eval episodes / eval episodes completed this epoch.
    pub eval_success_rate: f64,
    /// Mean per-subtask return over completed eval episodes.
    pub subtask_returns: Vec<f64>,
    /// Mean critic/policy loss per bundle over the passes that trained.
    pub critic_losses: Vec<f64>,
    pub policy_losses: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Simulated seconds: cumulative env steps times dt (deterministic).
    pub seconds: f64,
    /// Wall-clock seconds for this epoch; reported on stdout, never in the
    /// metrics CSV (which must be byte-identical across reruns).
    pub wall_seconds: f64,
}

pub fn metrics_header(subtasks: usize, bundles: usize) -> String {
    let mut h = String::from("epoch,env_steps,eval_success_rate");
    for j in 1..=subtasks {
        write!(h, ",return_sub{j}").unwrap();
    }
    for a in 1..=bundles {
        write!(h, ",q_loss_{a}").unwrap();
    }
    for a in 1..=bundles {
        write!(h, ",pi_loss_{a}").unwrap();
    }
    for a in 1..=bundles {
        write!(h, ",alpha_{a}").unwrap();
    }
    h.push_str(",seconds");
    h
}

impl EpochStats {
    pub fn to_csv_row(&self) -> String {
        let mut row = format!("{},{},{}", self.epoch, self.env_steps, self.eval_success_rate);
        for v in &self.subtask_returns {
            write!(row, ",{v}").unwrap();
        }
        for v in &self.critic_losses {
            write!(row, ",{v}").unwrap();
        }
        for v in &self.policy_losses {
            write!(row, ",{v}").unwrap();
        }
        for v in &self.alphas {
            write!(row, ",{v}").unwrap();
        }
        write!(row, ",{}", self.seconds).unwrap();
        row
    }
}

// ── the run driver ──────────────────────────────────────────────────

/// One training run: environment, trainer, RNG streams, accumulated stats.
pub struct Run {
    pub config: TrainConfig,
    pub spec: MazeSpec,
    pub env: MazeEnv,
    pub trainer: Trainer,
    pub env_rng: ChaCha8Rng,
    pub completed_epochs: usize,
    pub env_steps: u64,
    pub stats: Vec<EpochStats>,
    /// Print one line per epoch to stdout.
    pub verbose: bool,
}

impl Run {
    pub fn new(config: TrainConfig) -> Result<Run, HarnessError> {
        let spec = config.load_maze()?;
        spec.validate()?;
        let subtasks = spec.room_count();
        let ratios = match config.method {
            Method::Csac => CoopRatios::new(config.coop_ratios.clone(), subtasks)?,
            _ => CoopRatios::broadcast(1.0, subtasks)?,
        };
        let mut trainer = Trainer::new(
            config.method,
            subtasks,
            spec.observation_dim(),
            2,
            spec.observation_scale(),
            &config.sac_config(),
            ratios,
            config.hyper.batch_size,
            config.hyper.buffer_capacity,
            config.seed,
        )?;
        trainer.warmup = config.hyper.warmup_records();
        let env = MazeEnv::new(spec.clone());
        let env_rng = seeded_rng(config.seed, STREAM_ENV);
        Ok(Run {
            config,
            spec,
            env,
            trainer,
            env_rng,
            completed_epochs: 0,
            env_steps: 0,
            stats: Vec::new(),
            verbose: false,
        })
    }

    /// Runs episode after episode until exactly `budget` steps are
    /// consumed; the episode in flight when the budget runs out is
    /// truncated and not counted as completed.
    fn run_phase(&mut self, mode: ResetMode, budget: usize) -> Result<PhaseStats, HarnessError> {
        let episode_cap = match mode {
            ResetMode::Exploration => {
                self.config.hyper.explore_episode_len.unwrap_or(self.config.hyper.max_episode_len)
            }
            ResetMode::Evaluation => self.config.hyper.max_episode_len,
        };
        let mut remaining = budget;
        let mut completed = 0usize;
        let mut successes = 0usize;
        let mut returns = vec![0.0; self.spec.room_count()];
        while remaining > 0 {
            let log = self.trainer.gather_episode(
                &mut self.env,
                mode,
                &mut self.env_rng,
                remaining.min(episode_cap),
            )?;
            remaining -= log.steps;
            if log.finished {
                completed += 1;
                if log.reached_goal {
                    successes += 1;
                }
                for (acc, r) in returns.iter_mut().zip(&log.subtask_returns) {
                    *acc += r;
                }
            }
        }
        if completed > 0 {
            for r in &mut returns {
                *r /= completed as f64;
            }
        }
        Ok(PhaseStats { completed, successes, mean_returns: returns, steps: budget })
    }

    /// One epoch: evaluation block, exploration block, training block.
    pub fn run_epoch(&mut self) -> Result<EpochStats, HarnessError> {
        let t0 = Instant::now();
        let eval = self.run_phase(ResetMode::Evaluation, self.config.hyper.eval_steps_per_epoch)?;
        let explore =
            self.run_phase(ResetMode::Exploration, self.config.hyper.explore_steps_per_epoch)?;

        let bundles = self.trainer.bundles.len();
        let mut critic_sums = vec![0.0; bundles];
        let mut policy_sums = vec![0.0; bundles];
        let mut trained_counts = vec![0usize; bundles];
        let mut alphas = vec![0.0; bundles];
        for _ in 0..self.config.hyper.train_loops_per_epoch {
            let stats = self.trainer.train_loop_once()?;
            for b in 0..bundles {
                if stats.trained[b] {
                    critic_sums[b] += stats.critic_loss[b];
                    policy_sums[b] += stats.policy_loss[b];
                    trained_counts[b] += 1;
                }
                alphas[b] = stats.alpha[b];
            }
        }
        let mean = |sums: &[f64]| -> Vec<f64> {
            sums.iter()
                .zip(&trained_counts)
                .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect()
        };

        self.env_steps += (eval.steps + explore.steps) as u64;
        self.completed_epochs += 1;
        let stats = EpochStats {
            epoch: self.completed_epochs,
            env_steps: self.env_steps,
            eval_success_rate: if eval.completed > 0 {
                eval.successes as f64 / eval.completed as f64
            } else {
                0.0
            },
            subtask_returns: eval.mean_returns,
            critic_losses: mean(&critic_sums),
            policy_losses: mean(&policy_sums),
            alphas,
            seconds: self.env_steps as f64 * self.spec.dt,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        if self.verbose {
            println!(
                "epoch {:4}  steps {:>6}  success {:.3}  wall {:.1}s",
                stats.epoch, stats.env_steps, stats.eval_success_rate, stats.wall_seconds
            );
        }
        self.stats.push(stats.clone());
        Ok(stats)
    }

    /// Success rate over `episodes` complete evaluation episodes (used by
    /// the `eval` subcommand; does not touch buffers or counters).
    pub fn evaluate(&mut self, episodes: usize) -> Result<f64, HarnessError> {
        let mut successes = 0usize;
        for _ in 0..episodes {
            let log = self.trainer.gather_episode(
                &mut self.env,
                ResetMode::Evaluation,
                &mut self.env_rng,
                self.spec.max_episode_steps,
            )?;
            if log.reached_goal {
                successes += 1;
            }
        }
        Ok(successes as f64 / episodes as f64)
    }
}

struct PhaseStats {
    completed: usize,
    successes: usize,
    mean_returns: Vec<f64>,
    steps: usize,
}

// ── run directory: metrics, manifest, checkpoints, resume ───────────

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<RunDir, HarnessError> {
        fs::create_dir_all(path)?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn resume_path(&self) -> PathBuf {
        self.path.join("resume.ckpt")
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.path.join("ckpt_final.ckpt")
    }

    pub fn epoch_checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.path.join(format!("ckpt_epoch_{epoch:05}.ckpt"))
    }

    fn write_manifest(&self, config: &TrainConfig) -> Result<(), HarnessError> {
        let manifest = format!(
            "# Run manifest (written before training starts)\nversion = {:?}\n\n[config]\n{}",
            env!("CARGO_PKG_VERSION"),
            indent_toml(&config.to_toml())
        );
        fs::write(self.path.join("run_manifest.toml"), manifest)?;
        Ok(())
    }
}

fn indent_toml(toml: &str) -> String {
    // Re-nest a top-level TOML document under a parent table by indenting
    // bare keys; table headers become dotted headers.
    let mut out = String::new();
    for line in toml.lines() {
        if let Some(rest) = line.strip_prefix('[') {
            out.push_str(&format!("[config.{rest}\n"));
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Executes (or resumes) a full run in `dir`, writing metrics and
/// checkpoints. Returns the completed run.
pub fn run_to_completion(
    config: TrainConfig,
    dir: &RunDir,
    verbose: bool,
) -> Result<Run, HarnessError> {
    let mut run = match try_resume(&config, dir)? {
        Some(run) => run,
        None => {
            let mut run = Run::new(config)?;
            run.verbose = verbose;
            dir.write_manifest(&run.config)?;
            let header = metrics_header(run.spec.room_count(), run.trainer.bundles.len());
            fs::write(dir.metrics_path(), header + "\n")?;
            run
        }
    };
    run.verbose = verbose;

    let mut metrics = fs::OpenOptions::new().append(true).open(dir.metrics_path())?;
    while run.completed_epochs < run.config.hyper.epochs {
        let stats = run.run_epoch()?;
        writeln!(metrics, "{}", stats.to_csv_row())?;
        metrics.flush()?;

        let every = run.config.hyper.checkpoint_every;
        if every > 0 && stats.epoch % every == 0 {
            save_networks_checkpoint(&run, &dir.epoch_checkpoint_path(stats.epoch))?;
        }
        let resume_every = run.config.hyper.resume_every;
        if resume_every > 0 && stats.epoch % resume_every == 0 {
            save_resume_checkpoint(&run, dir)?;
        }
    }
    save_networks_checkpoint(&run, &dir.final_checkpoint_path())?;
    Ok(run)
}

// ── checkpoint layout ───────────────────────────────────────────────

fn method_code(m: Method) -> u64 {
    match m {
        Method::Csac => 0,
        Method::Uncooperative => 1,
        Method::Single => 2,
    }
}

fn method_from_code(c: u64) -> Result<Method, HarnessError> {
    match c {
        0 => Ok(Method::Csac),
        1 => Ok(Method::Uncooperative),
        2 => Ok(Method::Single),
        _ => Err(HarnessError::Config(format!("unknown method code {c}"))),
    }
}

/// Networks-only checkpoint: enough to evaluate or export trajectories.
pub fn save_networks_checkpoint(run: &Run, path: &Path) -> Result<(), HarnessError> {
    let mut ck = Checkpoint::new();
    write_networks(&mut ck, run);
    ck.save(path)?;
    Ok(())
}

fn write_networks(ck: &mut Checkpoint, run: &Run) {
    ck.put_u64("meta/method", method_code(run.trainer.method));
    ck.put_u64("meta/bundles", run.trainer.bundles.len() as u64);
    ck.put_u64("meta/subtasks", run.spec.room_count() as u64);
    ck.put_u64("meta/obs_dim", run.spec.observation_dim() as u64);
    ck.put_u64("meta/epoch", run.completed_epochs as u64);
    for bundle in &run.trainer.bundles {
        bundle.agent.write_checkpoint(ck, &format!("bundle{}", bundle.index));
    }
}

/// Loads the agents of a networks-only checkpoint (also readable from a
/// resume checkpoint, which is a superset).
pub fn load_agents(
    ck: &Checkpoint,
) -> Result<(Method, Vec<crate::sac::SacAgent>), HarnessError> {
    let method = method_from_code(ck.u64("meta/method")?)?;
    let bundles = ck.u64("meta/bundles")? as usize;
    let mut agents = Vec::with_capacity(bundles);
    for i in 0..bundles {
        agents.push(crate::sac::SacAgent::read_checkpoint(ck, &format!("bundle{i}"))?);
    }
    Ok((method, agents))
}

fn write_buffer(ck: &mut Checkpoint, prefix: &str, buf: &ReplayBuffer) {
    let n = buf.len();
    ck.put_u64(&format!("{prefix}/capacity"), buf.capacity() as u64);
    ck.put_u64(&format!("{prefix}/subtasks"), buf.subtask_count() as u64);
    ck.put_u64(&format!("{prefix}/len"), n as u64);
    if n == 0 {
        return;
    }
    let sd = buf.get(0).state.len();
    let ad = buf.get(0).action.len();
    let rd = buf.get(0).rewards.len();
    let mut states = Vec::with_capacity(n * sd);
    let mut actions = Vec::with_capacity(n * ad);
    let mut rewards = Vec::with_capacity(n * rd);
    let mut next_states = Vec::with_capacity(n * sd);
    let mut dones = Vec::with_capacity(n);
    for r in buf.iter() {
        states.extend_from_slice(&r.state);
        actions.extend_from_slice(&r.action);
        rewards.extend_from_slice(&r.rewards);
        next_states.extend_from_slice(&r.next_state);
        dones.push(if r.done { 1.0 } else { 0.0 });
    }
    ck.put_tensor(&format!("{prefix}/states"), &Tensor::new(n, sd, states));
    ck.put_tensor(&format!("{prefix}/actions"), &Tensor::new(n, ad, actions));
    ck.put_tensor(&format!("{prefix}/rewards"), &Tensor::new(n, rd, rewards));
    ck.put_tensor(&format!("{prefix}/next_states"), &Tensor::new(n, sd, next_states));
    ck.put_tensor(&format!("{prefix}/dones"), &Tensor::new(n, 1, dones));
}

fn read_buffer(ck: &Checkpoint, prefix: &str) -> Result<ReplayBuffer, HarnessError> {
    let capacity = ck.u64(&format!("{prefix}/capacity"))? as usize;
    let subtasks = ck.u64(&format!("{prefix}/subtasks"))? as usize;
    let n = ck.u64(&format!("{prefix}/len"))? as usize;
    let mut buf = ReplayBuffer::new(capacity, subtasks);
    if n == 0 {
        return Ok(buf);
    }
    let states = ck.tensor(&format!("{prefix}/states"))?;
    let actions = ck.tensor(&format!("{prefix}/actions"))?;
    let rewards = ck.tensor(&format!("{prefix}/rewards"))?;
    let next_states = ck.tensor(&format!("{prefix}/next_states"))?;
    let dones = ck.tensor(&format!("{prefix}/dones"))?;
    for i in 0..n {
        buf.push(TransitionRecord {
            state: states.row(i).to_vec(),
            action: actions.row(i).to_vec(),
            rewards: rewards.row(i).to_vec(),
            next_state: next_states.row(i).to_vec(),
            done: dones.data()[i] == 1.0,
        })
        .map_err(CoopError::from)?;
    }
    Ok(buf)
}

/// Full resumable state: networks plus buffers, RNG streams, counters and
/// the metrics rows written so far.
pub fn save_resume_checkpoint(run: &Run, dir: &RunDir) -> Result<(), HarnessError> {
    let mut ck = Checkpoint::new();
    write_networks(&mut ck, run);
    ck.put_bytes("config", run.config.to_toml().into_bytes());
    ck.put_u64("env_steps", run.env_steps);
    ck.put_bytes("rng/env", ckpt::rng_to_bytes(&run.env_rng));
    for bundle in &run.trainer.bundles {
        let i = bundle.index;
        write_buffer(&mut ck, &format!("buffer{i}"), &bundle.buffer);
        ck.put_bytes(&format!("rng/sample{i}"), ckpt::rng_to_bytes(&bundle.sample_rng));
        ck.put_bytes(&format!("rng/noise{i}"), ckpt::rng_to_bytes(&bundle.noise_rng));
    }
    let metrics = fs::read(dir.metrics_path())?;
    ck.put_bytes("metrics_csv", metrics);
    // Audit counters.
    let b = run.trainer.bundles.len();
    let mut flat = Vec::with_capacity(b * b);
    for row in &run.trainer.audit.critic_updates {
        flat.extend(row.iter().map(|&v| v as f64));
    }
    ck.put_f64_slice("audit/critic_updates", &flat);
    ck.put_f64_slice(
        "audit/policy_updates",
        &run.trainer.audit.policy_updates.iter().map(|&v| v as f64).collect::<Vec<_>>(),
    );
    ck.save(&dir.resume_path())?;
    Ok(())
}

/// Rebuilds a run from `resume.ckpt` if present and config-compatible
/// (everything except the epoch budget must match). The metrics CSV is
/// rewritten from the checkpointed bytes so the final file is
/// byte-identical to an uninterrupted run.
pub fn try_resume(config: &TrainConfig, dir: &RunDir) -> Result<Option<Run>, HarnessError> {
    let path = dir.resume_path();
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(&path)?;
    let saved_toml = String::from_utf8(ck.bytes("config")?.to_vec())
        .map_err(|_| HarnessError::Config("corrupt config in resume checkpoint".into()))?;
    let saved: TrainConfig =
        toml::from_str(&saved_toml).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut comparable = saved.clone();
    comparable.hyper.epochs = config.hyper.epochs;
    if &comparable != config {
        return Err(HarnessError::Config(
            "resume checkpoint was written by an incompatible config (only the epoch \
             budget may change)"
                .into(),
        ));
    }

    let mut run = Run::new(config.clone())?;
    let (method, agents) = load_agents(&ck)?;
    if method != config.method {
        return Err(HarnessError::Config("method mismatch in resume checkpoint".into()));
    }
    for (bundle, agent) in run.trainer.bundles.iter_mut().zip(agents) {
        bundle.agent = agent;
        bundle.buffer = read_buffer(&ck, &format!("buffer{}", bundle.index))?;
        bundle.sample_rng = ckpt::rng_from_bytes(ck.bytes(&format!("rng/sample{}", bundle.index))?)?;
        bundle.noise_rng = ckpt::rng_from_bytes(ck.bytes(&format!("rng/noise{}", bundle.index))?)?;
    }
    run.env_rng = ckpt::rng_from_bytes(ck.bytes("rng/env")?)?;
    run.env_steps = ck.u64("env_steps")?;
    run.completed_epochs = ck.u64("meta/epoch")? as usize;
    let b = run.trainer.bundles.len();
    let flat = ck.f64_slice("audit/critic_updates")?;
    for (i, row) in run.trainer.audit.critic_updates.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = flat[i * b + j] as u64;
        }
    }
    for (i, v) in run.trainer.audit.policy_updates.iter_mut().enumerate() {
        *v = ck.f64_slice("audit/policy_updates")?[i] as u64;
    }
    fs::write(dir.metrics_path(), ck.bytes("metrics_csv")?)?;
    Ok(Some(run))
}

// ── sweeps ──────────────────────────────────────────────────────────

/// Grid definition for cooperative-ratio sweeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    /// One axis per cooperative policy; a single axis is broadcast to all.
    pub axes: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    /// Trailing-window length (epochs) for the aggregated success rate.
    pub trailing_epochs: usize,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub etas: Vec<f64>,
    pub seed: u64,
    /// Mean success rate over the trailing window; None when the point
    /// failed.
    pub trailing_success: Option<f64>,
}

/// Expands the axes into the full grid of ratio vectors.
pub fn sweep_grid(spec: &SweepSpec, cooperative_policies: usize) -> Result<Vec<Vec<f64>>, HarnessError> {
    let axes: Vec<Vec<f64>> = if spec.axes.len() == 1 && cooperative_policies > 1 {
        vec![spec.axes[0].clone(); cooperative_policies]
    } else {
        spec.axes.clone()
    };
    if axes.len() != cooperative_policies {
        return Err(HarnessError::Config(format!(
            "sweep has {} axes but the maze needs {} cooperative ratios",
            axes.len(),
            cooperative_policies
        )));
    }
    let mut grid: Vec<Vec<f64>> = vec![vec![]];
    for axis in &axes {
        let mut next = Vec::with_capacity(grid.len() * axis.len());
        for point in &grid {
            for &v in axis {
                let mut p = point.clone();
                p.push(v);
                next.push(p);
            }
        }
        grid = next;
    }
    Ok(grid)
}

/// Runs the full grid x seeds, each point as an independent run in its own
/// subdirectory, in parallel worker threads. A panicking or erroring point
/// is marked failed and the sweep continues.
pub fn run_sweep(
    spec: &SweepSpec,
    base: &TrainConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<SweepRow>, HarnessError> {
    let maze = base.load_maze()?;
    let grid = sweep_grid(spec, maze.room_count().saturating_sub(1))?;
    let mut jobs: Vec<(usize, Vec<f64>, u64)> = Vec::new();
    for etas in &grid {
        for &seed in &spec.seeds {
            jobs.push((jobs.len(), etas.clone(), seed));
        }
    }
    fs::create_dir_all(out_dir)?;

    let results: Vec<std::sync::Mutex<Option<SweepRow>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    let next_job = std::sync::atomic::AtomicUsize::new(0);
    let trailing = spec.trailing_epochs;

    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            scope.spawn(|| loop {
                let j = next_job.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if j >= jobs.len() {
                    break;
                }
                let (index, etas, seed) = &jobs[j];
                let mut config = base.clone();
                config.coop_ratios = etas.clone();
                config.seed = *seed;
                let label = format!(
                    "point{:03}_eta{}_seed{}",
                    index,
                    etas.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>().join("-"),
                    seed
                );
                let outcome = std::panic::catch_unwind(||
                    // A fresh dir per point: points are fully independent.
                    RunDir::create(&out_dir.join(&label))
                        .and_then(|dir| run_to_completion(config.clone(), &dir, false)));
                let trailing_success = match outcome {
                    Ok(Ok(run)) => {
                        let window = run.stats.len().min(trailing.max(1));
                        let tail = &run.stats[run.stats.len() - window..];
                        Some(tail.iter().map(|s| s.eval_success_rate).sum::<f64>() / window as f64)
                    }
                    _ => None,
                };
                *results[j].lock().unwrap() =
                    Some(SweepRow { etas: etas.clone(), seed: *seed, trailing_success });
            });
        }
    });

    let rows: Vec<SweepRow> =
        results.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect();
    write_sweep_csv(&rows, out_dir)?;
    Ok(rows)
}

fn write_sweep_csv(rows: &[SweepRow], out_dir: &Path) -> Result<(), HarnessError> {
    let k = rows.first().map_or(0, |r| r.etas.len());
    let mut csv = String::new();
    for i in 1..=k {
        write!(csv, "eta_{i},").unwrap();
    }
    csv.push_str("seed,trailing_success,status\n");
    for row in rows {
        for e in &row.etas {
            write!(csv, "{e},").unwrap();
        }
        match row.trailing_success {
            Some(s) => writeln!(csv, "{},{},ok", row.seed, s).unwrap(),
            None => writeln!(csv, "{},,failed", row.seed).unwrap(),
        }
    }
    fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(())
}

// ── checkpoint-driven rollouts: eval and trajectory export ──────────

/// Rebuilds a rollout-ready trainer from a networks checkpoint, verifying
/// that the maze matches the checkpoint's dimensions.
fn load_trainer_for_rollouts(
    checkpoint: &Path,
    spec: &MazeSpec,
    seed: u64,
) -> Result<Trainer, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let (method, agents) = load_agents(&ck)?;
    let obs_dim = ck.u64("meta/obs_dim")? as usize;
    let subtasks = ck.u64("meta/subtasks")? as usize;
    if obs_dim != spec.observation_dim() || subtasks != spec.room_count() {
        return Err(HarnessError::Config(format!(
            "checkpoint was trained on {subtasks} rooms / obs {obs_dim}, maze has {} rooms / obs {}",
            spec.room_count(),
            spec.observation_dim()
        )));
    }
    let ratios = CoopRatios::broadcast(1.0, subtasks)?;
    let sac_cfg = SacConfig::default();
    let mut trainer = Trainer::new(
        method,
        subtasks,
        spec.observation_dim(),
        2,
        spec.observation_scale(),
        &sac_cfg,
        ratios,
        1,
        1,
        seed,
    )?;
    for (bundle, agent) in trainer.bundles.iter_mut().zip(agents) {
        bundle.agent = agent;
    }
    Ok(trainer)
}

/// Success rate of a checkpoint over complete evaluation episodes.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    spec: &MazeSpec,
    config: &TrainConfig,
    episodes: usize,
) -> Result<f64, HarnessError> {
    let mut trainer = load_trainer_for_rollouts(checkpoint, spec, config.seed)?;
    let mut env = MazeEnv::new(spec.clone());
    let mut env_rng = seeded_rng(config.seed, STREAM_ENV);
    let mut successes = 0usize;
    for _ in 0..episodes {
        let log =
            trainer.gather_episode(&mut env, ResetMode::Evaluation, &mut env_rng, spec.max_episode_steps)?;
        if log.reached_goal {
            successes += 1;
        }
    }
    Ok(successes as f64 / episodes.max(1) as f64)
}

/// Rolls out evaluation episodes from a checkpoint and writes one CSV row
/// per step, including the value the chosen subtask's critic assigns to
/// the visited state-action pair (`critic_index` is 1-based).
pub fn export_trajectories(
    checkpoint: &Path,
    spec: &MazeSpec,
    count: usize,
    critic_index: usize,
    seed: u64,
) -> Result<String, HarnessError> {
    let mut trainer = load_trainer_for_rollouts(checkpoint, spec, seed)?;
    if critic_index == 0 || critic_index > trainer.bundles.len() {
        return Err(HarnessError::Config(format!(
            "critic index {critic_index} out of 1..={}",
            trainer.bundles.len()
        )));
    }
    trainer.set_record_trajectories(true);

    let mut env = MazeEnv::new(spec.clone());
    let mut env_rng = seeded_rng(seed, STREAM_ENV);
    let critic_agent_index = critic_index.min(trainer.bundles.len()) - 1;

    let mut csv = String::from("episode,t,x,y,theta,v,omega,subtask");
    for j in 1..=spec.room_count() {
        write!(csv, ",r_{j}").unwrap();
    }
    csv.push_str(",critic\n");
    for episode in 0..count {
        let log = trainer.gather_episode(
            &mut env,
            ResetMode::Evaluation,
            &mut env_rng,
            spec.max_episode_steps,
        )?;
        for step in &log.trajectory {
            let agent = &trainer.bundles[critic_agent_index].agent;
            let obs = Tensor::new(1, step.obs.len(), step.obs.clone());
            let action = Tensor::new(1, step.action.len(), step.action.clone());
            let q = agent.min_q(&obs, &action)?.item();
            write!(
                csv,
                "{episode},{},{},{},{},{},{},{}",
                step.t,
                step.x,
                step.y,
                step.heading,
                step.v,
                step.omega,
                step.subtask + 1
            )
            .unwrap();
            for r in &step.rewards {
                write!(csv, ",{r}").unwrap();
            }
            writeln!(csv, ",{q}").unwrap();
        }
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(method: Method, rooms: usize, seed: u64) -> TrainConfig {
        let mut hyper = Hyper::desk_defaults();
        hyper.epochs = 2;
        hyper.eval_steps_per_epoch = 120;
        hyper.explore_steps_per_epoch = 120;
        hyper.train_loops_per_epoch = 2;
        hyper.batch_size = 16;
        hyper.warmup = Some(32);
        hyper.hidden = vec![8, 8];
        hyper.max_episode_len = 60;
        hyper.resume_every = 1;
        TrainConfig {
            method,
            maze: MazeChoice::Rooms(rooms),
            scale: Scale::Desk,
            seed,
            coop_ratios: vec![0.1; rooms - 1],
            hyper,
        }
    }

    #[test]
    fn epoch_accounting_is_exact() {
        let mut run = Run::new(tiny_config(Method::Csac, 2, 1)).unwrap();
        let s1 = run.run_epoch().unwrap();
        assert_eq!(s1.env_steps, 240);
        let s2 = run.run_epoch().unwrap();
        assert_eq!(s2.env_steps, 480);
        assert_eq!(s2.seconds, 48.0, "simulated seconds = steps * dt");
    }

    #[test]
    fn evaluation_stores_nothing_exploration_stores_budget() {
        let mut run = Run::new(tiny_config(Method::Csac, 2, 2)).unwrap();
        run.run_phase(ResetMode::Evaluation, 100).unwrap();
        let after_eval: usize = run.trainer.bundles.iter().map(|b| b.buffer.len()).sum();
        assert_eq!(after_eval, 0);
        run.run_phase(ResetMode::Exploration, 100).unwrap();
        let after_explore: usize = run.trainer.bundles.iter().map(|b| b.buffer.len()).sum();
        assert_eq!(after_explore, 100);
    }

    #[test]
    fn success_rate_is_successes_over_completed() {
        let stats = EpochStats {
            epoch: 1,
            env_steps: 0,
            eval_success_rate: 8.0 / 10.0,
            subtask_returns: vec![],
            critic_losses: vec![],
            policy_losses: vec![],
            alphas: vec![],
            seconds: 0.0,
            wall_seconds: 0.0,
        };
        assert!((stats.eval_success_rate - 0.8).abs() < 1e-15);
    }

    #[test]
    fn metrics_csv_is_reproducible_and_resume_matches_uninterrupted() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let dir_c = tempfile::tempdir().unwrap();

        // Uninterrupted 2-epoch run, twice: byte-identical CSVs.
        let ra = RunDir::create(dir_a.path()).unwrap();
        run_to_completion(tiny_config(Method::Csac, 2, 7), &ra, false).unwrap();
        let rb = RunDir::create(dir_b.path()).unwrap();
        run_to_completion(tiny_config(Method::Csac, 2, 7), &rb, false).unwrap();
        let csv_a = fs::read(ra.metrics_path()).unwrap();
        let csv_b = fs::read(rb.metrics_path()).unwrap();
        assert_eq!(csv_a, csv_b);

        // Interrupted at epoch 1, then resumed to 2: same bytes again.
        let rc = RunDir::create(dir_c.path()).unwrap();
        let mut short = tiny_config(Method::Csac, 2, 7);
        short.hyper.epochs = 1;
        run_to_completion(short, &rc, false).unwrap();
        let full = tiny_config(Method::Csac, 2, 7);
        run_to_completion(full, &rc, false).unwrap();
        let csv_c = fs::read(rc.metrics_path()).unwrap();
        assert_eq!(csv_a, csv_c);
    }

    #[test]
    fn resume_rejects_incompatible_config() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path()).unwrap();
        run_to_completion(tiny_config(Method::Csac, 2, 3), &rd, false).unwrap();
        let mut other = tiny_config(Method::Csac, 2, 4); // different seed
        other.hyper.epochs = 4;
        match run_to_completion(other, &rd, false) {
            Err(HarnessError::Config(_)) => {}
            Err(e) => panic!("wrong error: {e}"),
            Ok(_) => panic!("incompatible resume must be rejected"),
        }
    }

    #[test]
    fn config_file_resolution_and_overrides() {
        let text = r#"
            method = "uncooperative"
            rooms = 3
            scale = "desk"
            seed = 9
            coop_ratio = 0.3
            [hyper]
            epochs = 5
            batch_size = 32
        "#;
        let file = TrainConfigFile::from_toml(text).unwrap();
        let config = file.resolve(None).unwrap();
        assert_eq!(config.method, Method::Uncooperative);
        assert_eq!(config.maze, MazeChoice::Rooms(3));
        assert_eq!(config.seed, 9);
        assert_eq!(config.coop_ratios, vec![0.3, 0.3]);
        assert_eq!(config.hyper.epochs, 5);
        assert_eq!(config.hyper.batch_size, 32);
        // Untouched fields keep desk defaults.
        assert_eq!(config.hyper.eval_steps_per_epoch, 1600);
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(TrainConfigFile::from_toml("methd = \"csac\"").is_err());
    }

    #[test]
    fn sweep_grid_expands_and_broadcasts() {
        let spec = SweepSpec {
            axes: vec![vec![0.0, 0.5, 1.0]],
            seeds: vec![1, 2],
            trailing_epochs: 5,
        };
        let grid = sweep_grid(&spec, 2).unwrap();
        assert_eq!(grid.len(), 9, "3 values broadcast over 2 policies");
        let spec2 = SweepSpec {
            axes: vec![vec![0.1], vec![0.9, 1.0]],
            seeds: vec![1],
            trailing_epochs: 5,
        };
        let grid2 = sweep_grid(&spec2, 2).unwrap();
        assert_eq!(grid2, vec![vec![0.1, 0.9], vec![0.1, 1.0]]);
    }

    #[test]
    fn single_point_sweep_produces_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec { axes: vec![vec![0.1]], seeds: vec![5], trailing_epochs: 2 };
        let base = tiny_config(Method::Csac, 2, 0);
        let rows = run_sweep(&spec, &base, dir.path(), 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].trailing_success.is_some());
        assert!(dir.path().join("sweep.csv").exists());
    }

    #[test]
    fn export_trajectories_has_episode_groups_and_finite_critic() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path()).unwrap();
        let config = tiny_config(Method::Csac, 2, 11);
        let run = run_to_completion(config, &rd, false).unwrap();
        let csv = export_trajectories(&rd.final_checkpoint_path(), &run.spec, 3, 2, 42).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("episode,t,x,y,theta,v,omega,subtask,r_1,r_2,critic"));
        let episodes: std::collections::BTreeSet<&str> =
            lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(episodes.len(), 3);
        for line in &lines[1..] {
            let critic: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!(critic.is_finite());
        }
        // Re-export with the same seed: identical bytes.
        let csv2 = export_trajectories(&rd.final_checkpoint_path(), &run.spec, 3, 2, 42).unwrap();
        assert_eq!(csv, csv2);
    }

    #[test]
    fn export_rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path()).unwrap();
        let config = tiny_config(Method::Csac, 2, 12);
        let _run = run_to_completion(config, &rd, false).unwrap();
        let other = builtin_maze(3, Scale::Desk).unwrap();
        let err = export_trajectories(&rd.final_checkpoint_path(), &other, 1, 1, 0).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }
}
