//! Command-line front end: `train`, `rollout`, `explain`, `eval-curve`,
//! `render-tunnel`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::config::{self, ConfigError};
use crate::env::{EnvError, NavEnv};
use crate::explain::{self, ExplainError, ExplainOptions, KernelShapOptions, ShapMode};
use crate::export;
use crate::flow::{self, CameraModel};
use crate::net::{AgentCheckpoint, NetError};
use crate::ppo::{self, PpoError, TrainConfig};
use crate::rollout::{self, Controller, EvalSummary, RolloutError};
use crate::world::{self, TunnelSpec, Vec2, WorldError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::World(w) => w.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Corrupt(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PpoError> for CliError {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::Config(c) => c.into(),
            PpoError::Env(c) => c.into(),
            PpoError::Net(c) => c.into(),
            PpoError::Io { .. } => CliError::Io(e.to_string()),
            PpoError::NonFinite(_) | PpoError::EmptyBuffer => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Env(e) => e.into(),
            RolloutError::Net(e) => e.into(),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Net(e) => e.into(),
            ExplainError::Env(e) => e.into(),
            ExplainError::Singular(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "optiflow", version, about = "Optic-flow tunnel navigation: train, evaluate, explain")]
pub struct Cli {
    /// Load tunnels from `*.tunnel` files instead of the built-in library.
    #[arg(long, global = true)]
    pub tunnel_dir: Option<PathBuf>,
    /// Base seed (default 0; for `train`, overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train independent agents and write checkpoints and metrics.
    Train(TrainArgs),
    /// Fly episodes with a checkpoint and log trajectories.
    Rollout(RolloutArgs),
    /// Attention maps from Shapley values of 1 to 4 agents.
    Explain(ExplainArgs),
    /// Success rate of every epoch checkpoint of one agent.
    EvalCurve(EvalCurveArgs),
    /// Top-down image of a tunnel, optionally with a trajectory.
    RenderTunnel(RenderArgs),
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long = "steps_per_epoch", alias = "steps-per-epoch")]
    pub steps_per_epoch: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long = "gae_lambda", alias = "gae-lambda")]
    pub gae_lambda: Option<String>,
    #[arg(long = "clip_epsilon", alias = "clip-epsilon")]
    pub clip_epsilon: Option<String>,
    #[arg(long = "learning_rate", alias = "learning-rate")]
    pub learning_rate: Option<String>,
    #[arg(long = "lr_decay", alias = "lr-decay")]
    pub lr_decay: Option<String>,
    #[arg(long = "minibatch_size", alias = "minibatch-size")]
    pub minibatch_size: Option<String>,
    #[arg(long = "update_passes", alias = "update-passes")]
    pub update_passes: Option<String>,
    #[arg(long = "entropy_coef", alias = "entropy-coef")]
    pub entropy_coef: Option<String>,
    #[arg(long = "value_coef", alias = "value-coef")]
    pub value_coef: Option<String>,
    #[arg(long = "max_grad_norm", alias = "max-grad-norm")]
    pub max_grad_norm: Option<String>,
    #[arg(long = "n_agents", alias = "n-agents")]
    pub n_agents: Option<String>,
    /// Tunnel id, or `all`.
    #[arg(long)]
    pub tunnel: Option<String>,
    #[arg(long = "image_width", alias = "image-width")]
    pub image_width: Option<String>,
    #[arg(long = "image_height", alias = "image-height")]
    pub image_height: Option<String>,
}

impl TrainOverrides {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        let all = [
            ("epochs", &self.epochs),
            ("steps_per_epoch", &self.steps_per_epoch),
            ("gamma", &self.gamma),
            ("gae_lambda", &self.gae_lambda),
            ("clip_epsilon", &self.clip_epsilon),
            ("learning_rate", &self.learning_rate),
            ("lr_decay", &self.lr_decay),
            ("minibatch_size", &self.minibatch_size),
            ("update_passes", &self.update_passes),
            ("entropy_coef", &self.entropy_coef),
            ("value_coef", &self.value_coef),
            ("max_grad_norm", &self.max_grad_norm),
            ("n_agents", &self.n_agents),
            ("tunnel", &self.tunnel),
            ("image_width", &self.image_width),
            ("image_height", &self.image_height),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` file; `include = base.cfg` pulls in another file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub tunnel: u32,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    /// Sample actions instead of using the mean.
    #[arg(long)]
    pub stochastic: bool,
    #[arg(long, default_value = "runs/rollout")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// One to four checkpoints with the same architecture.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub tunnel: u32,
    /// Index of the checkpoint that flies the explained trajectory.
    #[arg(long, default_value_t = 0)]
    pub pilot: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = explain::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Region size as `WxH` pixels.
    #[arg(long, default_value = "8x8")]
    pub regions: String,
    #[arg(long, default_value_t = explain::DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Enumerate all coalitions (at most 20 regions).
    #[arg(long, conflicts_with = "sampled")]
    pub exhaustive: bool,
    /// Always sample coalitions.
    #[arg(long)]
    pub sampled: bool,
    /// Only explain timesteps with an obstacle visible within this many meters.
    #[arg(long)]
    pub near: Option<f64>,
    /// Explain every n-th selected timestep.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value = "runs/explain")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalCurveArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub tunnel: u32,
    #[arg(long, default_value_t = 0)]
    pub agent: usize,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long)]
    pub stochastic: bool,
    /// Output CSV (default: inside the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, default_value_t = 1)]
    pub tunnel: u32,
    /// Trajectory CSV from `rollout` to draw on top.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    pub px_per_m: f64,
    #[arg(long, default_value = "tunnel.pgm")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

impl Cli {
    pub fn base_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Parse `std::env::args`, run, and return the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let tunnels = match &cli.tunnel_dir {
        Some(dir) => world::load_tunnel_dir(dir)?,
        None => world::tunnel_library(),
    };
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a, &tunnels),
        Command::Rollout(a) => cmd_rollout(cli, a, tunnels),
        Command::Explain(a) => cmd_explain(cli, a, tunnels),
        Command::EvalCurve(a) => cmd_eval_curve(cli, a, tunnels),
        Command::RenderTunnel(a) => cmd_render(a, &tunnels),
    }
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`. Forced
/// runs overwrite files in place and never delete anything.
fn prepare_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io(dir))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Io(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

fn prepare_file(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Io(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io(path))
}

/// Defaults, then the config file, then flags.
pub fn build_config(file: Option<&Path>, overrides: &TrainOverrides, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        for (k, v) in config::read_pairs(path)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in overrides.pairs() {
        cfg.set(k, v)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(cfg: &TrainConfig, tunnels: &[TunnelSpec], out: &Path) -> serde_json::Value {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let checkpoints: Vec<Vec<String>> = (0..cfg.n_agents)
        .map(|k| (0..=cfg.epochs).map(|e| ppo::checkpoint_name(k, e)).collect())
        .collect();
    let seeds: Vec<u64> = (0..cfg.n_agents).map(|k| cfg.agent_seed(k)).collect();
    json!({
        "tool": "optiflow",
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": created,
        "run_dir": out.display().to_string(),
        "config": cfg.to_pairs(),
        "seed": cfg.seed,
        "agent_seeds": seeds,
        "tunnel_library_sha256": world::library_hash(tunnels),
        "tunnel_ids": tunnels.iter().map(|t| t.id).collect::<Vec<_>>(),
        "checkpoints": checkpoints,
        "metrics": (0..cfg.n_agents).map(ppo::metrics_name).collect::<Vec<_>>(),
    })
}

fn cmd_train(cli: &Cli, a: &TrainArgs, tunnels: &[TunnelSpec]) -> Result<(), CliError> {
    let cfg = build_config(a.config.as_deref(), &a.overrides, cli.seed)?;
    prepare_dir(&a.out, a.force)?;
    let m = manifest(&cfg, tunnels, &a.out);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write(&a.out.join("manifest.json"), text + "\n")?;
    write(&a.out.join("config.cfg"), config::format_pairs(&cfg.to_pairs()))?;
    eprintln!(
        "training {} agents x {} epochs x {} steps into {}",
        cfg.n_agents,
        cfg.epochs,
        cfg.steps_per_epoch,
        a.out.display()
    );
    let outcome = ppo::train(&cfg, tunnels, &a.out, |k, m| {
        eprintln!(
            "agent {k} epoch {:>3}: return {:8.3} success {:.2} crash {:.2} len {:6.1}",
            m.epoch, m.mean_return, m.success_rate, m.crash_rate, m.mean_len
        );
    })?;
    eprintln!("obs scale {}; done", outcome.obs_scale);
    Ok(())
}

fn load_agent(path: &Path) -> Result<AgentCheckpoint, CliError> {
    Ok(ppo::load_checkpoint(path)?)
}

fn camera_for(agent: &AgentCheckpoint) -> CameraModel {
    let arch = agent.arch();
    CameraModel::new(arch.width, arch.height, flow::DEFAULT_FOV_X)
}

pub const SUMMARY_HEADER: &str = "episode,seed,event,steps,total_reward,final_x,mean_abs_offset";

fn cmd_rollout(cli: &Cli, a: &RolloutArgs, tunnels: Vec<TunnelSpec>) -> Result<(), CliError> {
    let agent = load_agent(&a.checkpoint)?;
    let mut env = NavEnv::new(tunnels, camera_for(&agent))?;
    env.tunnel_index(a.tunnel)?;
    prepare_dir(&a.out, a.force)?;
    let controller = if a.stochastic {
        Controller::Stochastic(&agent)
    } else {
        Controller::Deterministic(&agent)
    };
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut logs = Vec::with_capacity(a.episodes);
    for e in 0..a.episodes {
        let seed = cli.base_seed().wrapping_add(e as u64);
        let log = rollout::run_episode(&mut env, controller, Some(a.tunnel), seed)?;
        write(&a.out.join(format!("episode_{e:04}.csv")), export::trajectory_csv(&log.rows))?;
        let last = log.path.last().copied().unwrap_or_default();
        summary.push_str(&format!(
            "{e},{seed},{},{},{},{},{}\n",
            log.event.as_str(),
            log.steps(),
            log.total_reward,
            last.x,
            log.mean_abs_offset
        ));
        logs.push(log);
    }
    write(&a.out.join("summary.csv"), summary)?;
    let s = EvalSummary::from_logs(&logs);
    println!(
        "episodes {} success {} crash {} timeout {} success_rate {:.3} mean_abs_offset {:.4}",
        s.episodes,
        s.successes,
        s.crashes,
        s.timeouts,
        s.success_rate(),
        s.mean_abs_offset
    );
    Ok(())
}

fn parse_regions(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("invalid --regions {s:?}, expected WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn cmd_explain(cli: &Cli, a: &ExplainArgs, tunnels: Vec<TunnelSpec>) -> Result<(), CliError> {
    if a.checkpoints.len() > 4 {
        return Err(CliError::Config(format!("at most 4 checkpoints, got {}", a.checkpoints.len())));
    }
    if !(a.sigma >= 0.0) {
        return Err(CliError::Config(format!("invalid --sigma {}", a.sigma)));
    }
    if a.stride == 0 || a.near.is_some_and(|d| !(d > 0.0)) {
        return Err(CliError::Config("--stride and --near must be positive".into()));
    }
    let agents = a.checkpoints.iter().map(|p| load_agent(p)).collect::<Result<Vec<_>, _>>()?;
    let (region_w, region_h) = parse_regions(&a.regions)?;
    let mut env = NavEnv::new(tunnels, camera_for(&agents[0]))?;
    env.tunnel_index(a.tunnel)?;
    let opts = ExplainOptions {
        shap: KernelShapOptions {
            n_samples: a.samples,
            mode: if a.exhaustive {
                ShapMode::Exhaustive
            } else if a.sampled {
                ShapMode::Sampled
            } else {
                ShapMode::Auto
            },
        },
        region_w,
        region_h,
        sigma: a.sigma,
        max_steps: a.steps,
        seed: cli.base_seed(),
        tunnel: Some(a.tunnel),
        near_obstacle: a.near,
        stride: a.stride,
    };
    let steps = explain::collect_explanations(&agents, a.pilot, &mut env, &opts)?;
    prepare_dir(&a.out, a.force)?;

    let mut index = String::from("timestep,x,y,nearest_obstacle,mean_attention,efficiency_gap\n");
    for s in &steps {
        let stem = format!("t{:04}", s.timestep);
        let dir = &a.out;
        write(&dir.join(format!("{stem}_attention.csv")), s.averaged.to_csv())?;
        write(&dir.join(format!("{stem}_attention.pgm")), export::attention_pgm(&s.averaged))?;
        let mut meta = export::attention_metadata(&s.averaged, (region_w, region_h), a.samples);
        for (k, p) in a.checkpoints.iter().enumerate() {
            meta.push_str(&format!("checkpoint{k} = {}\n", p.display()));
        }
        write(&dir.join(format!("{stem}_meta.txt")), meta)?;
        for (k, m) in s.per_agent.iter().enumerate() {
            write(&dir.join(format!("{stem}_agent{k}.pgm")), export::attention_pgm(m))?;
        }
        export::write_flow_pgms(dir, &stem, &s.observation).map_err(io(dir))?;
        let mut panels = vec![&s.averaged];
        panels.extend(s.per_agent.iter());
        let (w, h, px) = export::composite(&s.observation, &panels);
        export::write_pgm(&dir.join(format!("{stem}_composite.pgm")), w, h, &px).map_err(io(dir))?;
        let gap = s.shap.iter().map(|r| r.efficiency_gap()).fold(0.0, f64::max);
        index.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.timestep,
            s.position.x,
            s.position.y,
            s.nearest_obstacle().map_or_else(String::new, |d| d.to_string()),
            s.averaged.mean(),
            gap
        ));
    }
    write(&a.out.join("index.csv"), index)?;
    println!("explained {} timesteps with {} agents into {}", steps.len(), agents.len(), a.out.display());
    Ok(())
}

/// Highest epoch recorded in a run's manifest, if there is one.
fn manifest_epochs(run: &Path) -> Option<usize> {
    let text = fs::read_to_string(run.join("manifest.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["config"]["epochs"].as_str()?.parse().ok()
}

pub fn epoch_checkpoints(run: &Path, agent: usize) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let prefix = format!("agent{agent}_epoch");
    let mut found = Vec::new();
    for entry in fs::read_dir(run).map_err(io(run))? {
        let name = entry.map_err(io(run))?.file_name().to_string_lossy().into_owned();
        if let Some(e) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".ckpt")) {
            if let Ok(e) = e.parse::<usize>() {
                found.push(e);
            }
        }
    }
    found.sort_unstable();
    let last = manifest_epochs(run).or(found.last().copied());
    let Some(last) = last else {
        return Err(CliError::Io(format!("no checkpoints for agent {agent} in {}", run.display())));
    };
    let missing: Vec<String> = (0..=last)
        .filter(|e| found.binary_search(e).is_err())
        .map(|e| ppo::checkpoint_name(agent, e))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Io(format!("missing checkpoints in {}: {}", run.display(), missing.join(", "))));
    }
    Ok((0..=last).map(|e| (e, run.join(ppo::checkpoint_name(agent, e)))).collect())
}

fn cmd_eval_curve(cli: &Cli, a: &EvalCurveArgs, tunnels: Vec<TunnelSpec>) -> Result<(), CliError> {
    let ckpts = epoch_checkpoints(&a.run, a.agent)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.run.join(format!("eval_curve_agent{}_tunnel{}.csv", a.agent, a.tunnel)));
    prepare_file(&out, a.force)?;
    let mut csv = String::from("epoch,success_rate\n");
    let mut env: Option<NavEnv> = None;
    for (epoch, path) in ckpts {
        let agent = load_agent(&path)?;
        let env = match &mut env {
            Some(e) => e,
            None => {
                let e = NavEnv::new(tunnels.clone(), camera_for(&agent))?;
                e.tunnel_index(a.tunnel)?;
                env.insert(e)
            }
        };
        let controller = if a.stochastic {
            Controller::Stochastic(&agent)
        } else {
            Controller::Deterministic(&agent)
        };
        let logs = rollout::evaluate(env, controller, Some(a.tunnel), a.episodes, cli.base_seed())?;
        let rate = EvalSummary::from_logs(&logs).success_rate();
        eprintln!("epoch {epoch:>3}: success {rate:.2}");
        csv.push_str(&format!("{epoch},{rate}\n"));
    }
    write(&out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// `(x, y)` columns of a trajectory CSV.
pub fn read_trajectory(path: &Path) -> Result<Vec<Vec2>, CliError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Config(format!("{}: no {name} column", path.display())))
    };
    let (xi, yi) = (col("x")?, col("y")?);
    let mut pts = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| {
            f.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| CliError::Config(format!("{}:{}: bad row", path.display(), n + 2)))
        };
        pts.push(Vec2::new(parse(xi)?, parse(yi)?));
    }
    Ok(pts)
}

fn cmd_render(a: &RenderArgs, tunnels: &[TunnelSpec]) -> Result<(), CliError> {
    let tunnel = tunnels
        .iter()
        .find(|t| t.id == a.tunnel)
        .ok_or(EnvError::UnknownTunnel(a.tunnel))?;
    if !(a.px_per_m > 0.0) {
        return Err(CliError::Config(format!("invalid --px-per-m {}", a.px_per_m)));
    }
    let path = match &a.trajectory {
        Some(p) => read_trajectory(p)?,
        None => Vec::new(),
    };
    prepare_file(&a.out, a.force)?;
    let (w, h, px) = export::render_tunnel(tunnel, a.px_per_m, &path);
    export::write_pgm(&a.out, w, h, &px).map_err(io(&a.out))?;
    println!("wrote {} ({w}x{h})", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn every_config_key_has_a_flag() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        let train = cmd.find_subcommand("train").unwrap();
        for key in TrainConfig::KEYS {
            let own = train.get_arguments().any(|a| a.get_long() == Some(key));
            let global = cmd.get_arguments().any(|a| a.get_long() == Some(key) && a.is_global_set());
            assert!(
                own || global,
                "no flag for {key}"
            );
        }
    }

    #[test]
    fn regions_parse() {
        assert_eq!(parse_regions("8x8").unwrap(), (8, 8));
        assert_eq!(parse_regions("16X4").unwrap(), (16, 4));
        assert!(parse_regions("8").is_err());
        assert!(parse_regions("0x4").is_err());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        fs::write(&p, "epochz = 3\n").unwrap();
        let err = build_config(Some(&p), &TrainOverrides::default(), None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        assert!(err.to_string().contains("epochz"));
    }
}
