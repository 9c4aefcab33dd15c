//! Clipped-surrogate policy optimization with generalized advantage
//! estimation, and the multi-agent training driver.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{self, ConfigError};
use crate::env::{self, Action, EnvError, Event, NavEnv, A_MAX, V_MAX};
use crate::flow::{self, CameraModel, FlowImage};
use crate::net::{AgentCheckpoint, Arch, NetError, PolicyParams, ValueParams};
use crate::world::{TunnelSpec, Vec2};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("rollout buffer is empty")]
    EmptyBuffer,
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PpoError + '_ {
    move |source| PpoError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    /// Anneal the learning rate linearly to zero over the run.
    pub lr_decay: bool,
    pub minibatch_size: usize,
    pub update_passes: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub n_agents: usize,
    /// Train on one tunnel id, or on the whole library when `None`.
    pub tunnel: Option<u32>,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 1024,
            gamma: env::GAMMA,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            learning_rate: 3e-4,
            lr_decay: true,
            minibatch_size: 256,
            update_passes: 10,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            seed: 0,
            n_agents: 4,
            tunnel: None,
            image_width: flow::DEFAULT_WIDTH,
            image_height: flow::DEFAULT_HEIGHT,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "steps_per_epoch",
        "gamma",
        "gae_lambda",
        "clip_epsilon",
        "learning_rate",
        "lr_decay",
        "minibatch_size",
        "update_passes",
        "entropy_coef",
        "value_coef",
        "max_grad_norm",
        "seed",
        "n_agents",
        "tunnel",
        "image_width",
        "image_height",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        use config::{parse_bool, parse_num};
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "gae_lambda" => self.gae_lambda = parse_num(key, value)?,
            "clip_epsilon" => self.clip_epsilon = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "lr_decay" => self.lr_decay = parse_bool(key, value)?,
            "minibatch_size" => self.minibatch_size = parse_num(key, value)?,
            "update_passes" => self.update_passes = parse_num(key, value)?,
            "entropy_coef" => self.entropy_coef = parse_num(key, value)?,
            "value_coef" => self.value_coef = parse_num(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "n_agents" => self.n_agents = parse_num(key, value)?,
            "tunnel" => {
                self.tunnel = match value {
                    "all" | "" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "image_width" => self.image_width = parse_num(key, value)?,
            "image_height" => self.image_height = parse_num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("epochs", self.epochs.to_string());
        m.insert("steps_per_epoch", self.steps_per_epoch.to_string());
        m.insert("gamma", self.gamma.to_string());
        m.insert("gae_lambda", self.gae_lambda.to_string());
        m.insert("clip_epsilon", self.clip_epsilon.to_string());
        m.insert("learning_rate", self.learning_rate.to_string());
        m.insert("lr_decay", self.lr_decay.to_string());
        m.insert("minibatch_size", self.minibatch_size.to_string());
        m.insert("update_passes", self.update_passes.to_string());
        m.insert("entropy_coef", self.entropy_coef.to_string());
        m.insert("value_coef", self.value_coef.to_string());
        m.insert("max_grad_norm", self.max_grad_norm.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("n_agents", self.n_agents.to_string());
        m.insert(
            "tunnel",
            self.tunnel.map_or_else(|| "all".to_string(), |t| t.to_string()),
        );
        m.insert("image_width", self.image_width.to_string());
        m.insert("image_height", self.image_height.to_string());
        m
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, v: String, why: &str| Err(ConfigError::bad(k, &v, why));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", self.gamma.to_string(), "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda", self.gae_lambda.to_string(), "must be in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon", self.clip_epsilon.to_string(), "must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate", self.learning_rate.to_string(), "must be non-negative");
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "0".into(), "must be positive");
        }
        if self.minibatch_size == 0 || self.steps_per_epoch % self.minibatch_size != 0 {
            return bad(
                "minibatch_size",
                self.minibatch_size.to_string(),
                "must divide steps_per_epoch",
            );
        }
        if self.n_agents == 0 {
            return bad("n_agents", "0".into(), "need at least one agent");
        }
        if self.image_width < 8 || self.image_height < 8 {
            return bad(
                "image_width",
                format!("{}x{}", self.image_width, self.image_height),
                "image must be at least 8x8",
            );
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::new(self.image_width, self.image_height, flow::DEFAULT_FOV_X)
    }

    pub fn arch(&self) -> Arch {
        Arch::for_image(self.image_width, self.image_height)
    }

    /// Seed used by agent `k`.
    pub fn agent_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// How the step at this index ended its episode, if it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEnd {
    Continue,
    /// Crash or success: nothing to bootstrap.
    Terminated,
    /// Timeout: bootstrap from `next_value`.
    Truncated,
}

#[derive(Debug, Clone)]
pub struct Transition {
    /// Network input, stored at f32 precision.
    pub input: Vec<f32>,
    pub action: [f64; 2],
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub end: StepEnd,
    /// V(s_{t+1}); read for truncated steps and for the last step when the
    /// buffer cuts an episode.
    pub next_value: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<Transition>,
    capacity: usize,
}

impl RolloutBuffer {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            steps: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        assert!(self.steps.len() < self.capacity, "rollout buffer is full");
        self.steps.push(t);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.steps.len() == self.capacity
    }
}

/// Backward recursion `A_t = delta_t + gamma lambda A_{t+1}` within each
/// episode. Returns `(advantages, value targets)`.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = buffer.len();
    if n == 0 {
        return Err(PpoError::EmptyBuffer);
    }
    let s = &buffer.steps;
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_v, carry) = match s[t].end {
            StepEnd::Terminated => (0.0, false),
            StepEnd::Truncated => (s[t].next_value, false),
            StepEnd::Continue if t + 1 == n => (s[t].next_value, false),
            StepEnd::Continue => (s[t + 1].value, true),
        };
        let delta = s[t].reward + gamma * next_v - s[t].value;
        running = delta + if carry { gamma * lambda * running } else { 0.0 };
        adv[t] = running;
    }
    let returns = adv.iter().zip(s).map(|(a, t)| a + t.value).collect();
    Ok((adv, returns))
}

/// Shift and scale to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { *a - mean };
    }
}

/// Gradient of the PPO loss with respect to every agent parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrad {
    pub policy: Vec<f64>,
    pub log_std: [f64; 2],
    pub value: Vec<f64>,
}

impl AgentGrad {
    pub fn zeros_like(agent: &AgentCheckpoint) -> Self {
        Self {
            policy: vec![0.0; agent.policy.net.len()],
            log_std: [0.0; 2],
            value: vec![0.0; agent.value.net.len()],
        }
    }

    fn add(&mut self, o: &AgentGrad) {
        self.policy.iter_mut().zip(&o.policy).for_each(|(a, b)| *a += b);
        self.value.iter_mut().zip(&o.value).for_each(|(a, b)| *a += b);
        self.log_std[0] += o.log_std[0];
        self.log_std[1] += o.log_std[1];
    }

    fn iter(&self) -> impl Iterator<Item = &f64> {
        self.policy.iter().chain(&self.log_std).chain(&self.value)
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.policy
            .iter_mut()
            .chain(self.log_std.iter_mut())
            .chain(self.value.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }
}

/// Bias-corrected adaptive moment estimation over all agent parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(agent: &AgentCheckpoint) -> Self {
        let n = agent.policy.net.len() + 2 + agent.value.net.len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, agent: &mut AgentCheckpoint, grad: &AgentGrad, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let params = agent
            .policy
            .net
            .params
            .iter_mut()
            .chain(agent.policy.log_std.iter_mut())
            .chain(agent.value.net.params.iter_mut());
        for (((p, g), m), v) in params.zip(grad.iter()).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// `-mean(min(rho A, clip(rho) A))`
    pub policy_loss: f64,
    /// `-mean(rho A)`, for comparison with the clipped objective.
    pub unclipped_policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub total: f64,
}

/// Advantages and value targets aligned with a buffer.
#[derive(Debug, Clone)]
pub struct PreparedBatch<'a> {
    pub buffer: &'a RolloutBuffer,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<'a> PreparedBatch<'a> {
    pub fn new(buffer: &'a RolloutBuffer, gamma: f64, lambda: f64) -> Result<Self, PpoError> {
        let (mut advantages, returns) = compute_gae(buffer, gamma, lambda)?;
        normalize_advantages(&mut advantages);
        Ok(Self { buffer, advantages, returns })
    }
}

const CHUNK: usize = 16;

/// Loss and exact gradient over the samples `idx`. Chunks are reduced in a
/// fixed order, so the result does not depend on the thread count.
pub fn minibatch_gradient(
    agent: &AgentCheckpoint,
    batch: &PreparedBatch<'_>,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(AgentGrad, LossBreakdown), PpoError> {
    let b = idx.len() as f64;
    let eps = cfg.clip_epsilon;
    let std = [agent.policy.log_std[0].exp(), agent.policy.log_std[1].exp()];

    let partials: Vec<Result<(AgentGrad, LossBreakdown), NetError>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = AgentGrad::zeros_like(agent);
            let mut acc = LossBreakdown::default();
            for &i in chunk {
                let tr = &batch.buffer.steps[i];
                let a_hat = batch.advantages[i];
                let input: Vec<f64> = tr.input.iter().map(|x| *x as f64).collect();

                let pc = agent.policy.net.forward_cached(&input)?;
                let dist = agent.policy.dist_from_output(&pc.output);
                let logp = dist.log_prob(tr.action);
                let log_ratio = logp - tr.log_prob;
                let ratio = log_ratio.exp();
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
                let s1 = ratio * a_hat;
                let s2 = clipped * a_hat;
                acc.policy_loss -= s1.min(s2) / b;
                acc.unclipped_policy_loss -= s1 / b;
                acc.approx_kl += ((ratio - 1.0) - log_ratio) / b;
                if (ratio - 1.0).abs() > eps {
                    acc.clip_frac += 1.0 / b;
                }
                // d(loss)/d(log pi): the unclipped branch carries the gradient.
                let dlogp = if s1 <= s2 { -s1 / b } else { 0.0 };
                if dlogp != 0.0 {
                    let mut up = [0.0; 2];
                    for k in 0..2 {
                        let z = (tr.action[k] - dist.mean[k]) / std[k];
                        up[k] = dlogp * z / std[k];
                        g.log_std[k] += dlogp * (z * z - 1.0);
                    }
                    agent.policy.net.backward(&pc, &up, &mut g.policy)?;
                }

                let vc = agent.value.net.forward_cached(&input)?;
                let err = vc.output[0] - batch.returns[i];
                acc.value_loss += err * err / b;
                let dv = 2.0 * cfg.value_coef * err / b;
                agent.value.net.backward(&vc, &[dv], &mut g.value)?;
            }
            Ok((g, acc))
        })
        .collect();

    let mut grad = AgentGrad::zeros_like(agent);
    let mut loss = LossBreakdown::default();
    for p in partials {
        let (g, l) = p?;
        grad.add(&g);
        loss.policy_loss += l.policy_loss;
        loss.unclipped_policy_loss += l.unclipped_policy_loss;
        loss.value_loss += l.value_loss;
        loss.approx_kl += l.approx_kl;
        loss.clip_frac += l.clip_frac;
    }
    // Entropy of a state-independent diagonal Gaussian: sum(log_std) + const.
    loss.entropy = agent.policy.dist_from_output(&[0.0, 0.0]).entropy();
    grad.log_std[0] -= cfg.entropy_coef;
    grad.log_std[1] -= cfg.entropy_coef;
    loss.total = loss.policy_loss + cfg.value_coef * loss.value_loss - cfg.entropy_coef * loss.entropy;
    Ok((grad, loss))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub minibatches: usize,
}

/// Several passes of shuffled minibatch steps over one buffer.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut AgentCheckpoint,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    let batch = PreparedBatch::new(buffer, cfg.gamma, cfg.gae_lambda)?;
    let n = buffer.len();
    let mb = cfg.minibatch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.update_passes {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let (mut grad, loss) = minibatch_gradient(agent, &batch, idx, cfg)?;
            if !loss.total.is_finite() || !grad.is_finite() {
                return Err(PpoError::NonFinite(format!(
                    "policy {} value {} entropy {} (minibatch {} of pass)",
                    loss.policy_loss, loss.value_loss, loss.entropy, stats.minibatches
                )));
            }
            let norm = grad.norm();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                grad.scale(cfg.max_grad_norm / norm);
            }
            opt.step(agent, &grad, lr);
            agent.policy.net.round_to_f32();
            agent.value.net.round_to_f32();
            agent.policy.clamp_log_std();
            for s in &mut agent.policy.log_std {
                *s = *s as f32 as f64;
            }
            stats.policy_loss += loss.policy_loss;
            stats.value_loss += loss.value_loss;
            stats.entropy += loss.entropy;
            stats.approx_kl += loss.approx_kl;
            stats.clip_frac += loss.clip_frac;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let k = stats.minibatches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.approx_kl /= k;
        stats.clip_frac /= k;
    }
    Ok(stats)
}

/// Fresh agent with orthogonal initialization.
pub fn init_agent(arch: Arch, obs_scale: f64, seed: u64) -> Result<AgentCheckpoint, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(AgentCheckpoint {
        policy: PolicyParams::init(arch, &mut rng)?,
        value: ValueParams::init(arch, &mut rng)?,
        obs_scale: obs_scale as f32 as f64,
    })
}

/// Network input for an observation, rounded to f32 precision.
pub fn agent_input(agent: &AgentCheckpoint, obs: &FlowImage) -> Vec<f32> {
    obs.to_input(agent.obs_scale).into_iter().map(|x| x as f32).collect()
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|v| *v as f64).collect()
}

/// Centering controller with privileged state. Only used to calibrate the
/// magnitude scaling, never as a policy.
fn scripted_action(tunnel: &TunnelSpec, pos: Vec2, vel: Vec2) -> Action {
    let center = tunnel.free_centerline(pos);
    let ay = -4.0 * (pos.y - center) - 3.0 * vel.y;
    Action::new(A_MAX * (1.0 - vel.x / V_MAX).max(0.0) + 0.5, ay)
}

/// 99th percentile of the flow magnitude over scripted fly-throughs of every
/// tunnel in `tunnels`.
pub fn calibrate_obs_scale(tunnels: &[TunnelSpec], camera: &CameraModel, seed: u64) -> Result<f64, PpoError> {
    let mut mags = Vec::new();
    for (k, t) in tunnels.iter().enumerate() {
        let mut env = NavEnv::new(vec![t.clone()], *camera)?;
        env.reset(None, seed.wrapping_add(k as u64))?;
        for step in 0.. {
            let s = *env.state().expect("reset");
            let r = env.step(scripted_action(t, s.position, s.target_velocity))?;
            if step % 4 == 0 {
                mags.extend(r.observation.magnitude.iter().copied());
            }
            if r.terminated || r.truncated {
                break;
            }
        }
    }
    if mags.is_empty() {
        return Ok(1.0);
    }
    let k = ((mags.len() as f64 - 1.0) * 0.99).round() as usize;
    let (_, q, _) = mags.select_nth_unstable_by(k, f64::total_cmp);
    let q = *q;
    Ok(if q > 0.0 { q as f32 as f64 } else { 1.0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub crash_rate: f64,
    pub mean_len: f64,
    pub update: UpdateStats,
}

pub const METRICS_HEADER: &str =
    "epoch,steps,episodes,mean_return,success_rate,crash_rate,mean_len,policy_loss,value_loss,entropy,approx_kl,clip_frac";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.steps,
            self.episodes,
            self.mean_return,
            self.success_rate,
            self.crash_rate,
            self.mean_len,
            self.update.policy_loss,
            self.update.value_loss,
            self.update.entropy,
            self.update.approx_kl,
            self.update.clip_frac
        )
    }
}

/// One agent's training state: network, optimizer, environment, RNG.
pub struct AgentTrainer {
    pub agent: AgentCheckpoint,
    opt: Adam,
    env: NavEnv,
    rng: ChaCha8Rng,
    cfg: TrainConfig,
    obs: Vec<f32>,
    ep_return: f64,
    ep_len: usize,
    total_steps: usize,
}

impl AgentTrainer {
    pub fn new(cfg: &TrainConfig, tunnels: Vec<TunnelSpec>, obs_scale: f64, agent_index: usize) -> Result<Self, PpoError> {
        cfg.validate()?;
        let seed = cfg.agent_seed(agent_index);
        let agent = init_agent(cfg.arch(), obs_scale, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let mut env = NavEnv::new(tunnels, cfg.camera())?;
        let (obs, _) = env.reset(cfg.tunnel, rng.random())?;
        Ok(Self {
            obs: agent_input(&agent, &obs),
            opt: Adam::new(&agent),
            agent,
            env,
            rng,
            cfg: cfg.clone(),
            ep_return: 0.0,
            ep_len: 0,
            total_steps: 0,
        })
    }

    /// Collect one epoch of experience, update, and report.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics, PpoError> {
        let n = self.cfg.steps_per_epoch;
        let mut buffer = RolloutBuffer::with_capacity(n);
        let (mut episodes, mut successes, mut crashes) = (0usize, 0usize, 0usize);
        let (mut sum_return, mut sum_len) = (0.0, 0usize);

        while !buffer.is_full() {
            let input = widen(&self.obs);
            let dist = self.agent.policy.forward(&input)?;
            let value = self.agent.value.forward(&input)?;
            let (action, log_prob) = dist.sample(&mut self.rng);
            let r = self.env.step(action)?;
            self.total_steps += 1;
            self.ep_return += r.reward;
            self.ep_len += 1;
            let next_obs = agent_input(&self.agent, &r.observation);

            let end = if r.terminated {
                StepEnd::Terminated
            } else if r.truncated {
                StepEnd::Truncated
            } else {
                StepEnd::Continue
            };
            let next_value = if r.terminated {
                0.0
            } else if r.truncated || buffer.len() + 1 == n {
                self.agent.value.forward(&widen(&next_obs))?
            } else {
                0.0
            };
            buffer.push(Transition {
                input: std::mem::take(&mut self.obs),
                action: [action.ax, action.ay],
                log_prob,
                reward: r.reward,
                value,
                end,
                next_value,
            });

            if r.terminated || r.truncated {
                episodes += 1;
                sum_return += self.ep_return;
                sum_len += self.ep_len;
                match r.info.event {
                    Event::Success => successes += 1,
                    Event::Crash => crashes += 1,
                    _ => {}
                }
                self.ep_return = 0.0;
                self.ep_len = 0;
                let (obs, _) = self.env.reset(self.cfg.tunnel, self.rng.random())?;
                self.obs = agent_input(&self.agent, &obs);
            } else {
                self.obs = next_obs;
            }
        }

        let lr = if self.cfg.lr_decay && self.cfg.epochs > 0 {
            self.cfg.learning_rate * (1.0 - epoch as f64 / self.cfg.epochs as f64)
        } else {
            self.cfg.learning_rate
        };
        let cfg = self.cfg.clone();
        let update = ppo_update(&mut self.agent, &mut self.opt, &buffer, &cfg, lr, &mut self.rng)?;
        // The stored observation was encoded with pre-update weights only
        // through obs_scale, which never changes, so it stays valid.
        let per = |x: usize| if episodes > 0 { x as f64 / episodes as f64 } else { 0.0 };
        Ok(EpochMetrics {
            epoch: epoch + 1,
            steps: self.total_steps,
            episodes,
            mean_return: if episodes > 0 { sum_return / episodes as f64 } else { 0.0 },
            success_rate: per(successes),
            crash_rate: per(crashes),
            mean_len: per(sum_len),
            update,
        })
    }
}

pub fn checkpoint_name(agent: usize, epoch: usize) -> String {
    format!("agent{agent}_epoch{epoch}.ckpt")
}

pub fn metrics_name(agent: usize) -> String {
    format!("agent{agent}_metrics.csv")
}

pub fn save_checkpoint(path: &Path, agent: &AgentCheckpoint) -> Result<(), PpoError> {
    fs::write(path, agent.to_bytes()).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<AgentCheckpoint, PpoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(AgentCheckpoint::from_bytes(&bytes)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub obs_scale: f64,
    /// `checkpoints[k][e]` is agent `k` after `e` epochs.
    pub checkpoints: Vec<Vec<PathBuf>>,
    pub metrics_files: Vec<PathBuf>,
    pub metrics: Vec<Vec<EpochMetrics>>,
}

/// Train `cfg.n_agents` independent agents, writing checkpoints after every
/// epoch and one metrics CSV per agent into `out_dir`.
pub fn train<F>(cfg: &TrainConfig, tunnels: &[TunnelSpec], out_dir: &Path, on_epoch: F) -> Result<TrainOutcome, PpoError>
where
    F: Fn(usize, &EpochMetrics) + Sync,
{
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let used: Vec<TunnelSpec> = match cfg.tunnel {
        Some(id) => vec![tunnels
            .iter()
            .find(|t| t.id == id)
            .cloned()
            .ok_or(EnvError::UnknownTunnel(id))?],
        None => tunnels.to_vec(),
    };
    let obs_scale = calibrate_obs_scale(&used, &cfg.camera(), cfg.seed)?;

    let results: Vec<Result<(Vec<PathBuf>, PathBuf, Vec<EpochMetrics>), PpoError>> = (0..cfg.n_agents)
        .into_par_iter()
        .map(|k| {
            let mut trainer = AgentTrainer::new(cfg, tunnels.to_vec(), obs_scale, k)?;
            let mut ckpts = Vec::with_capacity(cfg.epochs + 1);
            let path = out_dir.join(checkpoint_name(k, 0));
            save_checkpoint(&path, &trainer.agent)?;
            ckpts.push(path);

            let metrics_path = out_dir.join(metrics_name(k));
            let mut file = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
            writeln!(file, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
            let mut all = Vec::with_capacity(cfg.epochs);
            for e in 0..cfg.epochs {
                let m = trainer.run_epoch(e)?;
                writeln!(file, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
                file.flush().map_err(io_err(&metrics_path))?;
                let path = out_dir.join(checkpoint_name(k, e + 1));
                save_checkpoint(&path, &trainer.agent)?;
                ckpts.push(path);
                on_epoch(k, &m);
                all.push(m);
            }
            Ok((ckpts, metrics_path, all))
        })
        .collect();

    let mut outcome = TrainOutcome {
        obs_scale,
        checkpoints: Vec::new(),
        metrics_files: Vec::new(),
        metrics: Vec::new(),
    };
    for r in results {
        let (c, m, all) = r?;
        outcome.checkpoints.push(c);
        outcome.metrics_files.push(m);
        outcome.metrics.push(all);
    }
    Ok(outcome)
}
