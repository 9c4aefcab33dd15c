//! Evaluation episodes driven by a checkpoint or a random controller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, EnvError, Event, NavEnv, A_MAX, DT};
use crate::export::TrajectoryRow;
use crate::net::{AgentCheckpoint, NetError};
use crate::ppo::agent_input;
use crate::world::Vec2;

#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// Mean action of the policy.
    Deterministic(&'a AgentCheckpoint),
    /// Sampled from the policy's Gaussian.
    Stochastic(&'a AgentCheckpoint),
    /// Uniform over the action box, ignoring observations.
    Random,
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub rows: Vec<TrajectoryRow>,
    pub path: Vec<Vec2>,
    pub event: Event,
    pub total_reward: f64,
    /// Mean `|y - centerline(x)|` over visited positions.
    pub mean_abs_offset: f64,
}

impl EpisodeLog {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }
}

/// Play one episode from `env.reset(tunnel, seed)` to termination or truncation.
pub fn run_episode(env: &mut NavEnv, controller: Controller<'_>, tunnel: Option<u32>, seed: u64) -> Result<EpisodeLog, RolloutError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let (mut obs, s0) = env.reset(tunnel, seed)?;
    let mut path = vec![s0.position];
    let mut rows = Vec::new();
    let mut offset_sum = offset(env, s0.position);
    let mut total = 0.0;
    loop {
        let action = match controller {
            Controller::Deterministic(a) | Controller::Stochastic(a) => {
                let x: Vec<f64> = agent_input(a, &obs).into_iter().map(f64::from).collect();
                let dist = a.policy.forward(&x)?;
                if matches!(controller, Controller::Stochastic(_)) {
                    dist.sample(&mut rng).0
                } else {
                    dist.mode()
                }
            }
            Controller::Random => Action::new(rng.random_range(-A_MAX..=A_MAX), rng.random_range(-A_MAX..=A_MAX)),
        };
        let r = env.step(action)?;
        let s = *env.state().expect("stepped");
        total += r.reward;
        path.push(s.position);
        offset_sum += offset(env, s.position);
        rows.push(TrajectoryRow {
            step: s.steps,
            t: s.steps as f64 * DT,
            x: s.position.x,
            y: s.position.y,
            vx: s.target_velocity.x,
            vy: s.target_velocity.y,
            ax: r.info.applied.ax,
            ay: r.info.applied.ay,
            reward: r.reward,
            event: r.info.event.as_str(),
        });
        obs = r.observation;
        if r.terminated || r.truncated {
            return Ok(EpisodeLog {
                mean_abs_offset: offset_sum / path.len() as f64,
                rows,
                path,
                event: r.info.event,
                total_reward: total,
            });
        }
    }
}

fn offset(env: &NavEnv, p: Vec2) -> f64 {
    (p.y - env.tunnel().free_centerline(p)).abs()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub crashes: usize,
    pub timeouts: usize,
    pub mean_abs_offset: f64,
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    pub fn from_logs(logs: &[EpisodeLog]) -> Self {
        let mut s = EvalSummary {
            episodes: logs.len(),
            ..Default::default()
        };
        for l in logs {
            match l.event {
                Event::Success => s.successes += 1,
                Event::Crash => s.crashes += 1,
                Event::Timeout => s.timeouts += 1,
                Event::Running => {}
            }
            s.mean_abs_offset += l.mean_abs_offset;
        }
        if !logs.is_empty() {
            s.mean_abs_offset /= logs.len() as f64;
        }
        s
    }
}

/// `episodes` runs with seeds `seed, seed + 1, ...`.
pub fn evaluate(
    env: &mut NavEnv,
    controller: Controller<'_>,
    tunnel: Option<u32>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>, RolloutError> {
    (0..episodes)
        .map(|i| run_episode(env, controller, tunnel, seed.wrapping_add(i as u64)))
        .collect()
}
