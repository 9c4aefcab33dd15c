//! Episode dynamics: acceleration commands integrated into a clamped target
//! velocity, progress reward, crash/success/timeout termination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flow::{self, CameraModel, FlowImage};
use crate::world::{self, RayHit, TunnelSpec, Vec2, WorldError, BODY_RADIUS};

pub const DT: f64 = 0.05;
pub const A_MAX: f64 = 3.0;
pub const V_MAX: f64 = 2.0;
pub const EPISODE_SECONDS: f64 = 30.0;
/// `EPISODE_SECONDS / DT`, rounded up.
pub const MAX_STEPS: usize = 600;
pub const SUBSTEPS: usize = 4;
pub const FLIGHT_HEIGHT: f64 = 1.5;
pub const GAMMA: f64 = 0.99;

/// Positions live on a 2^-20 m lattice. Differences and sums of lattice
/// points below 2^32 m are exact in f64, so progress rewards telescope
/// without rounding.
const LATTICE: f64 = 1_048_576.0;

pub fn snap(x: f64) -> f64 {
    (x * LATTICE).round() / LATTICE
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown tunnel id {0}")]
    UnknownTunnel(u32),
    #[error("episode finished")]
    EpisodeFinished,
    #[error("environment has not been reset")]
    NotReset,
    #[error("tunnel library is empty")]
    NoTunnels,
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub position: Vec2,
    pub target_velocity: Vec2,
    pub height: f64,
    pub elapsed: f64,
    pub steps: usize,
    /// Largest x reached so far in the episode.
    pub max_x_so_far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    pub ax: f64,
    pub ay: f64,
}

impl Action {
    pub fn new(ax: f64, ay: f64) -> Self {
        Self { ax, ay }
    }
}

/// Per-component clip to `[-bound, bound]`.
pub fn clamp_box(vec: Vec2, bound: f64) -> Vec2 {
    debug_assert!(bound > 0.0);
    Vec2::new(vec.x.clamp(-bound, bound), vec.y.clamp(-bound, bound))
}

/// Discounted sum `sum_i gamma^i r_i`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Running,
    Crash,
    Success,
    Timeout,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Event::Running => "",
            Event::Crash => "crash",
            Event::Success => "success",
            Event::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub crashed: bool,
    pub succeeded: bool,
    pub position: Vec2,
    /// Action after clamping, as applied.
    pub applied: Action,
    pub event: Event,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: FlowImage,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

/// One tunnel-flight episode at a time.
#[derive(Debug, Clone)]
pub struct NavEnv {
    tunnels: Vec<TunnelSpec>,
    camera: CameraModel,
    current: usize,
    state: Option<KinematicState>,
    finished: bool,
    last_hits: Vec<RayHit>,
}

impl NavEnv {
    pub fn new(tunnels: Vec<TunnelSpec>, camera: CameraModel) -> Result<Self, EnvError> {
        if tunnels.is_empty() {
            return Err(EnvError::NoTunnels);
        }
        Ok(Self {
            tunnels,
            camera,
            current: 0,
            state: None,
            finished: false,
            last_hits: Vec::new(),
        })
    }

    pub fn with_library(camera: CameraModel) -> Self {
        Self::new(world::tunnel_library(), camera).expect("library is non-empty")
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn tunnels(&self) -> &[TunnelSpec] {
        &self.tunnels
    }

    pub fn tunnel(&self) -> &TunnelSpec {
        &self.tunnels[self.current]
    }

    pub fn state(&self) -> Option<&KinematicState> {
        self.state.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Column raycasts behind the most recent observation.
    pub fn last_hits(&self) -> &[RayHit] {
        &self.last_hits
    }

    pub fn tunnel_index(&self, id: u32) -> Result<usize, EnvError> {
        self.tunnels
            .iter()
            .position(|t| t.id == id)
            .ok_or(EnvError::UnknownTunnel(id))
    }

    /// Start a new episode. Without `tunnel_choice` the tunnel is drawn
    /// uniformly from the library.
    pub fn reset(
        &mut self,
        tunnel_choice: Option<u32>,
        seed: u64,
    ) -> Result<(FlowImage, KinematicState), EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.current = match tunnel_choice {
            Some(id) => self.tunnel_index(id)?,
            None => rng.random_range(0..self.tunnels.len()),
        };
        let start = world::sample_start_with(&self.tunnels[self.current], &mut rng);
        let position = Vec2::new(snap(start.x), snap(start.y));
        let state = KinematicState {
            position,
            target_velocity: Vec2::default(),
            height: FLIGHT_HEIGHT,
            elapsed: 0.0,
            steps: 0,
            max_x_so_far: position.x,
        };
        let obs = self.observe(&state)?;
        self.state = Some(state);
        self.finished = false;
        Ok((obs, state))
    }

    fn observe(&mut self, state: &KinematicState) -> Result<FlowImage, EnvError> {
        let (img, render) = flow::observe(
            &self.tunnels[self.current],
            state.position,
            state.target_velocity,
            &self.camera,
        )?;
        self.last_hits = render.column_hits;
        Ok(img)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let mut state = self.state.ok_or(EnvError::NotReset)?;
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        let tunnel = &self.tunnels[self.current];

        let a = clamp_box(Vec2::new(action.ax, action.ay), A_MAX);
        state.target_velocity = clamp_box(state.target_velocity + a * DT, V_MAX);

        let start = state.position;
        let mut crashed = false;
        for k in 1..=SUBSTEPS {
            let frac = k as f64 / SUBSTEPS as f64;
            let p = start + state.target_velocity * (DT * frac);
            let p = Vec2::new(snap(p.x), snap(p.y));
            state.position = p;
            if world::check_collision(tunnel, p, BODY_RADIUS) {
                crashed = true;
                break;
            }
        }
        state.steps += 1;
        state.elapsed = state.steps as f64 * DT;

        let previous_max = state.max_x_so_far;
        state.max_x_so_far = previous_max.max(state.position.x);
        let succeeded = !crashed && state.position.x >= tunnel.length;
        let reward = if crashed {
            -1.0
        } else {
            state.max_x_so_far - previous_max
        };
        let terminated = crashed || succeeded;
        let truncated = !terminated && state.steps >= MAX_STEPS;
        let event = if crashed {
            Event::Crash
        } else if succeeded {
            Event::Success
        } else if truncated {
            Event::Timeout
        } else {
            Event::Running
        };

        let observation = self.observe(&state)?;
        self.state = Some(state);
        self.finished = terminated || truncated;
        Ok(StepResult {
            observation,
            reward,
            terminated,
            truncated,
            info: StepInfo {
                crashed,
                succeeded,
                position: state.position,
                applied: Action::new(a.x, a.y),
                event,
            },
        })
    }
}
