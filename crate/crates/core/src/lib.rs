//! Optic-flow tunnel navigation: a 2-D obstacle world rendered through a
//! pinhole camera into flow images, PPO agents trained on them, and
//! KernelSHAP attention maps explaining what the agents look at.

pub mod cli;
pub mod config;
pub mod env;
pub mod explain;
pub mod export;
pub mod flow;
pub mod net;
pub mod ppo;
pub mod rollout;
pub mod world;

pub use env::{Action, NavEnv};
pub use flow::{CameraModel, FlowImage};
pub use net::AgentCheckpoint;
pub use world::TunnelSpec;
