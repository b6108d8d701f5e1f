//! Vectorized desk-scale environments with synchronous batch stepping,
//! per-env counter-based random streams and auto-reset inside `step`.

pub mod gridworld;
pub mod point_reach;

use serde::{Deserialize, Serialize};

pub use gridworld::{two_goal_layout, GridworldBatch, Layout};
pub use point_reach::PointReachBatch;

use crate::config::{EnvCfg, EnvKind};
use crate::{Error, Result};

/// One environment's step result. When the episode ended (`done` or
/// `truncated`), `obs` is already the reset observation of the next episode
/// and the terminal observation is kept separately for value bootstrapping.
/// `done` and `truncated` are mutually exclusive.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub terminal_obs: Option<Vec<f32>>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    /// Goal region entered this step, if any (also set in dense reward mode
    /// where it does not terminate the episode).
    pub goal: Option<usize>,
}

/// Serializable environment state for bit-exact checkpoint resume.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvState {
    Gridworld(gridworld::GridEnvState),
    PointReach(point_reach::ReachEnvState),
}

/// The vectorized environment batch behind a common stepping contract.
pub enum EnvBatch {
    Gridworld(GridworldBatch),
    PointReach(PointReachBatch),
}

impl EnvBatch {
    /// Build from config. `fixed_start` pins initial states for evaluation.
    pub fn from_config(cfg: &EnvCfg, seed: u64, fixed_start: bool) -> Result<Self> {
        match cfg.kind {
            EnvKind::Gridworld => {
                let layout = resolve_layout(&cfg.layout)?;
                Ok(EnvBatch::Gridworld(GridworldBatch::new(
                    layout,
                    cfg.num_envs,
                    seed,
                    fixed_start,
                )))
            }
            EnvKind::PointReach => Ok(EnvBatch::PointReach(PointReachBatch::new(
                cfg.num_envs,
                cfg.reward,
                seed,
                fixed_start,
            ))),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvBatch::Gridworld(_) => 2,
            EnvBatch::PointReach(_) => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn num_envs(&self) -> usize {
        match self {
            EnvBatch::Gridworld(e) => e.num_envs(),
            EnvBatch::PointReach(e) => e.num_envs(),
        }
    }

    pub fn observations(&self) -> Vec<Vec<f32>> {
        match self {
            EnvBatch::Gridworld(e) => e.observations(),
            EnvBatch::PointReach(e) => e.observations(),
        }
    }

    pub fn positions(&self) -> Vec<(f64, f64)> {
        match self {
            EnvBatch::Gridworld(e) => e.positions().to_vec(),
            EnvBatch::PointReach(e) => e.positions().to_vec(),
        }
    }

    pub fn step(&mut self, actions: &[[f64; 2]]) -> Vec<Transition> {
        match self {
            EnvBatch::Gridworld(e) => e.step(actions),
            EnvBatch::PointReach(e) => e.step(actions),
        }
    }

    /// Number of distinct goal regions (for mode-coverage accounting).
    pub fn n_goal_regions(&self) -> usize {
        match self {
            EnvBatch::Gridworld(e) => e.layout.n_goal_regions,
            EnvBatch::PointReach(_) => 1,
        }
    }

    pub fn state(&self) -> EnvState {
        match self {
            EnvBatch::Gridworld(e) => EnvState::Gridworld(e.state()),
            EnvBatch::PointReach(e) => EnvState::PointReach(e.state()),
        }
    }

    pub fn restore(&mut self, state: &EnvState) -> Result<()> {
        match (self, state) {
            (EnvBatch::Gridworld(e), EnvState::Gridworld(s)) => e.restore(s),
            (EnvBatch::PointReach(e), EnvState::PointReach(s)) => e.restore(s),
            _ => Err(Error::Checkpoint(
                "environment kind does not match saved state".into(),
            )),
        }
    }
}

/// Resolve a layout reference: inline map text (contains a newline), a
/// `.map` file path, or a builtin name.
pub fn resolve_layout(spec: &str) -> Result<Layout> {
    if spec.contains('\n') {
        return Layout::parse(spec);
    }
    match spec {
        "two_goal" => Ok(two_goal_layout()),
        "open" => Ok(gridworld::open_layout()),
        path if path.ends_with(".map") => {
            let text = std::fs::read_to_string(path)?;
            Layout::parse(&text)
        }
        other => Err(Error::Config {
            field: "env.layout".into(),
            message: format!(
                "unknown layout {other:?} (builtin names: two_goal, open; or a .map file / inline text)"
            ),
        }),
    }
}
