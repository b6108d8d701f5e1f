//! 2-D point-mass reaching: the agent moves a point toward a per-episode
//! target inside `[-1, 1]²`. Sparse mode pays 1 on reaching within 0.1 and
//! terminates; dense mode pays the negative distance every step and only
//! truncates.

use serde::{Deserialize, Serialize};

use super::Transition;
use crate::config::RewardMode;
use crate::rng::Stream;
use crate::{Error, Result};

pub const ACTION_SCALE: f64 = 0.1;
pub const REACH_RADIUS: f64 = 0.1;
pub const MAX_EPISODE_STEPS: u32 = 100;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReachEnvState {
    pub pos_bits: Vec<[u64; 2]>,
    pub target_bits: Vec<[u64; 2]>,
    pub steps: Vec<u32>,
    pub episode: Vec<u64>,
}

pub struct PointReachBatch {
    seed: u64,
    n: usize,
    mode: RewardMode,
    pos: Vec<(f64, f64)>,
    target: Vec<(f64, f64)>,
    steps: Vec<u32>,
    episode: Vec<u64>,
    fixed_start: bool,
}

impl PointReachBatch {
    pub fn new(n: usize, mode: RewardMode, seed: u64, fixed_start: bool) -> Self {
        let mut batch = PointReachBatch {
            seed,
            n,
            mode,
            pos: vec![(0.0, 0.0); n],
            target: vec![(0.0, 0.0); n],
            steps: vec![0; n],
            episode: vec![0; n],
            fixed_start,
        };
        for e in 0..n {
            batch.reset_env(e);
        }
        batch
    }

    pub fn num_envs(&self) -> usize {
        self.n
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.pos
    }

    pub fn targets(&self) -> &[(f64, f64)] {
        &self.target
    }

    fn reset_env(&mut self, env: usize) {
        if self.fixed_start {
            self.pos[env] = (-0.5, -0.5);
            self.target[env] = (0.5, 0.5);
        } else {
            let mut rng = Stream::new(self.seed, "reset", &[env as u64, self.episode[env]]);
            self.pos[env] = (rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0));
            self.target[env] = (rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0));
        }
        self.steps[env] = 0;
    }

    pub fn obs_of(&self, env: usize) -> Vec<f32> {
        let (px, py) = self.pos[env];
        let (tx, ty) = self.target[env];
        vec![px as f32, py as f32, tx as f32, ty as f32]
    }

    pub fn observations(&self) -> Vec<Vec<f32>> {
        (0..self.n).map(|e| self.obs_of(e)).collect()
    }

    pub fn step(&mut self, actions: &[[f64; 2]]) -> Vec<Transition> {
        assert_eq!(actions.len(), self.n);
        let mut out = Vec::with_capacity(self.n);
        for e in 0..self.n {
            let a = actions[e];
            let px = (self.pos[e].0 + ACTION_SCALE * a[0].clamp(-1.0, 1.0)).clamp(-1.0, 1.0);
            let py = (self.pos[e].1 + ACTION_SCALE * a[1].clamp(-1.0, 1.0)).clamp(-1.0, 1.0);
            self.pos[e] = (px, py);
            self.steps[e] += 1;
            let (tx, ty) = self.target[e];
            let dist = ((px - tx).powi(2) + (py - ty).powi(2)).sqrt();
            let reached = dist <= REACH_RADIUS;
            let (reward, done) = match self.mode {
                RewardMode::Sparse => (f64::from(reached as u8), reached),
                RewardMode::Dense => (-dist, false),
            };
            let truncated = !done && self.steps[e] >= MAX_EPISODE_STEPS;
            let mut transition = Transition {
                obs: self.obs_of(e),
                terminal_obs: None,
                reward,
                done,
                truncated,
                goal: reached.then_some(0),
            };
            if done || truncated {
                transition.terminal_obs = Some(transition.obs.clone());
                self.episode[e] += 1;
                self.reset_env(e);
                transition.obs = self.obs_of(e);
            }
            out.push(transition);
        }
        out
    }

    pub fn state(&self) -> ReachEnvState {
        ReachEnvState {
            pos_bits: self
                .pos
                .iter()
                .map(|&(x, y)| [x.to_bits(), y.to_bits()])
                .collect(),
            target_bits: self
                .target
                .iter()
                .map(|&(x, y)| [x.to_bits(), y.to_bits()])
                .collect(),
            steps: self.steps.clone(),
            episode: self.episode.clone(),
        }
    }

    pub fn restore(&mut self, state: &ReachEnvState) -> Result<()> {
        if state.pos_bits.len() != self.n {
            return Err(Error::Checkpoint(format!(
                "env state has {} envs, batch has {}",
                state.pos_bits.len(),
                self.n
            )));
        }
        let unbits =
            |v: &Vec<[u64; 2]>| -> Vec<(f64, f64)> {
                v.iter()
                    .map(|b| (f64::from_bits(b[0]), f64::from_bits(b[1])))
                    .collect()
            };
        self.pos = unbits(&state.pos_bits);
        self.target = unbits(&state.target_bits);
        self.steps = state.steps.clone();
        self.episode = state.episode.clone();
        Ok(())
    }
}
