//! Continuous-action gridworld on a unit-cell grid: the agent spawns in the
//! spawn region, moves by clipped-and-scaled displacements, is stopped by
//! walls, and receives reward 1 (terminal) on entering a goal cell.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::Transition;
use crate::rng::Stream;
use crate::{Error, Result};

pub const ACTION_SCALE: f64 = 0.3;
pub const MAX_EPISODE_STEPS: u32 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Free,
    Spawn,
    Goal,
}

/// Static world geometry. Coordinates are `(x, y)` with `y` growing upward;
/// the text form lists rows top to bottom.
#[derive(Clone, Debug)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    cells: Vec<Cell>,
    pub spawn_cells: Vec<(usize, usize)>,
    pub goal_cells: Vec<(usize, usize)>,
    /// Goal-region id per goal cell (connected goal cells share a region).
    region_of: Vec<usize>,
    pub n_goal_regions: usize,
    text: String,
}

impl Layout {
    /// Parse a plain-text map: `#` wall, `.` free, `S` spawn, `G` goal.
    /// Rows must be equally long; at least one spawn and one goal cell.
    pub fn parse(text: &str) -> Result<Layout> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(Error::Layout {
                row: 0,
                col: 0,
                message: "empty map".into(),
            });
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut cells = vec![Cell::Free; width * height];
        let mut spawn_cells = Vec::new();
        let mut goal_cells = Vec::new();
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Layout {
                    row: r,
                    col: line.chars().count(),
                    message: format!("row length {} != {width}", line.chars().count()),
                });
            }
            for (c, ch) in line.chars().enumerate() {
                let x = c;
                let y = height - 1 - r;
                let cell = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Free,
                    'S' => Cell::Spawn,
                    'G' => Cell::Goal,
                    other => {
                        return Err(Error::Layout {
                            row: r,
                            col: c,
                            message: format!("unexpected character {other:?}"),
                        })
                    }
                };
                cells[y * width + x] = cell;
                match cell {
                    Cell::Spawn => spawn_cells.push((x, y)),
                    Cell::Goal => goal_cells.push((x, y)),
                    _ => {}
                }
            }
        }
        if spawn_cells.is_empty() {
            return Err(Error::Layout {
                row: 0,
                col: 0,
                message: "no spawn cells (S)".into(),
            });
        }
        if goal_cells.is_empty() {
            return Err(Error::Layout {
                row: 0,
                col: 0,
                message: "no goal cells (G)".into(),
            });
        }

        // Group goal cells into connected regions (4-connectivity).
        let mut region_of = vec![usize::MAX; goal_cells.len()];
        let mut n_regions = 0usize;
        let index_of = |x: usize, y: usize| goal_cells.iter().position(|&g| g == (x, y));
        for start in 0..goal_cells.len() {
            if region_of[start] != usize::MAX {
                continue;
            }
            let mut queue = VecDeque::from([start]);
            region_of[start] = n_regions;
            while let Some(i) = queue.pop_front() {
                let (x, y) = goal_cells[i];
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 {
                        continue;
                    }
                    if let Some(nidx) = index_of(nx as usize, ny as usize) {
                        if region_of[nidx] == usize::MAX {
                            region_of[nidx] = n_regions;
                            queue.push_back(nidx);
                        }
                    }
                }
            }
            n_regions += 1;
        }

        let canonical = rows.join("\n");
        Ok(Layout {
            width,
            height,
            cells,
            spawn_cells,
            goal_cells,
            region_of,
            n_goal_regions: n_regions,
            text: canonical,
        })
    }

    /// Canonical text form (parse → text → parse is stable).
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn cell(&self, x: i64, y: i64) -> Cell {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return Cell::Wall;
        }
        self.cells[y as usize * self.width + x as usize]
    }

    pub fn is_wall(&self, x: i64, y: i64) -> bool {
        self.cell(x, y) == Cell::Wall
    }

    /// Goal-region id of a cell, when it is a goal cell.
    pub fn goal_region(&self, x: i64, y: i64) -> Option<usize> {
        if x < 0 || y < 0 {
            return None;
        }
        self.goal_cells
            .iter()
            .position(|&g| g == (x as usize, y as usize))
            .map(|i| self.region_of[i])
    }

    /// Deterministic fixed-start point: center of the middle spawn cell.
    pub fn fixed_spawn(&self) -> (f64, f64) {
        let (x, y) = self.spawn_cells[self.spawn_cells.len() / 2];
        (x as f64 + 0.5, y as f64 + 0.5)
    }
}

/// The symmetric two-goal layout: goals left and right of a central spawn
/// band, separated by a vertical wall stub through the center column. Both
/// shortest paths from the spawn center have equal length, so a collapse to
/// one mode is measurable from goal counts alone. The spawn spans three
/// cells: episodes starting left or right of center keep both behaviors in
/// the on-policy data, and the center start (used for evaluation) sits on
/// the decision boundary.
pub fn two_goal_layout() -> Layout {
    Layout::parse(
        "\
.......
...#...
...#...
G.SSS.G
...#...
...#...
.......",
    )
    .expect("builtin layout parses")
}

/// Single-goal 7x7 layout without interior walls (sanity training).
pub fn open_layout() -> Layout {
    Layout::parse(
        "\
......G
.......
.......
...S...
.......
.......
.......",
    )
    .expect("builtin layout parses")
}

/// Move from `p` by `d`, stopping at the first wall boundary along the
/// segment (the whole motion stops; no sliding). Exact grid traversal, so a
/// wall-free move lands on `p + d` exactly.
pub fn move_with_walls(layout: &Layout, p: (f64, f64), d: (f64, f64)) -> (f64, f64) {
    if d.0 == 0.0 && d.1 == 0.0 {
        return p;
    }
    let (mut cx, mut cy) = (p.0.floor() as i64, p.1.floor() as i64);
    let step_x: i64 = if d.0 > 0.0 { 1 } else { -1 };
    let step_y: i64 = if d.1 > 0.0 { 1 } else { -1 };
    let mut t_done = 0.0f64;
    loop {
        // Parameter t of the next vertical / horizontal grid-line crossing.
        let tx = if d.0 != 0.0 {
            let boundary = if d.0 > 0.0 { cx + 1 } else { cx };
            (boundary as f64 - p.0) / d.0
        } else {
            f64::INFINITY
        };
        let ty = if d.1 != 0.0 {
            let boundary = if d.1 > 0.0 { cy + 1 } else { cy };
            (boundary as f64 - p.1) / d.1
        } else {
            f64::INFINITY
        };
        let t_cross = tx.min(ty);
        if t_cross >= 1.0 {
            return (p.0 + d.0, p.1 + d.1);
        }
        debug_assert!(t_cross >= t_done - 1e-12);
        t_done = t_cross;

        let cross_x = (tx - t_cross).abs() < 1e-15;
        let cross_y = (ty - t_cross).abs() < 1e-15;
        let (nx, ny) = (
            if cross_x { cx + step_x } else { cx },
            if cross_y { cy + step_y } else { cy },
        );
        // A corner crossing is blocked if any touched neighbor is a wall.
        let blocked = if cross_x && cross_y {
            layout.is_wall(nx, ny) || layout.is_wall(cx + step_x, cy) || layout.is_wall(cx, cy + step_y)
        } else {
            layout.is_wall(nx, ny)
        };
        if blocked {
            // Stop at the boundary, nudged back along the ray to stay
            // strictly inside the current free cell.
            let t_stop = (t_cross - 1e-9).max(0.0);
            return (p.0 + t_stop * d.0, p.1 + t_stop * d.1);
        }
        (cx, cy) = (nx, ny);
    }
}

/// Serializable per-env state.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridEnvState {
    pub pos_bits: Vec<[u64; 2]>,
    pub steps: Vec<u32>,
    pub episode: Vec<u64>,
}

/// Vectorized gridworld batch with auto-reset inside `step`.
pub struct GridworldBatch {
    pub layout: Layout,
    seed: u64,
    n: usize,
    pos: Vec<(f64, f64)>,
    steps: Vec<u32>,
    episode: Vec<u64>,
    fixed_start: bool,
}

impl GridworldBatch {
    pub fn new(layout: Layout, n: usize, seed: u64, fixed_start: bool) -> Self {
        let mut batch = GridworldBatch {
            layout,
            seed,
            n,
            pos: vec![(0.0, 0.0); n],
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

    fn spawn(&self, env: usize, episode: u64) -> (f64, f64) {
        if self.fixed_start {
            return self.layout.fixed_spawn();
        }
        let mut rng = Stream::new(self.seed, "reset", &[env as u64, episode]);
        let (cx, cy) = self.layout.spawn_cells[rng.below(self.layout.spawn_cells.len())];
        (
            cx as f64 + rng.uniform(),
            cy as f64 + rng.uniform(),
        )
    }

    fn reset_env(&mut self, env: usize) {
        self.pos[env] = self.spawn(env, self.episode[env]);
        self.steps[env] = 0;
    }

    pub fn obs_of(&self, env: usize) -> Vec<f32> {
        let (x, y) = self.pos[env];
        vec![
            (2.0 * x / self.layout.width as f64 - 1.0) as f32,
            (2.0 * y / self.layout.height as f64 - 1.0) as f32,
        ]
    }

    pub fn observations(&self) -> Vec<Vec<f32>> {
        (0..self.n).map(|e| self.obs_of(e)).collect()
    }

    /// Step every env with unbounded real actions; the env clips to
    /// `[-1, 1]` and scales by 0.3 internally.
    pub fn step(&mut self, actions: &[[f64; 2]]) -> Vec<Transition> {
        assert_eq!(actions.len(), self.n);
        let mut out = Vec::with_capacity(self.n);
        for e in 0..self.n {
            let a = actions[e];
            let d = (
                ACTION_SCALE * a[0].clamp(-1.0, 1.0),
                ACTION_SCALE * a[1].clamp(-1.0, 1.0),
            );
            let p = move_with_walls(&self.layout, self.pos[e], d);
            debug_assert!(
                !self.layout.is_wall(p.0.floor() as i64, p.1.floor() as i64),
                "position {p:?} inside a wall"
            );
            self.pos[e] = p;
            self.steps[e] += 1;
            let goal = self.layout.goal_region(p.0.floor() as i64, p.1.floor() as i64);
            let done = goal.is_some();
            let truncated = !done && self.steps[e] >= MAX_EPISODE_STEPS;
            let reward = if done { 1.0 } else { 0.0 };
            let mut transition = Transition {
                obs: self.obs_of(e),
                terminal_obs: None,
                reward,
                done,
                truncated,
                goal,
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

    pub fn state(&self) -> GridEnvState {
        GridEnvState {
            pos_bits: self
                .pos
                .iter()
                .map(|&(x, y)| [x.to_bits(), y.to_bits()])
                .collect(),
            steps: self.steps.clone(),
            episode: self.episode.clone(),
        }
    }

    pub fn restore(&mut self, state: &GridEnvState) -> Result<()> {
        if state.pos_bits.len() != self.n {
            return Err(Error::Checkpoint(format!(
                "env state has {} envs, batch has {}",
                state.pos_bits.len(),
                self.n
            )));
        }
        self.pos = state
            .pos_bits
            .iter()
            .map(|b| (f64::from_bits(b[0]), f64::from_bits(b[1])))
            .collect();
        self.steps = state.steps.clone();
        self.episode = state.episode.clone();
        Ok(())
    }
}
