//! Narrow-representation level editing environment.
//!
//! A cursor walks the grid in raster order; at each step the agent either
//! leaves the cell alone or writes one of the three tile kinds into it. The
//! reward is the weighted reduction of normalized goal distance over the
//! active tasks, so an episode's return telescopes to
//! `sum_i w_i * (dist_i(s_0) - dist_i(s_T))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitness::{self, Direction, GoalSpec, MeasureVector, TaskId, N_TASKS};
use crate::level::{Level, Position, TileKind, TileProbs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub rg: f64,
    pub pl: f64,
    pub wc: f64,
    pub bc: f64,
    pub bd: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            rg: 1.0,
            pl: 1.0,
            wc: 0.15,
            bc: 0.15,
            bd: 0.15,
        }
    }
}

impl RewardWeights {
    pub fn get(&self, task: TaskId) -> f64 {
        match task {
            TaskId::RG => self.rg,
            TaskId::PL => self.pl,
            TaskId::WC => self.wc,
            TaskId::BC => self.bc,
            TaskId::BD => self.bd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if TaskId::ALL.iter().any(|t| !(self.get(*t) > 0.0 && self.get(*t).is_finite())) {
            return Err(Error::config(format!("reward weights must be positive, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Noop,
    SetEmpty,
    SetWall,
    SetBat,
}

impl ActionKind {
    pub const ALL: [ActionKind; 4] = [ActionKind::Noop, ActionKind::SetEmpty, ActionKind::SetWall, ActionKind::SetBat];
    pub const COUNT: usize = 4;

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tile(self) -> Option<TileKind> {
        match self {
            ActionKind::Noop => None,
            ActionKind::SetEmpty => Some(TileKind::Empty),
            ActionKind::SetWall => Some(TileKind::Wall),
            ActionKind::SetBat => Some(TileKind::Bat),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub probs: TileProbs,
    pub max_steps: usize,
    pub change_budget: usize,
    pub weights: RewardWeights,
    /// Length of the condition vector appended to every observation.
    pub cond_dim: usize,
}

impl EnvConfig {
    /// Defaults: two passes over the grid, 30% of cells may change.
    pub fn new(width: usize, height: usize, cond_dim: usize) -> Self {
        let cells = width * height;
        Self {
            width,
            height,
            probs: TileProbs::default(),
            max_steps: 2 * cells,
            change_budget: (0.3 * cells as f64).floor() as usize,
            weights: RewardWeights::default(),
            cond_dim,
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn obs_dim(&self) -> usize {
        3 * self.cells() + 2 + self.cond_dim
    }

    /// Offset of the condition block inside an observation.
    pub fn cond_offset(&self) -> usize {
        3 * self.cells() + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::config(format!("grid must be at least 2x2, got {}x{}", self.width, self.height)));
        }
        if self.max_steps == 0 || self.change_budget == 0 {
            return Err(Error::config("max_steps and change_budget must be positive"));
        }
        self.probs.validate()?;
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub level: Level,
    pub cursor: Position,
    pub step: usize,
    pub changes: usize,
    pub initial: MeasureVector,
    pub goals: GoalSpec,
    pub dir: Direction,
    condition: Vec<f64>,
    /// Current normalized distance per task; only active entries are maintained.
    distances: [f64; N_TASKS],
    done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

fn active_distances(level: &Level, goals: &GoalSpec, dir: Direction) -> [f64; N_TASKS] {
    let mut out = [0.0; N_TASKS];
    for task in goals.active_tasks() {
        let g = goals.target(task).expect("active");
        let m = fitness::measure_task(level, task, dir);
        out[task.index()] = fitness::goal_distance(task, g, m, level.width(), level.height());
    }
    out
}

impl EnvState {
    /// Starts an episode on a fresh random level. `condition` stays fixed
    /// for the whole episode.
    pub fn reset(config: &EnvConfig, seed: u64, goals: &GoalSpec, condition: &[f64]) -> Result<Self> {
        let level = Level::random(config.width, config.height, seed, &config.probs)?;
        Self::from_level(config, level, goals, condition)
    }

    pub fn from_level(config: &EnvConfig, level: Level, goals: &GoalSpec, condition: &[f64]) -> Result<Self> {
        if condition.len() != config.cond_dim {
            return Err(Error::Shape {
                context: "condition vector",
                expected: config.cond_dim,
                got: condition.len(),
            });
        }
        if level.width() != config.width || level.height() != config.height {
            return Err(Error::config("level dimensions differ from environment config"));
        }
        goals.validate(config.width, config.height)?;
        let dir = goals.direction();
        let initial = fitness::measure(&level, dir);
        let distances = active_distances(&level, goals, dir);
        Ok(Self {
            level,
            cursor: Position::default(),
            step: 0,
            changes: 0,
            initial,
            goals: *goals,
            dir,
            condition: condition.to_vec(),
            distances,
            done: false,
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn condition(&self) -> &[f64] {
        &self.condition
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut out = vec![0.0; 3 * self.level.len() + 2 + self.condition.len()];
        self.write_observation(&mut out);
        out
    }

    pub fn write_observation(&self, out: &mut [f64]) {
        let grid = 3 * self.level.len();
        self.level.write_one_hot(&mut out[..grid]);
        out[grid] = self.cursor.row as f64 / (self.level.height() - 1) as f64;
        out[grid + 1] = self.cursor.col as f64 / (self.level.width() - 1) as f64;
        out[grid + 2..].copy_from_slice(&self.condition);
    }

    /// Total normalized, weighted distance to the goals.
    pub fn weighted_distance(&self, weights: &RewardWeights) -> f64 {
        self.goals.active_tasks().map(|t| weights.get(t) * self.distances[t.index()]).sum()
    }

    pub fn step(&mut self, config: &EnvConfig, action: ActionKind) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let mut reward = 0.0;
        if let Some(kind) = action.tile() {
            let prev = self.level.set(self.cursor, kind)?;
            if prev != kind {
                self.changes += 1;
                let next = active_distances(&self.level, &self.goals, self.dir);
                for task in self.goals.active_tasks() {
                    let i = task.index();
                    reward += config.weights.get(task) * (self.distances[i] - next[i]);
                }
                self.distances = next;
            }
        }
        let cell = self.cursor.row * config.width + self.cursor.col + 1;
        let cell = cell % config.cells();
        self.cursor = Position::new(cell / config.width, cell % config.width);
        self.step += 1;
        self.done = self.step >= config.max_steps || self.changes >= config.change_budget;
        Ok(StepOutcome {
            reward,
            done: self.done,
        })
    }

    pub fn measures(&self) -> MeasureVector {
        fitness::measure(&self.level, self.dir)
    }

    /// Progress per active task from the episode's initial level to now.
    pub fn progress(&self) -> Vec<(TaskId, f64)> {
        let now = self.measures();
        self.goals
            .active_tasks()
            .map(|t| (t, fitness::progress(self.goals.target(t).expect("active"), self.initial.get(t), now.get(t))))
            .collect()
    }
}
