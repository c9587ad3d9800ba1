//! Level measures for the five generation tasks, goal-conditioned fitness
//! and the Progress metric.
//!
//! Passable tiles are EMPTY and BAT; connectivity is 4-neighbour.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::{Level, TileKind};

pub const N_TASKS: usize = 5;

/// Bound of the normalized fitness codomain `[-FITNESS_BOUND, FITNESS_BOUND]`.
pub const FITNESS_BOUND: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    /// Number of connected regions.
    RG,
    /// Longest shortest path.
    PL,
    /// Wall count.
    WC,
    /// Bat count.
    BC,
    /// Fraction of bats in a named half of the grid.
    BD,
}

impl TaskId {
    pub const ALL: [TaskId; N_TASKS] = [TaskId::RG, TaskId::PL, TaskId::WC, TaskId::BC, TaskId::BD];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::RG => "RG",
            TaskId::PL => "PL",
            TaskId::WC => "WC",
            TaskId::BC => "BC",
            TaskId::BD => "BD",
        }
    }

    /// Largest possible raw distance between a goal and a measure on a
    /// `width x height` grid.
    pub fn range(self, width: usize, height: usize) -> f64 {
        let cells = (width * height) as f64;
        match self {
            TaskId::RG => (cells / 2.0).ceil(),
            TaskId::PL => cells - 1.0,
            TaskId::WC | TaskId::BC => cells,
            TaskId::BD => 1.0,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown task {s:?}")))
    }
}

/// Renders an active-task mask as e.g. `WC+BC`.
pub fn composition_label(active: &[bool; N_TASKS]) -> String {
    TaskId::ALL
        .iter()
        .filter(|t| active[t.index()])
        .map(|t| t.name())
        .collect::<Vec<_>>()
        .join("+")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    #[default]
    Top,
    Bottom,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Top, Direction::Bottom, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::Top => "top",
            Direction::Bottom => "bottom",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    /// Whether `(row, col)` lies strictly inside this half. For odd
    /// dimensions the centre line belongs to neither half.
    pub fn contains(self, row: usize, col: usize, width: usize, height: usize) -> bool {
        match self {
            Direction::Top => row < height / 2,
            Direction::Bottom => row >= height.div_ceil(2),
            Direction::Left => col < width / 2,
            Direction::Right => col >= width.div_ceil(2),
        }
    }
}

/// Raw values of the five measures.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasureVector {
    pub rg: usize,
    pub pl: usize,
    pub wc: usize,
    pub bc: usize,
    pub bd: f64,
}

impl MeasureVector {
    pub fn get(&self, task: TaskId) -> f64 {
        match task {
            TaskId::RG => self.rg as f64,
            TaskId::PL => self.pl as f64,
            TaskId::WC => self.wc as f64,
            TaskId::BC => self.bc as f64,
            TaskId::BD => self.bd,
        }
    }

    pub fn to_array(&self) -> [f64; N_TASKS] {
        TaskId::ALL.map(|t| self.get(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatGoal {
    pub dir: Direction,
    pub frac: f64,
}

/// Per-task targets; a target is present exactly for the active tasks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GoalSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bd: Option<BatGoal>,
}

impl GoalSpec {
    pub fn target(&self, task: TaskId) -> Option<f64> {
        match task {
            TaskId::RG => self.rg,
            TaskId::PL => self.pl,
            TaskId::WC => self.wc,
            TaskId::BC => self.bc,
            TaskId::BD => self.bd.map(|b| b.frac),
        }
    }

    pub fn set(&mut self, task: TaskId, value: f64) {
        match task {
            TaskId::RG => self.rg = Some(value),
            TaskId::PL => self.pl = Some(value),
            TaskId::WC => self.wc = Some(value),
            TaskId::BC => self.bc = Some(value),
            TaskId::BD => {
                let dir = self.bd.map(|b| b.dir).unwrap_or_default();
                self.bd = Some(BatGoal { dir, frac: value });
            }
        }
    }

    pub fn is_active(&self, task: TaskId) -> bool {
        self.target(task).is_some()
    }

    pub fn active_mask(&self) -> [bool; N_TASKS] {
        TaskId::ALL.map(|t| self.is_active(t))
    }

    pub fn active_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        TaskId::ALL.into_iter().filter(|t| self.is_active(*t))
    }

    /// Direction used for the BD measure; TOP when no BD goal is set.
    pub fn direction(&self) -> Direction {
        self.bd.map(|b| b.dir).unwrap_or_default()
    }

    /// Checks every target lies within its task's raw range on the grid.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for task in TaskId::ALL {
            if let Some(g) = self.target(task) {
                let range = task.range(width, height);
                if !g.is_finite() || g < 0.0 || g > range {
                    return Err(Error::config(format!(
                        "{task} target {g} outside [0, {range}] on a {width}x{height} grid"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn neighbours(i: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / width, i % width);
    let up = (r > 0).then(|| i - width);
    let down = (r + 1 < height).then(|| i + width);
    let left = (c > 0).then(|| i - 1);
    let right = (c + 1 < width).then(|| i + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Number of 4-connected components of passable tiles.
pub fn count_regions(level: &Level) -> usize {
    let (w, h) = (level.width(), level.height());
    let tiles = level.tiles();
    let mut seen = vec![false; tiles.len()];
    let mut stack = Vec::new();
    let mut regions = 0;
    for start in 0..tiles.len() {
        if seen[start] || !tiles[start].is_passable() {
            continue;
        }
        regions += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for j in neighbours(i, w, h) {
                if !seen[j] && tiles[j].is_passable() {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    regions
}

/// Diameter of the passable-tile graph: the longest shortest path between
/// any two mutually reachable passable tiles. BFS from every passable tile.
pub fn max_path_length(level: &Level) -> usize {
    let (w, h) = (level.width(), level.height());
    let tiles = level.tiles();
    let n = tiles.len();
    let mut dist = vec![u32::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    let mut best = 0u32;
    for src in 0..n {
        if !tiles[src].is_passable() {
            continue;
        }
        dist.fill(u32::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(i) = queue.pop_front() {
            let d = dist[i];
            best = best.max(d);
            for j in neighbours(i, w, h) {
                if dist[j] == u32::MAX && tiles[j].is_passable() {
                    dist[j] = d + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    best as usize
}

pub fn wall_count(level: &Level) -> usize {
    level.count(TileKind::Wall)
}

pub fn bat_count(level: &Level) -> usize {
    level.count(TileKind::Bat)
}

/// Fraction of bats inside the half named by `dir`; 0 when there are no bats.
pub fn bat_direction_fraction(level: &Level, dir: Direction) -> f64 {
    let (w, h) = (level.width(), level.height());
    let mut total = 0usize;
    let mut inside = 0usize;
    for (i, t) in level.tiles().iter().enumerate() {
        if *t == TileKind::Bat {
            total += 1;
            if dir.contains(i / w, i % w, w, h) {
                inside += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

/// BD fraction for each direction, indexed by `Direction::index`.
pub fn bat_direction_fractions(level: &Level) -> [f64; 4] {
    Direction::ALL.map(|d| bat_direction_fraction(level, d))
}

pub fn measure(level: &Level, dir: Direction) -> MeasureVector {
    MeasureVector {
        rg: count_regions(level),
        pl: max_path_length(level),
        wc: wall_count(level),
        bc: bat_count(level),
        bd: bat_direction_fraction(level, dir),
    }
}

/// A single raw measure, for callers that only track a few tasks.
pub fn measure_task(level: &Level, task: TaskId, dir: Direction) -> f64 {
    match task {
        TaskId::RG => count_regions(level) as f64,
        TaskId::PL => max_path_length(level) as f64,
        TaskId::WC => wall_count(level) as f64,
        TaskId::BC => bat_count(level) as f64,
        TaskId::BD => bat_direction_fraction(level, dir),
    }
}

/// Normalized distance `|g - m| / range` in `[0, 1]` for in-range values.
pub fn goal_distance(task: TaskId, goal: f64, measured: f64, width: usize, height: usize) -> f64 {
    (goal - measured).abs() / task.range(width, height)
}

/// Maps a normalized distance onto the fitness codomain: 0 → +5, 1 → −5.
pub fn fitness_from_distance(distance: f64) -> f64 {
    (FITNESS_BOUND - 2.0 * FITNESS_BOUND * distance).clamp(-FITNESS_BOUND, FITNESS_BOUND)
}

/// Per-task fitness in `[-5, 5]`; inactive tasks are 0.
pub fn goal_fitness(
    measures: &MeasureVector,
    goals: &GoalSpec,
    width: usize,
    height: usize,
) -> Result<[f64; N_TASKS]> {
    goals.validate(width, height)?;
    let mut out = [0.0; N_TASKS];
    for task in goals.active_tasks() {
        let g = goals.target(task).expect("active task has a target");
        let d = goal_distance(task, g, measures.get(task), width, height);
        out[task.index()] = fitness_from_distance(d);
    }
    Ok(out)
}

/// Unclamped `1 - |(g - sT) / (g - s0)|`; `None` when `g == s0`.
pub fn progress_raw(goal: f64, initial: f64, terminal: f64) -> Option<f64> {
    if goal == initial {
        None
    } else {
        Some(1.0 - ((goal - terminal) / (goal - initial)).abs())
    }
}

/// Progress toward a goal over an episode, clamped to `[0, 1]`.
///
/// When the level already starts at the goal, Progress is 1 if it still
/// ends there and 0 otherwise.
pub fn progress(goal: f64, initial: f64, terminal: f64) -> f64 {
    match progress_raw(goal, initial, terminal) {
        Some(p) => p.max(0.0),
        None if terminal == goal => 1.0,
        None => 0.0,
    }
}
