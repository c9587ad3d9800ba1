//! Instruction datasets with ground-truth task labels and goals, plus the
//! text front-ends that embed instruction sentences.
//!
//! Goal values for the count-like tasks are the 25th (LOW) and 75th (HIGH)
//! percentiles of the measure over random levels of the target grid size.
//! BD goals name a direction and ask for fraction 0 (LOW) or 1 (HIGH).

mod featurize;
mod templates;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use featurize::{
    featurize, tokenize, Embedding, EmbeddingSource, ExternalEmbeddings, TextFrontend, DEFAULT_HASH_DIM,
    MIN_HASH_DIM,
};

use crate::error::{Error, Result};
use crate::fitness::{self, composition_label, BatGoal, Direction, GoalSpec, TaskId, N_TASKS};
use crate::level::{Level, TileProbs};
use crate::seeding::{derive_seed, stream};

pub const SINGLE_DATASET_SIZE: usize = 80;
pub const MULTI_DATASET_SIZE: usize = 256;
pub const PERCENTILE_SAMPLES: usize = 10_000;
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Fixed sampling seed for goal percentiles: goals depend on grid size only.
const PERCENTILE_SEED: u64 = 0x6f61_6c73_2d70_6374;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionLevel {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub text: String,
    pub active: [bool; N_TASKS],
    pub goals: GoalSpec,
    pub split: Split,
}

impl InstructionRecord {
    pub fn active_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        TaskId::ALL.into_iter().filter(|t| self.active[t.index()])
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// e.g. `PL+BD`
    pub fn composition(&self) -> String {
        composition_label(&self.active)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.n_active() == 0 {
            return Err(Error::config(format!("instruction {:?} has no active task", self.text)));
        }
        if self.goals.active_mask() != self.active {
            return Err(Error::config(format!(
                "instruction {:?}: goals present for {:?} but active mask is {:?}",
                self.text,
                self.goals.active_mask(),
                self.active
            )));
        }
        self.goals.validate(width, height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionDataset {
    pub kind: DatasetKind,
    pub records: Vec<InstructionRecord>,
}

impl InstructionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &InstructionRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn mean_text_len(&self) -> f64 {
        let total: usize = self.records.iter().map(|r| r.text.chars().count()).sum();
        total as f64 / self.records.len().max(1) as f64
    }

    /// One JSON object per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, kind: DatasetKind) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: InstructionRecord =
                serde_json::from_str(&line).map_err(|e| Error::file(path, format!("line {}: {e}", n + 1)))?;
            if record.goals.active_mask() != record.active || record.n_active() == 0 {
                return Err(Error::file(path, format!("line {}: active mask inconsistent with goals", n + 1)));
            }
            records.push(record);
        }
        Ok(Self { kind, records })
    }
}

/// LOW/HIGH goal values per count-like task (BD is fixed at 0/1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalLevels {
    pub low: [f64; N_TASKS],
    pub high: [f64; N_TASKS],
}

impl GoalLevels {
    pub fn value(&self, task: TaskId, level: ConditionLevel) -> f64 {
        match level {
            ConditionLevel::Low => self.low[task.index()],
            ConditionLevel::High => self.high[task.index()],
        }
    }
}

/// Nearest-rank percentile of an ascending-sorted sample.
fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn compute_goal_levels(width: usize, height: usize, probs: &TileProbs, samples: usize) -> Result<GoalLevels> {
    let mut columns: [Vec<f64>; 4] = Default::default();
    for i in 0..samples {
        let level = Level::random(width, height, derive_seed(PERCENTILE_SEED, i as u64), probs)?;
        let m = fitness::measure(&level, Direction::Top);
        for (col, task) in columns.iter_mut().zip([TaskId::RG, TaskId::PL, TaskId::WC, TaskId::BC]) {
            col.push(m.get(task));
        }
    }
    let mut low = [0.0; N_TASKS];
    let mut high = [1.0; N_TASKS];
    low[TaskId::BD.index()] = 0.0;
    for (col, task) in columns.iter_mut().zip([TaskId::RG, TaskId::PL, TaskId::WC, TaskId::BC]) {
        col.sort_by(f64::total_cmp);
        low[task.index()] = nearest_rank(col, 25.0);
        high[task.index()] = nearest_rank(col, 75.0);
        if low[task.index()] >= high[task.index()] {
            return Err(Error::config(format!(
                "{width}x{height} grid too small: {task} percentiles do not separate ({} vs {})",
                low[task.index()],
                high[task.index()]
            )));
        }
    }
    Ok(GoalLevels { low, high })
}

type GoalCacheKey = (usize, usize, [u64; 3], usize);

/// Goal percentiles for a grid, sampled once per process and cached.
pub fn goal_levels(width: usize, height: usize, probs: &TileProbs) -> Result<GoalLevels> {
    goal_levels_with_samples(width, height, probs, PERCENTILE_SAMPLES)
}

pub fn goal_levels_with_samples(width: usize, height: usize, probs: &TileProbs, samples: usize) -> Result<GoalLevels> {
    static CACHE: OnceLock<Mutex<HashMap<GoalCacheKey, Arc<OnceLock<GoalLevels>>>>> = OnceLock::new();
    if samples == 0 {
        return Err(Error::config("percentile sample count must be positive"));
    }
    let key = (width, height, [probs.empty, probs.wall, probs.bat].map(f64::to_bits), samples);
    let slot = {
        let mut cache = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
        cache.entry(key).or_default().clone()
    };
    if let Some(v) = slot.get() {
        return Ok(*v);
    }
    let levels = compute_goal_levels(width, height, probs, samples)?;
    Ok(*slot.get_or_init(|| levels))
}

/// Knobs for dataset generation; defaults reproduce the 80/256 corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub single_templates: usize,
    pub multi_total: usize,
    pub percentile_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            single_templates: templates::SINGLE_FRAMES.len(),
            multi_total: MULTI_DATASET_SIZE,
            percentile_samples: PERCENTILE_SAMPLES,
        }
    }
}

const PAIR_CONDITIONS: [(ConditionLevel, ConditionLevel); 4] = [
    (ConditionLevel::Low, ConditionLevel::Low),
    (ConditionLevel::Low, ConditionLevel::High),
    (ConditionLevel::High, ConditionLevel::Low),
    (ConditionLevel::High, ConditionLevel::High),
];

fn holdout_count(n_templates: usize) -> usize {
    (HOLDOUT_FRACTION * n_templates as f64).round() as usize
}

fn goals_for(tasks: &[(TaskId, ConditionLevel, Direction)], levels: &GoalLevels) -> (GoalSpec, [bool; N_TASKS]) {
    let mut goals = GoalSpec::default();
    let mut active = [false; N_TASKS];
    for &(task, cond, dir) in tasks {
        active[task.index()] = true;
        if task == TaskId::BD {
            goals.bd = Some(BatGoal {
                dir,
                frac: levels.value(task, cond),
            });
        } else {
            goals.set(task, levels.value(task, cond));
        }
    }
    (goals, active)
}

/// All unordered pairs of distinct tasks, in ordinal order.
pub fn task_pairs() -> Vec<(TaskId, TaskId)> {
    let mut out = Vec::new();
    for (i, a) in TaskId::ALL.iter().enumerate() {
        for b in &TaskId::ALL[i + 1..] {
            out.push((*a, *b));
        }
    }
    out
}

/// Builds the single- and multi-objective datasets. Deterministic in
/// `(seed, width, height, probs, config)`; the seed only fixes record order.
pub fn generate_datasets_with(
    seed: u64,
    width: usize,
    height: usize,
    probs: &TileProbs,
    config: &DatasetConfig,
) -> Result<(InstructionDataset, InstructionDataset)> {
    let n_single = config.single_templates;
    if n_single == 0 || n_single > templates::SINGLE_FRAMES.len() {
        return Err(Error::config(format!(
            "single_templates must be in 1..={}, got {n_single}",
            templates::SINGLE_FRAMES.len()
        )));
    }
    let pairs = task_pairs();
    let combos = pairs.len() * PAIR_CONDITIONS.len();
    let max_multi = combos * templates::MULTI_FRAMES.len();
    if config.multi_total < combos || config.multi_total > max_multi {
        return Err(Error::config(format!(
            "multi_total must be in {combos}..={max_multi}, got {}",
            config.multi_total
        )));
    }
    let levels = goal_levels_with_samples(width, height, probs, config.percentile_samples)?;

    let mut single = Vec::with_capacity(TaskId::ALL.len() * 2 * n_single);
    let single_holdout = holdout_count(n_single);
    for task in TaskId::ALL {
        for cond in [ConditionLevel::Low, ConditionLevel::High] {
            for (j, frame) in templates::SINGLE_FRAMES[..n_single].iter().enumerate() {
                let dir = Direction::ALL[j % 4];
                let phrase = templates::task_phrase(task, cond, dir, j);
                let (goals, active) = goals_for(&[(task, cond, dir)], &levels);
                single.push(InstructionRecord {
                    text: templates::fill_single(frame, &phrase),
                    active,
                    goals,
                    split: if j >= n_single - single_holdout { Split::Holdout } else { Split::Train },
                });
            }
        }
    }

    let base = config.multi_total / combos;
    let extra = config.multi_total % combos;
    let mut multi = Vec::with_capacity(config.multi_total);
    let mut combo = 0usize;
    for &(ta, tb) in &pairs {
        for &(ca, cb) in &PAIR_CONDITIONS {
            // spread the remainder evenly over combinations
            let n = base + usize::from((combo * extra) % combos < extra);
            let holdout = holdout_count(n);
            for (j, frame) in templates::MULTI_FRAMES[..n].iter().enumerate() {
                let dir = Direction::ALL[(combo + j) % 4];
                let variant = (j / 2) % 2;
                let pa = templates::task_phrase(ta, ca, dir, variant);
                let pb = templates::task_phrase(tb, cb, dir, variant);
                let text = if j % 2 == 0 {
                    templates::fill_multi(frame, &pa, &pb)
                } else {
                    templates::fill_multi(frame, &pb, &pa)
                };
                let (goals, active) = goals_for(&[(ta, ca, dir), (tb, cb, dir)], &levels);
                multi.push(InstructionRecord {
                    text,
                    active,
                    goals,
                    split: if j >= n - holdout { Split::Holdout } else { Split::Train },
                });
            }
            combo += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::DATASET));
    single.shuffle(&mut rng);
    multi.shuffle(&mut rng);
    Ok((
        InstructionDataset {
            kind: DatasetKind::Single,
            records: single,
        },
        InstructionDataset {
            kind: DatasetKind::Multi,
            records: multi,
        },
    ))
}

pub fn generate_datasets(seed: u64, width: usize, height: usize) -> Result<(InstructionDataset, InstructionDataset)> {
    generate_datasets_with(seed, width, height, &TileProbs::default(), &DatasetConfig::default())
}
