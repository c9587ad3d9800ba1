//! Surface forms for instruction sentences.
//!
//! Every task phrase keeps a stable keyword (`regions`, `path`, `walls`,
//! `bats`; BD phrases always name a direction) so the active-task labels are
//! recoverable from the words alone. Frames only add task-neutral wording.

use crate::fitness::{Direction, TaskId};

use super::ConditionLevel;

/// Single-objective frames; `{p}` is the task phrase.
pub(crate) const SINGLE_FRAMES: [&str; 8] = [
    "{p}",
    "a level with {p}",
    "make a map with {p}",
    "I want {p} in the level",
    "generate a stage that has {p}",
    "please build the dungeon with {p}",
    "the level should contain {p}",
    "design a map featuring {p}",
];

/// Two-objective frames; `{a}` and `{b}` are task phrases.
pub(crate) const MULTI_FRAMES: [&str; 7] = [
    "{a} and {b}",
    "a level with {a} and {b}",
    "make a map with {a}, and also {b}",
    "I want {a} as well as {b} in the level",
    "generate a stage that has {a} and {b}",
    "please build the dungeon with {a} plus {b}",
    "the level should contain {a} together with {b}",
];

/// Task phrase for a condition level. `variant` selects among paraphrases.
pub(crate) fn task_phrase(task: TaskId, level: ConditionLevel, dir: Direction, variant: usize) -> String {
    use ConditionLevel::{High, Low};
    let v = variant % 2;
    let fixed = match (task, level) {
        (TaskId::RG, Low) => ["few regions", "a small number of regions"][v],
        (TaskId::RG, High) => ["many regions", "a large number of regions"][v],
        (TaskId::PL, Low) => ["a short path", "a short path length"][v],
        (TaskId::PL, High) => ["a long path", "a long path length"][v],
        (TaskId::WC, Low) => ["few walls", "a small number of walls"][v],
        (TaskId::WC, High) => ["many walls", "a large number of walls"][v],
        (TaskId::BC, Low) => ["few bats", "a small number of bats"][v],
        (TaskId::BC, High) => ["many bats", "a large number of bats"][v],
        (TaskId::BD, Low) => {
            return match v {
                0 => format!("no bats on the {} side", dir.word()),
                _ => format!("bats kept out of the {} half", dir.word()),
            }
        }
        (TaskId::BD, High) => {
            return match v {
                0 => format!("all bats on the {} side", dir.word()),
                _ => format!("bats only in the {} half", dir.word()),
            }
        }
    };
    fixed.to_string()
}

pub(crate) fn fill_single(frame: &str, phrase: &str) -> String {
    frame.replace("{p}", phrase)
}

pub(crate) fn fill_multi(frame: &str, a: &str, b: &str) -> String {
    frame.replace("{a}", a).replace("{b}", b)
}
