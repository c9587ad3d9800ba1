//! Episode rollouts against a from-scratch simulator of the editing rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use instruct_pcg::env::{ActionKind, EnvConfig, EnvState};
use instruct_pcg::fitness::{GoalSpec, TaskId};
use instruct_pcg::level::{Level, TileProbs};
use instruct_pcg::ppo::{run_episodes, Conditioned, ConstantPolicy, EpisodeJob, UniformRandomPolicy};

/// Grid edited in raster order; returns the final grid and the step count.
fn simulate(mut grid: Vec<char>, w: usize, h: usize, mut action: impl FnMut() -> Option<char>) -> (Vec<char>, usize) {
    let (max_steps, budget) = (2 * w * h, 3 * w * h / 10);
    let (mut cursor, mut changes) = (0usize, 0usize);
    for step in 1..=max_steps {
        if let Some(tile) = action() {
            if grid[cursor] != tile {
                grid[cursor] = tile;
                changes += 1;
            }
        }
        cursor = (cursor + 1) % (w * h);
        if changes >= budget {
            return (grid, step);
        }
    }
    (grid, max_steps)
}

fn count(grid: &[char], c: char) -> f64 {
    grid.iter().filter(|t| **t == c).count() as f64
}

fn progress_oracle(goal: f64, s0: f64, st: f64) -> f64 {
    if goal == s0 {
        return if st == goal { 1.0 } else { 0.0 };
    }
    (1.0 - ((goal - st) / (goal - s0)).abs()).max(0.0)
}

fn level_grid(level: &Level) -> Vec<char> {
    level.render().chars().filter(|c| !c.is_whitespace()).collect()
}

fn goals(task: TaskId, g: f64) -> GoalSpec {
    let mut s = GoalSpec::default();
    s.set(task, g);
    s
}

#[test]
fn constant_policies_match_simulator_exactly() {
    let (w, h) = (7, 5);
    let env = EnvConfig::new(w, h, 1);
    let tasks = vec![
        Conditioned { goals: goals(TaskId::WC, 20.0), condition: vec![0.0] },
        Conditioned { goals: goals(TaskId::BC, 6.0), condition: vec![1.0] },
    ];
    let jobs: Vec<EpisodeJob> = (0..20).map(|i| EpisodeJob { task: i % 2, level_seed: 100 + i as u64 }).collect();
    for action in [ActionKind::SetWall, ActionKind::SetBat, ActionKind::SetEmpty, ActionKind::Noop] {
        let results = run_episodes(&ConstantPolicy(action), &env, &tasks, &jobs, 0).unwrap();
        for (job, res) in jobs.iter().zip(&results) {
            let start = level_grid(&Level::random(w, h, job.level_seed, &TileProbs::default()).unwrap());
            let tile = action.tile().map(|t| t.code());
            let (end, steps) = simulate(start.clone(), w, h, || tile);
            assert_eq!(level_grid(&res.final_level), end, "{action:?} seed {}", job.level_seed);
            assert_eq!(res.steps, steps);
            let (task, g, code) = if job.task == 0 { (TaskId::WC, 20.0, '#') } else { (TaskId::BC, 6.0, 'b') };
            assert_eq!(res.progress, vec![(task, progress_oracle(g, count(&start, code), count(&end, code)))]);
        }
    }
}

#[test]
fn random_policy_progress_matches_monte_carlo_oracle() {
    let (w, h) = (8, 8);
    let env = EnvConfig::new(w, h, 0);
    let goal = 40.0;
    let tasks = vec![Conditioned { goals: goals(TaskId::WC, goal), condition: vec![] }];
    let n = 600;
    let jobs: Vec<EpisodeJob> = (0..n).map(|i| EpisodeJob { task: 0, level_seed: i as u64 }).collect();
    let results = run_episodes(&UniformRandomPolicy, &env, &tasks, &jobs, 17).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let got: Vec<f64> = results.iter().map(|r| r.progress[0].1).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let codes = [None, Some('.'), Some('#'), Some('b')];
    let want: Vec<f64> = (0..n)
        .map(|i| {
            let start = level_grid(&Level::random(w, h, 10_000 + i as u64, &TileProbs::default()).unwrap());
            let (end, _) = simulate(start.clone(), w, h, || codes[rng.random_range(0..4)]);
            progress_oracle(goal, count(&start, '#'), count(&end, '#'))
        })
        .collect();

    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let se = ((var(&got) + var(&want)) / n as f64).sqrt();
    let diff = (mean(&got) - mean(&want)).abs();
    assert!(diff < 4.0 * se, "library {:.4} vs oracle {:.4} (se {se:.4})", mean(&got), mean(&want));
}

#[test]
fn observation_layout() {
    let env = EnvConfig::new(4, 3, 2);
    let level = Level::parse("#..b\n....\nb.##").unwrap();
    let mut s = EnvState::from_level(&env, level, &goals(TaskId::WC, 3.0), &[0.25, -2.0]).unwrap();
    for _ in 0..6 {
        s.step(&env, ActionKind::Noop).unwrap();
    }
    let obs = s.observation();
    assert_eq!(obs.len(), 3 * 12 + 2 + 2);
    assert_eq!(&obs[0..3], &[0.0, 1.0, 0.0]);
    assert_eq!(&obs[9..12], &[0.0, 0.0, 1.0]);
    assert_eq!(obs.iter().take(36).sum::<f64>(), 12.0);
    // cursor at cell 6 = (1, 2)
    assert_eq!(obs[36], 1.0 / 2.0);
    assert_eq!(obs[37], 2.0 / 3.0);
    assert_eq!(&obs[38..], &[0.25, -2.0]);
}
