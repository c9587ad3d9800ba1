//! Python module `instruct_pcg`.
//!
//! Structured values (goals, records, measures) cross the boundary as plain
//! dicts and lists, converted through their JSON form.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use pcg::checkpoint::Checkpoint;
use pcg::env::{ActionKind, EnvConfig, EnvState};
use pcg::fitness::{self, Direction, GoalSpec, MeasureVector, TaskId};
use pcg::instruction::{self, TextFrontend, DEFAULT_HASH_DIM};
use pcg::level::{self, TileKind, TileProbs};
use pcg::{encoder, ppo};

fn err(e: pcg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_direction(name: &str) -> PyResult<Direction> {
    Direction::ALL
        .into_iter()
        .find(|d| d.word().eq_ignore_ascii_case(name))
        .ok_or_else(|| PyValueError::new_err(format!("unknown direction {name:?}")))
}

fn measures_dict<'py>(py: Python<'py>, m: &MeasureVector) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for t in TaskId::ALL {
        d.set_item(t.name(), m.get(t))?;
    }
    Ok(d)
}

/// A tile grid of `.` (empty), `#` (wall) and `b` (bat).
#[pyclass(name = "Level", module = "instruct_pcg", skip_from_py_object)]
#[derive(Clone)]
struct PyLevel {
    inner: level::Level,
}

#[pymethods]
impl PyLevel {
    #[new]
    #[pyo3(signature = (text))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: level::Level::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (width = level::DEFAULT_WIDTH, height = level::DEFAULT_HEIGHT, seed = 0))]
    fn random(width: usize, height: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: level::Level::random(width, height, seed, &TileProbs::default()).map_err(err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<char> {
        Ok(self.inner.get(level::Position::new(row, col)).map_err(err)?.code())
    }

    fn set(&mut self, row: usize, col: usize, tile: char) -> PyResult<()> {
        let kind = TileKind::from_code(tile).ok_or_else(|| PyValueError::new_err(format!("unknown tile {tile:?}")))?;
        self.inner.set(level::Position::new(row, col), kind).map_err(err)?;
        Ok(())
    }

    /// Raw measures keyed by task name.
    #[pyo3(signature = (direction = "top"))]
    fn measures<'py>(&self, py: Python<'py>, direction: &str) -> PyResult<Bound<'py, PyDict>> {
        measures_dict(py, &fitness::measure(&self.inner, parse_direction(direction)?))
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __str__(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!("Level({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Per-task fitness in [-5, 5] for a goal dict such as `{"wc": 70}` or
/// `{"bd": {"dir": "LEFT", "frac": 1.0}}`. Results are keyed by task name
/// (`"RG"`, ...); inactive tasks score 0.
#[pyfunction]
fn goal_fitness<'py>(py: Python<'py>, level: &PyLevel, goals: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyDict>> {
    let goals: GoalSpec = from_py(goals)?;
    let m = fitness::measure(&level.inner, goals.direction());
    let f = fitness::goal_fitness(&m, &goals, level.inner.width(), level.inner.height()).map_err(err)?;
    let d = PyDict::new(py);
    for t in TaskId::ALL {
        d.set_item(t.name(), f[t.index()])?;
    }
    Ok(d)
}

/// Progress in [0, 1] from `initial` toward `goal`, judged at `terminal`.
#[pyfunction]
fn progress(goal: f64, initial: f64, terminal: f64) -> f64 {
    fitness::progress(goal, initial, terminal)
}

/// Hashed bag-of-n-grams embedding, unit norm.
#[pyfunction]
#[pyo3(signature = (text, dim = DEFAULT_HASH_DIM, seed = 0))]
fn featurize(text: &str, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(instruction::featurize(text, dim, seed).map_err(err)?.values)
}

/// The (single, multi) instruction datasets as lists of record dicts.
#[pyfunction]
#[pyo3(signature = (seed = 0, width = level::DEFAULT_WIDTH, height = level::DEFAULT_HEIGHT))]
fn generate_datasets<'py>(py: Python<'py>, seed: u64, width: usize, height: usize) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let (single, multi) = instruction::generate_datasets(seed, width, height).map_err(err)?;
    Ok((to_py(py, &single.records)?, to_py(py, &multi.records)?))
}

/// A trained instruction encoder loaded from a checkpoint.
#[pyclass(name = "Encoder", module = "instruct_pcg")]
struct PyEncoder {
    model: encoder::EncoderModel,
    frontend: TextFrontend,
}

#[pymethods]
impl PyEncoder {
    /// The hash featurizer settings must match the ones used in training.
    #[staticmethod]
    #[pyo3(signature = (path, hash_dim = DEFAULT_HASH_DIM, hash_seed = 0))]
    fn load(path: &str, hash_dim: usize, hash_seed: u64) -> PyResult<Self> {
        let model = Checkpoint::load(path).and_then(Checkpoint::into_encoder).map_err(err)?;
        let frontend = TextFrontend::Hash {
            dim: hash_dim,
            seed: hash_seed,
        };
        if model.config.embed_dim != frontend.dim() {
            return Err(PyValueError::new_err(format!(
                "encoder expects {}-dim embeddings, featurizer gives {}",
                model.config.embed_dim,
                frontend.dim()
            )));
        }
        Ok(Self { model, frontend })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    /// Conditioning vector for an instruction.
    fn embed(&self, text: &str) -> PyResult<Vec<f64>> {
        self.model.embed_text(&self.frontend, text).map_err(err)
    }

    /// Task-presence probabilities keyed by task name.
    fn classify<'py>(&self, py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
        let emb = self.frontend.embed(text).map_err(err)?;
        let z = self.model.encode(&emb).map_err(err)?;
        let p = self.model.classify(&z).map_err(err)?;
        let d = PyDict::new(py);
        for t in TaskId::ALL {
            d.set_item(t.name(), p.get(t))?;
        }
        Ok(d)
    }
}

/// A trained PPO policy loaded from a checkpoint.
#[pyclass(name = "Policy", module = "instruct_pcg")]
struct PyPolicy {
    bundle: ppo::PolicyBundle,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bundle = Checkpoint::load(path).and_then(Checkpoint::into_policy).map_err(err)?;
        Ok(Self { bundle })
    }

    #[getter]
    fn cond_dim(&self) -> usize {
        self.bundle.env.cond_dim
    }

    /// Action probabilities (NOOP, SET_EMPTY, SET_WALL, SET_BAT) for one observation.
    fn action_probs(&self, observation: Vec<f64>) -> PyResult<Vec<f64>> {
        self.bundle.actor.forward(&observation).map_err(err)
    }

    /// Runs one episode and returns the final level and per-task Progress.
    #[pyo3(signature = (goals, condition, seed = 0, greedy = false))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        goals: &Bound<'py, PyAny>,
        condition: Vec<f64>,
        seed: u64,
        greedy: bool,
    ) -> PyResult<(PyLevel, Bound<'py, PyDict>)> {
        let goals: GoalSpec = from_py(goals)?;
        let selection = if greedy {
            ppo::ActionSelection::Greedy
        } else {
            ppo::ActionSelection::Sample
        };
        let policy = ppo::ActorPolicy {
            actor: &self.bundle.actor,
            selection,
        };
        let tasks = [ppo::Conditioned { goals, condition }];
        let jobs = [ppo::EpisodeJob { task: 0, level_seed: seed }];
        let result = ppo::run_episodes(&policy, &self.bundle.env, &tasks, &jobs, seed)
            .map_err(err)?
            .pop()
            .expect("one job");
        let d = PyDict::new(py);
        for (t, p) in &result.progress {
            d.set_item(t.name(), *p)?;
        }
        Ok((PyLevel { inner: result.final_level }, d))
    }
}

/// The level-editing environment with a raster cursor.
#[pyclass(name = "Env", module = "instruct_pcg")]
struct PyEnv {
    config: EnvConfig,
    state: EnvState,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (goals, condition, width = level::DEFAULT_WIDTH, height = level::DEFAULT_HEIGHT, seed = 0))]
    fn new(goals: &Bound<'_, PyAny>, condition: Vec<f64>, width: usize, height: usize, seed: u64) -> PyResult<Self> {
        let goals: GoalSpec = from_py(goals)?;
        let config = EnvConfig::new(width, height, condition.len());
        let state = EnvState::reset(&config, seed, &goals, &condition).map_err(err)?;
        Ok(Self { config, state })
    }

    /// Starts a new episode on a fresh random level.
    fn reset(&mut self, seed: u64) -> PyResult<Vec<f64>> {
        let condition = self.state.condition().to_vec();
        self.state = EnvState::reset(&self.config, seed, &self.state.goals, &condition).map_err(err)?;
        Ok(self.state.observation())
    }

    /// Applies action 0..4 and returns (observation, reward, done).
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        let kind = ActionKind::from_index(action).ok_or_else(|| PyValueError::new_err(format!("action {action} out of range")))?;
        let out = self.state.step(&self.config, kind).map_err(err)?;
        Ok((self.state.observation(), out.reward, out.done))
    }

    fn observation(&self) -> Vec<f64> {
        self.state.observation()
    }

    #[getter]
    fn done(&self) -> bool {
        self.state.is_done()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    #[getter]
    fn level(&self) -> PyLevel {
        PyLevel {
            inner: self.state.level.clone(),
        }
    }

    fn progress<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (t, p) in self.state.progress() {
            d.set_item(t.name(), p)?;
        }
        Ok(d)
    }
}

#[pymodule]
fn instruct_pcg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLevel>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(goal_fitness, m)?)?;
    m.add_function(wrap_pyfunction!(progress, m)?)?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_datasets, m)?)?;
    m.add("TASKS", TaskId::ALL.map(|t| t.name()).to_vec())?;
    Ok(())
}
