//! Clipped-surrogate policy optimization over the level editing environment.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionKind, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::fitness::{GoalSpec, TaskId};
use crate::neural::{clip_grad_norm, Activation, Adam, AdamConfig, DenseNet, Gradients};
use crate::seeding::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Parallel environments stepped in lockstep.
    pub num_envs: usize,
    /// Steps per environment per update.
    pub rollout_steps: usize,
    pub total_updates: usize,
    pub hidden: Vec<usize>,
    /// Probe evaluation cadence in updates; the last update is always probed.
    pub probe_every: usize,
    /// Divide rewards by the running std of the discounted return before GAE.
    pub normalize_rewards: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch_size: 256,
            ent_coef: 0.01,
            vf_coef: 0.5,
            lr: 3e-4,
            max_grad_norm: 0.5,
            num_envs: 8,
            rollout_steps: 256,
            total_updates: 200,
            hidden: vec![256, 256],
            probe_every: 10,
            normalize_rewards: true,
        }
    }
}

impl PpoConfig {
    pub fn batch_size(&self) -> usize {
        self.num_envs * self.rollout_steps
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::config("gamma and gae_lambda must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) || !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::config("clip, lr and max_grad_norm must be positive"));
        }
        if self.ent_coef < 0.0 || self.vf_coef < 0.0 {
            return Err(Error::config("loss coefficients must be non-negative"));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.num_envs == 0 || self.rollout_steps == 0 {
            return Err(Error::config("epochs, minibatch_size, num_envs and rollout_steps must be positive"));
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Actor and critic networks plus the settings they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
}

impl PolicyBundle {
    pub fn new(env: EnvConfig, ppo: PpoConfig, seed: u64) -> Result<Self> {
        env.validate()?;
        ppo.validate()?;
        let sizes = |out: usize| {
            let mut s = vec![env.obs_dim()];
            s.extend(&ppo.hidden);
            s.push(out);
            s
        };
        let mut actor = DenseNet::init(&sizes(ActionKind::COUNT), Activation::Relu, Activation::Softmax, derive_seed(seed, 0))?;
        actor.scale_output_layer(0.01);
        let critic = DenseNet::init(&sizes(1), Activation::Relu, Activation::Identity, derive_seed(seed, 1))?;
        Ok(Self { actor, critic, ppo, env })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.env.obs_dim();
        if self.actor.input_dim() != d || self.critic.input_dim() != d {
            return Err(Error::Shape {
                context: "policy input",
                expected: d,
                got: self.actor.input_dim(),
            });
        }
        if self.actor.output_dim() != ActionKind::COUNT || self.critic.output_dim() != 1 {
            return Err(Error::config("actor must have 4 outputs and critic 1"));
        }
        Ok(())
    }
}

/// A goal specification paired with the condition vector the policy sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioned {
    pub goals: GoalSpec,
    pub condition: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSelection {
    #[default]
    Sample,
    Greedy,
}

/// Draws an index from a categorical distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub trait Policy {
    fn act_batch(&self, obs: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}

pub struct ActorPolicy<'a> {
    pub actor: &'a DenseNet,
    pub selection: ActionSelection,
}

impl Policy for ActorPolicy<'_> {
    fn act_batch(&self, obs: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let probs = self.actor.forward_batch(obs)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("contiguous");
                match self.selection {
                    ActionSelection::Sample => sample_categorical(row, rng),
                    ActionSelection::Greedy => argmax(row),
                }
            })
            .collect())
    }
}

pub struct UniformRandomPolicy;

impl Policy for UniformRandomPolicy {
    fn act_batch(&self, obs: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok((0..obs.nrows()).map(|_| rng.random_range(0..ActionKind::COUNT)).collect())
    }
}

pub struct ConstantPolicy(pub ActionKind);

impl Policy for ConstantPolicy {
    fn act_batch(&self, obs: ArrayView2<'_, f64>, _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(vec![self.0.index(); obs.nrows()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub goals: GoalSpec,
    pub progress: Vec<(TaskId, f64)>,
    pub ret: f64,
    pub steps: usize,
    pub final_level: crate::level::Level,
}

impl EpisodeResult {
    /// Unweighted mean Progress over the active tasks.
    pub fn mean_progress(&self) -> f64 {
        mean_progress(&self.progress)
    }
}

pub fn mean_progress(progress: &[(TaskId, f64)]) -> f64 {
    if progress.is_empty() {
        return 0.0;
    }
    progress.iter().map(|(_, p)| p).sum::<f64>() / progress.len() as f64
}

/// One episode to run: which condition and which level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeJob {
    pub task: usize,
    pub level_seed: u64,
}

const EVAL_CHUNK: usize = 64;

/// Runs complete episodes, stepping up to 64 environments in lockstep.
/// Results are in job order; `seed` drives action sampling only.
pub fn run_episodes(
    policy: &dyn Policy,
    env: &EnvConfig,
    tasks: &[Conditioned],
    jobs: &[EpisodeJob],
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(jobs.len());
    let dim = env.obs_dim();
    for chunk in jobs.chunks(EVAL_CHUNK) {
        let mut states = chunk
            .iter()
            .map(|j| {
                let t = tasks.get(j.task).ok_or_else(|| Error::config(format!("episode job references task {}", j.task)))?;
                EnvState::reset(env, j.level_seed, &t.goals, &t.condition)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut returns = vec![0.0; chunk.len()];
        loop {
            let live: Vec<usize> = (0..states.len()).filter(|i| !states[*i].is_done()).collect();
            if live.is_empty() {
                break;
            }
            let mut obs = Array2::zeros((live.len(), dim));
            for (r, i) in live.iter().enumerate() {
                states[*i].write_observation(obs.row_mut(r).as_slice_mut().expect("contiguous"));
            }
            let actions = policy.act_batch(obs.view(), &mut rng)?;
            for (i, a) in live.iter().zip(actions) {
                let kind = ActionKind::from_index(a).ok_or_else(|| Error::config(format!("invalid action {a}")))?;
                returns[*i] += states[*i].step(env, kind)?.reward;
            }
        }
        for (s, ret) in states.into_iter().zip(returns) {
            out.push(EpisodeResult {
                goals: s.goals,
                progress: s.progress(),
                ret,
                steps: s.step,
                final_level: s.level,
            });
        }
    }
    Ok(out)
}

/// Per-environment slice of a rollout. May span several episodes; `dones`
/// marks the last step of each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value estimate of the state after the last step (0 if it ended an episode).
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Generalized advantage estimation. Returns (advantages, returns).
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape {
            context: "gae inputs",
            expected: n,
            got: if values.len() != n { values.len() } else { dones.len() },
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_value = values[t];
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, standard deviation 1.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Running-variance reward scaler. Each environment carries a discounted
/// return across updates; rewards are divided by the std of those returns.
#[derive(Debug, Clone)]
pub struct RewardScaler {
    gamma: f64,
    returns: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl RewardScaler {
    pub fn new(num_envs: usize, gamma: f64) -> Self {
        Self {
            gamma,
            returns: vec![0.0; num_envs],
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }

    /// Updates the statistics with this rollout, then rescales its rewards.
    pub fn apply(&mut self, trajs: &mut [Trajectory]) {
        for (g, t) in self.returns.iter_mut().zip(trajs.iter()) {
            for (r, done) in t.rewards.iter().zip(&t.dones) {
                *g = *g * self.gamma + r;
                self.count += 1.0;
                let d = *g - self.mean;
                self.mean += d / self.count;
                self.m2 += d * (*g - self.mean);
                if *done {
                    *g = 0.0;
                }
            }
        }
        let scale = 1.0 / (self.std() + 1e-8);
        for t in trajs {
            t.rewards.iter_mut().for_each(|r| *r *= scale);
        }
    }
}

/// Flattened training batch with advantages already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_trajectories(trajs: &[Trajectory], obs_dim: usize, gamma: f64, lambda: f64) -> Result<Self> {
        let n: usize = trajs.iter().map(Trajectory::len).sum();
        let mut obs = Vec::with_capacity(n * obs_dim);
        let mut batch = Batch {
            obs: Array2::zeros((0, obs_dim)),
            actions: Vec::with_capacity(n),
            old_log_probs: Vec::with_capacity(n),
            advantages: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
        };
        for t in trajs {
            let (adv, ret) = gae(&t.rewards, &t.values, &t.dones, t.bootstrap, gamma, lambda)?;
            obs.extend_from_slice(&t.obs);
            batch.actions.extend(&t.actions);
            batch.old_log_probs.extend(&t.log_probs);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
        }
        normalize_advantages(&mut batch.advantages);
        batch.obs = Array2::from_shape_vec((n, obs_dim), obs).map_err(|_| Error::Shape {
            context: "batch observations",
            expected: n * obs_dim,
            got: trajs.iter().map(|t| t.obs.len()).sum(),
        })?;
        Ok(batch)
    }

    fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            obs: self.obs.select(Axis(0), idx),
            actions: idx.iter().map(|i| self.actions[*i]).collect(),
            old_log_probs: idx.iter().map(|i| self.old_log_probs[*i]).collect(),
            advantages: idx.iter().map(|i| self.advantages[*i]).collect(),
            returns: idx.iter().map(|i| self.returns[*i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Loss = -mean(min(r A, clip(r) A)) + vf_coef mean((V - R)^2) - ent_coef mean(H).
/// Returns the loss components and gradients for actor and critic.
pub fn ppo_loss_and_grads(actor: &DenseNet, critic: &DenseNet, mb: &Batch, cfg: &PpoConfig) -> Result<(f64, PpoStats, Gradients, Gradients)> {
    let n = mb.len();
    if n == 0 {
        return Err(Error::config("empty minibatch"));
    }
    let nf = n as f64;
    let a_cache = actor.forward_cached(mb.obs.view())?;
    let logits = actor.logits(&a_cache);
    let k = logits.ncols();
    let mut dlogits = Array2::<f64>::zeros((n, k));
    let mut stats = PpoStats::default();
    for i in 0..n {
        let row = logits.row(i);
        let logp = log_softmax_row(row.as_slice().expect("contiguous"));
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let a = mb.actions[i];
        let ratio = (logp[a] - mb.old_log_probs[i]).exp();
        let adv = mb.advantages[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
        stats.policy_loss -= unclipped.min(clipped) / nf;
        if (ratio - 1.0).abs() > cfg.clip {
            stats.clip_fraction += 1.0 / nf;
        }
        stats.approx_kl += (mb.old_log_probs[i] - logp[a]) / nf;
        let h: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        stats.entropy += h / nf;
        // surrogate term: gradient flows only through the branch selected by min
        let coef = if unclipped <= clipped { -adv * ratio / nf } else { 0.0 };
        for j in 0..k {
            let onehot = if j == a { 1.0 } else { 0.0 };
            dlogits[[i, j]] = coef * (onehot - probs[j]) + cfg.ent_coef / nf * probs[j] * (logp[j] + h);
        }
    }
    let (g_actor, _) = actor.backward_from_pre_output(&a_cache, dlogits.view())?;

    let c_cache = critic.forward_cached(mb.obs.view())?;
    let mut dv = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        let err = c_cache.output[[i, 0]] - mb.returns[i];
        stats.value_loss += err * err / nf;
        dv[[i, 0]] = 2.0 * cfg.vf_coef * err / nf;
    }
    let (g_critic, _) = critic.backward(&c_cache, dv.view())?;
    let loss = stats.policy_loss + cfg.vf_coef * stats.value_loss - cfg.ent_coef * stats.entropy;
    Ok((loss, stats, g_actor, g_critic))
}

/// Optimizer state for both networks.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    actor: Adam,
    critic: Adam,
}

impl PpoOptimizer {
    pub fn new(bundle: &PolicyBundle) -> Self {
        let cfg = AdamConfig::with_lr(bundle.ppo.lr);
        Self {
            actor: Adam::new(&bundle.actor, cfg),
            critic: Adam::new(&bundle.critic, cfg),
        }
    }
}

/// Minibatched epochs over a batch; stats are averaged over minibatches.
pub fn ppo_update(bundle: &mut PolicyBundle, opt: &mut PpoOptimizer, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let cfg = bundle.ppo.clone();
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut total = PpoStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch_size) {
            let mb = batch.select(chunk);
            let (_, s, mut ga, mut gc) = ppo_loss_and_grads(&bundle.actor, &bundle.critic, &mb, &cfg)?;
            clip_grad_norm(&mut [&mut ga, &mut gc], cfg.max_grad_norm);
            opt.actor.step(&mut bundle.actor, &ga);
            opt.critic.step(&mut bundle.critic, &gc);
            total.policy_loss += s.policy_loss;
            total.value_loss += s.value_loss;
            total.entropy += s.entropy;
            total.clip_fraction += s.clip_fraction;
            total.approx_kl += s.approx_kl;
            count += 1.0;
        }
    }
    Ok(PpoStats {
        policy_loss: total.policy_loss / count,
        value_loss: total.value_loss / count,
        entropy: total.entropy / count,
        clip_fraction: total.clip_fraction / count,
        approx_kl: total.approx_kl / count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletedEpisode {
    pub task: usize,
    pub ret: f64,
    pub progress: f64,
}

struct Slot {
    state: EnvState,
    task: usize,
    ret: f64,
}

/// Lockstep environments that keep sampling tasks across updates.
pub struct RolloutWorker<'a> {
    env: EnvConfig,
    tasks: &'a [Conditioned],
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
}

impl<'a> RolloutWorker<'a> {
    pub fn new(env: &EnvConfig, tasks: &'a [Conditioned], num_envs: usize, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("rollouts need at least one task"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = (0..num_envs)
            .map(|_| Self::fresh(env, tasks, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            env: env.clone(),
            tasks,
            slots,
            rng,
        })
    }

    fn fresh(env: &EnvConfig, tasks: &[Conditioned], rng: &mut ChaCha8Rng) -> Result<Slot> {
        let task = rng.random_range(0..tasks.len());
        let t = &tasks[task];
        let state = EnvState::reset(env, rng.random(), &t.goals, &t.condition)?;
        Ok(Slot { state, task, ret: 0.0 })
    }

    /// Steps every environment `steps` times under the actor's sampled actions.
    pub fn collect(&mut self, actor: &DenseNet, critic: &DenseNet, steps: usize) -> Result<(Vec<Trajectory>, Vec<CompletedEpisode>)> {
        let n = self.slots.len();
        let dim = self.env.obs_dim();
        let mut trajs = vec![Trajectory::default(); n];
        let mut done_eps = Vec::new();
        let mut obs = Array2::<f64>::zeros((n, dim));
        for _ in 0..steps {
            for (i, s) in self.slots.iter().enumerate() {
                s.state.write_observation(obs.row_mut(i).as_slice_mut().expect("contiguous"));
            }
            let probs = actor.forward_batch(obs.view())?;
            let values = critic.forward_batch(obs.view())?;
            for i in 0..n {
                let p = probs.row(i);
                let p = p.as_slice().expect("contiguous");
                let a = sample_categorical(p, &mut self.rng);
                let out = self.slots[i].state.step(&self.env, ActionKind::ALL[a])?;
                let t = &mut trajs[i];
                t.obs.extend(obs.row(i).iter());
                t.actions.push(a);
                t.log_probs.push(p[a].max(f64::MIN_POSITIVE).ln());
                t.values.push(values[[i, 0]]);
                t.rewards.push(out.reward);
                t.dones.push(out.done);
                self.slots[i].ret += out.reward;
                if out.done {
                    let slot = &self.slots[i];
                    done_eps.push(CompletedEpisode {
                        task: slot.task,
                        ret: slot.ret,
                        progress: mean_progress(&slot.state.progress()),
                    });
                    self.slots[i] = Self::fresh(&self.env, self.tasks, &mut self.rng)?;
                }
            }
        }
        for (i, s) in self.slots.iter().enumerate() {
            s.state.write_observation(obs.row_mut(i).as_slice_mut().expect("contiguous"));
        }
        let values = critic.forward_batch(obs.view())?;
        for (i, t) in trajs.iter_mut().enumerate() {
            t.bootstrap = if t.dones.last().copied().unwrap_or(false) { 0.0 } else { values[[i, 0]] };
        }
        Ok((trajs, done_eps))
    }
}

/// A fixed instruction set evaluated periodically during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub name: String,
    pub tasks: Vec<Conditioned>,
    pub episodes_per_task: usize,
}

impl ProbeSet {
    /// Fixed jobs so each probe sees the same starting levels.
    pub fn jobs(&self, seed: u64) -> Vec<EpisodeJob> {
        (0..self.tasks.len())
            .flat_map(|task| {
                (0..self.episodes_per_task).map(move |e| EpisodeJob {
                    task,
                    level_seed: derive_seed(seed, (task * 1_000_003 + e) as u64),
                })
            })
            .collect()
    }

    pub fn evaluate(&self, policy: &dyn Policy, env: &EnvConfig, seed: u64) -> Result<f64> {
        let results = run_episodes(policy, env, &self.tasks, &self.jobs(seed), derive_seed(seed, 1))?;
        Ok(results.iter().map(EpisodeResult::mean_progress).sum::<f64>() / results.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMetrics {
    pub update: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_progress: f64,
    pub stats: PpoStats,
    /// One entry per probe set; `None` on updates that were not probed.
    pub probe: Vec<Option<f64>>,
}

fn fmt_opt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// CSV with one row per update. Empty cells mark updates without a probe
/// or without any completed episode.
pub fn metrics_csv(metrics: &[UpdateMetrics], probe_names: &[String]) -> String {
    let mut out = String::from("update,env_steps,episodes,mean_return,mean_progress");
    for name in probe_names {
        out.push_str(&format!(",probe_{name}"));
    }
    out.push_str(",policy_loss,value_loss,entropy,clip_fraction,approx_kl\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}",
            m.update,
            m.env_steps,
            m.episodes,
            fmt_opt(m.mean_return),
            fmt_opt(m.mean_progress)
        ));
        for p in &m.probe {
            out.push(',');
            if let Some(p) = p {
                out.push_str(&format!("{p}"));
            }
        }
        let s = m.stats;
        out.push_str(&format!(
            ",{},{},{},{},{}\n",
            s.policy_loss, s.value_loss, s.entropy, s.clip_fraction, s.approx_kl
        ));
    }
    out
}

/// Alternates rollouts and updates. Deterministic for a given seed.
pub fn train_agent(
    tasks: &[Conditioned],
    probes: &[ProbeSet],
    env: &EnvConfig,
    ppo: &PpoConfig,
    seed: u64,
    mut on_update: impl FnMut(&UpdateMetrics),
) -> Result<(PolicyBundle, Vec<UpdateMetrics>)> {
    let mut bundle = PolicyBundle::new(env.clone(), ppo.clone(), derive_seed(seed, stream::POLICY_INIT))?;
    if let Some(t) = tasks.iter().find(|t| t.condition.len() != env.cond_dim) {
        return Err(Error::Shape {
            context: "task condition",
            expected: env.cond_dim,
            got: t.condition.len(),
        });
    }
    let mut opt = PpoOptimizer::new(&bundle);
    let mut worker = RolloutWorker::new(env, tasks, ppo.num_envs, derive_seed(seed, stream::ROLLOUT))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::PPO));
    let probe_seed = derive_seed(seed, stream::PROBE);
    let mut scaler = ppo.normalize_rewards.then(|| RewardScaler::new(ppo.num_envs, ppo.gamma));
    let mut metrics = Vec::with_capacity(ppo.total_updates);
    for update in 0..ppo.total_updates {
        let (mut trajs, eps) = worker.collect(&bundle.actor, &bundle.critic, ppo.rollout_steps)?;
        if let Some(s) = scaler.as_mut() {
            s.apply(&mut trajs);
        }
        let batch = Batch::from_trajectories(&trajs, env.obs_dim(), ppo.gamma, ppo.gae_lambda)?;
        let stats = ppo_update(&mut bundle, &mut opt, &batch, &mut rng)?;
        let probe_now = update + 1 == ppo.total_updates || (ppo.probe_every > 0 && (update + 1) % ppo.probe_every == 0);
        let policy = ActorPolicy {
            actor: &bundle.actor,
            selection: ActionSelection::Sample,
        };
        let probe = probes
            .iter()
            .map(|p| probe_now.then(|| p.evaluate(&policy, env, probe_seed)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let n = eps.len() as f64;
        let m = UpdateMetrics {
            update: update + 1,
            env_steps: (update + 1) * ppo.batch_size(),
            episodes: eps.len(),
            mean_return: if eps.is_empty() { f64::NAN } else { eps.iter().map(|e| e.ret).sum::<f64>() / n },
            mean_progress: if eps.is_empty() { f64::NAN } else { eps.iter().map(|e| e.progress).sum::<f64>() / n },
            stats,
            probe,
        };
        on_update(&m);
        metrics.push(m);
    }
    Ok((bundle, metrics))
}
