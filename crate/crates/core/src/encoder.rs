//! Task-disentangled instruction encoder.
//!
//! A sentence embedding is mapped by the encoder net to `z_enc`, a
//! concatenation of one `task_dim`-wide block per task. A multi-label
//! classifier predicts which tasks the instruction mentions; each block is
//! scaled by its task probability. The scaled vector, joined with a state
//! drawn from an offline buffer of random levels, feeds a decoder that
//! regresses the goal fitness of that state for every active task.
//!
//! The probabilities used for scaling are gradient-stopped: regression
//! error never reaches the classifier, which learns from its BCE loss only.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitness::{self, bat_direction_fractions, Direction, GoalSpec, MeasureVector, TaskId, N_TASKS};
use crate::instruction::{Embedding, InstructionRecord, TextFrontend};
use crate::level::{Level, TileProbs};
use crate::neural::{Activation, Adam, AdamConfig, DenseNet, ForwardCache, Gradients};
use crate::seeding::{derive_seed, stream};

pub const DEFAULT_TASK_DIM: usize = 32;
pub const DEFAULT_BUFFER_SIZE: usize = 10_000;

/// Architecture variants used for the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderVariant {
    /// Classifier weighting plus one regression head per task.
    Full,
    /// Blocks are never scaled (p = 1) and no BCE loss is used.
    NoCls,
    /// Classifier weighting with a single regression head on the mean
    /// active-task fitness.
    NoReg,
    /// Undivided latent and a single regression head.
    SingleHead,
}

impl EncoderVariant {
    pub fn uses_classifier(self) -> bool {
        matches!(self, EncoderVariant::Full | EncoderVariant::NoReg)
    }

    pub fn regression_heads(self) -> usize {
        match self {
            EncoderVariant::Full | EncoderVariant::NoCls => N_TASKS,
            EncoderVariant::NoReg | EncoderVariant::SingleHead => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Width of each per-task block.
    pub task_dim: usize,
    pub state_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub variant: EncoderVariant,
    /// Scale blocks by thresholded (0/1) probabilities instead of the live
    /// sigmoid outputs. Diagnostic only.
    pub hard_threshold: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: crate::instruction::DEFAULT_HASH_DIM,
            task_dim: DEFAULT_TASK_DIM,
            state_dim: 3 * crate::level::DEFAULT_WIDTH * crate::level::DEFAULT_HEIGHT,
            encoder_hidden: vec![256],
            classifier_hidden: vec![],
            decoder_hidden: vec![256, 256],
            variant: EncoderVariant::Full,
            hard_threshold: false,
        }
    }
}

impl EncoderConfig {
    pub fn latent_dim(&self) -> usize {
        self.task_dim * N_TASKS
    }

    fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
    }

    pub fn encoder_sizes(&self) -> Vec<usize> {
        Self::sizes(self.embed_dim, &self.encoder_hidden, self.latent_dim())
    }

    pub fn classifier_sizes(&self) -> Vec<usize> {
        Self::sizes(self.latent_dim(), &self.classifier_hidden, N_TASKS)
    }

    pub fn decoder_sizes(&self) -> Vec<usize> {
        Self::sizes(self.latent_dim() + self.state_dim, &self.decoder_hidden, self.variant.regression_heads())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.task_dim == 0 || self.state_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.encoder_hidden.iter().chain(&self.classifier_hidden).chain(&self.decoder_hidden).any(|h| *h == 0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskProbabilities(pub [f64; N_TASKS]);

impl TaskProbabilities {
    pub const ONES: TaskProbabilities = TaskProbabilities([1.0; N_TASKS]);

    pub fn get(&self, task: TaskId) -> f64 {
        self.0[task.index()]
    }

    pub fn predicted_mask(&self) -> [bool; N_TASKS] {
        self.0.map(|p| p > 0.5)
    }

    pub fn argmax(&self) -> TaskId {
        let mut best = 0;
        for i in 1..N_TASKS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        TaskId::ALL[best]
    }
}

/// Scales contiguous block `i` (width `z.len() / 5`) of `z` by `p[i]`.
pub fn weight_subvectors(z: &[f64], p: &TaskProbabilities) -> Result<Vec<f64>> {
    if z.len() % N_TASKS != 0 {
        return Err(Error::Shape {
            context: "latent vector (multiple of task count)",
            expected: z.len() - z.len() % N_TASKS,
            got: z.len(),
        });
    }
    let d = z.len() / N_TASKS;
    Ok(z.iter().enumerate().map(|(i, v)| v * p.0[i / d]).collect())
}

/// Row-wise block scaling of a `(batch, 5 * d)` latent by `(batch, 5)` weights.
fn weight_rows(z: &Array2<f64>, p: &Array2<f64>) -> Array2<f64> {
    let d = z.ncols() / N_TASKS;
    let mut out = z.clone();
    for (mut row, pr) in out.rows_mut().into_iter().zip(p.rows()) {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= pr[j / d];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub encoder: DenseNet,
    pub classifier: DenseNet,
    pub decoder: DenseNet,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = derive_seed(seed, stream::ENCODER_INIT);
        let encoder = DenseNet::init(&config.encoder_sizes(), Activation::Tanh, Activation::Identity, derive_seed(base, 0))?;
        let classifier =
            DenseNet::init(&config.classifier_sizes(), Activation::Tanh, Activation::Sigmoid, derive_seed(base, 1))?;
        let decoder = DenseNet::init(&config.decoder_sizes(), Activation::Tanh, Activation::Identity, derive_seed(base, 2))?;
        Ok(Self {
            config,
            encoder,
            classifier,
            decoder,
        })
    }

    /// Rebuilds a model from its parts, checking the nets agree with the config.
    pub fn from_parts(config: EncoderConfig, encoder: DenseNet, classifier: DenseNet, decoder: DenseNet) -> Result<Self> {
        config.validate()?;
        for (name, net, sizes) in [
            ("encoder", &encoder, config.encoder_sizes()),
            ("classifier", &classifier, config.classifier_sizes()),
            ("decoder", &decoder, config.decoder_sizes()),
        ] {
            if net.sizes() != sizes.as_slice() {
                return Err(Error::config(format!("{name} sizes {:?} do not match config {sizes:?}", net.sizes())));
            }
        }
        Ok(Self {
            config,
            encoder,
            classifier,
            decoder,
        })
    }

    pub fn variant(&self) -> EncoderVariant {
        self.config.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn encode(&self, emb: &Embedding) -> Result<Vec<f64>> {
        if emb.dim() != self.config.embed_dim {
            return Err(Error::Shape {
                context: "instruction embedding",
                expected: self.config.embed_dim,
                got: emb.dim(),
            });
        }
        self.encoder.forward(&emb.values)
    }

    pub fn classify(&self, z_enc: &[f64]) -> Result<TaskProbabilities> {
        let p = self.classifier.forward(z_enc)?;
        let mut out = [0.0; N_TASKS];
        out.copy_from_slice(&p);
        Ok(TaskProbabilities(out))
    }

    /// Probabilities actually applied to the blocks for this variant.
    fn weighting_probs(&self, z_enc: &[f64]) -> Result<TaskProbabilities> {
        if !self.config.variant.uses_classifier() {
            return Ok(TaskProbabilities::ONES);
        }
        let p = self.classify(z_enc)?;
        Ok(if self.config.hard_threshold {
            TaskProbabilities(p.0.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
        } else {
            p
        })
    }

    pub fn predict_fitness(&self, z_weighted: &[f64], state_features: &[f64]) -> Result<Vec<f64>> {
        if z_weighted.len() != self.latent_dim() {
            return Err(Error::Shape {
                context: "weighted latent",
                expected: self.latent_dim(),
                got: z_weighted.len(),
            });
        }
        let input: Vec<f64> = z_weighted.iter().chain(state_features).copied().collect();
        self.decoder.forward(&input)
    }

    /// The condition vector handed to the policy: encode, classify, weight.
    pub fn embed_instruction(&self, emb: &Embedding) -> Result<Vec<f64>> {
        let z = self.encode(emb)?;
        let p = self.weighting_probs(&z)?;
        weight_subvectors(&z, &p)
    }

    pub fn embed_text(&self, frontend: &TextFrontend, text: &str) -> Result<Vec<f64>> {
        self.embed_instruction(&frontend.embed(text)?)
    }

    /// Fraction of records whose thresholded classifier output matches the
    /// active mask on every task.
    pub fn subset_accuracy(&self, frontend: &TextFrontend, records: &[InstructionRecord]) -> Result<f64> {
        if records.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for r in records {
            let z = self.encode(&frontend.embed(&r.text)?)?;
            if self.classify(&z)?.predicted_mask() == r.active {
                hits += 1;
            }
        }
        Ok(hits as f64 / records.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub level: Level,
    pub features: Vec<f64>,
    /// Measures with BD taken against TOP.
    pub measures: MeasureVector,
    /// BD fraction for every direction, indexed by `Direction::index`.
    pub bat_fractions: [f64; 4],
}

impl BufferEntry {
    pub fn new(level: Level) -> Self {
        let measures = fitness::measure(&level, Direction::Top);
        let bat_fractions = bat_direction_fractions(&level);
        Self {
            features: level.one_hot(),
            level,
            measures,
            bat_fractions,
        }
    }

    pub fn measures_for(&self, dir: Direction) -> MeasureVector {
        MeasureVector {
            bd: self.bat_fractions[dir.index()],
            ..self.measures
        }
    }
}

/// Offline collection of random levels used as regression contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBuffer {
    pub width: usize,
    pub height: usize,
    pub entries: Vec<BufferEntry>,
}

impl StateBuffer {
    pub fn build(n: usize, width: usize, height: usize, probs: &TileProbs, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("state buffer size must be at least 1"));
        }
        let base = derive_seed(seed, stream::BUFFER);
        let entries = (0..n)
            .map(|i| Level::random(width, height, derive_seed(base, i as u64), probs).map(BufferEntry::new))
            .collect::<Result<_>>()?;
        Ok(Self { width, height, entries })
    }

    pub fn from_levels(levels: Vec<Level>) -> Result<Self> {
        let first = levels.first().ok_or_else(|| Error::config("state buffer must not be empty"))?;
        let (width, height) = (first.width(), first.height());
        if levels.iter().any(|l| l.width() != width || l.height() != height) {
            return Err(Error::config("state buffer levels must share dimensions"));
        }
        Ok(Self {
            width,
            height,
            entries: levels.into_iter().map(BufferEntry::new).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.width * self.height * 3
    }
}

/// Regression targets for one (instruction, state) pair under a variant.
/// Returns per-head targets and a per-head mask.
pub fn regression_targets(
    variant: EncoderVariant,
    goals: &GoalSpec,
    entry: &BufferEntry,
    width: usize,
    height: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fit = fitness::goal_fitness(&entry.measures_for(goals.direction()), goals, width, height)?;
    let active = goals.active_mask();
    match variant.regression_heads() {
        1 => {
            let n = active.iter().filter(|a| **a).count().max(1);
            let mean = TaskId::ALL.iter().filter(|t| active[t.index()]).map(|t| fit[t.index()]).sum::<f64>() / n as f64;
            Ok((vec![mean], vec![1.0]))
        }
        _ => Ok((fit.to_vec(), active.map(|a| if a { 1.0 } else { 0.0 }).to_vec())),
    }
}

/// One minibatch of encoder training data.
#[derive(Debug, Clone)]
pub struct EncoderBatch {
    pub embeddings: Array2<f64>,
    pub states: Array2<f64>,
    pub targets: Array2<f64>,
    pub mask: Array2<f64>,
    pub labels: Array2<f64>,
}

impl EncoderBatch {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assembles a batch from `(record, buffer entry)` index pairs.
    pub fn assemble(
        model: &EncoderModel,
        records: &[InstructionRecord],
        embeddings: &[Embedding],
        buffer: &StateBuffer,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let b = pairs.len();
        let heads = model.config.variant.regression_heads();
        let mut emb = Array2::zeros((b, model.config.embed_dim));
        let mut states = Array2::zeros((b, buffer.feature_dim()));
        let mut targets = Array2::zeros((b, heads));
        let mut mask = Array2::zeros((b, heads));
        let mut labels = Array2::zeros((b, N_TASKS));
        for (row, &(ri, si)) in pairs.iter().enumerate() {
            let rec = &records[ri];
            let entry = &buffer.entries[si];
            emb.row_mut(row).assign(&ndarray::aview1(&embeddings[ri].values));
            states.row_mut(row).assign(&ndarray::aview1(&entry.features));
            let (t, m) = regression_targets(model.config.variant, &rec.goals, entry, buffer.width, buffer.height)?;
            targets.row_mut(row).assign(&ndarray::aview1(&t));
            mask.row_mut(row).assign(&ndarray::aview1(&m));
            for (j, a) in rec.active.iter().enumerate() {
                labels[[row, j]] = if *a { 1.0 } else { 0.0 };
            }
        }
        Ok(Self {
            embeddings: emb,
            states,
            targets,
            mask,
            labels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub bce: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub encoder: Gradients,
    pub classifier: Gradients,
    pub decoder: Gradients,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct ForwardState {
    enc: ForwardCache,
    cls: Option<ForwardCache>,
    /// Weights applied to blocks (constant in the backward pass).
    weights: Array2<f64>,
    dec: ForwardCache,
}

impl EncoderModel {
    fn forward_train(&self, batch: &EncoderBatch, stopped: Option<&Array2<f64>>) -> Result<ForwardState> {
        let enc = self.encoder.forward_cached(batch.embeddings.view())?;
        let z = &enc.output;
        let (cls, weights) = if self.config.variant.uses_classifier() {
            let cache = self.classifier.forward_cached(z.view())?;
            let mut w = match stopped {
                Some(p) => p.clone(),
                None => cache.output.clone(),
            };
            if self.config.hard_threshold {
                w.mapv_inplace(|v| if v > 0.5 { 1.0 } else { 0.0 });
            }
            (Some(cache), w)
        } else {
            (None, Array2::ones((z.nrows(), N_TASKS)))
        };
        let zw = weight_rows(z, &weights);
        let dec_in = ndarray::concatenate(Axis(1), &[zw.view(), batch.states.view()]).map_err(|_| Error::Shape {
            context: "decoder input rows",
            expected: zw.nrows(),
            got: batch.states.nrows(),
        })?;
        let dec = self.decoder.forward_cached(dec_in.view())?;
        Ok(ForwardState {
            enc,
            cls,
            weights,
            dec,
        })
    }

    fn losses(&self, fs: &ForwardState, batch: &EncoderBatch, lambda_cls: f64) -> LossParts {
        let n = batch.len() as f64;
        let mut mse = 0.0;
        for ((f, t), m) in fs.dec.output.rows().into_iter().zip(batch.targets.rows()).zip(batch.mask.rows()) {
            let active = m.sum().max(1.0);
            let sq: f64 = f.iter().zip(t).zip(m).map(|((f, t), m)| m * (f - t).powi(2)).sum();
            mse += sq / active;
        }
        mse /= n;
        let bce = match &fs.cls {
            Some(cache) => {
                let logits = self.classifier.logits(cache);
                let mut acc = 0.0;
                for (x, y) in logits.iter().zip(batch.labels.iter()) {
                    acc += y * softplus(-x) + (1.0 - y) * softplus(*x);
                }
                acc / (n * N_TASKS as f64)
            }
            None => 0.0,
        };
        let bce_weight = if self.config.variant.uses_classifier() { lambda_cls } else { 0.0 };
        LossParts {
            mse,
            bce,
            total: mse + bce_weight * bce,
        }
    }

    /// Loss of a batch. With `stopped_probs`, block weights use those fixed
    /// probabilities instead of the live classifier output; this is the
    /// function whose exact gradient `loss_and_gradients` returns.
    pub fn batch_loss(&self, batch: &EncoderBatch, lambda_cls: f64, stopped_probs: Option<&Array2<f64>>) -> Result<LossParts> {
        let fs = self.forward_train(batch, stopped_probs)?;
        Ok(self.losses(&fs, batch, lambda_cls))
    }

    /// Classifier probabilities for a batch, for use as `stopped_probs`.
    pub fn batch_probs(&self, batch: &EncoderBatch) -> Result<Array2<f64>> {
        let z = self.encoder.forward_batch(batch.embeddings.view())?;
        self.classifier.forward_batch(z.view())
    }

    /// Combined loss and exact gradients, with the block weights treated as
    /// constants (stop-gradient).
    pub fn loss_and_gradients(&self, batch: &EncoderBatch, lambda_cls: f64) -> Result<(LossParts, EncoderGradients)> {
        let fs = self.forward_train(batch, None)?;
        let loss = self.losses(&fs, batch, lambda_cls);
        let n = batch.len() as f64;
        let latent = self.latent_dim();

        // regression path
        let mut grad_f = Array2::zeros(fs.dec.output.raw_dim());
        for (((mut g, f), t), m) in grad_f
            .rows_mut()
            .into_iter()
            .zip(fs.dec.output.rows())
            .zip(batch.targets.rows())
            .zip(batch.mask.rows())
        {
            let active = m.sum().max(1.0);
            for (((g, f), t), m) in g.iter_mut().zip(f).zip(t).zip(m) {
                *g = 2.0 * m * (f - t) / (active * n);
            }
        }
        let (decoder, grad_dec_in) = self.decoder.backward(&fs.dec, grad_f.view())?;
        let grad_zw = grad_dec_in.slice(s![.., ..latent]).to_owned();
        let mut grad_z = weight_rows(&grad_zw, &fs.weights);

        // classification path
        let classifier = match &fs.cls {
            Some(cache) if lambda_cls != 0.0 => {
                let scale = lambda_cls / (n * N_TASKS as f64);
                let grad_logits = (&cache.output - &batch.labels) * scale;
                let (g, grad_z_cls) = self.classifier.backward_from_pre_output(cache, grad_logits.view())?;
                grad_z += &grad_z_cls;
                g
            }
            _ => Gradients::zeros_like(&self.classifier),
        };

        let (encoder, _) = self.encoder.backward(&fs.enc, grad_z.view())?;
        Ok((
            loss,
            EncoderGradients {
                encoder,
                classifier,
                decoder,
            },
        ))
    }
}

/// Which sub-networks receive optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Freeze {
    pub encoder: bool,
    pub classifier: bool,
    pub decoder: bool,
}

impl Default for Freeze {
    fn default() -> Self {
        Self {
            encoder: false,
            classifier: false,
            decoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_cls: f64,
    /// Buffer states paired with each instruction per epoch.
    pub states_per_instruction: usize,
    pub freeze: Freeze,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            lambda_cls: 1.0,
            states_per_instruction: 8,
            freeze: Freeze::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mse: f64,
    pub bce: f64,
    pub total: f64,
}

/// Trains all three nets jointly on `MSE + lambda_cls * BCE`, one optimizer
/// step per minibatch. Deterministic in `seed`.
pub fn train_encoder(
    model: &mut EncoderModel,
    records: &[InstructionRecord],
    frontend: &TextFrontend,
    buffer: &StateBuffer,
    config: &EncoderTrainConfig,
    seed: u64,
) -> Result<Vec<EpochLoss>> {
    if records.is_empty() {
        return Err(Error::config("encoder training needs at least one instruction"));
    }
    if buffer.is_empty() {
        return Err(Error::config("encoder training needs a non-empty state buffer"));
    }
    if buffer.feature_dim() != model.config.state_dim {
        return Err(Error::Shape {
            context: "state buffer features",
            expected: model.config.state_dim,
            got: buffer.feature_dim(),
        });
    }
    if config.batch_size == 0 || config.states_per_instruction == 0 {
        return Err(Error::config("batch_size and states_per_instruction must be positive"));
    }
    for r in records {
        r.validate(buffer.width, buffer.height)?;
    }
    let embeddings = records.iter().map(|r| frontend.embed(&r.text)).collect::<Result<Vec<_>>>()?;
    if let Some(e) = embeddings.first() {
        if e.dim() != model.config.embed_dim {
            return Err(Error::Shape {
                context: "instruction embedding",
                expected: model.config.embed_dim,
                got: e.dim(),
            });
        }
    }

    let adam = AdamConfig::with_lr(config.lr);
    let mut opt_e = Adam::new(&model.encoder, adam);
    let mut opt_c = Adam::new(&model.classifier, adam);
    let mut opt_d = Adam::new(&model.decoder, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::ENCODER_TRAIN));
    let train_cls = model.config.variant.uses_classifier();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut pairs: Vec<(usize, usize)> = (0..records.len())
            .flat_map(|ri| std::iter::repeat_n(ri, config.states_per_instruction))
            .map(|ri| (ri, rng.random_range(0..buffer.len())))
            .collect();
        pairs.shuffle(&mut rng);

        let mut sums = LossParts::default();
        for chunk in pairs.chunks(config.batch_size) {
            let batch = EncoderBatch::assemble(model, records, &embeddings, buffer, chunk)?;
            let (loss, grads) = model.loss_and_gradients(&batch, config.lambda_cls)?;
            let w = chunk.len() as f64;
            sums.mse += loss.mse * w;
            sums.bce += loss.bce * w;
            sums.total += loss.total * w;
            if !config.freeze.encoder {
                opt_e.step(&mut model.encoder, &grads.encoder);
            }
            if train_cls && !config.freeze.classifier {
                opt_c.step(&mut model.classifier, &grads.classifier);
            }
            if !config.freeze.decoder {
                opt_d.step(&mut model.decoder, &grads.decoder);
            }
        }
        let n = pairs.len() as f64;
        history.push(EpochLoss {
            epoch,
            mse: sums.mse / n,
            bce: sums.bce / n,
            total: sums.total / n,
        });
    }
    Ok(history)
}

/// Writes the per-epoch loss record as CSV.
pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mse,bce,total\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.mse, h.bce, h.total));
    }
    out
}

/// Helper for callers that need `(batch, 5)` stopped probabilities from a
/// single probability vector.
pub fn probs_matrix(rows: &[TaskProbabilities]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), N_TASKS));
    for (mut r, p) in out.rows_mut().into_iter().zip(rows) {
        r.assign(&ndarray::aview1(&p.0));
    }
    out
}
