//! Experiment matrix: model variants, Progress evaluation, seed
//! aggregation and latent-space export.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::{train_encoder, EncoderConfig, EncoderModel, EncoderVariant, EpochLoss, StateBuffer};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::fitness::{GoalSpec, TaskId, N_TASKS};
use crate::instruction::{DatasetKind, InstructionDataset, InstructionRecord, Split, TextFrontend};
use crate::ppo::{
    run_episodes, train_agent, ActorPolicy, Conditioned, EpisodeJob, Policy, PolicyBundle, ProbeSet,
    UpdateMetrics,
};
use crate::seeding::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantId {
    #[serde(rename = "MIPCGRL_FULL")]
    MipcgrlFull,
    #[serde(rename = "NO_CLS")]
    NoCls,
    #[serde(rename = "NO_REG")]
    NoReg,
    #[serde(rename = "IPCGRL_SINGLEHEAD")]
    IpcgrlSingleHead,
    #[serde(rename = "CPCGRL_SCALAR")]
    CpcgrlScalar,
}

impl VariantId {
    pub const ALL: [VariantId; 5] = [
        VariantId::MipcgrlFull,
        VariantId::NoCls,
        VariantId::NoReg,
        VariantId::IpcgrlSingleHead,
        VariantId::CpcgrlScalar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::MipcgrlFull => "MIPCGRL_FULL",
            VariantId::NoCls => "NO_CLS",
            VariantId::NoReg => "NO_REG",
            VariantId::IpcgrlSingleHead => "IPCGRL_SINGLEHEAD",
            VariantId::CpcgrlScalar => "CPCGRL_SCALAR",
        }
    }

    /// Encoder architecture, or `None` for the scalar-condition baseline.
    pub fn encoder_variant(self) -> Option<EncoderVariant> {
        match self {
            VariantId::MipcgrlFull => Some(EncoderVariant::Full),
            VariantId::NoCls => Some(EncoderVariant::NoCls),
            VariantId::NoReg => Some(EncoderVariant::NoReg),
            VariantId::IpcgrlSingleHead => Some(EncoderVariant::SingleHead),
            VariantId::CpcgrlScalar => None,
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Length of the scalar condition vector: (active, goal / range) per task.
pub const SCALAR_COND_DIM: usize = 2 * N_TASKS;

/// Text-free condition. BD's direction is not represented.
pub fn scalar_condition(goals: &GoalSpec, width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(SCALAR_COND_DIM);
    for task in TaskId::ALL {
        match goals.target(task) {
            Some(g) => {
                out.push(1.0);
                out.push(g / task.range(width, height));
            }
            None => out.extend([0.0, 0.0]),
        }
    }
    out
}

/// Where the policy's condition vector comes from.
#[derive(Clone, Copy)]
pub enum ConditionSource<'a> {
    Latent {
        model: &'a EncoderModel,
        frontend: &'a TextFrontend,
    },
    Scalar {
        width: usize,
        height: usize,
    },
}

impl ConditionSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            ConditionSource::Latent { model, .. } => model.latent_dim(),
            ConditionSource::Scalar { .. } => SCALAR_COND_DIM,
        }
    }

    pub fn condition(&self, record: &InstructionRecord) -> Result<Vec<f64>> {
        match self {
            ConditionSource::Latent { model, frontend } => model.embed_text(frontend, &record.text),
            ConditionSource::Scalar { width, height } => Ok(scalar_condition(&record.goals, *width, *height)),
        }
    }

    pub fn conditioned(&self, records: &[InstructionRecord]) -> Result<Vec<Conditioned>> {
        records
            .iter()
            .map(|r| {
                Ok(Conditioned {
                    goals: r.goals,
                    condition: self.condition(r)?,
                })
            })
            .collect()
    }
}

/// Records of the chosen kinds and split, optionally restricted to some
/// composition labels. Order follows the datasets.
pub fn select_records(
    datasets: &[(DatasetKind, &InstructionDataset)],
    kinds: &[DatasetKind],
    compositions: &[String],
    split: Option<Split>,
) -> Vec<(DatasetKind, InstructionRecord)> {
    datasets
        .iter()
        .filter(|(k, _)| kinds.contains(k))
        .flat_map(|(k, d)| d.records.iter().map(move |r| (*k, r)))
        .filter(|(_, r)| split.is_none_or(|s| r.split == s))
        .filter(|(_, r)| compositions.is_empty() || compositions.contains(&r.composition()))
        .map(|(k, r)| (k, r.clone()))
        .collect()
}

pub fn set_name(kind: DatasetKind, split: Split) -> String {
    let k = match kind {
        DatasetKind::Single => "single",
        DatasetKind::Multi => "multi",
    };
    let s = match split {
        Split::Train => "train",
        Split::Holdout => "holdout",
    };
    format!("{k}-{s}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub variant: VariantId,
    pub set: String,
    pub composition: String,
    pub seed: u64,
    pub record: usize,
    pub episode: usize,
    pub progress: f64,
}

pub fn episode_log_csv(logs: &[EpisodeLog]) -> String {
    let mut out = String::from("variant,set,composition,seed,record,episode,progress\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.variant, l.set, l.composition, l.seed, l.record, l.episode, l.progress
        ));
    }
    out
}

/// Level seeds depend on the seed, record index and episode only, so runs
/// that share a seed see identical starting levels across variants.
pub fn eval_jobs(n_records: usize, episodes_per_record: usize, seed: u64) -> Vec<EpisodeJob> {
    let base = derive_seed(seed, stream::EVAL);
    (0..n_records)
        .flat_map(|task| {
            (0..episodes_per_record).map(move |e| EpisodeJob {
                task,
                level_seed: derive_seed(base, (task * 1_000_003 + e) as u64),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &dyn Policy,
    env: &EnvConfig,
    source: ConditionSource<'_>,
    records: &[InstructionRecord],
    set: &str,
    episodes_per_record: usize,
    seed: u64,
    variant: VariantId,
) -> Result<Vec<EpisodeLog>> {
    let tasks = source.conditioned(records)?;
    let jobs = eval_jobs(records.len(), episodes_per_record, seed);
    let results = run_episodes(policy, env, &tasks, &jobs, derive_seed(seed, stream::EVAL + 100))?;
    Ok(jobs
        .iter()
        .zip(results)
        .enumerate()
        .map(|(i, (job, res))| EpisodeLog {
            variant,
            set: set.to_string(),
            composition: records[job.task].composition(),
            seed,
            record: job.task,
            episode: i % episodes_per_record,
            progress: res.mean_progress(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub variant: VariantId,
    pub set: String,
    pub composition: String,
    /// Mean over seeds of each seed's mean episode Progress.
    pub mean: f64,
    /// Sample standard deviation of the seed means; present with 2+ seeds.
    pub std: Option<f64>,
    pub episodes: usize,
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_logs(logs: &[EpisodeLog]) -> Self {
        let mut groups: BTreeMap<(VariantId, &str, &str), BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
        for l in logs {
            let g = groups.entry((l.variant, &l.set, &l.composition)).or_default();
            let e = g.entry(l.seed).or_insert((0.0, 0));
            e.0 += l.progress;
            e.1 += 1;
        }
        let rows = groups
            .into_iter()
            .map(|((variant, set, composition), seeds)| {
                let per_seed: Vec<(u64, f64)> = seeds.iter().map(|(s, (sum, n))| (*s, sum / *n as f64)).collect();
                let k = per_seed.len() as f64;
                let mean = per_seed.iter().map(|(_, m)| m).sum::<f64>() / k;
                let std = (per_seed.len() >= 2)
                    .then(|| (per_seed.iter().map(|(_, m)| (m - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
                EvalRow {
                    variant,
                    set: set.to_string(),
                    composition: composition.to_string(),
                    mean,
                    std,
                    episodes: seeds.values().map(|(_, n)| n).sum(),
                    per_seed,
                }
            })
            .collect();
        Self { rows }
    }

    pub fn get(&self, variant: VariantId, set: &str, composition: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.set == set && r.composition == composition)
    }

    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.rows
            .sort_by(|a, b| (a.variant, &a.set, &a.composition).cmp(&(b.variant, &b.set, &b.composition)));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,set,composition,mean_progress,std_progress,episodes,seeds\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|(s, _)| s.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant,
                r.set,
                r.composition,
                r.mean,
                r.std.map(|s| s.to_string()).unwrap_or_default(),
                r.episodes,
                seeds.join(";")
            ));
        }
        out
    }
}

/// Everything produced for one variant and seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub encoder: Option<EncoderModel>,
    pub encoder_loss: Vec<EpochLoss>,
    pub policy: PolicyBundle,
    pub metrics: Vec<UpdateMetrics>,
    pub logs: Vec<EpisodeLog>,
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: VariantId,
    pub report: EvalReport,
    pub seeds: Vec<SeedRun>,
}

/// The two generated datasets, in the order single, multi.
pub struct Corpus {
    pub single: InstructionDataset,
    pub multi: InstructionDataset,
}

impl Corpus {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let (single, multi) = crate::instruction::generate_datasets_with(
            cfg.dataset.seed,
            cfg.grid.width,
            cfg.grid.height,
            &cfg.grid.probs,
            &cfg.dataset.generation,
        )?;
        Ok(Self { single, multi })
    }

    pub fn datasets(&self) -> [(DatasetKind, &InstructionDataset); 2] {
        [(DatasetKind::Single, &self.single), (DatasetKind::Multi, &self.multi)]
    }

    /// Encoder training data: the train split of both datasets.
    pub fn encoder_records(&self) -> Vec<InstructionRecord> {
        self.single
            .split(Split::Train)
            .chain(self.multi.split(Split::Train))
            .cloned()
            .collect()
    }

    pub fn agent_records(&self, cfg: &RunConfig, split: Split) -> Vec<(DatasetKind, InstructionRecord)> {
        select_records(&self.datasets(), &cfg.experiment.kinds, &cfg.experiment.compositions, Some(split))
    }
}

/// Encoder architecture for a variant; `None` when the variant uses no encoder.
pub fn variant_encoder_config(cfg: &RunConfig, variant: VariantId, embed_dim: usize) -> Result<Option<EncoderConfig>> {
    variant
        .encoder_variant()
        .map(|v| cfg.encoder_config(v, embed_dim))
        .transpose()
}

pub fn train_variant_encoder(
    cfg: &RunConfig,
    variant: VariantId,
    corpus: &Corpus,
    frontend: &TextFrontend,
    seed: u64,
) -> Result<Option<(EncoderModel, Vec<EpochLoss>)>> {
    let Some(enc_cfg) = variant_encoder_config(cfg, variant, frontend.dim())? else {
        return Ok(None);
    };
    let buffer = StateBuffer::build(
        cfg.encoder.buffer_size,
        cfg.grid.width,
        cfg.grid.height,
        &cfg.grid.probs,
        derive_seed(seed, stream::BUFFER),
    )?;
    let mut model = EncoderModel::new(enc_cfg, seed)?;
    let history = train_encoder(&mut model, &corpus.encoder_records(), frontend, &buffer, &cfg.encoder.train, seed)?;
    Ok(Some((model, history)))
}

pub fn condition_source<'a>(cfg: &RunConfig, encoder: Option<&'a EncoderModel>, frontend: &'a TextFrontend) -> ConditionSource<'a> {
    match encoder {
        Some(model) => ConditionSource::Latent { model, frontend },
        None => ConditionSource::Scalar {
            width: cfg.grid.width,
            height: cfg.grid.height,
        },
    }
}

/// Probe sets: held-out records of each configured dataset kind.
pub fn probe_sets(cfg: &RunConfig, corpus: &Corpus, source: ConditionSource<'_>) -> Result<Vec<ProbeSet>> {
    let holdout = corpus.agent_records(cfg, Split::Holdout);
    let mut out = Vec::new();
    for kind in &cfg.experiment.kinds {
        let recs: Vec<InstructionRecord> = holdout.iter().filter(|(k, _)| k == kind).map(|(_, r)| r.clone()).collect();
        if recs.is_empty() {
            continue;
        }
        out.push(ProbeSet {
            name: set_name(*kind, Split::Holdout),
            tasks: source.conditioned(&recs)?,
            episodes_per_task: 1,
        });
    }
    Ok(out)
}

pub fn train_variant_agent(
    cfg: &RunConfig,
    corpus: &Corpus,
    source: ConditionSource<'_>,
    seed: u64,
    on_update: impl FnMut(&UpdateMetrics),
) -> Result<(PolicyBundle, Vec<UpdateMetrics>, Vec<String>)> {
    let train: Vec<InstructionRecord> = corpus.agent_records(cfg, Split::Train).into_iter().map(|(_, r)| r).collect();
    if train.is_empty() {
        return Err(Error::config("no training instructions match experiment.kinds and experiment.compositions"));
    }
    let tasks = source.conditioned(&train)?;
    let probes = probe_sets(cfg, corpus, source)?;
    let env = cfg.env_config(source.dim())?;
    let (bundle, metrics) = train_agent(&tasks, &probes, &env, &cfg.ppo, seed, on_update)?;
    Ok((bundle, metrics, probes.into_iter().map(|p| p.name).collect()))
}

/// Evaluates one trained policy on both splits of every configured kind.
pub fn evaluate_variant(
    cfg: &RunConfig,
    corpus: &Corpus,
    variant: VariantId,
    policy: &PolicyBundle,
    source: ConditionSource<'_>,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    let actor = ActorPolicy {
        actor: &policy.actor,
        selection: cfg.experiment.selection,
    };
    let mut logs = Vec::new();
    for split in [Split::Train, Split::Holdout] {
        let recs = corpus.agent_records(cfg, split);
        for kind in &cfg.experiment.kinds {
            let subset: Vec<InstructionRecord> = recs.iter().filter(|(k, _)| k == kind).map(|(_, r)| r.clone()).collect();
            if subset.is_empty() {
                continue;
            }
            logs.extend(evaluate(
                &actor,
                &policy.env,
                source,
                &subset,
                &set_name(*kind, split),
                cfg.experiment.episodes_per_record,
                seed,
                variant,
            )?);
        }
    }
    Ok(logs)
}

/// Builds, trains and evaluates a variant for each seed.
pub fn run_variant(
    variant: VariantId,
    cfg: &RunConfig,
    seeds: &[u64],
    mut progress: impl FnMut(VariantId, u64, &str),
) -> Result<VariantRun> {
    cfg.validate()?;
    let corpus = Corpus::generate(cfg)?;
    let frontend = cfg.frontend()?;
    let mut runs = Vec::new();
    let mut all_logs = Vec::new();
    for &seed in seeds {
        progress(variant, seed, "encoder");
        let trained = train_variant_encoder(cfg, variant, &corpus, &frontend, seed)?;
        let (encoder, encoder_loss) = match trained {
            Some((m, h)) => (Some(m), h),
            None => (None, Vec::new()),
        };
        let source = condition_source(cfg, encoder.as_ref(), &frontend);
        progress(variant, seed, "agent");
        let (policy, metrics, _) = train_variant_agent(cfg, &corpus, source, seed, |_| {})?;
        progress(variant, seed, "eval");
        let logs = evaluate_variant(cfg, &corpus, variant, &policy, source, seed)?;
        all_logs.extend(logs.iter().cloned());
        runs.push(SeedRun {
            seed,
            encoder,
            encoder_loss,
            policy,
            metrics,
            logs,
        });
    }
    Ok(VariantRun {
        variant,
        report: EvalReport::from_logs(&all_logs),
        seeds: runs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub text: String,
    pub composition: String,
    pub kind: DatasetKind,
    pub split: Split,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub rows: Vec<EmbeddingRow>,
    pub projection: Vec<[f64; 2]>,
    /// Variance along each principal axis (top-2 covariance eigenvalues).
    pub explained: [f64; 2],
}

/// Principal-component projection onto the top two axes of the sample
/// covariance. Each axis is signed so its largest-magnitude loading is positive.
pub fn pca_2d(data: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = data.len();
    let d = data.first().map(Vec::len).unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(Error::config("projection needs at least one non-empty row"));
    }
    if let Some(bad) = data.iter().find(|r| r.len() != d) {
        return Err(Error::Shape {
            context: "projection rows",
            expected: d,
            got: bad.len(),
        });
    }
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j]);
    let mean = x.row_mean();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = (xc.transpose() * &xc) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
    let mut axes = Vec::new();
    let mut explained = [0.0; 2];
    for (k, idx) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(*idx).into_owned();
        let pivot = v.iter().cloned().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        explained[k] = eig.eigenvalues[*idx].max(0.0);
        axes.push(v);
    }
    let projection = (0..n)
        .map(|i| {
            let row = xc.row(i);
            let mut p = [0.0; 2];
            for (k, v) in axes.iter().enumerate() {
                p[k] = row.dot(&v.transpose());
            }
            p
        })
        .collect();
    Ok((projection, explained))
}

pub fn export_embeddings(
    model: &EncoderModel,
    frontend: &TextFrontend,
    records: &[(DatasetKind, InstructionRecord)],
) -> Result<EmbeddingExport> {
    let rows = records
        .iter()
        .map(|(kind, r)| {
            Ok(EmbeddingRow {
                text: r.text.clone(),
                composition: r.composition(),
                kind: *kind,
                split: r.split,
                z: model.embed_text(frontend, &r.text)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<Vec<f64>> = rows.iter().map(|r| r.z.clone()).collect();
    let (projection, explained) = pca_2d(&data)?;
    Ok(EmbeddingExport {
        rows,
        projection,
        explained,
    })
}

fn csv_text(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn kind_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Single => "single",
        DatasetKind::Multi => "multi",
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Holdout => "holdout",
    }
}

impl EmbeddingExport {
    pub fn embeddings_csv(&self) -> String {
        let dim = self.rows.first().map(|r| r.z.len()).unwrap_or(0);
        let mut out = String::from("text,composition,kind,split");
        for j in 0..dim {
            out.push_str(&format!(",z{j}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}", csv_text(&r.text), r.composition, kind_name(r.kind), split_name(r.split)));
            for v in &r.z {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn projection_csv(&self) -> String {
        let mut out = String::from("text,composition,kind,split,pc1,pc2\n");
        for (r, p) in self.rows.iter().zip(&self.projection) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_text(&r.text),
                r.composition,
                kind_name(r.kind),
                split_name(r.split),
                p[0],
                p[1]
            ));
        }
        out
    }

    /// Silhouette of the full embeddings grouped by task composition.
    pub fn cluster_separation(&self) -> Result<f64> {
        let points: Vec<Vec<f64>> = self.rows.iter().map(|r| r.z.clone()).collect();
        let labels: Vec<String> = self.rows.iter().map(|r| r.composition.clone()).collect();
        silhouette(&points, &labels)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. Points alone in
/// their group score 0.
pub fn silhouette<L: Ord + Clone>(points: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape {
            context: "silhouette labels",
            expected: points.len(),
            got: labels.len(),
        });
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::config("silhouette needs at least two groups"));
    }
    let mut total = 0.0;
    for (i, li) in labels.iter().enumerate() {
        let own = &groups[li];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|j| **j != i).map(|j| euclid(&points[i], &points[*j])).sum::<f64>() / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .filter(|(l, _)| *l != li)
            .map(|(_, m)| m.iter().map(|j| euclid(&points[i], &points[*j])).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}
