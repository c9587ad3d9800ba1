//! Command implementations behind the `instruct-pcg` binary.
//!
//! Every command writes into `<out>/<config name>/` and overwrites files of
//! the same name, so two runs with the same inputs leave identical trees.

use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::{loss_csv, EncoderModel, TaskProbabilities};
use crate::error::{Error, Result};
use crate::evalbench::{
    condition_source, episode_log_csv, evaluate_variant, export_embeddings, run_variant, select_records,
    train_variant_agent, train_variant_encoder, Corpus, EvalReport, VariantId,
};
use crate::fitness::{self, GoalSpec, TaskId};
use crate::instruction::{DatasetKind, InstructionDataset, Split};
use crate::ppo::{metrics_csv, run_episodes, ActorPolicy, Conditioned, EpisodeJob, UpdateMetrics};
use crate::seeding::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Dataset,
    TrainEncoder,
    TrainAgent,
    Eval,
    Ablate,
    Generate,
    ExportEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Execution is always sequential and fully seeded; the flag is accepted
    /// so scripts can state the intent explicitly.
    pub reproducible: bool,
    pub variant: Option<VariantId>,
    /// Instructions for `generate`; when empty, lines are read from the input stream.
    pub instructions: Vec<String>,
}

/// File, then flags, then validation.
pub fn resolve_config(opts: &CliOptions) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.experiment.seeds = vec![seed];
        cfg.dataset.seed = seed;
    }
    if let Some(v) = opts.variant {
        cfg.experiment.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn note(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

fn encoder_path(dir: &Path, variant: VariantId, seed: u64) -> PathBuf {
    dir.join(format!("encoder-{variant}-seed{seed}.ckpt"))
}

fn policy_path(dir: &Path, variant: VariantId, seed: u64) -> PathBuf {
    dir.join(format!("policy-{variant}-seed{seed}.ckpt"))
}

/// Uses dataset files from the run directory when present, otherwise
/// regenerates them from the config.
pub fn load_corpus(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    let single = dir.join("single.jsonl");
    let multi = dir.join("multi.jsonl");
    if single.exists() && multi.exists() {
        let corpus = Corpus {
            single: InstructionDataset::load(&single, DatasetKind::Single)?,
            multi: InstructionDataset::load(&multi, DatasetKind::Multi)?,
        };
        for r in corpus.single.records.iter().chain(&corpus.multi.records) {
            r.validate(cfg.grid.width, cfg.grid.height)?;
        }
        return Ok(corpus);
    }
    Corpus::generate(cfg)
}

fn load_encoder(cfg: &RunConfig, dir: &Path, variant: VariantId, seed: u64, embed_dim: usize) -> Result<Option<EncoderModel>> {
    let Some(expected) = crate::evalbench::variant_encoder_config(cfg, variant, embed_dim)? else {
        return Ok(None);
    };
    let path = encoder_path(dir, variant, seed);
    if !path.exists() {
        return Err(Error::file(&path, "missing encoder checkpoint; run train-encoder first"));
    }
    let model = Checkpoint::load(&path)?.into_encoder().map_err(|e| Error::file(&path, e))?;
    if model.config != expected {
        return Err(Error::file(&path, "encoder checkpoint does not match the current configuration"));
    }
    Ok(Some(model))
}

fn load_policy(dir: &Path, variant: VariantId, seed: u64, cond_dim: usize) -> Result<crate::ppo::PolicyBundle> {
    let path = policy_path(dir, variant, seed);
    if !path.exists() {
        return Err(Error::file(&path, "missing policy checkpoint; run train-agent first"));
    }
    let bundle = Checkpoint::load(&path)?.into_policy().map_err(|e| Error::file(&path, e))?;
    if bundle.env.cond_dim != cond_dim {
        return Err(Error::file(&path, "policy condition size does not match the encoder"));
    }
    Ok(bundle)
}

/// Mean over seeds of the per-update metrics; probe cells average the
/// seeds that were probed.
pub fn aggregate_metrics_csv(runs: &[Vec<UpdateMetrics>], probe_names: &[String]) -> String {
    let mut out = String::from("update,seeds,mean_return,mean_progress");
    for name in probe_names {
        out.push_str(&format!(",probe_{name}"));
    }
    out.push('\n');
    let updates = runs.iter().map(Vec::len).min().unwrap_or(0);
    let mean = |xs: Vec<f64>| {
        let xs: Vec<f64> = xs.into_iter().filter(|x| !x.is_nan()).collect();
        if xs.is_empty() {
            String::new()
        } else {
            format!("{}", xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    for u in 0..updates {
        out.push_str(&format!(
            "{},{},{},{}",
            u + 1,
            runs.len(),
            mean(runs.iter().map(|r| r[u].mean_return).collect()),
            mean(runs.iter().map(|r| r[u].mean_progress).collect())
        ));
        for p in 0..probe_names.len() {
            out.push(',');
            out.push_str(&mean(runs.iter().map(|r| r[u].probe[p].unwrap_or(f64::NAN)).collect()));
        }
        out.push('\n');
    }
    out
}

pub fn run(cmd: Command, opts: &CliOptions, input: &mut dyn BufRead, output: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let dir = cfg.output_dir(&opts.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml())?;
    match cmd {
        Command::Dataset => cmd_dataset(&cfg, &dir, output),
        Command::TrainEncoder => cmd_train_encoder(&cfg, &dir, output),
        Command::TrainAgent => cmd_train_agent(&cfg, &dir, output),
        Command::Eval => cmd_eval(&cfg, &dir, output),
        Command::Ablate => cmd_ablate(&cfg, &dir, output),
        Command::Generate => cmd_generate(&cfg, &dir, &opts.instructions, input, output),
        Command::ExportEmbeddings => cmd_export_embeddings(&cfg, &dir, output),
    }
}

pub fn cmd_dataset(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let corpus = Corpus::generate(cfg)?;
    corpus.single.save(dir.join("single.jsonl"))?;
    corpus.multi.save(dir.join("multi.jsonl"))?;
    writeln!(out, "single: {} records, multi: {} records", corpus.single.len(), corpus.multi.len())?;
    Ok(())
}

pub fn cmd_train_encoder(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let variant = cfg.experiment.variant;
    let corpus = load_corpus(cfg, dir)?;
    let frontend = cfg.frontend()?;
    for &seed in &cfg.experiment.seeds {
        note(format!("training {variant} encoder, seed {seed}"));
        let Some((model, history)) = train_variant_encoder(cfg, variant, &corpus, &frontend, seed)? else {
            writeln!(out, "{variant} conditions on scalar goals and has no encoder")?;
            return Ok(());
        };
        Checkpoint::from_encoder(&model, json!({"variant": variant, "seed": seed})).save(encoder_path(dir, variant, seed))?;
        write(&dir.join(format!("encoder-{variant}-seed{seed}-loss.csv")), loss_csv(&history))?;
        let holdout: Vec<_> = corpus.single.split(Split::Holdout).chain(corpus.multi.split(Split::Holdout)).cloned().collect();
        let acc = model.subset_accuracy(&frontend, &holdout)?;
        let first = history.first().map(|h| h.total).unwrap_or(f64::NAN);
        let last = history.last().map(|h| h.total).unwrap_or(f64::NAN);
        writeln!(out, "seed {seed}: loss {first:.6} -> {last:.6}, holdout subset accuracy {acc:.4}")?;
    }
    Ok(())
}

pub fn cmd_train_agent(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let variant = cfg.experiment.variant;
    let corpus = load_corpus(cfg, dir)?;
    let frontend = cfg.frontend()?;
    let mut all = Vec::new();
    let mut names = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let encoder = load_encoder(cfg, dir, variant, seed, frontend.dim())?;
        let source = condition_source(cfg, encoder.as_ref(), &frontend);
        note(format!("training {variant} agent, seed {seed}"));
        let total = cfg.ppo.total_updates;
        let (bundle, metrics, probe_names) = train_variant_agent(cfg, &corpus, source, seed, |m| {
            if m.update % 10 == 0 || m.update == total {
                note(format!("  update {}/{total}", m.update));
            }
        })?;
        Checkpoint::from_policy(&bundle, json!({"variant": variant, "seed": seed})).save(policy_path(dir, variant, seed))?;
        write(&dir.join(format!("metrics-{variant}-seed{seed}.csv")), metrics_csv(&metrics, &probe_names))?;
        if let Some(last) = metrics.last() {
            let probes: Vec<String> = probe_names
                .iter()
                .zip(&last.probe)
                .map(|(n, p)| format!("{n} {:.4}", p.unwrap_or(f64::NAN)))
                .collect();
            writeln!(out, "seed {seed}: final probe Progress {}", probes.join(", "))?;
        }
        all.push(metrics);
        names = probe_names;
    }
    write(&dir.join(format!("metrics-{variant}-aggregate.csv")), aggregate_metrics_csv(&all, &names))?;
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport, logs: &[crate::evalbench::EpisodeLog], out: &mut dyn Write) -> Result<()> {
    write(&dir.join(format!("{stem}.csv")), report.to_csv())?;
    write(&dir.join(format!("{stem}-episodes.csv")), episode_log_csv(logs))?;
    for r in &report.rows {
        let std = r.std.map(|s| format!(" +- {s:.4}")).unwrap_or_default();
        writeln!(out, "{:<18} {:<14} {:<6} {:.4}{std}", r.variant.name(), r.set, r.composition, r.mean)?;
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let variant = cfg.experiment.variant;
    let corpus = load_corpus(cfg, dir)?;
    let frontend = cfg.frontend()?;
    let mut logs = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let encoder = load_encoder(cfg, dir, variant, seed, frontend.dim())?;
        let source = condition_source(cfg, encoder.as_ref(), &frontend);
        let policy = load_policy(dir, variant, seed, source.dim())?;
        logs.extend(evaluate_variant(cfg, &corpus, variant, &policy, source, seed)?);
    }
    let report = EvalReport::from_logs(&logs);
    write_report(dir, &format!("eval-{variant}"), &report, &logs, out)
}

pub fn cmd_ablate(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let sub = dir.join("ablate");
    std::fs::create_dir_all(&sub).map_err(|e| Error::file(&sub, e))?;
    let mut report = EvalReport::default();
    let mut logs = Vec::new();
    for &variant in &cfg.experiment.variants {
        let run = run_variant(variant, cfg, &cfg.experiment.seeds, |v, s, stage| note(format!("{v} seed {s}: {stage}")))?;
        for s in &run.seeds {
            write(&sub.join(format!("metrics-{variant}-seed{}.csv", s.seed)), metrics_csv(&s.metrics, &[]))?;
            logs.extend(s.logs.iter().cloned());
        }
        report.merge(run.report);
    }
    write_report(dir, "ablation", &report, &logs, out)
}

fn known_goals(corpus: &Corpus) -> BTreeMap<String, GoalSpec> {
    corpus
        .single
        .records
        .iter()
        .chain(&corpus.multi.records)
        .map(|r| (r.text.clone(), r.goals))
        .collect()
}

pub fn cmd_generate(
    cfg: &RunConfig,
    dir: &Path,
    instructions: &[String],
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<()> {
    let variant = cfg.experiment.variant;
    let seed = cfg.experiment.seeds[0];
    let corpus = load_corpus(cfg, dir)?;
    let frontend = cfg.frontend()?;
    let encoder = load_encoder(cfg, dir, variant, seed, frontend.dim())?;
    let source = condition_source(cfg, encoder.as_ref(), &frontend);
    let policy = load_policy(dir, variant, seed, source.dim())?;
    let actor = ActorPolicy {
        actor: &policy.actor,
        selection: cfg.experiment.selection,
    };
    let known = known_goals(&corpus);
    let interactive = instructions.is_empty() && std::io::stdin().is_terminal();
    let mut lines: Box<dyn Iterator<Item = std::io::Result<String>>> = if instructions.is_empty() {
        Box::new(input.lines())
    } else {
        Box::new(instructions.iter().cloned().map(Ok))
    };
    let base = derive_seed(seed, stream::EVAL + 200);
    let mut count = 0u64;
    loop {
        if interactive {
            write!(out, "> ")?;
            out.flush()?;
        }
        let Some(line) = lines.next() else { break };
        let text = line?.trim().to_string();
        if text.is_empty() {
            continue;
        }
        let goals = known.get(&text).copied();
        let record = crate::instruction::InstructionRecord {
            text: text.clone(),
            active: goals.map(|g| g.active_mask()).unwrap_or_default(),
            goals: goals.unwrap_or_default(),
            split: Split::Train,
        };
        let condition = match source.condition(&record) {
            Ok(c) => c,
            Err(e) => {
                writeln!(out, "cannot condition on {text:?}: {e}")?;
                continue;
            }
        };
        let task = Conditioned {
            goals: record.goals,
            condition,
        };
        let job = EpisodeJob {
            task: 0,
            level_seed: derive_seed(base, count),
        };
        let res = run_episodes(&actor, &policy.env, std::slice::from_ref(&task), &[job], derive_seed(base ^ 1, count))?;
        count += 1;
        let res = &res[0];
        writeln!(out, "{}", res.final_level.render().trim_end())?;
        match goals {
            Some(g) => {
                for (t, p) in &res.progress {
                    writeln!(out, "Progress {t}: {p:.4} (goal {})", g.target(*t).unwrap_or(f64::NAN))?;
                }
            }
            None => {
                let predicted = match &encoder {
                    Some(model) => {
                        let z = model.encode(&frontend.embed(&text)?)?;
                        let probs: TaskProbabilities = model.classify(&z)?;
                        let mask = probs.predicted_mask();
                        if mask.iter().any(|m| *m) {
                            TaskId::ALL.into_iter().filter(|t| mask[t.index()]).collect()
                        } else {
                            vec![probs.argmax()]
                        }
                    }
                    None => Vec::new(),
                };
                writeln!(out, "unrecognized instruction; no goal values to score against")?;
                let m = fitness::measure(&res.final_level, fitness::Direction::default());
                for t in predicted {
                    writeln!(out, "predicted task {t}: measured {}", m.get(t))?;
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_export_embeddings(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let variant = cfg.experiment.variant;
    let corpus = load_corpus(cfg, dir)?;
    let frontend = cfg.frontend()?;
    let records = select_records(&corpus.datasets(), &[DatasetKind::Single, DatasetKind::Multi], &[], None);
    let mut summary = String::from("variant,seed,silhouette\n");
    for &seed in &cfg.experiment.seeds {
        let Some(model) = load_encoder(cfg, dir, variant, seed, frontend.dim())? else {
            writeln!(out, "{variant} has no encoder to export")?;
            return Ok(());
        };
        let export = export_embeddings(&model, &frontend, &records)?;
        write(&dir.join(format!("embeddings-{variant}-seed{seed}.csv")), export.embeddings_csv())?;
        write(&dir.join(format!("projection-{variant}-seed{seed}.csv")), export.projection_csv())?;
        let s = export.cluster_separation()?;
        summary.push_str(&format!("{variant},{seed},{s}\n"));
        writeln!(out, "seed {seed}: {} rows, silhouette by composition {s:.4}", export.rows.len())?;
    }
    write(&dir.join(format!("separation-{variant}.csv")), summary)
}
