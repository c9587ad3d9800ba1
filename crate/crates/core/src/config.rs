//! Run configuration: TOML file with sections, layered under CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderTrainConfig, EncoderVariant, DEFAULT_BUFFER_SIZE, DEFAULT_TASK_DIM};
use crate::env::{EnvConfig, RewardWeights};
use crate::error::{Error, Result};
use crate::evalbench::VariantId;
use crate::fitness;
use crate::instruction::{DatasetConfig, DatasetKind, ExternalEmbeddings, TextFrontend, DEFAULT_HASH_DIM};
use crate::level::{TileProbs, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::ppo::{ActionSelection, PpoConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub width: usize,
    pub height: usize,
    pub probs: TileProbs,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            probs: TileProbs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    #[serde(flatten)]
    pub generation: DatasetConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerMode {
    #[default]
    Hash,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizerSection {
    pub mode: FeaturizerMode,
    pub dim: usize,
    pub seed: u64,
    /// JSONL file of `{text, vector}` objects, required in external mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

impl Default for FeaturizerSection {
    fn default() -> Self {
        Self {
            mode: FeaturizerMode::Hash,
            dim: DEFAULT_HASH_DIM,
            seed: 0,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub task_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub buffer_size: usize,
    #[serde(flatten)]
    pub train: EncoderTrainConfig,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let arch = EncoderConfig::default();
        Self {
            task_dim: DEFAULT_TASK_DIM,
            encoder_hidden: arch.encoder_hidden,
            classifier_hidden: arch.classifier_hidden,
            decoder_hidden: arch.decoder_hidden,
            buffer_size: DEFAULT_BUFFER_SIZE,
            train: EncoderTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    /// Defaults to two passes over the grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Defaults to 30% of the cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub change_budget: Option<usize>,
    pub weights: RewardWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    /// Variant used by train-encoder, train-agent, eval, generate and export-embeddings.
    pub variant: VariantId,
    /// Variants compared by ablate.
    pub variants: Vec<VariantId>,
    /// Datasets whose records the agent trains and is evaluated on.
    pub kinds: Vec<DatasetKind>,
    /// Composition labels such as "WC" or "WC+BC"; empty keeps all.
    pub compositions: Vec<String>,
    pub episodes_per_record: usize,
    pub selection: ActionSelection,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variant: VariantId::MipcgrlFull,
            variants: VariantId::ALL.to_vec(),
            kinds: vec![DatasetKind::Single, DatasetKind::Multi],
            compositions: Vec::new(),
            episodes_per_record: 4,
            selection: ActionSelection::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Names the output directory.
    pub name: String,
    pub grid: GridSection,
    pub dataset: DatasetSection,
    pub featurizer: FeaturizerSection,
    pub encoder: EncoderSection,
    pub env: EnvSection,
    pub ppo: PpoConfig,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            grid: GridSection::default(),
            dataset: DatasetSection::default(),
            featurizer: FeaturizerSection::default(),
            encoder: EncoderSection::default(),
            env: EnvSection::default(),
            ppo: PpoConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

fn valid_composition(label: &str) -> bool {
    let parts: Vec<&str> = label.split('+').collect();
    if parts.is_empty() || parts.len() > 2 {
        return false;
    }
    let tasks: Option<Vec<fitness::TaskId>> = parts.iter().map(|p| p.parse().ok()).collect();
    match tasks {
        Some(t) => t.windows(2).all(|w| w[0].index() < w[1].index()),
        None => false,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::file(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::config(format!("run name {:?} cannot be used as a directory name", self.name)));
        }
        let (w, h) = (self.grid.width, self.grid.height);
        if w < 4 || h < 4 {
            return Err(Error::config(format!("grid must be at least 4x4, got {w}x{h}")));
        }
        self.grid.probs.validate()?;
        if self.featurizer.mode == FeaturizerMode::External && self.featurizer.embeddings.is_none() {
            return Err(Error::config("external featurizer needs featurizer.embeddings"));
        }
        if self.featurizer.mode == FeaturizerMode::Hash && self.featurizer.dim < crate::instruction::MIN_HASH_DIM {
            return Err(Error::config(format!(
                "featurizer.dim must be at least {}",
                crate::instruction::MIN_HASH_DIM
            )));
        }
        self.encoder_config(EncoderVariant::Full, self.featurizer.dim)?;
        let t = &self.encoder.train;
        if t.epochs == 0 || t.batch_size == 0 || t.states_per_instruction == 0 || self.encoder.buffer_size == 0 {
            return Err(Error::config("encoder epochs, batch_size, states_per_instruction and buffer_size must be positive"));
        }
        if !(t.lr > 0.0) || !(t.lambda_cls >= 0.0) {
            return Err(Error::config("encoder lr must be positive and lambda_cls non-negative"));
        }
        self.env_config(0)?;
        self.ppo.validate()?;
        let x = &self.experiment;
        if x.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must not be empty"));
        }
        if x.variants.is_empty() || x.kinds.is_empty() || x.episodes_per_record == 0 {
            return Err(Error::config("experiment variants, kinds and episodes_per_record must be non-empty"));
        }
        if let Some(bad) = x.compositions.iter().find(|c| !valid_composition(c)) {
            return Err(Error::config(format!("unknown task composition {bad:?}")));
        }
        Ok(())
    }

    pub fn encoder_config(&self, variant: EncoderVariant, embed_dim: usize) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            embed_dim,
            task_dim: self.encoder.task_dim,
            state_dim: 3 * self.grid.width * self.grid.height,
            encoder_hidden: self.encoder.encoder_hidden.clone(),
            classifier_hidden: self.encoder.classifier_hidden.clone(),
            decoder_hidden: self.encoder.decoder_hidden.clone(),
            variant,
            hard_threshold: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn env_config(&self, cond_dim: usize) -> Result<EnvConfig> {
        let mut env = EnvConfig::new(self.grid.width, self.grid.height, cond_dim);
        env.probs = self.grid.probs;
        env.weights = self.env.weights;
        if let Some(m) = self.env.max_steps {
            env.max_steps = m;
        }
        if let Some(c) = self.env.change_budget {
            env.change_budget = c;
        }
        env.validate()?;
        Ok(env)
    }

    /// Builds the text front-end; external embeddings are read from disk.
    pub fn frontend(&self) -> Result<TextFrontend> {
        match self.featurizer.mode {
            FeaturizerMode::Hash => Ok(TextFrontend::Hash {
                dim: self.featurizer.dim,
                seed: self.featurizer.seed,
            }),
            FeaturizerMode::External => {
                let path = self
                    .featurizer
                    .embeddings
                    .as_ref()
                    .ok_or_else(|| Error::config("external featurizer needs featurizer.embeddings"))?;
                Ok(TextFrontend::External(ExternalEmbeddings::load(path)?))
            }
        }
    }

    pub fn output_dir(&self, root: impl AsRef<Path>) -> PathBuf {
        root.as_ref().join(&self.name)
    }
}
