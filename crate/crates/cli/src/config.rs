//! Run configuration files: TOML sections mirroring the library configs.
//! Every field is optional; command-line flags override file values and
//! the fully resolved file is echoed next to each command's outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tspnco::bench::SweepSpec;
use tspnco::model::{EncoderConfig, ModelConfig};
use tspnco::search::{DecodeConfig, DecodeMode};
use tspnco::training::{BaselineKind, Paradigm, TrainConfig};

use crate::Usage;

/// Sample and beam budget when a mode is given without one.
pub const DEFAULT_BUDGET: usize = 128;
/// Test instances per size.
pub const DEFAULT_COUNT: usize = 1000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<DecodeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// `desk` (default) or `paper`: the base values before overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paradigm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_every: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff_dim: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_only: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Usage(format!("config {}: {}", path.display(), e.message())).into())
    }

    pub fn train(&self) -> TrainSection {
        self.train.clone().unwrap_or_default()
    }

    pub fn encoder(&self) -> EncoderSection {
        self.encoder.clone().unwrap_or_default()
    }

    pub fn decode(&self) -> DecodeSection {
        self.decode.clone().unwrap_or_default()
    }

    pub fn sweep(&self) -> SweepSection {
        self.sweep.clone().unwrap_or_default()
    }

    /// Writes the file as TOML, headed by `comment` lines.
    pub fn echo(&self, path: &Path, comment: &[String]) -> Result<()> {
        let mut text: String = comment.iter().map(|c| format!("# {c}\n")).collect();
        text.push_str(&toml::to_string(self)?);
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn parsed<T: std::str::FromStr<Err = tspnco::Error>>(v: Option<String>) -> Result<Option<T>> {
    v.map(|s| s.parse::<T>().map_err(|e| Usage(e.to_string()).into()))
        .transpose()
}

/// Builds the training configuration and the matching resolved file.
pub fn resolve_train(file: &FileConfig, flags: TrainSection, encoder_flag: Option<String>) -> Result<(TrainConfig, FileConfig)> {
    let t = merge_train(file.train(), flags);
    let mut e = file.encoder();
    if encoder_flag.is_some() {
        e.kind = encoder_flag;
    }
    let paradigm = parsed::<Paradigm>(t.paradigm.clone())?.unwrap_or(Paradigm::Rl);
    let mut config = match t.preset.as_deref().unwrap_or("desk") {
        "desk" => TrainConfig::desk(paradigm),
        "paper" => TrainConfig {
            paradigm,
            ..TrainConfig::default()
        },
        other => return Err(Usage(format!("unknown preset `{other}` (expected desk or paper)")).into()),
    };
    if let Some(b) = parsed::<BaselineKind>(t.baseline.clone())? {
        config.baseline = b;
    }
    config.graph_size = t.graph_size.unwrap_or(config.graph_size);
    config.epochs = t.epochs.unwrap_or(config.epochs);
    config.epoch_size = t.epoch_size.unwrap_or(config.epoch_size);
    config.batch_size = t.batch_size.unwrap_or(config.batch_size);
    config.lr = t.lr.unwrap_or(config.lr);
    config.seed = t.seed.unwrap_or(config.seed);
    config.val_size = t.val_size.unwrap_or(config.val_size);
    config.val_every = t.val_every.unwrap_or(config.val_every);
    config.model = resolve_model(file, &e, config.model)?;
    config.validate().map_err(|e| Usage(e.to_string()))?;
    let resolved = FileConfig {
        train: Some(train_section(&config, t.preset.unwrap_or_else(|| "desk".into()))),
        encoder: Some(encoder_section(&config.model.encoder)),
        model: Some(ModelSection {
            clip: Some(config.model.clip),
        }),
        ..FileConfig::default()
    };
    Ok((config, resolved))
}

fn merge_train(base: TrainSection, over: TrainSection) -> TrainSection {
    TrainSection {
        preset: over.preset.or(base.preset),
        paradigm: over.paradigm.or(base.paradigm),
        baseline: over.baseline.or(base.baseline),
        graph_size: over.graph_size.or(base.graph_size),
        epochs: over.epochs.or(base.epochs),
        epoch_size: over.epoch_size.or(base.epoch_size),
        batch_size: over.batch_size.or(base.batch_size),
        lr: over.lr.or(base.lr),
        seed: over.seed.or(base.seed),
        val_size: over.val_size.or(base.val_size),
        val_every: over.val_every.or(base.val_every),
    }
}

fn resolve_model(file: &FileConfig, e: &EncoderSection, base: ModelConfig) -> Result<ModelConfig> {
    let mut enc = base.encoder;
    if let Some(k) = parsed(e.kind.clone())? {
        enc.kind = k;
    }
    enc.layers = e.layers.unwrap_or(enc.layers);
    enc.embed_dim = e.embed_dim.unwrap_or(enc.embed_dim);
    enc.heads = e.heads.unwrap_or(enc.heads);
    enc.ff_dim = e.ff_dim.unwrap_or(enc.ff_dim);
    let clip = file.model.as_ref().and_then(|m| m.clip).unwrap_or(base.clip);
    Ok(ModelConfig { encoder: enc, clip })
}

fn train_section(c: &TrainConfig, preset: String) -> TrainSection {
    TrainSection {
        preset: Some(preset),
        paradigm: Some(c.paradigm.as_str().into()),
        baseline: Some(c.baseline.as_str().into()),
        graph_size: Some(c.graph_size),
        epochs: Some(c.epochs),
        epoch_size: Some(c.epoch_size),
        batch_size: Some(c.batch_size),
        lr: Some(c.lr),
        seed: Some(c.seed),
        val_size: Some(c.val_size),
        val_every: Some(c.val_every),
    }
}

fn encoder_section(e: &EncoderConfig) -> EncoderSection {
    EncoderSection {
        kind: Some(e.kind.as_str().into()),
        layers: Some(e.layers),
        embed_dim: Some(e.embed_dim),
        heads: Some(e.heads),
        ff_dim: Some(e.ff_dim),
    }
}

/// Parses one decode mode; a bare `sample` or `beam` takes `budget`.
pub fn parse_mode(s: &str, budget: usize) -> Result<DecodeMode> {
    match s.trim() {
        "sample" => Ok(DecodeMode::Sample { k: budget }),
        "beam" => Ok(DecodeMode::Beam { width: budget }),
        other => other.parse().map_err(|e: tspnco::Error| Usage(e.to_string()).into()),
    }
}

/// Decode modes from a comma list flag, else the file, else greedy.
pub fn resolve_decode(file: &FileConfig, flag: Option<&str>, seed_flag: Option<u64>) -> Result<(Vec<DecodeConfig>, DecodeSection)> {
    let d = file.decode();
    let budget = d.budget.unwrap_or(DEFAULT_BUDGET);
    if budget == 0 {
        return Err(Usage("decode budget must be positive".into()).into());
    }
    let seed = seed_flag.or(d.seed).unwrap_or(0);
    let names: Vec<String> = match flag {
        Some(f) => f.split(',').map(str::to_string).collect(),
        None => d.modes.unwrap_or_else(|| vec!["greedy".into()]),
    };
    let modes = names
        .iter()
        .map(|s| parse_mode(s, budget))
        .collect::<Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(Usage("no decode modes given".into()).into());
    }
    let section = DecodeSection {
        modes: Some(modes.iter().map(ToString::to_string).collect()),
        seed: Some(seed),
        budget: Some(budget),
    };
    Ok((modes.into_iter().map(|mode| DecodeConfig { mode, seed }).collect(), section))
}

/// Sweep parameters from flags, else the file, else defaults.
pub fn resolve_sweep(
    file: &FileConfig,
    sizes: Option<Vec<usize>>,
    count: Option<usize>,
    seed: Option<u64>,
    exact_only: bool,
    decodes: Vec<DecodeConfig>,
) -> Result<(SweepSpec, bool, SweepSection)> {
    let s = file.sweep();
    let spec = SweepSpec {
        sizes: sizes.or(s.sizes).unwrap_or_else(|| vec![5, 10, 15, 20]),
        count: count.or(s.count).unwrap_or(DEFAULT_COUNT),
        decodes,
        seed: seed.or(s.seed).unwrap_or(0),
    };
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    let exact_only = exact_only || s.exact_only.unwrap_or(false);
    let section = SweepSection {
        sizes: Some(spec.sizes.clone()),
        count: Some(spec.count),
        seed: Some(spec.seed),
        exact_only: Some(exact_only),
    };
    Ok((spec, exact_only, section))
}
