//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use framewise::ModelConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    /// Frame roles used by sample, eval and attention analysis.
    pub mode: ModeSection,
    pub gen_data: GenDataSection,
    pub pretrain: TrainSection,
    pub adapt: AdaptSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub attention: AttentionSection,
    pub drift: DriftSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("out"),
            model: ModelSection::default(),
            mode: ModeSection::default(),
            gen_data: GenDataSection::default(),
            pretrain: TrainSection::default(),
            adapt: AdaptSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            attention: AttentionSection::default(),
            drift: DriftSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub frames: usize,
    pub side: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub blocks: usize,
    pub frame_pos_embed: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            frames: m.frames,
            side: 8,
            hidden: m.hidden,
            time_embed_dim: m.time_embed_dim,
            blocks: m.blocks,
            frame_pos_embed: m.frame_pos_embed,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            frame_dim: self.side * self.side,
            hidden: self.hidden,
            time_embed_dim: self.time_embed_dim,
            blocks: self.blocks,
            num_labels: framewise::data::NUM_DIRECTIONS,
            frame_pos_embed: self.frame_pos_embed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataSection {
    pub count: usize,
    /// Index of the first sample; held-out sets start past the training set.
    pub first: u64,
    pub workers: usize,
    /// Frames of the first few videos written as PGM images.
    pub preview: usize,
}

impl Default for GenDataSection {
    fn default() -> Self {
        Self {
            count: 1000,
            first: 0,
            workers: 1,
            preview: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub data: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Save a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = framewise::train::TrainConfig::pretrain();
        Self {
            data: PathBuf::from("out/dataset.fvck"),
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub base: PathBuf,
    pub data: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_async: f64,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub checkpoint_every: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let t = framewise::train::TrainConfig::adapt();
        let m = ModelConfig::default();
        Self {
            base: PathBuf::from("out/base.fvck"),
            data: PathBuf::from("out/dataset.fvck"),
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            p_async: t.p_async,
            rank: m.lora_rank,
            alpha: m.lora_alpha,
            targets: framewise::model::DEFAULT_LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
            checkpoint_every: 0,
        }
    }
}

/// How conditioned frames are chosen. `mode` is one of t2v, i2v,
/// i2v_noisy, start_end, start_end_noisy, complete, extend.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSection {
    pub mode: String,
    pub kappa: f64,
    pub kappa_end: f64,
    pub head: usize,
    pub tail: usize,
    pub extend: usize,
}

impl Default for ModeSection {
    fn default() -> Self {
        Self {
            mode: "i2v".into(),
            kappa: 0.3,
            kappa_end: 0.7,
            head: 3,
            tail: 3,
            extend: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub ckpt: PathBuf,
    /// Dataset providing conditioning frames and labels.
    pub data: Option<PathBuf>,
    pub index: usize,
    pub count: usize,
    /// Overrides the dataset label; required when there is no dataset.
    pub label: Option<usize>,
    pub steps: usize,
    pub shift: f64,
    pub workers: usize,
    pub lora_alpha_scale: f64,
    /// Dump attention maps for every step and block.
    pub attention: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            ckpt: PathBuf::from("out/adapted.fvck"),
            data: None,
            index: 0,
            count: 1,
            label: None,
            steps: 10,
            shift: 1.0,
            workers: 1,
            lora_alpha_scale: 1.0,
            attention: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub first: usize,
    pub count: usize,
    pub steps: usize,
    pub shift: f64,
    pub workers: usize,
    pub lora_alpha_scale: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ckpt: PathBuf::from("out/adapted.fvck"),
            data: PathBuf::from("out/heldout/dataset.fvck"),
            first: 0,
            count: 50,
            steps: 10,
            shift: 1.0,
            workers: 1,
            lora_alpha_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    pub ckpt: PathBuf,
    /// A second checkpoint reported side by side.
    pub compare: Option<PathBuf>,
    pub data: PathBuf,
    pub index: usize,
    pub steps: usize,
    pub shift: f64,
    pub record: Vec<usize>,
    /// Defaults to the final block.
    pub block: Option<usize>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            ckpt: PathBuf::from("out/adapted.fvck"),
            compare: None,
            data: PathBuf::from("out/heldout/dataset.fvck"),
            index: 0,
            steps: 10,
            shift: 1.0,
            record: framewise::analysis::DEFAULT_ATTENTION_STEPS.to_vec(),
            block: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSection {
    pub base: PathBuf,
    pub adapted: PathBuf,
    pub top: usize,
}

impl Default for DriftSection {
    fn default() -> Self {
        Self {
            base: PathBuf::from("out/base.fvck"),
            adapted: PathBuf::from("out/adapted.fvck"),
            top: 20,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
