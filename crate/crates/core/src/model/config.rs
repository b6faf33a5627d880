use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of the velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub frame_dim: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub blocks: usize,
    pub num_labels: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Learned per-frame position embedding. Off by default: with it off the
    /// network is equivariant to frame permutations.
    pub frame_pos_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            frame_dim: 64,
            hidden: 64,
            time_embed_dim: 32,
            blocks: 2,
            num_labels: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
            frame_pos_embed: false,
        }
    }
}

const CONFIG_VERSION: f64 = 1.0;

impl ModelConfig {
    pub const MLP_RATIO: usize = 4;

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * Self::MLP_RATIO
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("frame_dim", self.frame_dim),
            ("hidden", self.hidden),
            ("time_embed_dim", self.time_embed_dim),
            ("blocks", self.blocks),
            ("num_labels", self.num_labels),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model config `{name}` must be positive")));
            }
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be even"));
        }
        if !(self.lora_alpha > 0.0) || !self.lora_alpha.is_finite() {
            return Err(Error::invalid("lora_alpha must be positive"));
        }
        Ok(())
    }

    /// Serialized as the `meta.config` checkpoint entry.
    pub fn to_tensor(&self) -> Tensor {
        let values = vec![
            CONFIG_VERSION,
            self.frames as f64,
            self.frame_dim as f64,
            self.hidden as f64,
            self.time_embed_dim as f64,
            self.blocks as f64,
            self.num_labels as f64,
            self.lora_rank as f64,
            self.lora_alpha,
            if self.frame_pos_embed { 1.0 } else { 0.0 },
        ];
        Tensor::new(vec![values.len()], values).expect("config tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if v.len() != 10 || v[0] != CONFIG_VERSION {
            return Err(Error::invalid("unrecognized meta.config entry"));
        }
        let int = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::invalid(format!("meta.config field {x} is not a count")))
            }
        };
        let cfg = Self {
            frames: int(v[1])?,
            frame_dim: int(v[2])?,
            hidden: int(v[3])?,
            time_embed_dim: int(v[4])?,
            blocks: int(v[5])?,
            num_labels: int(v[6])?,
            lora_rank: int(v[7])?,
            lora_alpha: v[8],
            frame_pos_embed: v[9] != 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configs are compatible when they describe the same base network;
    /// LoRA hyperparameters may differ.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.frames == other.frames
            && self.frame_dim == other.frame_dim
            && self.hidden == other.hidden
            && self.time_embed_dim == other.time_embed_dim
            && self.blocks == other.blocks
            && self.num_labels == other.num_labels
            && self.frame_pos_embed == other.frame_pos_embed
    }
}
