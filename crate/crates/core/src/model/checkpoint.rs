//! Named parameters plus optional low-rank deltas.

use std::collections::BTreeMap;
use std::path::Path;

use glob::Pattern;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{self, NamedTensors};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

pub const CONFIG_ENTRY: &str = "meta.config";
const LORA_A_SUFFIX: &str = ".lora_a";
const LORA_B_SUFFIX: &str = ".lora_b";

/// Attention projections and modulation projections.
pub const DEFAULT_LORA_TARGETS: &[&str] = &["block.*.attn.w?", "*.mod.w"];

/// Low-rank delta for a weight `W: in x out`, applied as
/// `x W + scale * (x A) B` with `A: in x r`, `B: r x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    pub fn delta(&self, scale: f64) -> Result<Tensor> {
        Ok(self.a.matmul(&self.b)?.scale(scale))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub lora: BTreeMap<String, LoraPair>,
}

/// Kind of module a parameter belongs to, for drift aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    Attention,
    Modulation,
    Mlp,
    Embedding,
    Head,
}

impl ModuleKind {
    pub fn of(name: &str) -> Self {
        if name.contains(".attn.") {
            ModuleKind::Attention
        } else if name.contains(".mod.") {
            ModuleKind::Modulation
        } else if name.contains(".mlp.") {
            ModuleKind::Mlp
        } else if name.starts_with("head.") {
            ModuleKind::Head
        } else {
            ModuleKind::Embedding
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModuleKind::Attention => "attention",
            ModuleKind::Modulation => "modulation",
            ModuleKind::Mlp => "mlp",
            ModuleKind::Embedding => "embedding",
            ModuleKind::Head => "head",
        }
    }
}

/// Block index encoded in a `block.<i>.` name.
pub fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("block.")?.split('.').next()?.parse().ok()
}

enum Init {
    /// Gaussian with standard deviation `1 / sqrt(rows)`.
    FanIn,
    Zero,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, [usize; 2], Init)> {
    let (n, d, h, dt, l) = (cfg.frames, cfg.frame_dim, cfg.hidden, cfg.time_embed_dim, cfg.num_labels);
    let mlp = cfg.mlp_hidden();
    let mut specs = vec![
        ("input.w".to_string(), [d, h], Init::FanIn),
        ("input.b".to_string(), [1, h], Init::Zero),
        ("time.fc1.w".to_string(), [dt, h], Init::FanIn),
        ("time.fc1.b".to_string(), [1, h], Init::Zero),
        ("time.fc2.w".to_string(), [h, h], Init::FanIn),
        ("time.fc2.b".to_string(), [1, h], Init::Zero),
        ("label.table".to_string(), [l, h], Init::FanIn),
    ];
    if cfg.frame_pos_embed {
        specs.push(("frame_pos.table".to_string(), [n, h], Init::FanIn));
    }
    for b in 0..cfg.blocks {
        let p = format!("block.{b}");
        specs.push((format!("{p}.mod.w"), [h, 6 * h], Init::Zero));
        specs.push((format!("{p}.mod.b"), [1, 6 * h], Init::Zero));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{p}.attn.{w}"), [h, h], Init::FanIn));
        }
        specs.push((format!("{p}.mlp.fc1.w"), [h, mlp], Init::FanIn));
        specs.push((format!("{p}.mlp.fc1.b"), [1, mlp], Init::Zero));
        specs.push((format!("{p}.mlp.fc2.w"), [mlp, h], Init::FanIn));
        specs.push((format!("{p}.mlp.fc2.b"), [1, h], Init::Zero));
    }
    specs.push(("final.mod.w".to_string(), [h, 2 * h], Init::Zero));
    specs.push(("final.mod.b".to_string(), [1, 2 * h], Init::Zero));
    specs.push(("head.w".to_string(), [h, d], Init::Zero));
    specs.push(("head.b".to_string(), [1, d], Init::Zero));
    specs
}

impl Checkpoint {
    /// Fresh base model. Modulation projections (hence every gate) and the
    /// output head start at zero, so each block is the identity and the
    /// network outputs the zero field.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (i, (name, shape, init)) in param_specs(config).into_iter().enumerate() {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::FanIn => {
                    let mut rng = rng::stream(seed, Domain::Init, i as u64);
                    let std = 1.0 / (shape[0] as f64).sqrt();
                    let data = rng::normal_vec(&mut rng, shape[0] * shape[1]);
                    Tensor::new(shape.to_vec(), data)?.scale(std)
                }
            };
            params.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            params,
            lora: BTreeMap::new(),
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn has_lora(&self) -> bool {
        !self.lora.is_empty()
    }

    /// Attach zero-delta low-rank factors to every base weight matching one
    /// of `targets` (glob patterns over parameter names). `A` is Gaussian
    /// with standard deviation `1 / sqrt(in)`, `B` is zero.
    pub fn attach_lora(&self, targets: &[&str], rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid("LoRA alpha must be positive"));
        }
        let patterns = targets
            .iter()
            .map(|t| Pattern::new(t).map_err(|e| Error::invalid(format!("bad target pattern `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<&String> = self
            .params
            .keys()
            .filter(|name| name.ends_with(".w") || name.contains(".attn.w"))
            .filter(|name| patterns.iter().any(|p| p.matches(name)))
            .collect();
        if names.is_empty() {
            return Err(Error::invalid(format!("LoRA targets {targets:?} match no weight")));
        }
        let mut out = self.clone();
        out.config.lora_rank = rank;
        out.config.lora_alpha = alpha;
        out.lora.clear();
        for (i, name) in names.into_iter().enumerate() {
            let w = &self.params[name];
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let mut rng = rng::stream(seed, Domain::Lora, i as u64);
            let a = Tensor::matrix(fan_in, rank, rng::normal_vec(&mut rng, fan_in * rank))?
                .scale(1.0 / (fan_in as f64).sqrt());
            let b = Tensor::zeros(&[rank, fan_out]);
            out.lora.insert(name.clone(), LoraPair { a, b });
        }
        Ok(out)
    }

    /// Weight as seen by the forward pass: base plus scaled low-rank delta.
    pub fn effective(&self, name: &str) -> Result<Tensor> {
        let w = self.param(name)?;
        match self.lora.get(name) {
            Some(pair) => w.add(&pair.delta(self.config.lora_scale())?),
            None => Ok(w.clone()),
        }
    }

    /// Fold every low-rank delta into its base weight.
    pub fn merged(&self) -> Result<Self> {
        let mut params = self.params.clone();
        for name in self.lora.keys() {
            params.insert(name.clone(), self.effective(name)?);
        }
        Ok(Self {
            config: self.config.clone(),
            params,
            lora: BTreeMap::new(),
        })
    }

    /// Same checkpoint with the low-rank scale multiplied by `factor`.
    pub fn with_lora_alpha_scale(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(Error::invalid("LoRA alpha scale must be non-negative"));
        }
        let mut out = self.clone();
        out.config.lora_alpha *= factor;
        Ok(out)
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        out.insert(CONFIG_ENTRY.to_string(), self.config.to_tensor());
        for (name, t) in &self.params {
            out.insert(name.clone(), t.clone());
        }
        for (name, pair) in &self.lora {
            out.insert(format!("{name}{LORA_A_SUFFIX}"), pair.a.clone());
            out.insert(format!("{name}{LORA_B_SUFFIX}"), pair.b.clone());
        }
        out
    }

    pub fn from_named(mut entries: NamedTensors) -> Result<Self> {
        let config = ModelConfig::from_tensor(
            &entries
                .remove(CONFIG_ENTRY)
                .ok_or_else(|| Error::MissingEntry(CONFIG_ENTRY.to_string()))?,
        )?;
        let mut params = BTreeMap::new();
        let mut a_factors = BTreeMap::new();
        let mut b_factors = BTreeMap::new();
        for (name, t) in entries {
            if let Some(base) = name.strip_suffix(LORA_A_SUFFIX) {
                a_factors.insert(base.to_string(), t);
            } else if let Some(base) = name.strip_suffix(LORA_B_SUFFIX) {
                b_factors.insert(base.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        for (name, shape, _) in param_specs(&config) {
            let t = params.get(&name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint entry",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut lora = BTreeMap::new();
        for (name, a) in a_factors {
            let b = b_factors
                .remove(&name)
                .ok_or_else(|| Error::MissingEntry(format!("{name}{LORA_B_SUFFIX}")))?;
            let w = params
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("low-rank pair for unknown weight `{name}`")))?;
            let ok = a.rank() == 2
                && b.rank() == 2
                && a.shape()[0] == w.shape()[0]
                && b.shape()[1] == w.shape()[1]
                && a.shape()[1] == config.lora_rank
                && b.shape()[0] == config.lora_rank;
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "low-rank pair",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            lora.insert(name, LoraPair { a, b });
        }
        if let Some(orphan) = b_factors.keys().next() {
            return Err(Error::MissingEntry(format!("{orphan}{LORA_A_SUFFIX}")));
        }
        Ok(Self { config, params, lora })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_named(path, &self.to_named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(io::load_named(path)?)
    }

    /// Round every value to f32 storage precision, as a save/load would.
    pub fn quantized(&self) -> Result<Self> {
        let q = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v as f32)).collect());
        Ok(Self {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| Ok((k.clone(), q(v)?)))
                .collect::<Result<_>>()?,
            lora: self
                .lora
                .iter()
                .map(|(k, p)| Ok((k.clone(), LoraPair { a: q(&p.a)?, b: q(&p.b)? })))
                .collect::<Result<_>>()?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
            && self.lora.values().all(|p| p.a.is_finite() && p.b.is_finite())
    }
}
