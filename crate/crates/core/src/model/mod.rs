//! Frame-aware velocity network.
//!
//! Each frame's timestep is embedded separately and, together with the
//! label embedding, drives that frame's modulation (shift, scale, gate for
//! the attention branch and for the MLP branch) inside every block.
//! Single-head self-attention over the frame axis is the only place frames
//! interact.

mod checkpoint;
mod config;

pub use checkpoint::{block_index, Checkpoint, LoraPair, ModuleKind, DEFAULT_LORA_TARGETS};
pub use config::ModelConfig;

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::timestep::{embed_timesteps, VectorTimestep};

pub const NORM_EPS: f64 = 1e-6;

/// Which checkpoint tensors become gradient-carrying leaves when bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Lora,
}

/// A checkpoint bound onto a tape.
pub struct BoundModel<'a> {
    config: &'a ModelConfig,
    params: BTreeMap<&'a str, Var>,
    lora: BTreeMap<&'a str, (Var, Var)>,
    lora_scale: f64,
}

impl<'a> BoundModel<'a> {
    pub fn bind(tape: &mut Tape, ckpt: &'a Checkpoint, trainable: Trainable) -> Self {
        let params = ckpt
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable == Trainable::Base {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.as_str(), v)
            })
            .collect();
        let lora = ckpt
            .lora
            .iter()
            .map(|(name, pair)| {
                let (a, b) = if trainable == Trainable::Lora {
                    (tape.param(pair.a.clone()), tape.param(pair.b.clone()))
                } else {
                    (tape.constant(pair.a.clone()), tape.constant(pair.b.clone()))
                };
                (name.as_str(), (a, b))
            })
            .collect();
        Self {
            config: &ckpt.config,
            params,
            lora,
            lora_scale: ckpt.config.lora_scale(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Leaves that receive gradients, by checkpoint entry name
    /// (`<weight>.lora_a` / `.lora_b` for low-rank factors).
    pub fn trainable_vars(&self, tape: &Tape) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .params
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(n, &v)| (n.to_string(), v))
            .collect();
        for (n, &(a, b)) in &self.lora {
            if tape.requires_grad(a) {
                out.push((format!("{n}.lora_a"), a));
                out.push((format!("{n}.lora_b"), b));
            }
        }
        out
    }

    fn p(&self, name: &str) -> Var {
        self.params[name]
    }

    /// `x W (+ scale (x A) B) (+ b)`.
    fn linear(&self, tape: &mut Tape, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
        let mut y = tape.matmul(x, self.p(weight))?;
        if let Some(&(a, b)) = self.lora.get(weight) {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let delta = tape.scale(xab, self.lora_scale);
            y = tape.add(y, delta)?;
        }
        if let Some(bias) = bias {
            y = tape.add_row(y, self.p(bias))?;
        }
        Ok(y)
    }

    /// `x * (1 + scale) + shift`
    fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let s = tape.add_scalar(scale, 1.0);
        let y = tape.mul(x, s)?;
        tape.add(y, shift)
    }

    /// Per-frame conditioning `gelu(time_mlp(embed(tau)) + label_row)`, `N x D`.
    fn conditioning(&self, tape: &mut Tape, tau: &[f64], label: usize) -> Result<Var> {
        let temb = tape.constant(embed_timesteps(tau, self.config.time_embed_dim)?);
        let c = self.linear(tape, temb, "time.fc1.w", Some("time.fc1.b"))?;
        let c = tape.gelu(c);
        let c = self.linear(tape, c, "time.fc2.w", Some("time.fc2.b"))?;
        let lab = tape.select_row(self.p("label.table"), label)?;
        let c = tape.add_row(c, lab)?;
        Ok(tape.gelu(c))
    }

    fn check_inputs(&self, tape: &Tape, z: Var, tau: &[f64], label: usize) -> Result<()> {
        let cfg = self.config;
        let shape = tape.value(z).shape();
        if shape != [cfg.frames, cfg.frame_dim] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![cfg.frames, cfg.frame_dim],
                rhs: shape.to_vec(),
            });
        }
        if tau.len() != cfg.frames {
            return Err(Error::ShapeMismatch {
                op: "forward timesteps",
                lhs: vec![cfg.frames],
                rhs: vec![tau.len()],
            });
        }
        VectorTimestep::new(tau.to_vec())?;
        if label >= cfg.num_labels {
            return Err(Error::invalid(format!("label {label} outside [0, {})", cfg.num_labels)));
        }
        Ok(())
    }

    /// Record one forward pass. When `attention` is given, the softmaxed
    /// `N x N` map of every block is pushed onto it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        tau: &[f64],
        label: usize,
        mut attention: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        self.check_inputs(tape, z, tau, label)?;
        let hidden = self.config.hidden;
        let att_scale = 1.0 / (hidden as f64).sqrt();

        let cond = self.conditioning(tape, tau, label)?;
        let mut h = self.linear(tape, z, "input.w", Some("input.b"))?;
        if self.config.frame_pos_embed {
            h = tape.add(h, self.p("frame_pos.table"))?;
        }

        for b in 0..self.config.blocks {
            let m = self.linear(tape, cond, &format!("block.{b}.mod.w"), Some(&format!("block.{b}.mod.b")))?;
            let chunk = |tape: &mut Tape, i: usize| tape.slice_cols(m, i * hidden, hidden);
            let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
            let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

            let x = tape.rms_norm(h, NORM_EPS)?;
            let x = Self::modulate(tape, x, shift1, scale1)?;
            let q = self.linear(tape, x, &format!("block.{b}.attn.wq"), None)?;
            let k = self.linear(tape, x, &format!("block.{b}.attn.wk"), None)?;
            let v = self.linear(tape, x, &format!("block.{b}.attn.wv"), None)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, att_scale);
            let att = tape.softmax_rows(scores)?;
            if let Some(rec) = attention.as_deref_mut() {
                rec.push(tape.value(att).clone());
            }
            let o = tape.matmul(att, v)?;
            let o = self.linear(tape, o, &format!("block.{b}.attn.wo"), None)?;
            let o = tape.mul(gate1, o)?;
            h = tape.add(h, o)?;

            let x = tape.rms_norm(h, NORM_EPS)?;
            let x = Self::modulate(tape, x, shift2, scale2)?;
            let f = self.linear(tape, x, &format!("block.{b}.mlp.fc1.w"), Some(&format!("block.{b}.mlp.fc1.b")))?;
            let f = tape.gelu(f);
            let f = self.linear(tape, f, &format!("block.{b}.mlp.fc2.w"), Some(&format!("block.{b}.mlp.fc2.b")))?;
            let f = tape.mul(gate2, f)?;
            h = tape.add(h, f)?;
        }

        let fm = self.linear(tape, cond, "final.mod.w", Some("final.mod.b"))?;
        let shift = tape.slice_cols(fm, 0, hidden)?;
        let scale = tape.slice_cols(fm, hidden, hidden)?;
        let x = tape.rms_norm(h, NORM_EPS)?;
        let x = Self::modulate(tape, x, shift, scale)?;
        self.linear(tape, x, "head.w", Some("head.b"))
    }

    /// Per-block modulation matrices (`N x 6D`: shift1, scale1, gate1,
    /// shift2, scale2, gate2).
    pub fn modulation(&self, tape: &mut Tape, tau: &[f64], label: usize) -> Result<Vec<Tensor>> {
        VectorTimestep::new(tau.to_vec())?;
        let cond = self.conditioning(tape, tau, label)?;
        (0..self.config.blocks)
            .map(|b| {
                let m = self.linear(tape, cond, &format!("block.{b}.mod.w"), Some(&format!("block.{b}.mod.b")))?;
                Ok(tape.value(m).clone())
            })
            .collect()
    }
}

/// Softmaxed frame-to-frame attention, one `N x N` map per block.
pub type AttentionMaps = Vec<Tensor>;

/// Velocity `v(Z, tau, label)`.
pub fn forward(ckpt: &Checkpoint, z: &Tensor, tau: &[f64], label: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, ckpt, Trainable::Nothing);
    let zv = tape.constant(z.clone());
    let out = model.forward(&mut tape, zv, tau, label, None)?;
    Ok(tape.value(out).clone())
}

/// Scalar-timestep model: `forward` with `t` broadcast to every frame.
pub fn forward_scalar(ckpt: &Checkpoint, z: &Tensor, t: f64, label: usize) -> Result<Tensor> {
    let tau = VectorTimestep::synchronized(ckpt.config.frames, t)?;
    forward(ckpt, z, tau.values(), label)
}

pub fn forward_with_attention(
    ckpt: &Checkpoint,
    z: &Tensor,
    tau: &[f64],
    label: usize,
) -> Result<(Tensor, AttentionMaps)> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, ckpt, Trainable::Nothing);
    let zv = tape.constant(z.clone());
    let mut maps = Vec::with_capacity(ckpt.config.blocks);
    let out = model.forward(&mut tape, zv, tau, label, Some(&mut maps))?;
    Ok((tape.value(out).clone(), maps))
}

pub fn modulation_vectors(ckpt: &Checkpoint, tau: &[f64], label: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, ckpt, Trainable::Nothing);
    model.modulation(&mut tape, tau, label)
}
