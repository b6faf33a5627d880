//! Finite-difference checks of tape gradients, for single ops and for the
//! whole model.

use crate::autodiff::{Tape, Var};
use crate::flow::fafm_loss_on_tape;
use crate::model::{BoundModel, Checkpoint, ModelConfig, Trainable, DEFAULT_LORA_TARGETS};
use crate::rng::{self, Domain};
use crate::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
/// Denominator floor for relative error, so that near-zero gradients are
/// compared on an absolute scale well above central-difference roundoff.
pub const GRAD_FLOOR: f64 = 1e-4;
/// Random instances per case.
pub const INSTANCES: u64 = 3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Small model that still exercises every code path.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        frames: 3,
        frame_dim: 4,
        hidden: 8,
        time_embed_dim: 6,
        blocks: 2,
        num_labels: 3,
        lora_rank: 2,
        lora_alpha: 4.0,
        frame_pos_embed: true,
    }
}

/// Checkpoint with every tensor drawn at random, so no branch is switched
/// off by a zero-initialized gate or head.
pub fn randomized(cfg: &ModelConfig, seed: u64, scale: f64) -> Checkpoint {
    let mut ck = Checkpoint::init(cfg, seed).expect("valid config");
    for (k, t) in ck.params.values_mut().enumerate() {
        *t = Tensor::seeded_randn(t.shape(), seed * 1000 + k as u64).scale(scale);
    }
    ck
}

/// Replace every zero-initialized LoRA `B` with random values.
pub fn randomize_lora(ck: &mut Checkpoint, seed: u64, scale: f64) {
    for (k, pair) in ck.lora.values_mut().enumerate() {
        pair.b = Tensor::seeded_randn(pair.b.shape(), seed * 1000 + 500 + k as u64).scale(scale);
    }
}

/// Worst relative error of the tape gradient of `f(inputs)` against central
/// differences. The output is contracted with a fixed random tensor so every
/// entry contributes with a distinct weight.
pub fn check_op<F>(inputs: &[Tensor], weight_seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let loss_of = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(Tensor::seeded_randn(&shape, weight_seed));
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let l = loss_of(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let l = loss_of(&mut tape, &vars)?;
    let grads = tape.backward(l)?;

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for k in 0..x.len() {
            let bump = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut d = xs[i].data().to_vec();
                d[k] += delta;
                xs[i] = Tensor::new(xs[i].shape().to_vec(), d)?;
                eval(&xs)
            };
            let numeric = (bump(FD_STEP)? - bump(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable operation with an input generator.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(u64) -> Vec<Tensor>,
    pub op: OpFn,
}

impl OpCase {
    /// Worst error over the random instances.
    pub fn worst(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for s in 0..INSTANCES {
            worst = worst.max(check_op(&(self.inputs)(s), 900 + s, self.op)?);
        }
        Ok(worst)
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::seeded_randn(shape, seed)
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = randn(shape, seed);
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs() + 0.5).collect()).expect("same shape")
}

/// Every tape operation.
pub fn op_cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, |$s:ident| $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            OpCase {
                name: $name,
                inputs: |$s| $inputs,
                op: |$t, $v| $body,
            }
        };
    }
    vec![
        case!("matmul", |s| vec![randn(&[3, 4], s), randn(&[4, 2], s + 10)], |t, v| t.matmul(v[0], v[1])),
        case!("add", |s| vec![randn(&[2, 3], s), randn(&[2, 3], s + 10)], |t, v| t.add(v[0], v[1])),
        case!("sub", |s| vec![randn(&[2, 3], s), randn(&[2, 3], s + 10)], |t, v| t.sub(v[0], v[1])),
        case!("mul", |s| vec![randn(&[2, 3], s), randn(&[2, 3], s + 10)], |t, v| t.mul(v[0], v[1])),
        case!("mul by scalar", |s| vec![randn(&[2, 3], s), Tensor::scalar(0.7 + s as f64)], |t, v| t
            .mul(v[0], v[1])),
        case!("scale", |s| vec![randn(&[2, 3], s)], |t, v| Ok(t.scale(v[0], -1.7))),
        case!("add_scalar", |s| vec![randn(&[2, 3], s)], |t, v| {
            let y = t.add_scalar(v[0], 2.5);
            Ok(t.square(y))
        }),
        case!("add_row", |s| vec![randn(&[3, 4], s), randn(&[1, 4], s + 10)], |t, v| t.add_row(v[0], v[1])),
        case!("mul_row", |s| vec![randn(&[3, 4], s), randn(&[1, 4], s + 10)], |t, v| t.mul_row(v[0], v[1])),
        case!("transpose", |s| vec![randn(&[2, 5], s)], |t, v| t.transpose(v[0])),
        case!("sin", |s| vec![randn(&[2, 3], s)], |t, v| Ok(t.sin(v[0]))),
        case!("cos", |s| vec![randn(&[2, 3], s)], |t, v| Ok(t.cos(v[0]))),
        case!("gelu", |s| vec![randn(&[3, 3], s).scale(2.0)], |t, v| Ok(t.gelu(v[0]))),
        case!("square", |s| vec![randn(&[2, 3], s)], |t, v| Ok(t.square(v[0]))),
        case!("softmax_rows", |s| vec![randn(&[3, 4], s)], |t, v| t.softmax_rows(v[0])),
        case!("rms_norm", |s| vec![randn(&[3, 5], s)], |t, v| t.rms_norm(v[0], 1e-6)),
        case!("rms_norm near zero", |s| vec![randn(&[2, 4], s).scale(1e-2)], |t, v| t.rms_norm(v[0], 1e-6)),
        case!("select_row", |s| vec![randn(&[4, 3], s)], |t, v| t.select_row(v[0], 2)),
        case!("slice_cols", |s| vec![randn(&[3, 6], s)], |t, v| t.slice_cols(v[0], 2, 3)),
        case!("sum", |s| vec![positive(&[2, 3], s)], |t, v| Ok(t.sum(v[0]))),
        // the same leaf feeding several ops accumulates adjoints
        case!("reused input", |s| vec![randn(&[3, 3], s)], |t, v| {
            let a = t.matmul(v[0], v[0])?;
            let b = t.mul(a, v[0])?;
            t.add(b, v[0])
        }),
    ]
}

/// What a whole-model gradient is taken of.
pub enum Objective {
    /// `sum(W * forward(z, tau, label))` with a fixed random `W`.
    Forward { z: Tensor, tau: Vec<f64>, label: usize, w: Tensor },
    /// The training loss on a batch.
    Loss { data: Vec<(Tensor, usize)>, p_async: f64, seed: u64 },
}

impl Objective {
    /// Random forward objective for `cfg`.
    pub fn forward(cfg: &ModelConfig, seed: u64) -> Self {
        let tau = rng::normal_vec(&mut rng::stream(seed, Domain::Raw, 9), cfg.frames)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        Objective::Forward {
            z: randn(&[cfg.frames, cfg.frame_dim], seed + 40),
            tau,
            label: seed as usize % cfg.num_labels,
            w: randn(&[cfg.frames, cfg.frame_dim], seed + 80),
        }
    }

    fn record(&self, tape: &mut Tape, model: &BoundModel<'_>) -> Result<Var> {
        match self {
            Objective::Forward { z, tau, label, w } => {
                let zv = tape.constant(z.clone());
                let out = model.forward(tape, zv, tau, *label, None)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(out, wv)?;
                Ok(tape.sum(p))
            }
            Objective::Loss { data, p_async, seed } => {
                let b: Vec<(&Tensor, usize)> = data.iter().map(|(x, l)| (x, *l)).collect();
                fafm_loss_on_tape(tape, model, &b, *p_async, *seed)
            }
        }
    }

    fn value(&self, ck: &Checkpoint) -> Result<f64> {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, ck, Trainable::Nothing);
        let v = self.record(&mut tape, &model)?;
        Ok(tape.value(v).item())
    }
}

fn slot_mut<'a>(c: &'a mut Checkpoint, name: &str) -> &'a mut Tensor {
    if let Some(base) = name.strip_suffix(".lora_a") {
        &mut c.lora.get_mut(base).expect("bound lora").a
    } else if let Some(base) = name.strip_suffix(".lora_b") {
        &mut c.lora.get_mut(base).expect("bound lora").b
    } else {
        c.params.get_mut(name).expect("bound parameter")
    }
}

/// Worst relative error over every trainable coordinate, and how many
/// coordinates were checked.
pub fn model_worst(ck: &Checkpoint, trainable: Trainable, objective: &Objective) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, ck, trainable);
    let vars = model.trainable_vars(&tape);
    let loss = objective.record(&mut tape, &model)?;
    drop(model);
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, var) in vars {
        let len = slot_mut(&mut ck.clone(), &name).len();
        for k in 0..len {
            let bump = |delta: f64| {
                let mut c = ck.clone();
                let slot = slot_mut(&mut c, &name);
                let mut d = slot.data().to_vec();
                d[k] += delta;
                *slot = Tensor::new(slot.shape().to_vec(), d)?;
                objective.value(&c)
            };
            let numeric = (bump(FD_STEP)? - bump(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = grads.get(var).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Base weights through the forward pass.
pub fn full_model_base() -> Result<(f64, usize)> {
    let cfg = tiny_config();
    let mut acc = (0.0f64, 0);
    for s in 0..INSTANCES {
        let ck = randomized(&cfg, s + 1, 0.5);
        let (w, n) = model_worst(&ck, Trainable::Base, &Objective::forward(&cfg, s))?;
        acc = (acc.0.max(w), acc.1 + n);
    }
    Ok(acc)
}

/// LoRA factors through the forward pass.
pub fn full_model_lora() -> Result<(f64, usize)> {
    let cfg = tiny_config();
    let mut acc = (0.0f64, 0);
    for s in 0..INSTANCES {
        let mut ck = randomized(&cfg, s + 1, 0.5).attach_lora(DEFAULT_LORA_TARGETS, 2, 4.0, s)?;
        randomize_lora(&mut ck, s, 0.3);
        let (w, n) = model_worst(&ck, Trainable::Lora, &Objective::forward(&cfg, s + 5))?;
        acc = (acc.0.max(w), acc.1 + n);
    }
    Ok(acc)
}

/// Base weights through the training loss.
pub fn training_loss() -> Result<(f64, usize)> {
    // one small-magnitude sample keeps the loss near ||X1 - X0||^2, so the
    // difference quotient is not swamped by cancellation
    let cfg = tiny_config();
    let mut acc = (0.0f64, 0);
    for s in 0..INSTANCES {
        let ck = randomized(&cfg, s + 11, 0.2);
        let objective = Objective::Loss {
            data: vec![(randn(&[3, 4], s).scale(0.1), s as usize % 3)],
            p_async: 0.5,
            seed: 5 + s,
        };
        let (w, n) = model_worst(&ck, Trainable::Base, &objective)?;
        acc = (acc.0.max(w), acc.1 + n);
    }
    Ok(acc)
}
