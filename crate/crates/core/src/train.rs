//! Adam training loops over the flow-matching objective.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::fafm_loss_on_tape;
use crate::model::{BoundModel, Checkpoint, Trainable};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Every base parameter trains; timesteps are always synchronized.
    Pretrain,
    /// Only low-rank factors train; the base is frozen.
    Adapt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub p_async: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            p_async: 0.0,
            batch_size: 8,
            steps: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
        }
    }

    pub fn adapt() -> Self {
        Self {
            mode: TrainMode::Adapt,
            p_async: 1.0,
            steps: 1000,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == TrainMode::Pretrain && self.p_async != 0.0 {
            return Err(Error::invalid("pretraining uses synchronized timesteps (p_async = 0)"));
        }
        if !(0.0..=1.0).contains(&self.p_async) {
            return Err(Error::invalid("p_async outside [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("invalid Adam hyperparameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut data = param.data().to_vec();
        for (i, (&g, p)) in grad.data().iter().zip(data.iter_mut()).enumerate() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        *param = Tensor::new(param.shape().to_vec(), data)?;
        Ok(())
    }
}

/// Dataset indices for one step, uniform with replacement from the
/// `(seed, Batch, step)` stream.
pub fn batch_indices(dataset_len: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, Domain::Batch, step as u64);
    (0..batch_size).map(|_| r.gen_range(0..dataset_len)).collect()
}

pub fn train(ckpt: &Checkpoint, dataset: &[(Tensor, usize)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ckpt, dataset, cfg, |_, _, _| Ok(()))
}

/// Train, calling `on_step(step, checkpoint, loss)` after every update.
pub fn train_with<F>(
    ckpt: &Checkpoint,
    dataset: &[(Tensor, usize)],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Checkpoint, f64) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let trainable = match cfg.mode {
        TrainMode::Pretrain => Trainable::Base,
        TrainMode::Adapt => {
            if !ckpt.has_lora() {
                return Err(Error::invalid("adapt mode needs a checkpoint with low-rank factors attached"));
            }
            Trainable::Lora
        }
    };

    let mut current = ckpt.clone();
    let mut adam = Adam::new(cfg);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = batch_indices(dataset.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<(&Tensor, usize)> = idx.iter().map(|&i| (&dataset[i].0, dataset[i].1)).collect();
        let step_seed = rng::mix(cfg.seed, step as u64);

        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &current, trainable);
        let vars = model.trainable_vars(&tape);
        let loss = fafm_loss_on_tape(&mut tape, &model, &batch, cfg.p_async, step_seed)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss_value} at step {step}")));
        }
        losses.push(loss_value);
        drop(model);
        let mut grads = tape.backward(loss)?;

        adam.begin_step();
        for (name, var) in vars {
            let Some(g) = grads.take(var) else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}` at step {step}")));
            }
            let slot = lookup_mut(&mut current, &name)?;
            adam.update(&name, slot, &g)?;
        }
        on_step(step, &current, loss_value)?;
    }
    Ok(TrainOutcome {
        checkpoint: current,
        losses,
    })
}

fn lookup_mut<'a>(ckpt: &'a mut Checkpoint, name: &str) -> Result<&'a mut Tensor> {
    if let Some(base) = name.strip_suffix(".lora_a") {
        return ckpt
            .lora
            .get_mut(base)
            .map(|p| &mut p.a)
            .ok_or_else(|| Error::MissingEntry(name.to_string()));
    }
    if let Some(base) = name.strip_suffix(".lora_b") {
        return ckpt
            .lora
            .get_mut(base)
            .map(|p| &mut p.b)
            .ok_or_else(|| Error::MissingEntry(name.to_string()));
    }
    ckpt.params.get_mut(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
}

/// `step,loss` CSV.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Mean of the first and last `window` losses.
pub fn loss_window_means(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}
