//! Euler integration of the learned field under a per-frame noise plan.
//!
//! At step `s` every frame `j` moves by `v_j * (sigma[s+1][j] - sigma[s][j])`.
//! Clamped frames have a constant-zero sigma column and therefore never
//! move; partially noised frames follow `kappa * sigma_s`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{self, AttentionMaps, Checkpoint};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use crate::timestep::{compile_plan, FramePlan, FrameRole, NoiseSchedule};

/// A velocity field `v(Z, tau, label)`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, tau: &[f64], label: usize) -> Result<Tensor>;

    /// Velocity plus per-block attention maps, when the field has any.
    fn velocity_with_attention(&self, z: &Tensor, tau: &[f64], label: usize) -> Result<(Tensor, AttentionMaps)> {
        Ok((self.velocity(z, tau, label)?, Vec::new()))
    }
}

impl VelocityField for Checkpoint {
    fn velocity(&self, z: &Tensor, tau: &[f64], label: usize) -> Result<Tensor> {
        model::forward(self, z, tau, label)
    }

    fn velocity_with_attention(&self, z: &Tensor, tau: &[f64], label: usize) -> Result<(Tensor, AttentionMaps)> {
        model::forward_with_attention(self, z, tau, label)
    }
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub roles: Vec<FrameRole>,
    pub schedule: NoiseSchedule,
    pub label: usize,
    /// Clean rows for every clamped or partial frame.
    pub conditioning: BTreeMap<usize, Vec<f64>>,
    pub seed: u64,
}

impl SampleRequest {
    pub fn validate(&self, frame_dim: usize) -> Result<()> {
        if self.roles.is_empty() {
            return Err(Error::invalid("request has no frames"));
        }
        for (j, role) in self.roles.iter().enumerate() {
            match (role.is_conditioned(), self.conditioning.get(&j)) {
                (true, None) => {
                    return Err(Error::invalid(format!("frame {j} ({role}) has no conditioning row")));
                }
                (false, Some(_)) => {
                    return Err(Error::invalid(format!("frame {j} is generated but has a conditioning row")));
                }
                (true, Some(row)) if row.len() != frame_dim => {
                    return Err(Error::ShapeMismatch {
                        op: "conditioning row",
                        lhs: vec![frame_dim],
                        rhs: vec![row.len()],
                    });
                }
                _ => {}
            }
        }
        if let Some(&j) = self.conditioning.keys().find(|&&j| j >= self.roles.len()) {
            return Err(Error::invalid(format!("conditioning row for frame {j} beyond {} frames", self.roles.len())));
        }
        Ok(())
    }
}

/// Starting state: clamped frames are their clean rows, generated frames
/// are standard normal from the `(seed, Sampler, 0)` stream, partial frames
/// sit on their path at `kappa * sigma_1`.
pub fn prepare_initial(request: &SampleRequest, frame_dim: usize) -> Result<Tensor> {
    request.validate(frame_dim)?;
    let frames = request.roles.len();
    let noise = rng::normal_vec(&mut rng::stream(request.seed, Domain::Sampler, 0), frames * frame_dim);
    let sigma1 = request.schedule.levels()[0];
    let mut data = Vec::with_capacity(frames * frame_dim);
    for (j, role) in request.roles.iter().enumerate() {
        let eps = &noise[j * frame_dim..(j + 1) * frame_dim];
        match *role {
            FrameRole::Generate => data.extend_from_slice(eps),
            FrameRole::Clamp => data.extend_from_slice(&request.conditioning[&j]),
            FrameRole::Partial(kappa) => {
                let level = kappa * sigma1;
                let clean = &request.conditioning[&j];
                data.extend(clean.iter().zip(eps).map(|(&c, &e)| (1.0 - level) * c + level * e));
            }
        }
    }
    Tensor::matrix(frames, frame_dim, data)
}

/// Run many requests on `workers` threads. Results keep request order and
/// do not depend on the worker count.
pub fn sample_many<F: VelocityField + Sync + ?Sized>(
    field: &F,
    requests: &[SampleRequest],
    frame_dim: usize,
    workers: usize,
) -> Result<Vec<Tensor>> {
    if workers <= 1 {
        return requests.iter().map(|r| euler_sample(field, r, frame_dim)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| requests.par_iter().map(|r| euler_sample(field, r, frame_dim)).collect())
}

/// Attention maps indexed `[step][block]`.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub steps: Vec<AttentionMaps>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub video: Tensor,
    pub plan: FramePlan,
    pub attention: Option<AttentionRecord>,
}

/// Run the plan's `S - 1` Euler updates from `prepare_initial`.
pub fn euler_sample<F: VelocityField + ?Sized>(field: &F, request: &SampleRequest, frame_dim: usize) -> Result<Tensor> {
    let z = prepare_initial(request, frame_dim)?;
    let plan = compile_plan(&request.roles, &request.schedule)?;
    Ok(integrate(field, z, &plan, request.label, false)?.0)
}

/// As [`euler_sample`], also returning the plan and, when `record` is set,
/// attention at each of the `S` plan rows: the `S - 1` update evaluations
/// plus one evaluation at the final state that does not change the sample.
pub fn euler_sample_recorded<F: VelocityField + ?Sized>(
    field: &F,
    request: &SampleRequest,
    frame_dim: usize,
    record: bool,
) -> Result<SampleOutput> {
    let z = prepare_initial(request, frame_dim)?;
    let plan = compile_plan(&request.roles, &request.schedule)?;
    let (video, attention) = integrate(field, z, &plan, request.label, record)?;
    Ok(SampleOutput { video, plan, attention })
}

/// Euler integration from an explicit starting state.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    mut z: Tensor,
    plan: &FramePlan,
    label: usize,
    record: bool,
) -> Result<(Tensor, Option<AttentionRecord>)> {
    if plan.steps() < 2 {
        return Err(Error::invalid("plan needs at least two noise levels"));
    }
    if z.rank() != 2 || z.rows() != plan.frames() {
        return Err(Error::ShapeMismatch {
            op: "euler_sample",
            lhs: vec![plan.frames()],
            rhs: z.shape().to_vec(),
        });
    }
    let mut rec = record.then(AttentionRecord::default);
    for s in 0..plan.steps() - 1 {
        let tau = plan.tau(s);
        let v = match rec.as_mut() {
            Some(r) => {
                let (v, maps) = field.velocity_with_attention(&z, tau, label)?;
                r.steps.push(maps);
                v
            }
            None => field.velocity(&z, tau, label)?,
        };
        if v.shape() != z.shape() {
            return Err(Error::ShapeMismatch {
                op: "velocity",
                lhs: z.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let (cur, next) = (plan.sigma(s), plan.sigma(s + 1));
        z = euler_step(&z, &v, cur, next)?;
        z.ensure_finite(&format!("sample state after step {s}"))?;
    }
    if let Some(r) = rec.as_mut() {
        let (_, maps) = field.velocity_with_attention(&z, plan.tau(plan.steps() - 1), label)?;
        r.steps.push(maps);
    }
    Ok((z, rec))
}

/// `Z + V * (sigma_next - sigma_cur)`, row-wise. Rows with equal levels are
/// copied unchanged.
pub fn euler_step(z: &Tensor, v: &Tensor, sigma_cur: &[f64], sigma_next: &[f64]) -> Result<Tensor> {
    let n = z.cols();
    let mut data = z.data().to_vec();
    for (j, row) in data.chunks_mut(n).enumerate() {
        let dt = sigma_next[j] - sigma_cur[j];
        if dt == 0.0 {
            continue;
        }
        for (x, &vel) in row.iter_mut().zip(v.row(j)) {
            *x += vel * dt;
        }
    }
    Tensor::new(z.shape().to_vec(), data)
}

/// Reference sampler on the scalar-timestep model: every frame generated,
/// `t = sigma_s` at step `s`. Only valid for shift 1 schedules, where the
/// model timestep equals the noise level.
pub fn scalar_euler_sample(ckpt: &Checkpoint, schedule: &NoiseSchedule, label: usize, seed: u64) -> Result<Tensor> {
    if schedule.shift() != 1.0 {
        return Err(Error::invalid("scalar reference sampler expects an unshifted schedule"));
    }
    let cfg = &ckpt.config;
    let noise = rng::normal_vec(&mut rng::stream(seed, Domain::Sampler, 0), cfg.frames * cfg.frame_dim);
    let mut z = Tensor::matrix(cfg.frames, cfg.frame_dim, noise)?;
    let levels = schedule.levels();
    for s in 0..levels.len() - 1 {
        let v = model::forward_scalar(ckpt, &z, levels[s], label)?;
        let dt = levels[s + 1] - levels[s];
        z = z.add(&v.scale(dt))?;
    }
    Ok(z)
}

/// Sampling modes, each a preset of per-frame roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    T2v,
    I2v,
    I2vNoisy(f64),
    StartEnd,
    StartEndNoisy(f64, f64),
    /// Clamp the first `head` and last `tail` frames.
    Complete(usize, usize),
    /// Clamp the first `k` frames.
    Extend(usize),
}

impl Mode {
    pub fn parse(name: &str, kappa: f64, kappa_end: f64, head: usize, tail: usize, extend: usize) -> Result<Self> {
        Ok(match name {
            "t2v" => Mode::T2v,
            "i2v" => Mode::I2v,
            "i2v_noisy" => Mode::I2vNoisy(kappa),
            "start_end" => Mode::StartEnd,
            "start_end_noisy" => Mode::StartEndNoisy(kappa, kappa_end),
            "complete" => Mode::Complete(head, tail),
            "extend" => Mode::Extend(extend),
            other => return Err(Error::invalid(format!("unknown mode `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::T2v => "t2v",
            Mode::I2v => "i2v",
            Mode::I2vNoisy(_) => "i2v_noisy",
            Mode::StartEnd => "start_end",
            Mode::StartEndNoisy(..) => "start_end_noisy",
            Mode::Complete(..) => "complete",
            Mode::Extend(_) => "extend",
        }
    }
}

pub fn mode_presets(mode: Mode, frames: usize) -> Result<Vec<FrameRole>> {
    if frames == 0 {
        return Err(Error::invalid("no frames"));
    }
    let kappa_ok = |k: f64| {
        if (0.0..=1.0).contains(&k) {
            Ok(())
        } else {
            Err(Error::invalid(format!("kappa {k} outside [0, 1]")))
        }
    };
    let mut roles = vec![FrameRole::Generate; frames];
    match mode {
        Mode::T2v => {}
        Mode::I2v => roles[0] = FrameRole::Clamp,
        Mode::I2vNoisy(k) => {
            kappa_ok(k)?;
            roles[0] = FrameRole::Partial(k);
        }
        Mode::StartEnd | Mode::StartEndNoisy(..) => {
            if frames < 2 {
                return Err(Error::invalid("start/end mode needs at least two frames"));
            }
            let (first, last) = match mode {
                Mode::StartEndNoisy(a, b) => {
                    kappa_ok(a)?;
                    kappa_ok(b)?;
                    (FrameRole::Partial(a), FrameRole::Partial(b))
                }
                _ => (FrameRole::Clamp, FrameRole::Clamp),
            };
            roles[0] = first;
            roles[frames - 1] = last;
        }
        Mode::Complete(head, tail) => {
            if head + tail > frames {
                return Err(Error::invalid(format!(
                    "complete({head}, {tail}) overlaps or exceeds {frames} frames"
                )));
            }
            roles[..head].fill(FrameRole::Clamp);
            roles[frames - tail..].fill(FrameRole::Clamp);
        }
        Mode::Extend(k) => {
            if k > frames {
                return Err(Error::invalid(format!("extend({k}) exceeds {frames} frames")));
            }
            roles[..k].fill(FrameRole::Clamp);
        }
    }
    Ok(roles)
}

/// Conditioning map taking each conditioned frame's row from `source`.
pub fn conditioning_from(roles: &[FrameRole], source: &Tensor) -> BTreeMap<usize, Vec<f64>> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_conditioned())
        .map(|(j, _)| (j, source.row(j).to_vec()))
        .collect()
}
