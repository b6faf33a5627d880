//! Per-frame timesteps: the vectorized timestep, the probabilistic sampler
//! used in training, noise schedules, frame plans, and sinusoidal
//! embeddings.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// One progression parameter in `[0, 1]` per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorTimestep(Vec<f64>);

impl VectorTimestep {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("timestep vector must have at least one frame"));
        }
        for (frame, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::TimestepOutOfRange { frame, value });
            }
        }
        Ok(Self(values))
    }

    /// `t` broadcast to every frame.
    pub fn synchronized(frames: usize, t: f64) -> Result<Self> {
        Self::new(vec![t; frames])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_synchronized(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

/// Probabilistic timestep sampling.
///
/// With probability `p_async` every component is drawn i.i.d. from
/// `U[0, 1)`; otherwise a single value is drawn and broadcast. The coin is
/// only consumed for `0 < p_async < 1`, so at `p_async = 0` the stream
/// yields exactly one uniform per call.
pub fn ptss_sample(frames: usize, p_async: f64, rng: &mut StreamRng) -> Result<VectorTimestep> {
    if frames == 0 {
        return Err(Error::invalid("ptss_sample needs at least one frame"));
    }
    if !(0.0..=1.0).contains(&p_async) {
        return Err(Error::invalid(format!("p_async {p_async} outside [0, 1]")));
    }
    let asynchronous = if p_async <= 0.0 {
        false
    } else if p_async >= 1.0 {
        true
    } else {
        rng::uniform(rng) < p_async
    };
    let values = if asynchronous {
        (0..frames).map(|_| rng::uniform(rng)).collect()
    } else {
        vec![rng::uniform(rng); frames]
    };
    Ok(VectorTimestep(values))
}

/// Strictly decreasing noise levels `sigma_1 > ... > sigma_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
    shift: f64,
}

impl NoiseSchedule {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn steps(&self) -> usize {
        self.levels.len()
    }
}

/// Shift map `sigma = shift * u / (1 + (shift - 1) * u)`. The endpoints 0
/// and 1 map to themselves exactly.
pub fn shift_sigma(u: f64, shift: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return u.clamp(0.0, 1.0);
    }
    (shift * u / (1.0 + (shift - 1.0) * u)).clamp(0.0, 1.0)
}

/// `S` levels on a uniform grid from 1 down to 0, passed through the shift map.
pub fn make_schedule(steps: usize, shift: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(shift > 0.0) || !shift.is_finite() {
        return Err(Error::invalid(format!("shift must be positive, got {shift}")));
    }
    let last = (steps - 1) as f64;
    let levels = (0..steps)
        .map(|s| {
            let u = 1.0 - s as f64 / last;
            if shift == 1.0 {
                u
            } else {
                shift_sigma(u, shift)
            }
        })
        .collect();
    Ok(NoiseSchedule { levels, shift })
}

/// Model-input timestep for a noise level: the inverse of the shift map
/// (identity when `shift == 1`).
pub fn tau_of_sigma(sigma: f64, shift: f64) -> f64 {
    if shift == 1.0 || sigma <= 0.0 || sigma >= 1.0 {
        return sigma.clamp(0.0, 1.0);
    }
    (sigma / (shift - (shift - 1.0) * sigma)).clamp(0.0, 1.0)
}

/// What a frame does during sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameRole {
    Generate,
    /// Held at zero noise for every step.
    Clamp,
    /// Held at `kappa * sigma_s` at step `s`.
    Partial(f64),
}

impl FrameRole {
    pub fn is_conditioned(&self) -> bool {
        !matches!(self, FrameRole::Generate)
    }

    /// Per-step noise multiplier.
    pub fn noise_factor(&self) -> f64 {
        match *self {
            FrameRole::Generate => 1.0,
            FrameRole::Clamp => 0.0,
            FrameRole::Partial(k) => k,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FrameRole::Partial(k) if !(0.0..=1.0).contains(&k) => {
                Err(Error::invalid(format!("partial kappa {k} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for FrameRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameRole::Generate => f.write_str("generate"),
            FrameRole::Clamp => f.write_str("clamp"),
            FrameRole::Partial(k) => write!(f, "partial:{k}"),
        }
    }
}

impl FromStr for FrameRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let role = match s {
            "generate" => FrameRole::Generate,
            "clamp" => FrameRole::Clamp,
            _ => {
                let k = s
                    .strip_prefix("partial:")
                    .and_then(|k| k.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown frame role `{s}`")))?;
                FrameRole::Partial(k)
            }
        };
        role.validate()?;
        Ok(role)
    }
}

/// Parse a comma-separated role list such as `clamp,generate,partial:0.3`.
pub fn parse_roles(s: &str) -> Result<Vec<FrameRole>> {
    s.split(',').map(str::parse).collect()
}

/// Per-step, per-frame noise levels and model-input timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePlan {
    sigma: Vec<Vec<f64>>,
    tau: Vec<Vec<f64>>,
}

impl FramePlan {
    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn frames(&self) -> usize {
        self.sigma[0].len()
    }

    pub fn sigma(&self, step: usize) -> &[f64] {
        &self.sigma[step]
    }

    pub fn tau(&self, step: usize) -> &[f64] {
        &self.tau[step]
    }

    pub fn sigma_column(&self, frame: usize) -> Vec<f64> {
        self.sigma.iter().map(|r| r[frame]).collect()
    }

    /// `S` rows by `N` columns of sigma, with a `f0,f1,...` header.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.frames()).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in &self.sigma {
            out.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

pub fn compile_plan(roles: &[FrameRole], schedule: &NoiseSchedule) -> Result<FramePlan> {
    if roles.is_empty() {
        return Err(Error::invalid("frame plan needs at least one role"));
    }
    for r in roles {
        r.validate()?;
    }
    let shift = schedule.shift();
    let sigma: Vec<Vec<f64>> = schedule
        .levels()
        .iter()
        .map(|&level| roles.iter().map(|r| r.noise_factor() * level).collect())
        .collect();
    let tau = sigma
        .iter()
        .map(|row| row.iter().map(|&s| tau_of_sigma(s, shift)).collect())
        .collect();
    Ok(FramePlan { sigma, tau })
}

/// Timestep scale applied before the sinusoids.
pub const EMBED_SCALE: f64 = 1000.0;

/// Frequency `k` of `half` geometric frequencies from 1 down to 1/10000.
pub fn embed_frequency(k: usize, half: usize) -> f64 {
    if half <= 1 {
        return 1.0;
    }
    (-(10_000f64.ln()) * k as f64 / (half - 1) as f64).exp()
}

/// Row `i` is `[sin(w_k * 1000 * tau_i) for k] ++ [cos(w_k * 1000 * tau_i) for k]`.
pub fn embed_timesteps(tau: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("embedding dim must be even and positive, got {dim}")));
    }
    if tau.is_empty() {
        return Err(Error::invalid("no timesteps to embed"));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| embed_frequency(k, half)).collect();
    let mut data = Vec::with_capacity(tau.len() * dim);
    for &t in tau {
        let arg = EMBED_SCALE * t;
        data.extend(freqs.iter().map(|w| (w * arg).sin()));
        data.extend(freqs.iter().map(|w| (w * arg).cos()));
    }
    Tensor::matrix(tau.len(), dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn linear_schedules() {
        assert_eq!(make_schedule(5, 1.0).unwrap().levels(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(make_schedule(2, 1.0).unwrap().levels(), &[1.0, 0.0]);
        assert!(make_schedule(1, 1.0).is_err());
        assert!(make_schedule(4, 0.0).is_err());
    }

    #[test]
    fn shifted_schedule_midpoint() {
        let s = make_schedule(5, 3.0).unwrap();
        assert!((s.levels()[2] - 0.75).abs() < 1e-15);
        assert_eq!(s.levels()[0], 1.0);
        assert_eq!(s.levels()[4], 0.0);
        assert!(s.levels().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn shift_endpoints_are_exact() {
        for k in 1..200 {
            let shift = k as f64 * 0.05;
            assert_eq!(shift_sigma(1.0, shift), 1.0);
            assert_eq!(shift_sigma(0.0, shift), 0.0);
            assert_eq!(tau_of_sigma(1.0, shift), 1.0);
            let l = make_schedule(2 + k % 7, shift).unwrap();
            assert_eq!(l.levels()[0], 1.0);
        }
    }

    #[test]
    fn tau_of_sigma_cases() {
        assert_eq!(tau_of_sigma(0.5, 1.0), 0.5);
        assert_eq!(tau_of_sigma(0.0, 7.0), 0.0);
        assert!((tau_of_sigma(0.75, 3.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn plan_columns_follow_roles() {
        let sched = make_schedule(3, 1.0).unwrap();
        let plan = compile_plan(&[FrameRole::Clamp, FrameRole::Generate, FrameRole::Partial(0.2)], &sched).unwrap();
        assert_eq!(plan.sigma_column(0), vec![0.0, 0.0, 0.0]);
        assert_eq!(plan.sigma_column(1), vec![1.0, 0.5, 0.0]);
        assert_eq!(plan.sigma_column(2), vec![0.2, 0.1, 0.0]);
        assert!(compile_plan(&[], &sched).is_err());
        assert!(compile_plan(&[FrameRole::Partial(1.5)], &sched).is_err());
    }

    #[test]
    fn plan_csv_shape() {
        let sched = make_schedule(3, 1.0).unwrap();
        let csv = compile_plan(&[FrameRole::Clamp, FrameRole::Generate], &sched).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "f0,f1");
        assert_eq!(lines[1], "0,1");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn role_parsing() {
        assert_eq!(
            parse_roles("generate,clamp,partial:0.3").unwrap(),
            vec![FrameRole::Generate, FrameRole::Clamp, FrameRole::Partial(0.3)]
        );
        assert!("partial:2".parse::<FrameRole>().is_err());
        assert!("frozen".parse::<FrameRole>().is_err());
        assert_eq!(FrameRole::Partial(0.3).to_string().parse::<FrameRole>().unwrap(), FrameRole::Partial(0.3));
    }

    #[test]
    fn ptss_sync_broadcasts() {
        let mut rng = stream(1, Domain::Timestep, 0);
        let t = ptss_sample(4, 0.0, &mut rng).unwrap();
        assert!(t.is_synchronized());
        let mut rng = stream(1, Domain::Timestep, 0);
        let u = rng::uniform(&mut rng);
        assert_eq!(t.values(), &[u; 4]);
        assert!(ptss_sample(0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn embedding_basics() {
        let e = embed_timesteps(&[0.0, 0.0], 8).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!(e.row(0)[..4].iter().all(|&v| v == 0.0));
        let e = embed_timesteps(&[0.3, 0.3, 0.9], 8).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_ne!(e.row(0), e.row(2));
        assert!(embed_timesteps(&[0.1], 7).is_err());
        assert_eq!(embed_frequency(0, 16), 1.0);
        assert!((embed_frequency(15, 16) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn vector_timestep_validates_range() {
        assert!(matches!(
            VectorTimestep::new(vec![0.2, 1.5]),
            Err(Error::TimestepOutOfRange { frame: 1, .. })
        ));
    }
}
