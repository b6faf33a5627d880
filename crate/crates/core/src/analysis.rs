//! Evaluation metrics, parameter drift and attention summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{centroids, DIRECTIONS};
use crate::error::{Error, Result};
use crate::model::{block_index, Checkpoint, ModuleKind};
use crate::sampler::{euler_sample_recorded, SampleRequest};
use crate::tensor::Tensor;
use crate::timestep::FrameRole;

/// Metrics for one generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub label: usize,
    /// Max abs error on clamped frames; 0 when there are none.
    pub clamp_error: f64,
    /// Max abs distance of partially noised frames from their clean rows at
    /// the end of sampling, where their path reaches the data end.
    pub partial_error: Option<f64>,
    /// Mean squared difference between consecutive frames.
    pub smoothness: f64,
    /// Mean centroid displacement magnitude per frame.
    pub dynamic_degree: Option<f64>,
    pub predicted_label: Option<usize>,
}

impl SampleMetrics {
    pub fn agrees(&self) -> bool {
        self.predicted_label == Some(self.label)
    }
}

/// Direction whose unit vector best matches the mean centroid displacement,
/// or `None` when the video does not move toward any direction.
pub fn motion_label(path: &[(f64, f64)]) -> Option<usize> {
    if path.len() < 2 {
        return None;
    }
    let steps = (path.len() - 1) as f64;
    let (first, last) = (path[0], path[path.len() - 1]);
    let (dx, dy) = ((last.0 - first.0) / steps, (last.1 - first.1) / steps);
    let mut best = None;
    let mut best_score = 0.0;
    for (k, &(ux, uy)) in DIRECTIONS.iter().enumerate() {
        let score = dx * ux + dy * uy;
        if score > best_score {
            best_score = score;
            best = Some(k);
        }
    }
    best
}

pub fn smoothness(video: &Tensor) -> f64 {
    let n = video.rows();
    if n < 2 {
        return 0.0;
    }
    let d = video.cols();
    let mut total = 0.0;
    for j in 0..n - 1 {
        total += video
            .row(j + 1)
            .iter()
            .zip(video.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / ((n - 1) * d) as f64
}

pub fn dynamic_degree(path: &[(f64, f64)]) -> f64 {
    if path.len() < 2 {
        return 0.0;
    }
    let total: f64 = path.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).sum();
    total / (path.len() - 1) as f64
}

pub fn evaluate_sample(
    video: &Tensor,
    side: usize,
    roles: &[FrameRole],
    conditioning: &BTreeMap<usize, Vec<f64>>,
    label: usize,
) -> Result<SampleMetrics> {
    if video.rank() != 2 || video.rows() != roles.len() || video.cols() != side * side {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: vec![roles.len(), side * side],
            rhs: video.shape().to_vec(),
        });
    }
    let mut clamp_error = 0.0f64;
    let mut partial_error: Option<f64> = None;
    for (j, role) in roles.iter().enumerate() {
        if !role.is_conditioned() {
            continue;
        }
        let clean = conditioning
            .get(&j)
            .ok_or_else(|| Error::invalid(format!("frame {j} has no conditioning row")))?;
        if clean.len() != video.cols() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                lhs: vec![video.cols()],
                rhs: vec![clean.len()],
            });
        }
        let err = video.row(j).iter().zip(clean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        match role {
            FrameRole::Clamp => clamp_error = clamp_error.max(err),
            _ => partial_error = Some(partial_error.unwrap_or(0.0).max(err)),
        }
    }
    let path = centroids(video, side).ok();
    Ok(SampleMetrics {
        label,
        clamp_error,
        partial_error,
        smoothness: smoothness(video),
        dynamic_degree: path.as_deref().map(dynamic_degree),
        predicted_label: path.as_deref().and_then(motion_label),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub count: usize,
    pub clamp_error: f64,
    pub partial_error: Option<f64>,
    pub smoothness: f64,
    pub dynamic_degree: f64,
    pub label_agreement: f64,
    /// Videos whose centroid could not be computed on some frame.
    pub untracked: usize,
}

pub fn summarize(metrics: &[SampleMetrics]) -> Result<EvalSummary> {
    if metrics.is_empty() {
        return Err(Error::invalid("no samples to summarize"));
    }
    let n = metrics.len() as f64;
    let tracked: Vec<f64> = metrics.iter().filter_map(|m| m.dynamic_degree).collect();
    Ok(EvalSummary {
        count: metrics.len(),
        clamp_error: metrics.iter().map(|m| m.clamp_error).fold(0.0, f64::max),
        partial_error: metrics.iter().filter_map(|m| m.partial_error).reduce(f64::max),
        smoothness: metrics.iter().map(|m| m.smoothness).sum::<f64>() / n,
        dynamic_degree: if tracked.is_empty() {
            0.0
        } else {
            tracked.iter().sum::<f64>() / tracked.len() as f64
        },
        label_agreement: metrics.iter().filter(|m| m.agrees()).count() as f64 / n,
        untracked: metrics.len() - tracked.len(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_label(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(metrics: &[SampleMetrics]) -> String {
    let mut out = String::from("sample,label,predicted,agrees,clamp_error,partial_error,smoothness,dynamic_degree\n");
    for (i, m) in metrics.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            m.label,
            opt_label(m.predicted_label),
            u8::from(m.agrees()),
            m.clamp_error,
            opt(m.partial_error),
            m.smoothness,
            opt(m.dynamic_degree)
        );
    }
    out
}

pub fn summary_csv(s: &EvalSummary) -> String {
    format!(
        "metric,value\ncount,{}\nclamp_error,{}\npartial_error,{}\nsmoothness,{}\ndynamic_degree,{}\nlabel_agreement,{}\nuntracked,{}\n",
        s.count,
        s.clamp_error,
        opt(s.partial_error),
        s.smoothness,
        s.dynamic_degree,
        s.label_agreement,
        s.untracked
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftEntry {
    pub name: String,
    pub kind: ModuleKind,
    pub block: Option<usize>,
    pub base_norm: f64,
    pub delta_norm: f64,
    /// `delta_norm / base_norm`, or `delta_norm` when the base weight is zero.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub entries: Vec<DriftEntry>,
}

impl DriftReport {
    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.relative == 0.0)
    }

    /// Entries sorted by decreasing relative change, ties by name.
    pub fn top(&self, k: usize) -> Vec<&DriftEntry> {
        let mut v: Vec<&DriftEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.relative.total_cmp(&a.relative).then_with(|| a.name.cmp(&b.name)));
        v.truncate(k);
        v
    }

    pub fn by_kind(&self) -> BTreeMap<ModuleKind, f64> {
        mean_by(&self.entries, |e| Some(e.kind))
    }

    pub fn by_block(&self) -> BTreeMap<usize, f64> {
        mean_by(&self.entries, |e| e.block)
    }

    pub fn changed(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.relative != 0.0)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn entries_csv(&self) -> String {
        let mut out = String::from("name,kind,block,base_norm,delta_norm,relative\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.name,
                e.kind.as_str(),
                opt_label(e.block),
                e.base_norm,
                e.delta_norm,
                e.relative
            );
        }
        out
    }

    pub fn top_csv(&self, k: usize) -> String {
        let mut out = String::from("rank,name,relative\n");
        for (i, e) in self.top(k).iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, e.name, e.relative);
        }
        out
    }

    pub fn by_kind_csv(&self) -> String {
        let mut out = String::from("kind,mean_relative\n");
        for (k, v) in self.by_kind() {
            let _ = writeln!(out, "{},{v}", k.as_str());
        }
        out
    }

    pub fn by_block_csv(&self) -> String {
        let mut out = String::from("block,mean_relative\n");
        for (b, v) in self.by_block() {
            let _ = writeln!(out, "{b},{v}");
        }
        out
    }
}

fn mean_by<K: Ord>(entries: &[DriftEntry], key: impl Fn(&DriftEntry) -> Option<K>) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for e in entries {
        if let Some(k) = key(e) {
            let slot = acc.entry(k).or_insert((0.0, 0));
            slot.0 += e.relative;
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Relative change of every parameter, comparing effective weights (base
/// plus any low-rank delta) of both checkpoints.
pub fn drift(base: &Checkpoint, adapted: &Checkpoint) -> Result<DriftReport> {
    if !base.config.same_architecture(&adapted.config) {
        return Err(Error::invalid("checkpoints have different architectures"));
    }
    let mut entries = Vec::with_capacity(base.params.len());
    for name in base.params.keys() {
        let w0 = base.effective(name)?;
        let w1 = adapted.effective(name)?;
        let delta_norm = w1.sub(&w0)?.frobenius_norm();
        let base_norm = w0.frobenius_norm();
        let relative = if base_norm > 0.0 { delta_norm / base_norm } else { delta_norm };
        entries.push(DriftEntry {
            name: name.clone(),
            kind: ModuleKind::of(name),
            block: block_index(name),
            base_norm,
            delta_norm,
            relative,
        });
    }
    Ok(DriftReport { entries })
}

/// Mean of the diagonal of a row-stochastic map.
pub fn diagonal_mass(map: &Tensor) -> f64 {
    let n = map.rows();
    (0..n).map(|i| map.get(i, i)).sum::<f64>() / n as f64
}

/// Mean attention every query frame puts on frame 0.
pub fn first_column_mass(map: &Tensor) -> f64 {
    let n = map.rows();
    (0..n).map(|i| map.get(i, 0)).sum::<f64>() / n as f64
}

pub fn attention_csv(map: &Tensor) -> String {
    let n = map.cols();
    let mut out = String::from("query");
    for k in 0..n {
        let _ = write!(out, ",k{k}");
    }
    out.push('\n');
    for i in 0..map.rows() {
        let _ = write!(out, "{i}");
        for v in map.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub const DEFAULT_ATTENTION_STEPS: [usize; 4] = [0, 3, 6, 9];

#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub step: usize,
    pub block: usize,
    pub map: Tensor,
}

impl AttentionDump {
    pub fn diagonal_mass(&self) -> f64 {
        diagonal_mass(&self.map)
    }

    pub fn first_column_mass(&self) -> f64 {
        first_column_mass(&self.map)
    }
}

/// Sample with attention recording and keep the maps of `block` (default:
/// the final block) at the requested plan steps.
pub fn analyze_attention(
    ckpt: &Checkpoint,
    request: &SampleRequest,
    steps: &[usize],
    block: Option<usize>,
) -> Result<Vec<AttentionDump>> {
    let blocks = ckpt.config.blocks;
    let block = block.unwrap_or(blocks.saturating_sub(1));
    if block >= blocks {
        return Err(Error::invalid(format!("block {block} out of range for {blocks} blocks")));
    }
    let total = request.schedule.steps();
    if let Some(&s) = steps.iter().find(|&&s| s >= total) {
        return Err(Error::invalid(format!("attention step {s} out of range for {total} steps")));
    }
    let out = euler_sample_recorded(ckpt, request, ckpt.config.frame_dim, true)?;
    let record = out.attention.expect("recording requested");
    Ok(steps
        .iter()
        .map(|&s| AttentionDump {
            step: s,
            block,
            map: record.steps[s][block].clone(),
        })
        .collect())
}

pub fn attention_summary_csv(rows: &[(&str, &AttentionDump)]) -> String {
    let mut out = String::from("checkpoint,step,block,diagonal_mass,first_column_mass\n");
    for (tag, d) in rows {
        let _ = writeln!(
            out,
            "{tag},{},{},{},{}",
            d.step,
            d.block,
            d.diagonal_mass(),
            d.first_column_mass()
        );
    }
    out
}
