//! Synthetic bouncing-blob videos.
//!
//! Each frame is a `side x side` grid flattened row-major (`index = y * side + x`)
//! holding a Gaussian blob `2 exp(-r^2 / 2 s^2) - 1` with `s = side / 6`. The
//! blob centre moves one grid unit per frame along one of four directions
//! and reflects specularly off walls inset by `s` from the grid border, so
//! the truncated blob's centroid stays close to its true centre.
//!
//! The start position on the motion axis is drawn from the trailing side of
//! the box, close enough to the rear wall that every video has positive net
//! displacement in its labelled direction even after a bounce.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, NamedTensors};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

pub const NUM_DIRECTIONS: usize = 4;

/// Unit velocity for each label: right, left, down, up.
pub const DIRECTIONS: [(f64, f64); NUM_DIRECTIONS] = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];

pub fn direction_name(label: usize) -> &'static str {
    ["right", "left", "down", "up"].get(label).copied().unwrap_or("?")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallMeta {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video: Tensor,
    pub label: usize,
    pub meta: BallMeta,
}

/// Geometry for a given grid side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arena {
    pub side: usize,
    pub blob_sigma: f64,
    /// Lowest and highest reachable centre coordinate.
    pub lo: f64,
    pub hi: f64,
}

impl Arena {
    pub fn new(side: usize) -> Result<Self> {
        if side < 4 {
            return Err(Error::invalid(format!("side {side} < 4")));
        }
        let blob_sigma = side as f64 / 6.0;
        let lo = blob_sigma;
        let hi = side as f64 - 1.0 - blob_sigma;
        Ok(Self { side, blob_sigma, lo, hi })
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    /// Fold an unbounded coordinate into `[lo, hi]` by specular reflection.
    pub fn reflect(&self, x: f64) -> f64 {
        let span = self.span();
        let period = 2.0 * span;
        let mut u = (x - self.lo).rem_euclid(period);
        if u > span {
            u = period - u;
        }
        self.lo + u
    }
}

/// Centre positions for `frames` frames from `start` at `velocity` per frame.
pub fn trajectory(arena: &Arena, start: (f64, f64), velocity: (f64, f64), frames: usize) -> Vec<(f64, f64)> {
    (0..frames)
        .map(|t| {
            let t = t as f64;
            (
                arena.reflect(start.0 + velocity.0 * t),
                arena.reflect(start.1 + velocity.1 * t),
            )
        })
        .collect()
}

/// One frame with the blob centred at `centre`.
pub fn render_frame(arena: &Arena, centre: (f64, f64)) -> Vec<f64> {
    let side = arena.side;
    let two_var = 2.0 * arena.blob_sigma * arena.blob_sigma;
    let mut row = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - centre.0;
            let dy = y as f64 - centre.1;
            let v = 2.0 * (-(dx * dx + dy * dy) / two_var).exp() - 1.0;
            row.push(v.clamp(-1.0, 1.0));
        }
    }
    row
}

pub fn render(arena: &Arena, path: &[(f64, f64)]) -> Result<Tensor> {
    let d = arena.side * arena.side;
    let mut data = Vec::with_capacity(path.len() * d);
    for &c in path {
        data.extend(render_frame(arena, c));
    }
    Tensor::matrix(path.len(), d, data)
}

/// Sample `index` of the dataset generated from `seed`.
pub fn bouncing_sample(index: u64, frames: usize, side: usize, seed: u64) -> Result<VideoSample> {
    let arena = Arena::new(side)?;
    if frames < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {frames}")));
    }
    let travel = (frames - 1) as f64;
    let slack = arena.span() - travel / 2.0;
    if slack <= 0.0 {
        return Err(Error::invalid(format!(
            "degenerate geometry: {frames} frames on side {side} cannot guarantee net motion"
        )));
    }
    let mut r = rng::stream(seed, Domain::Dataset, index);
    let label = r.gen_range(0..NUM_DIRECTIONS);
    let offset = rng::uniform(&mut r) * slack;
    let perp = arena.lo + rng::uniform(&mut r) * arena.span();
    let (vx, vy) = DIRECTIONS[label];
    let along = |v: f64| if v > 0.0 { arena.lo + offset } else { arena.hi - offset };
    let start = if vx != 0.0 { (along(vx), perp) } else { (perp, along(vy)) };
    let path = trajectory(&arena, start, (vx, vy), frames);
    Ok(VideoSample {
        video: render(&arena, &path)?,
        label,
        meta: BallMeta {
            x0: start.0,
            y0: start.1,
            vx,
            vy,
        },
    })
}

pub fn gen_bouncing(count: usize, frames: usize, side: usize, seed: u64) -> Result<Vec<VideoSample>> {
    gen_bouncing_range(0, count, frames, side, seed, 1)
}

/// Samples `first..first + count`, generated on `workers` threads. Output
/// order and contents do not depend on the worker count.
pub fn gen_bouncing_range(
    first: u64,
    count: usize,
    frames: usize,
    side: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<VideoSample>> {
    let indices: Vec<u64> = (first..first + count as u64).collect();
    if workers <= 1 {
        return indices.iter().map(|&i| bouncing_sample(i, frames, side, seed)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        indices
            .par_iter()
            .map(|&i| bouncing_sample(i, frames, side, seed))
            .collect()
    })
}

/// Intensity-weighted centroid over `value + 1`.
pub fn centroid(row: &[f64], side: usize) -> Result<(f64, f64)> {
    if row.len() != side * side {
        return Err(Error::ShapeMismatch {
            op: "centroid",
            lhs: vec![side * side],
            rhs: vec![row.len()],
        });
    }
    let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in row.iter().enumerate() {
        let m = (v + 1.0).max(0.0);
        w += m;
        sx += m * (i % side) as f64;
        sy += m * (i / side) as f64;
    }
    if !(w > 0.0) {
        return Err(Error::invalid("centroid of an all-background frame"));
    }
    Ok((sx / w, sy / w))
}

pub fn centroids(video: &Tensor, side: usize) -> Result<Vec<(f64, f64)>> {
    (0..video.rows()).map(|j| centroid(video.row(j), side)).collect()
}

/// Integer grid side for a frame dimension that is a perfect square.
pub fn side_of(frame_dim: usize) -> Result<usize> {
    let s = (frame_dim as f64).sqrt().round() as usize;
    if s * s != frame_dim {
        return Err(Error::invalid(format!("frame dimension {frame_dim} is not a square")));
    }
    Ok(s)
}

pub fn to_named(samples: &[VideoSample]) -> NamedTensors {
    let mut out = NamedTensors::new();
    for (i, s) in samples.iter().enumerate() {
        out.insert(format!("video.{i}"), s.video.clone());
        out.insert(format!("label.{i}"), Tensor::scalar(s.label as f64));
        out.insert(
            format!("meta.{i}"),
            Tensor::new(vec![4], vec![s.meta.x0, s.meta.y0, s.meta.vx, s.meta.vy]).expect("length-4 meta"),
        );
    }
    out
}

pub fn from_named(named: &NamedTensors) -> Result<Vec<VideoSample>> {
    let count = named.keys().filter(|k| k.starts_with("video.")).count();
    let mut out = Vec::with_capacity(count);
    let get = |key: String| named.get(&key).ok_or(Error::MissingEntry(key));
    for i in 0..count {
        let video = get(format!("video.{i}"))?.clone();
        if video.rank() != 2 {
            return Err(Error::invalid(format!("video.{i} is not a matrix")));
        }
        let label_t = get(format!("label.{i}"))?;
        if !label_t.is_scalar() {
            return Err(Error::invalid(format!("label.{i} is not a scalar")));
        }
        let l = label_t.item();
        if l < 0.0 || l.fract() != 0.0 {
            return Err(Error::invalid(format!("label.{i} = {l} is not a category")));
        }
        let m = get(format!("meta.{i}"))?;
        if m.shape() != [4] {
            return Err(Error::invalid(format!("meta.{i} must have length 4")));
        }
        let d = m.data();
        out.push(VideoSample {
            video,
            label: l as usize,
            meta: BallMeta {
                x0: d[0],
                y0: d[1],
                vx: d[2],
                vy: d[3],
            },
        });
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[VideoSample]) -> Result<()> {
    io::save_named(path, &to_named(samples))
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    from_named(&io::load_named(path)?)
}

/// `(video, label)` pairs in the form the trainer takes.
pub fn training_pairs(samples: &[VideoSample]) -> Vec<(Tensor, usize)> {
    samples.iter().map(|s| (s.video.clone(), s.label)).collect()
}
