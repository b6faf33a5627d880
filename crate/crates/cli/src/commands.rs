use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};

use framewise::analysis::{self, AttentionDump};
use framewise::data::{self, VideoSample};
use framewise::io;
use framewise::model::Checkpoint;
use framewise::rng;
use framewise::sampler::{self, conditioning_from, mode_presets, Mode, SampleRequest};
use framewise::timestep::{compile_plan, make_schedule, FrameRole};
use framewise::train::{self, TrainConfig, TrainMode};
use framewise::Tensor;

use crate::config::{ModeSection, RunConfig, RESOLVED_NAME};

/// Create the output directory and record the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RESOLVED_NAME), cfg.to_toml()?)?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    let samples = data::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    ensure!(!samples.is_empty(), "dataset {} is empty", path.display());
    Ok(samples)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_video_pgms(dir: &Path, video: &Tensor, side: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for j in 0..video.rows() {
        io::save_pgm(&dir.join(format!("frame_{j}.pgm")), video.row(j), side, side)?;
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let g = &cfg.gen_data;
    let samples = data::gen_bouncing_range(g.first, g.count, cfg.model.frames, cfg.model.side, cfg.seed, g.workers)?;
    data::save_dataset(&out.join("dataset.fvck"), &samples)?;
    let mut csv = String::from("index,label,direction,x0,y0,vx,vy\n");
    for (i, s) in samples.iter().enumerate() {
        let m = s.meta;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            g.first + i as u64,
            s.label,
            data::direction_name(s.label),
            m.x0,
            m.y0,
            m.vx,
            m.vy
        );
    }
    write(&out.join("labels.csv"), &csv)?;
    for (i, s) in samples.iter().take(g.preview).enumerate() {
        write_video_pgms(&out.join("preview").join(format!("video_{i}")), &s.video, cfg.model.side)?;
    }
    info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn run_training(cfg: &RunConfig, init: &Checkpoint, tc: &TrainConfig, data_path: &Path, every: usize, stem: &str) -> Result<()> {
    let out = prepare_out(cfg)?;
    let samples = load_dataset(data_path)?;
    let want = [init.config.frames, init.config.frame_dim];
    ensure!(
        samples[0].video.shape() == want,
        "dataset videos are {:?} but the model expects {want:?}",
        samples[0].video.shape()
    );
    let pairs = data::training_pairs(&samples);
    let outcome = train::train_with(init, &pairs, tc, |step, ck, loss| {
        if every > 0 && (step + 1) % every == 0 {
            ck.save(&out.join(format!("{stem}_step{}.fvck", step + 1)))?;
            info!("step {} loss {loss}", step + 1);
        }
        Ok(())
    })?;
    outcome.checkpoint.save(&out.join(format!("{stem}.fvck")))?;
    write(&out.join(format!("{stem}_loss.csv")), &train::loss_csv(&outcome.losses))?;
    if !outcome.losses.is_empty() {
        let window = (outcome.losses.len() / 2).clamp(1, 100);
        let (first, last) = train::loss_window_means(&outcome.losses, window);
        info!("mean loss over first/last {window} steps: {first} -> {last} (ratio {})", last / first);
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.pretrain;
    let model_cfg = cfg.model.to_model_config();
    let init = Checkpoint::init(&model_cfg, cfg.seed)?;
    let tc = TrainConfig {
        mode: TrainMode::Pretrain,
        p_async: 0.0,
        batch_size: p.batch_size,
        steps: p.steps,
        learning_rate: p.learning_rate,
        seed: cfg.seed,
        ..TrainConfig::pretrain()
    };
    run_training(cfg, &init, &tc, &p.data, p.checkpoint_every, "base")
}

pub fn adapt(cfg: &RunConfig) -> Result<()> {
    let a = &cfg.adapt;
    let base = load_ckpt(&a.base)?;
    ensure!(!base.has_lora(), "{} already carries low-rank factors", a.base.display());
    let targets: Vec<&str> = a.targets.iter().map(String::as_str).collect();
    let init = base.attach_lora(&targets, a.rank, a.alpha, cfg.seed)?;
    info!("adapting {} weights: {:?}", init.lora.len(), init.lora.keys().collect::<Vec<_>>());
    let tc = TrainConfig {
        mode: TrainMode::Adapt,
        p_async: a.p_async,
        batch_size: a.batch_size,
        steps: a.steps,
        learning_rate: a.learning_rate,
        seed: cfg.seed,
        ..TrainConfig::adapt()
    };
    run_training(cfg, &init, &tc, &a.data, a.checkpoint_every, "adapted")
}

fn parse_mode(m: &ModeSection) -> Result<Mode> {
    Ok(Mode::parse(&m.mode, m.kappa, m.kappa_end, m.head, m.tail, m.extend)?)
}

fn with_alpha_scale(ck: Checkpoint, scale: f64) -> Result<Checkpoint> {
    if scale == 1.0 {
        return Ok(ck);
    }
    if !ck.has_lora() {
        warn!("lora_alpha_scale {scale} has no effect on a checkpoint without low-rank factors");
    }
    Ok(ck.with_lora_alpha_scale(scale)?)
}

/// Requests for dataset samples `indices`, each seeded from the run seed
/// and its position.
fn dataset_requests(
    roles: &[FrameRole],
    samples: &[VideoSample],
    indices: std::ops::Range<usize>,
    steps: usize,
    shift: f64,
    label: Option<usize>,
    seed: u64,
) -> Result<Vec<SampleRequest>> {
    let schedule = make_schedule(steps, shift)?;
    indices
        .enumerate()
        .map(|(k, i)| {
            let s = samples
                .get(i)
                .with_context(|| format!("dataset has {} samples, index {i} requested", samples.len()))?;
            Ok(SampleRequest {
                roles: roles.to_vec(),
                schedule: schedule.clone(),
                label: label.unwrap_or(s.label),
                conditioning: conditioning_from(roles, &s.video),
                seed: rng::mix(seed, k as u64),
            })
        })
        .collect()
}

fn check_frames(ck: &Checkpoint, samples: &[VideoSample]) -> Result<()> {
    let want = [ck.config.frames, ck.config.frame_dim];
    ensure!(
        samples[0].video.shape() == want,
        "dataset videos are {:?}, checkpoint expects {want:?}",
        samples[0].video.shape()
    );
    Ok(())
}

fn attention_csv_name(tag: &str, step: usize, block: usize) -> String {
    format!("{tag}_step{step}_block{block}.csv")
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let s = &cfg.sample;
    let ck = with_alpha_scale(load_ckpt(&s.ckpt)?, s.lora_alpha_scale)?;
    let side = data::side_of(ck.config.frame_dim)?;
    let roles = mode_presets(parse_mode(&cfg.mode)?, ck.config.frames)?;
    let requests = match &s.data {
        Some(path) => {
            let samples = load_dataset(path)?;
            check_frames(&ck, &samples)?;
            dataset_requests(&roles, &samples, s.index..s.index + s.count, s.steps, s.shift, s.label, cfg.seed)?
        }
        None => {
            if roles.iter().any(FrameRole::is_conditioned) {
                bail!("mode `{}` conditions on frames; give a dataset with --data", cfg.mode.mode);
            }
            let Some(label) = s.label else {
                bail!("without a dataset the label must be given with --label");
            };
            let schedule = make_schedule(s.steps, s.shift)?;
            (0..s.count)
                .map(|k| SampleRequest {
                    roles: roles.clone(),
                    schedule: schedule.clone(),
                    label,
                    conditioning: Default::default(),
                    seed: rng::mix(cfg.seed, k as u64),
                })
                .collect()
        }
    };
    let plan = compile_plan(&roles, &requests[0].schedule)?;
    write(&out.join("plan_sigma.csv"), &plan.to_csv())?;

    let videos = if s.attention {
        let dir = out.join("attention");
        fs::create_dir_all(&dir)?;
        let mut videos = Vec::with_capacity(requests.len());
        for (i, req) in requests.iter().enumerate() {
            let o = sampler::euler_sample_recorded(&ck, req, ck.config.frame_dim, true)?;
            let rec = o.attention.expect("recording requested");
            for (step, maps) in rec.steps.iter().enumerate() {
                for (block, map) in maps.iter().enumerate() {
                    let name = attention_csv_name(&format!("sample_{i}"), step, block);
                    write(&dir.join(name), &analysis::attention_csv(map))?;
                }
            }
            videos.push(o.video);
        }
        videos
    } else {
        sampler::sample_many(&ck, &requests, ck.config.frame_dim, s.workers)?
    };

    let mut index_csv = String::from("sample,dataset_index,label,seed\n");
    for (i, (video, req)) in videos.iter().zip(&requests).enumerate() {
        io::save_fvt(&out.join(format!("sample_{i}.fvt")), video)?;
        write_video_pgms(&out.join(format!("sample_{i}")), video, side)?;
        let dataset_index = s.data.as_ref().map(|_| (s.index + i).to_string()).unwrap_or_default();
        let _ = writeln!(index_csv, "{i},{dataset_index},{},{}", req.label, req.seed);
    }
    write(&out.join("samples.csv"), &index_csv)?;
    info!("wrote {} samples to {}", videos.len(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let e = &cfg.eval;
    let ck = with_alpha_scale(load_ckpt(&e.ckpt)?, e.lora_alpha_scale)?;
    let side = data::side_of(ck.config.frame_dim)?;
    let samples = load_dataset(&e.data)?;
    check_frames(&ck, &samples)?;
    let roles = mode_presets(parse_mode(&cfg.mode)?, ck.config.frames)?;
    let requests = dataset_requests(&roles, &samples, e.first..e.first + e.count, e.steps, e.shift, None, cfg.seed)?;
    let videos = sampler::sample_many(&ck, &requests, ck.config.frame_dim, e.workers)?;
    let metrics = videos
        .iter()
        .zip(&requests)
        .map(|(v, r)| analysis::evaluate_sample(v, side, &r.roles, &r.conditioning, r.label))
        .collect::<framewise::Result<Vec<_>>>()?;
    let summary = analysis::summarize(&metrics)?;
    write(&out.join("metrics.csv"), &analysis::metrics_csv(&metrics))?;
    write(&out.join("summary.csv"), &analysis::summary_csv(&summary))?;
    info!(
        "{} samples: clamp error {}, label agreement {:.3}, smoothness {:.4}, dynamic degree {:.3}",
        summary.count, summary.clamp_error, summary.label_agreement, summary.smoothness, summary.dynamic_degree
    );
    Ok(())
}

pub fn attention(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let a = &cfg.attention;
    let mut ckpts = vec![("model", load_ckpt(&a.ckpt)?)];
    if let Some(p) = &a.compare {
        let other = load_ckpt(p)?;
        ensure!(
            other.config.same_architecture(&ckpts[0].1.config),
            "compared checkpoints have different architectures"
        );
        ckpts.push(("compare", other));
    }
    let samples = load_dataset(&a.data)?;
    check_frames(&ckpts[0].1, &samples)?;
    let roles = mode_presets(parse_mode(&cfg.mode)?, ckpts[0].1.config.frames)?;
    let request = dataset_requests(&roles, &samples, a.index..a.index + 1, a.steps, a.shift, None, cfg.seed)?.remove(0);

    let dir = out.join("attention");
    fs::create_dir_all(&dir)?;
    let mut dumps: Vec<(&str, AttentionDump)> = Vec::new();
    for (tag, ck) in &ckpts {
        for d in analysis::analyze_attention(ck, &request, &a.record, a.block)? {
            write(&dir.join(attention_csv_name(tag, d.step, d.block)), &analysis::attention_csv(&d.map))?;
            dumps.push((tag, d));
        }
    }
    let rows: Vec<(&str, &AttentionDump)> = dumps.iter().map(|(t, d)| (*t, d)).collect();
    write(&out.join("attention_summary.csv"), &analysis::attention_summary_csv(&rows))?;
    info!("wrote {} attention maps to {}", dumps.len(), dir.display());
    Ok(())
}

pub fn drift(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let d = &cfg.drift;
    let report = analysis::drift(&load_ckpt(&d.base)?, &load_ckpt(&d.adapted)?)?;
    write(&out.join("drift.csv"), &report.entries_csv())?;
    write(&out.join("drift_top.csv"), &report.top_csv(d.top))?;
    write(&out.join("drift_by_kind.csv"), &report.by_kind_csv())?;
    write(&out.join("drift_by_block.csv"), &report.by_block_csv())?;
    let changed = report.changed();
    info!("{} of {} parameters changed", changed.len(), report.entries.len());
    Ok(())
}
