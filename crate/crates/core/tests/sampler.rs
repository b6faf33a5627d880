use std::collections::BTreeMap;

use framewise::gradcheck::{randomized, tiny_config};
use framewise::data;
use framewise::model::Checkpoint;
use framewise::sampler::*;
use framewise::timestep::{compile_plan, make_schedule, FrameRole};
use framewise::train::{train, TrainConfig};
use framewise::{ModelConfig, Result, Tensor};

/// Returns `X1 - X0` whatever the input.
struct ConstantField(Tensor);

impl VelocityField for ConstantField {
    fn velocity(&self, _z: &Tensor, _tau: &[f64], _label: usize) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

#[test]
fn euler_is_exact_on_a_constant_field() {
    for seed in 0..5 {
        let x0 = Tensor::seeded_randn(&[6, 5], seed);
        let x1 = Tensor::seeded_randn(&[6, 5], seed + 100);
        let field = ConstantField(x1.sub(&x0).unwrap());
        for steps in [2, 5, 10, 20] {
            for shift in [1.0, 3.0] {
                let plan = compile_plan(&[FrameRole::Generate; 6], &make_schedule(steps, shift).unwrap()).unwrap();
                let (out, _) = integrate(&field, x1.clone(), &plan, 0, false).unwrap();
                assert!(out.max_abs_diff(&x0) < 1e-12, "S = {steps}, shift = {shift}");
            }
        }
    }
}

fn request(roles: Vec<FrameRole>, source: &Tensor, seed: u64) -> SampleRequest {
    SampleRequest {
        conditioning: conditioning_from(&roles, source),
        roles,
        schedule: make_schedule(7, 1.0).unwrap(),
        label: 1,
        seed,
    }
}

#[test]
fn clamped_rows_are_frozen_for_any_checkpoint() {
    let cfg = ModelConfig { frames: 8, ..tiny_config() };
    let modes = [Mode::I2v, Mode::StartEnd, Mode::Complete(3, 3), Mode::Extend(4), Mode::Complete(2, 5)];
    for seed in 0..4 {
        let ck = randomized(&cfg, seed, 0.8);
        let source = Tensor::seeded_randn(&[8, 4], seed + 50);
        for mode in modes {
            let roles = mode_presets(mode, 8).unwrap();
            let req = request(roles.clone(), &source, seed);
            let out = euler_sample(&ck, &req, 4).unwrap();
            for (j, r) in roles.iter().enumerate() {
                if *r == FrameRole::Clamp {
                    let same = out.row(j).iter().zip(source.row(j)).all(|(a, b)| a.to_bits() == b.to_bits());
                    assert!(same, "{mode:?} frame {j}");
                } else {
                    assert_ne!(out.row(j), source.row(j));
                }
            }
        }
    }
}

#[test]
fn synchronized_sampling_matches_scalar_sampler() {
    let cfg = tiny_config();
    for seed in 0..5 {
        let ck = randomized(&cfg, seed, 0.5);
        let schedule = make_schedule(10, 1.0).unwrap();
        let req = SampleRequest {
            roles: vec![FrameRole::Generate; cfg.frames],
            schedule: schedule.clone(),
            label: 2,
            conditioning: BTreeMap::new(),
            seed,
        };
        let a = euler_sample(&ck, &req, cfg.frame_dim).unwrap();
        let b = scalar_euler_sample(&ck, &schedule, 2, seed).unwrap();
        assert!(a.bit_eq(&b));
    }
}

#[test]
fn partial_frames_start_on_path() {
    let cfg = tiny_config();
    let ck = randomized(&cfg, 1, 0.5);
    let source = Tensor::seeded_randn(&[3, 4], 9);
    let roles = vec![FrameRole::Partial(0.3), FrameRole::Generate, FrameRole::Partial(0.0)];
    let req = request(roles, &source, 4);
    let z = prepare_initial(&req, 4).unwrap();
    // kappa 0 coincides with clamping
    assert_eq!(z.row(2), source.row(2));
    let out = euler_sample(&ck, &req, 4).unwrap();
    assert!(out.row(2).iter().zip(source.row(2)).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn attention_record_covers_every_plan_row() {
    let cfg = tiny_config();
    let ck = randomized(&cfg, 2, 0.5);
    let req = request(vec![FrameRole::Generate; 3], &Tensor::zeros(&[3, 4]), 0);
    let out = euler_sample_recorded(&ck, &req, 4, true).unwrap();
    let rec = out.attention.unwrap();
    assert_eq!(rec.steps.len(), req.schedule.steps());
    assert!(rec.steps.iter().all(|maps| maps.len() == cfg.blocks));
    // recording does not change the result
    assert!(out.video.bit_eq(&euler_sample(&ck, &req, 4).unwrap()));
}

#[test]
fn plan_shape_mismatch_is_an_error() {
    let plan = compile_plan(&[FrameRole::Generate; 3], &make_schedule(4, 1.0).unwrap()).unwrap();
    let field = ConstantField(Tensor::zeros(&[2, 2]));
    assert!(integrate(&field, Tensor::zeros(&[2, 2]), &plan, 0, false).is_err());
    let short = ConstantField(Tensor::zeros(&[2, 2]));
    assert!(integrate(&short, Tensor::zeros(&[3, 2]), &plan, 0, false).is_err());
}

fn briefly_trained() -> Checkpoint {
    let cfg = ModelConfig::default();
    let samples = data::gen_bouncing(200, cfg.frames, 8, 7).unwrap();
    let tc = TrainConfig {
        steps: 300,
        ..TrainConfig::pretrain()
    };
    train(&Checkpoint::init(&cfg, 7).unwrap(), &data::training_pairs(&samples), &tc)
        .unwrap()
        .checkpoint
}

#[test]
fn refining_the_schedule_converges() {
    let ck = briefly_trained();
    let n = ck.config.frames;
    let run = |steps: usize| {
        let req = SampleRequest {
            roles: vec![FrameRole::Generate; n],
            schedule: make_schedule(steps, 1.0).unwrap(),
            label: 0,
            conditioning: BTreeMap::new(),
            seed: 42,
        };
        euler_sample(&ck, &req, ck.config.frame_dim).unwrap()
    };
    let outs: Vec<Tensor> = [5, 10, 20, 40, 80].iter().map(|&s| run(s)).collect();
    let gaps: Vec<f64> = outs.windows(2).map(|w| w[1].max_abs_diff(&w[0])).collect();
    assert!(gaps.windows(2).all(|g| g[1] < g[0]), "gaps {gaps:?}");
}
