//! Frame-wise linear probability paths and the frame-aware flow-matching
//! objective.
//!
//! Frame `i` of a video moves on its own segment
//! `x_i(tau_i) = (1 - tau_i) x0_i + tau_i x1_i` between data (`tau = 0`) and
//! the Gaussian prior (`tau = 1`). The regression target is `X1 - X0`, the
//! same for every `tau`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Checkpoint, Trainable};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use crate::timestep::{ptss_sample, VectorTimestep};

/// Row `i` is `(1 - tau_i) x0_i + tau_i x1_i`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, tau: &[f64]) -> Result<Tensor> {
    check_pair(x0, x1, "interpolate")?;
    if tau.len() != x0.rows() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: x0.shape().to_vec(),
            rhs: vec![tau.len()],
        });
    }
    let n = x0.cols();
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .enumerate()
        .map(|(idx, (&a, &b))| {
            let t = tau[idx / n];
            (1.0 - t) * a + t * b
        })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `X1 - X0`.
pub fn target_field(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    check_pair(x0, x1, "target_field")?;
    x1.sub(x0)
}

fn check_pair(x0: &Tensor, x1: &Tensor, op: &'static str) -> Result<()> {
    if x0.shape() != x1.shape() || x0.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    Ok(())
}

/// One training draw.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub tau: VectorTimestep,
    pub x_tau: Tensor,
    pub target: Tensor,
}

/// Prior noise for batch slot `index` comes from the `(seed, Prior, index)`
/// stream and the timestep from `(seed, Timestep, index)`.
pub fn draw_field_sample(x0: &Tensor, p_async: f64, seed: u64, index: u64) -> Result<FieldSample> {
    let x1 = draw_prior(x0.shape(), seed, index)?;
    let mut trng = rng::stream(seed, Domain::Timestep, index);
    let tau = ptss_sample(x0.rows(), p_async, &mut trng)?;
    let x_tau = interpolate(x0, &x1, tau.values())?;
    let target = target_field(x0, &x1)?;
    Ok(FieldSample {
        x0: x0.clone(),
        x1,
        tau,
        x_tau,
        target,
    })
}

fn draw_prior(shape: &[usize], seed: u64, index: u64) -> Result<Tensor> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(&mut rng::stream(seed, Domain::Prior, index), len))
}

/// Squared Frobenius residual `sum((pred - target)^2)` on the tape.
fn squared_residual(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// Batch mean of `||v(X_tau, tau, c) - (X1 - X0)||_F^2`, recorded on `tape`.
pub fn fafm_loss_on_tape(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    batch: &[(&Tensor, usize)],
    p_async: f64,
    seed: u64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total: Option<Var> = None;
    for (i, &(x0, label)) in batch.iter().enumerate() {
        let sample = draw_field_sample(x0, p_async, seed, i as u64)?;
        let z = tape.constant(sample.x_tau);
        let pred = model.forward(tape, z, sample.tau.values(), label, None)?;
        let r = squared_residual(tape, pred, &sample.target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, r)?,
            None => r,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64))
}

pub fn fafm_loss(ckpt: &Checkpoint, batch: &[(&Tensor, usize)], p_async: f64, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, ckpt, Trainable::Nothing);
    let loss = fafm_loss_on_tape(&mut tape, &model, batch, p_async, seed)?;
    Ok(tape.value(loss).item())
}

/// Conventional scalar-timestep flow-matching loss: one `t ~ U[0, 1)` per
/// sample, shared by all frames, drawn from the same streams as
/// [`fafm_loss`].
pub fn fm_loss_scalar(ckpt: &Checkpoint, batch: &[(&Tensor, usize)], seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, ckpt, Trainable::Nothing);
    let mut total: Option<Var> = None;
    for (i, &(x0, label)) in batch.iter().enumerate() {
        let x1 = draw_prior(x0.shape(), seed, i as u64)?;
        let t = rng::uniform(&mut rng::stream(seed, Domain::Timestep, i as u64));
        let z_t = x0.scale(1.0 - t).add(&x1.scale(t))?;
        let target = x1.sub(x0)?;
        let z = tape.constant(z_t);
        let tau = vec![t; x0.rows()];
        let pred = model.forward(&mut tape, z, &tau, label, None)?;
        let r = squared_residual(&mut tape, pred, &target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, r)?,
            None => r,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_hand_case() {
        let x0 = Tensor::seeded_randn(&[3, 4], 1);
        let x1 = Tensor::seeded_randn(&[3, 4], 2);
        assert!(interpolate(&x0, &x1, &[0.0; 3]).unwrap().bit_eq(&x0));
        assert!(interpolate(&x0, &x1, &[1.0; 3]).unwrap().bit_eq(&x1));
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, 4.0]]).unwrap();
        assert_eq!(interpolate(&a, &b, &[0.25]).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn target_field_cases() {
        let x0 = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let x1 = Tensor::from_rows(&[vec![3.0, 5.0]]).unwrap();
        assert_eq!(target_field(&x0, &x1).unwrap().data(), &[2.0, 3.0]);
        assert!(target_field(&x0, &x0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(target_field(&x0, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn shape_errors() {
        let x0 = Tensor::zeros(&[2, 3]);
        assert!(interpolate(&x0, &x0, &[0.5]).is_err());
        assert!(interpolate(&x0, &Tensor::zeros(&[3, 2]), &[0.5, 0.5]).is_err());
    }

    #[test]
    fn field_sample_invariants() {
        let x0 = Tensor::seeded_randn(&[4, 3], 5);
        let s = draw_field_sample(&x0, 1.0, 9, 0).unwrap();
        for i in 0..4 {
            let t = s.tau.values()[i];
            for j in 0..3 {
                let expected = (1.0 - t) * s.x0.get(i, j) + t * s.x1.get(i, j);
                assert_eq!(s.x_tau.get(i, j), expected);
            }
        }
        assert!(s.target.bit_eq(&s.x1.sub(&s.x0).unwrap()));
    }
}
