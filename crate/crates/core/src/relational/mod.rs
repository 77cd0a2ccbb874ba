//! Relational potentials and the losses built on them.
//!
//! Distance potentials are pairwise Euclidean distances normalized by their
//! per-batch mean over off-diagonal pairs; angle potentials are cosines at a
//! vertex token. Both are compared with smooth-L1 and averaged over every
//! entry, diagonal and degenerate entries included.

mod angle;
mod memory;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, DEFAULT_EPS};

pub use angle::{angle_tensor, loss_ra_sp, AngleLossPlan, AngleStrategy, DEFAULT_ANGLE_BUDGET};
pub use memory::{angle_memory_model, format_gb};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialConfig {
    pub huber_threshold: f64,
    pub eps: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        PotentialConfig {
            huber_threshold: 1.0,
            eps: DEFAULT_EPS,
        }
    }
}

impl PotentialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_threshold > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "huber threshold ({}) and eps ({}) must be positive",
                self.huber_threshold, self.eps
            )));
        }
        Ok(())
    }
}

/// Smooth-L1 between two scalars (unit threshold).
pub fn huber(x: f64, y: f64) -> f64 {
    huber_delta(x - y, 1.0)
}

pub(crate) fn huber_delta(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a <= delta {
        0.5 * d * d
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub(crate) fn huber_grad(d: f64) -> f64 {
    if d.abs() <= 1.0 {
        d
    } else {
        d.signum()
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    libm::sqrt(v.map(|x| x * x).sum())
}

/// `‖u_i − u_j‖ / ν`.
pub fn psi_distance(u_i: &[f64], u_j: &[f64], nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::Contract(format!(
            "distance normalizer must be positive, got {nu}"
        )));
    }
    if u_i.len() != u_j.len() {
        return Err(Error::shape("psi_distance", &[u_i.len()], &[u_j.len()]));
    }
    Ok(norm(u_i.iter().zip(u_j).map(|(a, b)| a - b)) / nu)
}

/// Cosine of the angle at `u_j` between `u_i` and `u_k`. Zero when either
/// edge is shorter than `eps`.
pub fn psi_angle(u_i: &[f64], u_j: &[f64], u_k: &[f64], eps: f64) -> f64 {
    let eij: Vec<f64> = u_i.iter().zip(u_j).map(|(a, b)| a - b).collect();
    let ekj: Vec<f64> = u_k.iter().zip(u_j).map(|(a, b)| a - b).collect();
    let (nij, nkj) = (norm(eij.iter().copied()), norm(ekj.iter().copied()));
    if nij < eps || nkj < eps {
        return 0.0;
    }
    eij.iter().zip(&ekj).map(|(a, b)| a * b).sum::<f64>() / (nij * nkj)
}

fn check_btc(name: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, l, c] => Ok((b, l, c)),
        _ => Err(Error::Contract(format!("{name} expects (B,L,C), got {:?}", t.shape()))),
    }
}

/// Pairwise Euclidean distances per batch element, zero diagonal, divided by
/// the mean off-diagonal distance `Σd / (L(L−1))`.
///
/// Squared distances come from `‖a‖² + ‖b‖² − 2⟨a,b⟩` clamped at `eps`
/// before the square root.
pub fn batch_pairwise_dist(feat: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, l, _) = check_btc("batch_pairwise_dist", feat)?;
    if l < 2 {
        return Err(Error::Contract(format!("pairwise distances need L >= 2, got {l}")));
    }
    let sq = feat.square().sum_axes(&[2], false)?; // (B,L)
    let prod = feat.matmul(&feat.transpose(1, 2)?)?; // (B,L,L)
    let raw = sq
        .unsqueeze(2)?
        .broadcast_to(&[b, l, l])?
        .add(&sq.unsqueeze(1)?.broadcast_to(&[b, l, l])?)?
        .sub(&prod.mul_scalar(2.0))?;

    {
        // every off-diagonal pair clamped means every token coincides
        let r = raw.data();
        for bi in 0..b {
            let plane = &r[bi * l * l..(bi + 1) * l * l];
            let collapsed = (0..l * l).all(|p| p / l == p % l || plane[p] <= eps);
            if collapsed {
                return Err(Error::DegenerateBatch {
                    batch: bi,
                    normalizer: libm::sqrt(eps),
                });
            }
        }
    }

    let mut off = vec![1.0; b * l * l];
    for bi in 0..b {
        for i in 0..l {
            off[(bi * l + i) * l + i] = 0.0;
        }
    }
    let dist = raw.clamp_min(eps).sqrt().mul(&Tensor::new(off, &[b, l, l])?)?;
    let mean = dist.sum_axes(&[1, 2], true)?.mul_scalar(1.0 / (l * (l - 1)) as f64);
    dist.div(&mean.broadcast_to(&[b, l, l])?)
}

fn check_pair(name: &'static str, s: &Tensor, t: &Tensor) -> Result<(usize, usize)> {
    let (bs, ls, _) = check_btc(name, s)?;
    let (bt, lt, _) = check_btc(name, t)?;
    if bs != bt || ls != lt {
        return Err(Error::shape(name, s.shape(), t.shape()));
    }
    Ok((bs, ls))
}

/// Distance-wise relational loss between student and teacher token sets
/// `(B, L, C_s)` / `(B, L, C_t)`. The teacher side is detached.
pub fn loss_rd_sp(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    check_pair("loss_rd_sp", student, teacher)?;
    let t = batch_pairwise_dist(&teacher.detach(), DEFAULT_EPS)?;
    let s = batch_pairwise_dist(student, DEFAULT_EPS)?;
    Ok(s.sub(&t)?.huber(1.0).mean_all())
}

fn as_single_batch(name: &'static str, emb: &Tensor, min: usize) -> Result<Tensor> {
    match *emb.shape() {
        [n, c] if n >= min => emb.reshape(&[1, n, c]),
        [n, _] => Err(Error::Contract(format!("{name} needs at least {min} samples, got {n}"))),
        _ => Err(Error::Contract(format!("{name} expects (B,C), got {:?}", emb.shape()))),
    }
}

/// Sample-level distance loss over a mini-batch of embeddings `(B, C)`.
pub fn loss_rd_samples(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    let s = as_single_batch("loss_rd_samples", student, 2)?;
    let t = as_single_batch("loss_rd_samples", teacher, 2)?;
    loss_rd_sp(&s, &t)
}

/// Sample-level angle loss over a mini-batch of embeddings `(B, C)`.
pub fn loss_ra_samples(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    let s = as_single_batch("loss_ra_samples", student, 3)?;
    let t = as_single_batch("loss_ra_samples", teacher, 3)?;
    loss_ra_sp(&s, &t, &AngleLossPlan::default())
}
