//! Training objective: Gaussian reconstruction negative log-likelihood plus a
//! warmed-up KL term. Per-sample sums, averaged over the batch.

use crate::error::{Error, Result};
use crate::model::{LatentGaussian, Reconstruction};
use crate::tensor::{Float, Tape, Var};

/// Added to every variance before it is used as a divisor.
pub const VARIANCE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

/// Linear KL warm-up from zero to `beta_max` over `warmup_epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub beta_max: f64,
    pub warmup_epochs: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            beta_max: 0.1,
            warmup_epochs: 10,
        }
    }
}

impl BetaSchedule {
    pub fn beta_at(&self, epoch: usize) -> f64 {
        beta_at(epoch, self)
    }
}

pub fn beta_at(epoch: usize, schedule: &BetaSchedule) -> f64 {
    if schedule.warmup_epochs == 0 {
        return schedule.beta_max;
    }
    let ramp = (epoch as f64 / schedule.warmup_epochs as f64).min(1.0);
    schedule.beta_max * ramp
}

fn batch_size<T: Float>(tape: &Tape<T>, v: Var) -> usize {
    tape.shape(v).first().copied().unwrap_or(1)
}

/// `mean_b sum_i [ log_var_i / 2 + (x_i - mean_i)^2 / (2 (exp(log_var_i) + eps)) ]`.
pub fn reconstruction_nll<T: Float>(tape: &mut Tape<T>, x: Var, recon: &Reconstruction) -> Result<Var> {
    if tape.shape(x) != tape.shape(recon.mean) || tape.shape(x) != tape.shape(recon.log_var) {
        return Err(Error::dim("reconstruction_nll", tape.shape(x), tape.shape(recon.mean)));
    }
    let batch = batch_size(tape, x);
    let diff = tape.sub(x, recon.mean)?;
    let sq = tape.mul(diff, diff)?;
    let var = tape.exp(recon.log_var)?;
    let var = tape.add_scalar(var, VARIANCE_EPS)?;
    let twice = tape.scale(var, 2.0)?;
    let weighted = tape.div(sq, twice)?;
    let half_lv = tape.scale(recon.log_var, 0.5)?;
    let per_pixel = tape.add(half_lv, weighted)?;
    let total = tape.sum(per_pixel)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// `mean_b 1/2 sum_j (mu_j^2 + exp(log_var_j) - log_var_j - 1)`.
pub fn kl_divergence<T: Float>(tape: &mut Tape<T>, g: &LatentGaussian) -> Result<Var> {
    if tape.shape(g.mu) != tape.shape(g.log_var) {
        return Err(Error::dim("kl_divergence", tape.shape(g.mu), tape.shape(g.log_var)));
    }
    let batch = batch_size(tape, g.mu);
    let mu2 = tape.mul(g.mu, g.mu)?;
    let var = tape.exp(g.log_var)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, g.log_var)?;
    let c = tape.add_scalar(b, -1.0)?;
    let total = tape.sum(c)?;
    tape.scale(total, 0.5 / batch as f64)
}

/// Sum of squared errors per sample, averaged over the batch.
pub fn squared_error<T: Float>(tape: &mut Tape<T>, x: Var, mean: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(mean) {
        return Err(Error::dim("squared_error", tape.shape(x), tape.shape(mean)));
    }
    let batch = batch_size(tape, x);
    let diff = tape.sub(x, mean)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// `recon_nll + beta * kl`; returns the differentiable total and its parts.
pub fn elbo_loss<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    recon: &Reconstruction,
    g: &LatentGaussian,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let nll = reconstruction_nll(tape, x, recon)?;
    let kl = kl_divergence(tape, g)?;
    let weighted = tape.scale(kl, beta)?;
    let total = tape.add(nll, weighted)?;
    let breakdown = LossBreakdown {
        recon_nll: tape.value(nll).item().as_f64(),
        kl: tape.value(kl).item().as_f64(),
        beta,
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, breakdown))
}
