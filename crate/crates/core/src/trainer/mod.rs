//! Optimization loop: Adam with bias correction, global-norm gradient
//! clipping, early stopping on validation loss, and per-epoch logging.

mod checkpoint;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::anomaly::mc_infer_batch;
use crate::data::{record_rng, SliceRecord};
use crate::error::{Error, Result};
use crate::model::{batch_tensor, reparameterize, Model, ModelKind};
use crate::nn::LayerParams;
use crate::objective::{elbo_loss, squared_error, BetaSchedule, LossBreakdown};
use crate::tensor::{Float, Tape, Tensor};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Which validation quantity drives early stopping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopMetric {
    Total,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta: BetaSchedule,
    pub stop_metric: StopMetric,
    /// Monte-Carlo samples for the logged validation uncertainty.
    pub uncertainty_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            max_epochs: 100,
            early_stop_patience: 10,
            grad_clip_norm: 1.0,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta: BetaSchedule::default(),
            stop_metric: StopMetric::Total,
            uncertainty_samples: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("max_epochs", self.max_epochs as f64),
            ("early_stop_patience", self.early_stop_patience as f64),
            ("grad_clip_norm", self.grad_clip_norm),
            ("adam_eps", self.adam_eps),
            ("uncertainty_samples", self.uncertainty_samples as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.beta.beta_max >= 0.0) {
            return Err(Error::Config("beta_max must be non-negative".into()));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------- adam

/// One Adam update on a flat slice; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Float>(theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("Adam step count starts at 1".into()));
    }
    let n = theta.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::dim("adam_step", &[n], &[grad.len(), m.len(), v.len()]));
    }
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let c1 = T::of(1.0 - beta1.powf(t as f64));
    let c2 = T::of(1.0 - beta2.powf(t as f64));
    let (lr, eps) = (T::of(lr), T::of(eps));
    for i in 0..n {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: LayerParams<T>,
    pub second: LayerParams<T>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &LayerParams<T>) -> Self {
        let zeros = || {
            let mut p = LayerParams::new();
            for (name, t) in params.iter() {
                p.insert(name, Tensor::zeros(t.shape())).expect("unique names");
            }
            p
        };
        AdamState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut LayerParams<T>, grads: &[(String, Tensor<T>)], config: &TrainConfig) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Config("gradients and optimizer state must cover every parameter".into()));
        }
        self.step += 1;
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for (((name, theta), ((mname, m), (_, v))), (gname, g)) in params.iter_mut().zip(moments).zip(grads) {
            if name != gname || name != mname {
                return Err(Error::Config(format!("gradient {gname:?} does not line up with parameter {name:?}")));
            }
            adam_update(
                theta.data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
                self.step,
            )?;
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.squared_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

pub fn global_norm<T: Float>(grads: &[(String, Tensor<T>)]) -> f64 {
    grads.iter().map(|(_, g)| g.squared_norm()).sum::<f64>().sqrt()
}

// -------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: f64,
    pub val_mean_uncertainty: f64,
    /// Largest pre-clip gradient norm seen this epoch.
    pub max_grad_norm: f64,
    /// Largest post-clip gradient norm seen this epoch.
    pub max_clipped_norm: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_total,train_recon,train_kl,beta,val_total,val_mean_uncertainty";

pub fn epoch_logs_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.epoch, l.train.total, l.train.recon_nll, l.train.kl, l.train.beta, l.val_total, l.val_mean_uncertainty
        );
    }
    out
}

/// Loss of one batch on a fresh tape. Returns the tape, the loss variable and
/// the bound parameters so the caller can backpropagate.
fn batch_loss<T: Float, R: Rng>(
    model: &Model,
    params: &LayerParams<T>,
    images: &[&[f32]],
    beta: f64,
    trainable: bool,
    rng: &mut R,
) -> Result<(Tape<T>, crate::tensor::Var, crate::nn::Bindings, LossBreakdown)> {
    let mut tape = Tape::new();
    let binds = params.bind(&mut tape, trainable);
    let side = model.config().input_size;
    let x = tape.constant(batch_tensor(images, side)?);
    let g = model.encode(&mut tape, &binds, x)?;
    let (loss, breakdown) = if model.config().kind == ModelKind::Deterministic {
        let r = model.decode(&mut tape, &binds, g.mu)?;
        let loss = squared_error(&mut tape, x, r.mean)?;
        let v = tape.value(loss).item().as_f64();
        (loss, LossBreakdown { recon_nll: v, kl: 0.0, beta: 0.0, total: v })
    } else {
        let latent = model.config().latent_dim;
        let noise = (0..images.len() * latent).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        let z = reparameterize(&mut tape, &g, Tensor::new(&[images.len(), latent], noise)?)?;
        let r = model.decode(&mut tape, &binds, z)?;
        elbo_loss(&mut tape, x, &r, &g, beta)?
    };
    Ok((tape, loss, binds, breakdown))
}

fn accumulate(sum: &mut LossBreakdown, part: &LossBreakdown, weight: f64) {
    sum.recon_nll += part.recon_nll * weight;
    sum.kl += part.kl * weight;
    sum.total += part.total * weight;
}

fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_7a11_da7e
}

/// Validation loss at the schedule's final beta, with noise drawn from a
/// stream fixed by `seed`, so it is a pure function of the parameters.
pub fn validation_loss<T: Float>(
    model: &Model,
    params: &LayerParams<T>,
    val: &[SliceRecord],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(validation_seed(config.seed));
    let beta = config.beta.beta_max;
    let mut sum = LossBreakdown { recon_nll: 0.0, kl: 0.0, beta, total: 0.0 };
    for chunk in val.chunks(config.batch_size) {
        let images: Vec<&[f32]> = chunk.iter().map(|r| r.image.pixels.as_slice()).collect();
        let (_, _, _, b) = batch_loss(model, params, &images, beta, false, &mut rng)?;
        accumulate(&mut sum, &b, chunk.len() as f64);
    }
    let n = val.len() as f64;
    sum.recon_nll /= n;
    sum.kl /= n;
    sum.total /= n;
    Ok(sum)
}

/// Mean total uncertainty over all validation pixels.
pub fn mean_uncertainty<T: Float>(
    model: &Model,
    params: &LayerParams<T>,
    records: &[SliceRecord],
    samples: usize,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in records.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|r| &r.image).collect();
        let mut rngs: Vec<_> = chunk.iter().map(|r| record_rng(seed, &r.id)).collect();
        for u in mc_infer_batch(model, params, &images, samples, &mut rngs)? {
            total += u.total.values.iter().sum::<f64>();
            count += u.total.values.len();
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    /// State at the epoch with the best validation loss.
    pub best: Checkpoint<T>,
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Trains from `params` and returns the best-validation checkpoint together
/// with one log row per completed epoch.
pub fn fit<T: Float>(
    model: &Model,
    params: LayerParams<T>,
    train: &[SliceRecord],
    val: &[SliceRecord],
    config: &TrainConfig,
) -> Result<FitOutcome<T>> {
    fit_with(model, params, train, val, config, |_, _| {})
}

/// As [`fit`], calling `on_epoch` after each epoch is logged.
pub fn fit_with<T: Float>(
    model: &Model,
    mut params: LayerParams<T>,
    train: &[SliceRecord],
    val: &[SliceRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &LayerParams<T>),
) -> Result<FitOutcome<T>> {
    config.validate()?;
    model.check_params(&params)?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&params);
    let mut logs = Vec::new();
    let mut best: Option<Checkpoint<T>> = None;
    let mut best_metric = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let beta = config.beta.beta_at(epoch - 1);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown { recon_nll: 0.0, kl: 0.0, beta, total: 0.0 };
        let (mut max_norm, mut max_clipped) = (0.0f64, 0.0f64);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&[f32]> = idx.iter().map(|&i| train[i].image.pixels.as_slice()).collect();
            let (mut tape, loss, binds, b) = batch_loss(model, &params, &images, beta, true, &mut rng)?;
            if !b.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            tape.backward(loss)?;
            let mut grads = binds.gradients(&tape);
            drop(tape);
            let pre = clip_grad_norm(&mut grads, config.grad_clip_norm);
            max_norm = max_norm.max(pre);
            max_clipped = max_clipped.max(global_norm(&grads));
            adam.step(&mut params, &grads, config)?;
            accumulate(&mut sum, &b, idx.len() as f64);
        }
        let n = train.len() as f64;
        sum.recon_nll /= n;
        sum.kl /= n;
        sum.total /= n;

        let v = validation_loss(model, &params, val, config)?;
        if !v.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        let unc = mean_uncertainty(
            model,
            &params,
            val,
            config.uncertainty_samples,
            validation_seed(config.seed),
            config.batch_size,
        )?;
        let log = EpochLog {
            epoch,
            train: sum,
            val_total: v.total,
            val_mean_uncertainty: unc,
            max_grad_norm: max_norm,
            max_clipped_norm: max_clipped,
        };
        on_epoch(&log, &params);
        logs.push(log);

        let metric = match config.stop_metric {
            StopMetric::Total => v.total,
            StopMetric::Reconstruction => v.recon_nll,
        };
        if metric < best_metric {
            best_metric = metric;
            since_best = 0;
            best = Some(Checkpoint {
                model: model.config().clone(),
                params: params.clone(),
                optimizer: adam.clone(),
                epoch,
                best_val_loss: v.total,
                rng_seed: config.seed,
                rng_word_pos: rng.get_word_pos(),
            });
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let best = best.ok_or_else(|| Error::Data("no epoch produced a finite validation loss".into()))?;
    Ok(FitOutcome { best, logs, stopped_early })
}
