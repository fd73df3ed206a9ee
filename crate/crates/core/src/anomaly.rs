//! Monte-Carlo inference: the encoder runs once, `K` latent samples are
//! decoded, and the spread of the decoded means (epistemic) is combined with
//! the decoder's own predicted variance (aleatoric).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{batch_tensor, reparameterize, Model};
use crate::nn::LayerParams;
use crate::tensor::{Float, Tape, Tensor};

/// Guard added to the total uncertainty before dividing by it.
pub const SCORE_EPS: f64 = 1e-8;

/// Row-major per-pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl PixelMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn same_shape(&self, image: &Image) -> bool {
        self.height == image.height && self.width == image.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyDecomposition {
    /// Average of the decoded means over the samples.
    pub mean_recon: PixelMap,
    /// Population variance (divide by `K`) of the decoded means.
    pub epistemic: PixelMap,
    /// Average of the decoded variances.
    pub aleatoric: PixelMap,
    /// `epistemic + aleatoric`, elementwise.
    pub total: PixelMap,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    pub pixel_map: PixelMap,
    pub score: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

/// Combines `K` decoded means and variances of one image into the
/// decomposition.
pub fn decompose(height: usize, width: usize, means: &[Vec<f64>], variances: &[Vec<f64>]) -> Result<UncertaintyDecomposition> {
    let k = means.len();
    if k == 0 {
        return Err(Error::Config("at least one Monte-Carlo sample is required".into()));
    }
    let n = height * width;
    if variances.len() != k || means.iter().chain(variances).any(|m| m.len() != n) {
        return Err(Error::shape("decompose", format!("expected {k} samples of {n} pixels")));
    }
    let kf = k as f64;
    let mut mean = vec![0.0; n];
    let mut epistemic = vec![0.0; n];
    let mut aleatoric = vec![0.0; n];
    for p in 0..n {
        let m = means.iter().map(|s| s[p]).sum::<f64>() / kf;
        mean[p] = m;
        epistemic[p] = means.iter().map(|s| (s[p] - m) * (s[p] - m)).sum::<f64>() / kf;
        aleatoric[p] = variances.iter().map(|s| s[p]).sum::<f64>() / kf;
    }
    let total = epistemic.iter().zip(&aleatoric).map(|(e, a)| e + a).collect();
    let map = |values| PixelMap { height, width, values };
    Ok(UncertaintyDecomposition {
        mean_recon: map(mean),
        epistemic: map(epistemic),
        aleatoric: map(aleatoric),
        total: map(total),
        samples: k,
    })
}

/// Monte-Carlo inference for a batch of images; `rngs[i]` drives the latent
/// noise of image `i`, so results do not depend on how images are batched.
pub fn mc_infer_batch<T: Float, R: Rng>(
    model: &Model,
    params: &LayerParams<T>,
    images: &[&Image],
    samples: usize,
    rngs: &mut [R],
) -> Result<Vec<UncertaintyDecomposition>> {
    if samples == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if rngs.len() != images.len() {
        return Err(Error::Config("one generator per image is required".into()));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let side = model.config().input_size;
    if images.iter().any(|im| im.height != side || im.width != side) {
        return Err(Error::dim("mc_infer", &[images[0].height, images[0].width], &[side, side]));
    }
    let latent = model.config().latent_dim;
    let stochastic = model.config().kind.is_stochastic();
    let b = images.len();
    let pixels = side * side;

    let mut tape = Tape::<T>::new();
    let binds = params.bind(&mut tape, false);
    let slices: Vec<&[f32]> = images.iter().map(|im| im.pixels.as_slice()).collect();
    let x = tape.constant(batch_tensor(&slices, side)?);
    let g = model.encode(&mut tape, &binds, x)?;

    let mut means = vec![Vec::with_capacity(samples); b];
    let mut vars = vec![Vec::with_capacity(samples); b];
    for _ in 0..samples {
        let z = if stochastic {
            let mut noise = Vec::with_capacity(b * latent);
            for rng in rngs.iter_mut() {
                noise.extend((0..latent).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))));
            }
            reparameterize(&mut tape, &g, Tensor::new(&[b, latent], noise)?)?
        } else {
            g.mu
        };
        let r = model.decode(&mut tape, &binds, z)?;
        let mean = tape.value(r.mean).data();
        let lv = tape.value(r.log_var).data();
        for i in 0..b {
            let span = i * pixels..(i + 1) * pixels;
            means[i].push(mean[span.clone()].iter().map(|v| v.as_f64()).collect::<Vec<_>>());
            vars[i].push(lv[span].iter().map(|v| v.as_f64().exp()).collect::<Vec<_>>());
        }
    }
    means
        .iter()
        .zip(&vars)
        .map(|(m, v)| decompose(side, side, m, v))
        .collect()
}

/// Monte-Carlo inference for a single image.
pub fn mc_infer<T: Float, R: Rng>(
    model: &Model,
    params: &LayerParams<T>,
    image: &Image,
    samples: usize,
    rng: &mut R,
) -> Result<UncertaintyDecomposition> {
    let mut out = mc_infer_batch(model, params, &[image], samples, std::slice::from_mut(rng))?;
    Ok(out.remove(0))
}

fn check_shape(image: &Image, u: &UncertaintyDecomposition) -> Result<()> {
    if !u.mean_recon.same_shape(image) || image.pixels.len() != u.total.values.len() {
        return Err(Error::dim(
            "pixel_anomaly",
            &[image.height, image.width],
            &[u.mean_recon.height, u.mean_recon.width],
        ));
    }
    Ok(())
}

fn squared_error(image: &Image, u: &UncertaintyDecomposition) -> Vec<f64> {
    image
        .pixels
        .iter()
        .zip(&u.mean_recon.values)
        .map(|(&x, &m)| (x as f64 - m).powi(2))
        .collect()
}

/// `(x - mean_recon)^2 / (total + eps)` per pixel.
pub fn pixel_anomaly(image: &Image, u: &UncertaintyDecomposition) -> Result<PixelMap> {
    check_shape(image, u)?;
    let values = squared_error(image, u)
        .into_iter()
        .zip(&u.total.values)
        .map(|(e, &t)| e / (t + SCORE_EPS))
        .collect();
    Ok(PixelMap {
        height: image.height,
        width: image.width,
        values,
    })
}

/// Mean squared reconstruction error, the raw part of the image score.
pub fn mean_squared_error(image: &Image, u: &UncertaintyDecomposition) -> Result<f64> {
    check_shape(image, u)?;
    let e = squared_error(image, u);
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// `alpha * mean(squared error) + (1 - alpha) * mean(pixel_anomaly)`.
pub fn image_score(image: &Image, u: &UncertaintyDecomposition, alpha: f64) -> Result<f64> {
    Ok(score(image, u, alpha)?.score)
}

pub fn score(image: &Image, u: &UncertaintyDecomposition, alpha: f64) -> Result<AnomalyResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mse = mean_squared_error(image, u)?;
    let pixel_map = pixel_anomaly(image, u)?;
    Ok(AnomalyResult {
        score: alpha * mse + (1.0 - alpha) * pixel_map.mean(),
        pixel_map,
        alpha,
        epsilon: SCORE_EPS,
    })
}
