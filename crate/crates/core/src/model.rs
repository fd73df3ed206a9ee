//! The Bayesian VAE: attention-augmented convolutional encoder producing a
//! diagonal Gaussian posterior, reparameterized sampling, and a decoder that
//! emits a per-pixel mean and log-variance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, LayerParams, Linear, MultiHeadAttention};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Log-variances from either network are clamped to this range.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Which parts of the probabilistic model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Stochastic latent, learned per-pixel variance.
    Bayesian,
    /// Stochastic latent, decoder log-variance frozen at zero.
    FixedVariance,
    /// Plain autoencoder: latent mean only, no variance head.
    Deterministic,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Bayesian => 0,
            ModelKind::FixedVariance => 1,
            ModelKind::Deterministic => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Bayesian),
            1 => Some(ModelKind::FixedVariance),
            2 => Some(ModelKind::Deterministic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bayesian => "bayesian",
            ModelKind::FixedVariance => "fixed_variance",
            ModelKind::Deterministic => "deterministic",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [ModelKind::Bayesian, ModelKind::FixedVariance, ModelKind::Deterministic]
            .into_iter()
            .find(|k| k.name() == name)
    }

    pub fn learns_variance(self) -> bool {
        self == ModelKind::Bayesian
    }

    pub fn is_stochastic(self) -> bool {
        self != ModelKind::Deterministic
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Side of the square single-channel input.
    pub input_size: usize,
    /// Encoder channels per stage; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub heads: usize,
    /// 1-based encoder stages followed by attention.
    pub encoder_attention: Vec<usize>,
    /// 1-based decoder stages followed by attention.
    pub decoder_attention: Vec<usize>,
    /// Disabling removes every attention block (ablation).
    pub attention: bool,
    pub attention_residual: bool,
    pub kind: ModelKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            channels: vec![32, 64, 128, 256],
            latent_dim: 256,
            heads: 8,
            encoder_attention: vec![2, 4],
            decoder_attention: vec![1, 3],
            attention: true,
            attention_residual: false,
            kind: ModelKind::Bayesian,
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial side of the bottleneck feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels.len() != 4 {
            return fail(format!("expected 4 channel stages, got {}", self.channels.len()));
        }
        if self.channels.contains(&0) || self.latent_dim == 0 {
            return fail("channel and latent sizes must be positive".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << self.stages()) {
            return fail(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if (self.kernel, self.stride, self.padding) != (4, 2, 1) {
            return fail("stages use kernel 4, stride 2, padding 1".into());
        }
        for (list, what) in [(&self.encoder_attention, "encoder"), (&self.decoder_attention, "decoder")] {
            if list.iter().any(|&s| s == 0 || s > self.stages()) {
                return fail(format!("{what} attention stage out of range: {list:?}"));
            }
        }
        if self.attention {
            for c in self.attended_channels() {
                if self.heads == 0 || c % self.heads != 0 {
                    return fail(format!("{c} channels not divisible by {} heads", self.heads));
                }
            }
        }
        Ok(())
    }

    fn decoder_channels(&self) -> Vec<usize> {
        // mirror of the encoder, ending at the first stage's width
        let mut out: Vec<usize> = self.channels.iter().rev().skip(1).copied().collect();
        out.push(self.channels[0]);
        out
    }

    fn attended_channels(&self) -> Vec<usize> {
        let dec = self.decoder_channels();
        self.encoder_attention
            .iter()
            .map(|&s| self.channels[s - 1])
            .chain(self.decoder_attention.iter().map(|&s| dec[s - 1]))
            .collect()
    }
}

/// Posterior parameters `mu`, `log_var`, both `[B, latent_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub log_var: Var,
}

/// Decoder output: per-pixel mean and log-variance, both `[B, 1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub mean: Var,
    pub log_var: Var,
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    attention: Option<MultiHeadAttention>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Vec<Stage>,
    mu_head: Linear,
    log_var_head: Option<Linear>,
    seed: Linear,
    decoder: Vec<Stage>,
    mean_out: Conv,
    log_var_out: Option<Conv>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (k, s, p) = (config.kernel, config.stride, config.padding);
        let attn = |name: String, c: usize, stage: usize, list: &[usize]| -> Result<Option<MultiHeadAttention>> {
            if config.attention && list.contains(&stage) {
                MultiHeadAttention::new(&name, c, config.heads, config.attention_residual).map(Some)
            } else {
                Ok(None)
            }
        };

        let mut encoder = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            encoder.push(Stage {
                conv: Conv::new(&format!("enc.conv{}", i + 1), in_ch, c, k, s, p),
                attention: attn(format!("enc.attn{}", i + 1), c, i + 1, &config.encoder_attention)?,
            });
            in_ch = c;
        }
        let top = *config.channels.last().unwrap();
        let flat = top * config.bottleneck_size().pow(2);
        let stochastic = config.kind.is_stochastic();

        let mut decoder = Vec::new();
        let mut in_ch = top;
        for (i, c) in config.decoder_channels().into_iter().enumerate() {
            decoder.push(Stage {
                conv: Conv::transposed(&format!("dec.deconv{}", i + 1), in_ch, c, k, s, p),
                attention: attn(format!("dec.attn{}", i + 1), c, i + 1, &config.decoder_attention)?,
            });
            in_ch = c;
        }
        Ok(Model {
            mu_head: Linear::new("enc.mu", flat, config.latent_dim),
            log_var_head: stochastic.then(|| Linear::new("enc.log_var", flat, config.latent_dim)),
            seed: Linear::new("dec.seed", config.latent_dim, flat),
            mean_out: Conv::new("dec.mean", in_ch, 1, 3, 1, 1),
            log_var_out: config.kind.learns_variance().then(|| Conv::new("dec.log_var", in_ch, 1, 3, 1, 1)),
            encoder,
            decoder,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Freshly initialized parameters, a pure function of `seed`.
    pub fn init_params<T: Float>(&self, seed: u64) -> Result<LayerParams<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = LayerParams::new();
        for stage in self.encoder.iter().chain(&self.decoder) {
            stage.conv.init(&mut params, &mut rng)?;
            if let Some(a) = &stage.attention {
                a.init(&mut params, &mut rng)?;
            }
        }
        self.mu_head.init(&mut params, &mut rng)?;
        if let Some(h) = &self.log_var_head {
            h.init(&mut params, &mut rng)?;
        }
        self.seed.init(&mut params, &mut rng)?;
        self.mean_out.init(&mut params, &mut rng)?;
        if let Some(h) = &self.log_var_out {
            h.init(&mut params, &mut rng)?;
        }
        Ok(params)
    }

    /// Checks that `params` has exactly the tensors this model expects.
    pub fn check_params<T: Float>(&self, params: &LayerParams<T>) -> Result<()> {
        let expected = self.init_params::<T>(0)?;
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match model ({})",
                params.len(),
                expected.len()
            )));
        }
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?;
            if got.shape() != t.shape() {
                return Err(Error::dim("check_params", t.shape(), got.shape()));
            }
        }
        Ok(())
    }

    fn run_stage<T: Float>(stage: &Stage, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        let y = stage.conv.forward(tape, binds, x)?;
        let y = tape.relu(y)?;
        match &stage.attention {
            Some(a) => a.forward(tape, binds, y),
            None => Ok(y),
        }
    }

    /// Maps `x[B, 1, S, S]` to the latent Gaussian. The deterministic variant
    /// reports a constant zero log-variance.
    pub fn encode<T: Float>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<LatentGaussian> {
        let s = tape.shape(x).to_vec();
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != n || s[3] != n {
            return Err(Error::dim("encode", &s, &[s.first().copied().unwrap_or(0), 1, n, n]));
        }
        let batch = s[0];
        let mut h = x;
        for stage in &self.encoder {
            h = Self::run_stage(stage, tape, binds, h)?;
        }
        let flat_len = tape.value(h).numel() / batch;
        let flat = tape.reshape(h, &[batch, flat_len])?;
        let mu = self.mu_head.forward(tape, binds, flat)?;
        let log_var = match &self.log_var_head {
            Some(head) => {
                let raw = head.forward(tape, binds, flat)?;
                clamp_log_var(tape, raw)?
            }
            None => tape.constant(Tensor::zeros(&[batch, self.config.latent_dim])),
        };
        Ok(LatentGaussian { mu, log_var })
    }

    /// Maps `z[B, latent_dim]` to a reconstruction of the input size.
    pub fn decode<T: Float>(&self, tape: &mut Tape<T>, binds: &Bindings, z: Var) -> Result<Reconstruction> {
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::dim("decode", &s, &[s.first().copied().unwrap_or(0), self.config.latent_dim]));
        }
        let batch = s[0];
        let side = self.config.bottleneck_size();
        let top = *self.config.channels.last().unwrap();
        let h = self.seed.forward(tape, binds, z)?;
        let h = tape.relu(h)?;
        let mut h = tape.reshape(h, &[batch, top, side, side])?;
        for stage in &self.decoder {
            h = Self::run_stage(stage, tape, binds, h)?;
        }
        let logits = self.mean_out.forward(tape, binds, h)?;
        let mean = tape.sigmoid(logits)?;
        let log_var = match &self.log_var_out {
            Some(head) => {
                let raw = head.forward(tape, binds, h)?;
                clamp_log_var(tape, raw)?
            }
            None => {
                let n = self.config.input_size;
                tape.constant(Tensor::zeros(&[batch, 1, n, n]))
            }
        };
        Ok(Reconstruction { mean, log_var })
    }
}

pub fn clamp_log_var<T: Float>(tape: &mut Tape<T>, raw: Var) -> Result<Var> {
    tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)
}

/// `z = mu + exp(log_var / 2) * noise`. The noise is supplied by the caller
/// and recorded as a constant, so gradients reach only `mu` and `log_var`.
pub fn reparameterize<T: Float>(tape: &mut Tape<T>, g: &LatentGaussian, noise: Tensor<T>) -> Result<Var> {
    if tape.shape(g.mu) != noise.shape() || tape.shape(g.log_var) != noise.shape() {
        return Err(Error::dim("reparameterize", tape.shape(g.mu), noise.shape()));
    }
    let eps = tape.constant(noise);
    let half = tape.scale(g.log_var, 0.5)?;
    let sigma = tape.exp(half)?;
    let spread = tape.mul(sigma, eps)?;
    tape.add(g.mu, spread)
}

/// Converts `[0, 1]` image batches into an input tensor `[B, 1, H, W]`.
pub fn batch_tensor<T: Float>(images: &[&[f32]], side: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.len() != side * side {
            return Err(Error::dim("batch_tensor", &[img.len()], &[side * side]));
        }
        data.extend(img.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[images.len(), 1, side, side], data)
}
