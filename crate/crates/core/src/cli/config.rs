//! Run configuration: defaults, `key = value` files, and seed resolution.

use std::fs;
use std::path::Path;

use crate::data::{PhantomConfig, SplitConfig};
use crate::error::{Error, Result};
use crate::eval::ScoreConfig;
use crate::model::{ModelConfig, ModelKind};
use crate::trainer::{StopMetric, TrainConfig};

/// Lowest-priority seed source.
pub const SEED_ENV: &str = "BVAE_SEED";

/// Everything a run needs, merged from defaults, a config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub normals: usize,
    pub abnormals: usize,
    /// Preprocessed slice side.
    pub size: usize,
    /// Phantom knobs; `size` and `seed` are filled in when a corpus is built.
    pub phantom: PhantomConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            normals: 2000,
            abnormals: 500,
            size: 32,
            phantom: PhantomConfig::new(64, 0),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "data.normals",
        "data.abnormals",
        "data.size",
        "data.texture_scale",
        "data.noise_std",
        "data.blob_intensity_min",
        "data.blob_intensity_max",
        "split.train_frac_normals",
        "split.test_per_class",
        "split.abnormal_train_fraction",
        "model.input_size",
        "model.channels",
        "model.latent_dim",
        "model.heads",
        "model.encoder_attention",
        "model.decoder_attention",
        "model.attention",
        "model.attention_residual",
        "model.kind",
        "train.batch_size",
        "train.learning_rate",
        "train.max_epochs",
        "train.early_stop_patience",
        "train.grad_clip_norm",
        "train.adam_beta1",
        "train.adam_beta2",
        "train.adam_eps",
        "train.stop_metric",
        "train.uncertainty_samples",
        "beta.beta_max",
        "beta.warmup_epochs",
        "score.k",
        "score.alpha",
        "score.batch_size",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "data.normals" => self.normals = num(key, v)?,
            "data.abnormals" => self.abnormals = num(key, v)?,
            "data.size" => self.size = num(key, v)?,
            "data.texture_scale" => self.phantom.texture_scale = num(key, v)?,
            "data.noise_std" => self.phantom.noise_std = num(key, v)?,
            "data.blob_intensity_min" => self.phantom.blob_intensity.0 = num(key, v)?,
            "data.blob_intensity_max" => self.phantom.blob_intensity.1 = num(key, v)?,
            "split.train_frac_normals" => self.split.train_frac_normals = num(key, v)?,
            "split.test_per_class" => self.split.test_per_class = num(key, v)?,
            "split.abnormal_train_fraction" => self.split.abnormal_train_fraction = num(key, v)?,
            "model.input_size" => self.model.input_size = num(key, v)?,
            "model.channels" => self.model.channels = list(key, v)?,
            "model.latent_dim" => self.model.latent_dim = num(key, v)?,
            "model.heads" => self.model.heads = num(key, v)?,
            "model.encoder_attention" => self.model.encoder_attention = list(key, v)?,
            "model.decoder_attention" => self.model.decoder_attention = list(key, v)?,
            "model.attention" => self.model.attention = flag(key, v)?,
            "model.attention_residual" => self.model.attention_residual = flag(key, v)?,
            "model.kind" => {
                self.model.kind = ModelKind::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown kind {v:?}")))?
            }
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.max_epochs" => self.train.max_epochs = num(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = num(key, v)?,
            "train.grad_clip_norm" => self.train.grad_clip_norm = num(key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = num(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = num(key, v)?,
            "train.adam_eps" => self.train.adam_eps = num(key, v)?,
            "train.stop_metric" => {
                self.train.stop_metric = match v {
                    "total" => StopMetric::Total,
                    "reconstruction" => StopMetric::Reconstruction,
                    _ => return Err(Error::Config(format!("{key}: expected total or reconstruction"))),
                }
            }
            "train.uncertainty_samples" => self.train.uncertainty_samples = num(key, v)?,
            "beta.beta_max" => self.train.beta.beta_max = num(key, v)?,
            "beta.warmup_epochs" => self.train.beta.warmup_epochs = num(key, v)?,
            "score.k" => self.score.samples = num(key, v)?,
            "score.alpha" => self.score.alpha = num(key, v)?,
            "score.batch_size" => self.score.batch_size = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Defaults, then `BVAE_SEED`, then the config file. Flags are applied by
    /// the caller afterwards.
    pub fn load(file: Option<&Path>, env_seed: Option<&str>) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(s) = env_seed {
            config.seed = num(SEED_ENV, s.trim())?;
        }
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        Ok(config)
    }

    /// Propagates the run seed into every component and validates the result.
    pub fn finish(mut self) -> Result<RunConfig> {
        self.train.seed = self.seed;
        self.split.seed = self.seed;
        self.score.seed = self.seed;
        self.phantom.seed = self.seed;
        self.phantom.size = 2 * self.size;
        self.phantom.blob_radius = PhantomConfig::new(2 * self.size, self.seed).blob_radius;
        self.model.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        if self.score.samples == 0 || !(0.0..=1.0).contains(&self.score.alpha) {
            return Err(Error::Config("score.k must be positive and score.alpha in [0, 1]".into()));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\ntrain.learning_rate = 1e-4  # trailing\nmodel.channels = 8, 16,16,32\nmodel.attention=false\nmodel.kind = deterministic\n")
            .unwrap();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.model.channels, vec![8, 16, 16, 32]);
        assert!(!c.model.attention);
        assert_eq!(c.model.kind, ModelKind::Deterministic);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("train.learning_rate 1e-4").is_err());
        assert!(c.apply_text("train.nope = 1").is_err());
        assert!(c.apply_text("train.batch_size = many").is_err());
        assert!(c.apply_text("model.attention = maybe").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("model.channels", "4,4,4,4"),
            ("model.encoder_attention", "2"),
            ("model.decoder_attention", "1"),
            ("model.attention", "true"),
            ("model.attention_residual", "false"),
            ("model.kind", "bayesian"),
            ("train.stop_metric", "reconstruction"),
        ];
        for key in RunConfig::KEYS {
            let value = samples.iter().find(|(k, _)| k == key).map_or("1", |(_, v)| v);
            RunConfig::default().set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn seed_priority() {
        let c = RunConfig::load(None, Some("11")).unwrap();
        assert_eq!(c.seed, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "seed = 5\n").unwrap();
        let c = RunConfig::load(Some(&path), Some("11")).unwrap();
        assert_eq!(c.seed, 5);
        let c = c.finish().unwrap();
        assert_eq!((c.train.seed, c.split.seed, c.score.seed, c.phantom.seed), (5, 5, 5, 5));
        assert!(RunConfig::load(None, Some("x")).is_err());
    }
}
