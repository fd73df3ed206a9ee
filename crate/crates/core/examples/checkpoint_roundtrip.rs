//! Checkpoints store the architecture, weights, optimizer state and RNG
//! position; reloading reproduces the validation loss bit for bit.
//!
//! Run with `cargo run --release --example checkpoint_roundtrip`.

use bvae::data::{generate_corpus, make_splits, CorpusSpec, SplitConfig};
use bvae::model::{Model, ModelConfig};
use bvae::trainer::{fit, validation_loss, Checkpoint, TrainConfig};

fn main() -> bvae::Result<()> {
    let records = generate_corpus(&CorpusSpec::new(80, 12, 16, 2))?;
    let splits = make_splits(&records, &SplitConfig { test_per_class: 4, ..SplitConfig::default() })?;
    let model = Model::new(ModelConfig { input_size: 16, channels: vec![8, 8, 16, 16], latent_dim: 16, heads: 2, ..ModelConfig::default() })?;
    let cfg = TrainConfig { max_epochs: 3, batch_size: 8, learning_rate: 1e-3, seed: 2, ..TrainConfig::default() };
    let out = fit(&model, model.init_params::<f32>(2)?, &splits.train, &splits.val, &cfg)?;

    let path = std::env::temp_dir().join("bvae_roundtrip.bvck");
    out.best.save(&path)?;
    let loaded = Checkpoint::<f32>::load(&path)?;
    let again = validation_loss(&Model::new(loaded.model.clone())?, &loaded.params, &splits.val, &cfg)?;
    println!("{} bytes, epoch {}, {} tensors", std::fs::metadata(&path)?.len(), loaded.epoch, loaded.params.len());
    println!("validation loss saved {:?}, after reload {:?}", out.best.best_val_loss, again.total);
    assert_eq!(out.best.best_val_loss.to_bits(), again.total.to_bits());
    Ok(())
}
