//! Trains a reduced model on phantoms with KL warm-up, gradient clipping and
//! early stopping, then saves the best checkpoint.
//!
//! Run with `cargo run --release --example train_small`.

use bvae::data::{generate_corpus, make_splits, CorpusSpec, SplitConfig};
use bvae::model::{Model, ModelConfig};
use bvae::trainer::{fit_with, TrainConfig};

fn main() -> bvae::Result<()> {
    let records = generate_corpus(&CorpusSpec::new(300, 40, 32, 3))?;
    let splits = make_splits(&records, &SplitConfig { test_per_class: 10, ..SplitConfig::default() })?;
    let model = Model::new(ModelConfig { channels: vec![16, 32, 64, 64], latent_dim: 64, heads: 4, ..ModelConfig::default() })?;
    let params = model.init_params::<f32>(3)?;
    let cfg = TrainConfig { max_epochs: 8, learning_rate: 1e-4, early_stop_patience: 3, seed: 3, ..TrainConfig::default() };

    println!("epoch  beta   train_nll   train_kl   val_total  val_unc  grad_norm");
    let out = fit_with(&model, params, &splits.train, &splits.val, &cfg, |l, _| {
        println!(
            "{:>5} {:>5.3} {:>11.2} {:>10.2} {:>11.2} {:>8.4} {:>10.1}",
            l.epoch, l.train.beta, l.train.recon_nll, l.train.kl, l.val_total, l.val_mean_uncertainty, l.max_grad_norm
        );
    })?;
    let path = std::env::temp_dir().join("bvae_train_small.bvck");
    out.best.save(&path)?;
    println!("best epoch {} (val {:.2}) saved to {}", out.best.epoch, out.best.best_val_loss, path.display());
    Ok(())
}
