//! Trains and scores several model variants on one split and prints an
//! ablation table.
//!
//! Run with `cargo run --release --example ablation_grid`.

use bvae::data::{generate_corpus, make_splits, CorpusSpec, SplitConfig};
use bvae::eval::{ablation_csv, ablation_run, parse_grid, AblationSettings, ScoreConfig};
use bvae::model::ModelConfig;
use bvae::trainer::TrainConfig;

fn main() -> bvae::Result<()> {
    let records = generate_corpus(&CorpusSpec::new(200, 40, 32, 9))?;
    let splits = make_splits(&records, &SplitConfig { test_per_class: 10, ..SplitConfig::default() })?;
    let settings = AblationSettings {
        model: ModelConfig { channels: vec![16, 32, 64, 64], latent_dim: 64, heads: 4, ..ModelConfig::default() },
        train: TrainConfig { max_epochs: 5, learning_rate: 1e-4, seed: 9, ..TrainConfig::default() },
        score: ScoreConfig::default(),
    };
    let grid = parse_grid("full,no_attention,no_epistemic,deterministic")?;
    let rows = ablation_run::<f32>(&splits, &grid, &settings)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
