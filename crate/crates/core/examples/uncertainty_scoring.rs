//! Monte-Carlo inference: epistemic and aleatoric maps, uncertainty-weighted
//! pixel scores and the combined image score for a normal and an abnormal
//! slice.
//!
//! Run with `cargo run --release --example uncertainty_scoring`.

use bvae::anomaly::{mc_infer, pixel_anomaly, score};
use bvae::data::{generate_corpus, make_splits, record_rng, CorpusSpec, Label, SplitConfig};
use bvae::model::{Model, ModelConfig};
use bvae::trainer::{fit, TrainConfig};

fn main() -> bvae::Result<()> {
    let records = generate_corpus(&CorpusSpec::new(240, 40, 32, 5))?;
    let splits = make_splits(&records, &SplitConfig { test_per_class: 10, ..SplitConfig::default() })?;
    let model = Model::new(ModelConfig { channels: vec![16, 32, 64, 64], latent_dim: 64, heads: 4, ..ModelConfig::default() })?;
    let cfg = TrainConfig { max_epochs: 6, learning_rate: 1e-4, seed: 5, ..TrainConfig::default() };
    let params = fit(&model, model.init_params::<f32>(5)?, &splits.train, &splits.val, &cfg)?.best.params;

    for label in [Label::Normal, Label::Abnormal] {
        let r = splits.test.iter().find(|r| r.label == label).expect("both classes in the test split");
        let u = mc_infer(&model, &params, &r.image, 32, &mut record_rng(0, &r.id))?;
        let pixels = pixel_anomaly(&r.image, &u)?;
        let peak = pixels.values.iter().cloned().fold(0.0, f64::max);
        let s = score(&r.image, &u, 0.5)?;
        println!(
            "{:<8} {}: epistemic {:.2e}  aleatoric {:.2e}  total {:.2e}  peak pixel {:.2}  score {:.4}",
            label.as_str(),
            r.id,
            u.epistemic.mean(),
            u.aleatoric.mean(),
            u.total.mean(),
            peak,
            s.score
        );
    }
    Ok(())
}
