//! Objective values, model contracts and the uncertainty decomposition.

mod common;

use bvae::anomaly::{decompose, image_score, mc_infer, mc_infer_batch, pixel_anomaly, UncertaintyDecomposition};
use bvae::data::{record_rng, Image};
use bvae::model::{clamp_log_var, Model, ModelConfig, ModelKind, LOG_VAR_MAX, LOG_VAR_MIN};
use bvae::nn::LayerParams;
use bvae::objective::{beta_at, BetaSchedule};
use bvae::tensor::{Tape, Tensor};
use common::{kl, nll, rng};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn kl_hand_values() {
    let ln4 = 4f64.ln();
    assert!(kl(&[0.0], &[0.0]).abs() < 1e-6);
    assert!((kl(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-6);
    let v = kl(&[0.0], &[ln4]);
    assert!((v - 0.5 * (4.0 - ln4 - 1.0)).abs() < 1e-6);
    assert!((v - 0.8069).abs() < 1e-4);
}

#[test]
fn nll_hand_values() {
    let ln4 = 4f64.ln();
    assert!(nll(&[0.3, 0.7], &[0.3, 0.7], &[0.0, 0.0]).abs() < 1e-6);
    assert!((nll(&[1.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-6);
    let v = nll(&[1.0], &[0.0], &[ln4]);
    assert!((v - (0.5 * ln4 + 0.125)).abs() < 1e-6);
    assert!((v - 0.8181).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..8), seed in any::<u64>()) {
        let mut r = rng(seed);
        let lv: Vec<f64> = mu.iter().map(|_| r.gen_range(LOG_VAR_MIN..LOG_VAR_MAX)).collect();
        prop_assert!(kl(&mu, &lv) >= 0.0);
    }
}

proptest! {
    #[test]
    fn nll_is_minimized_at_the_squared_error(x in 0.0f64..1.0, mean in 0.0f64..1.0) {
        prop_assume!((x - mean).abs() > 1e-3);
        let best = ((x - mean) * (x - mean)).ln();
        let at = nll(&[x], &[mean], &[best]);
        prop_assert!(nll(&[x], &[mean], &[best + 0.1]) > at);
        prop_assert!(nll(&[x], &[mean], &[best - 0.1]) > at);
    }

    #[test]
    fn beta_ramp_is_monotone_and_bounded(beta_max in 0.0f64..2.0, warmup in 0usize..30) {
        let s = BetaSchedule { beta_max, warmup_epochs: warmup };
        let mut prev = 0.0;
        for epoch in 0..60 {
            let b = beta_at(epoch, &s);
            prop_assert!(b >= prev && (0.0..=beta_max).contains(&b));
            prev = b;
        }
        prop_assert_eq!(beta_at(60, &s), beta_max);
    }
}

#[test]
fn beta_examples() {
    let s = BetaSchedule::default();
    assert_eq!(beta_at(0, &s), 0.0);
    assert!((beta_at(5, &s) - 0.05).abs() < 1e-15);
    assert_eq!(beta_at(10, &s), 0.1);
    assert_eq!(beta_at(40, &s), 0.1);
}

fn small(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        channels: vec![4, 8, 8, 8],
        latent_dim: 8,
        heads: 2,
        kind,
        ..ModelConfig::default()
    }
}

fn image(side: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(side, side, (0..side * side).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap()
}

#[test]
fn clamp_pins_extreme_log_variances() {
    let mut t = Tape::<f64>::new();
    let raw = t.constant(Tensor::from_f64(&[2], &[-100.0, 100.0]).unwrap());
    let c = clamp_log_var(&mut t, raw).unwrap();
    assert_eq!(t.value(c).to_f64(), vec![-20.0, 20.0]);
}

#[test]
fn encoder_log_variance_stays_clamped_on_extreme_inputs() {
    let model = Model::new(small(ModelKind::Bayesian)).unwrap();
    let params = model.init_params::<f64>(4).unwrap();
    for fill in [1e3, -1e3, 1e6] {
        let mut t = Tape::<f64>::new();
        let b = params.bind(&mut t, false);
        let x = t.constant(Tensor::full(&[2, 1, 16, 16], fill));
        let g = model.encode(&mut t, &b, x).unwrap();
        let r = model.decode(&mut t, &b, g.mu).unwrap();
        for v in t.value(g.log_var).data().iter().chain(t.value(r.log_var).data()) {
            assert!((LOG_VAR_MIN..=LOG_VAR_MAX).contains(v), "{v} for input {fill}");
        }
    }
}

#[test]
fn identical_inputs_give_identical_rows_and_decoding_is_deterministic() {
    let model = Model::new(small(ModelKind::Bayesian)).unwrap();
    let params = model.init_params::<f64>(8).unwrap();
    let img = image(16, 1);
    let mut data = img.pixels.iter().map(|&v| v as f64).collect::<Vec<_>>();
    data.extend_from_within(..);
    let mut t = Tape::<f64>::new();
    let b = params.bind(&mut t, false);
    let x = t.constant(Tensor::from_f64(&[2, 1, 16, 16], &data).unwrap());
    let g = model.encode(&mut t, &b, x).unwrap();
    for v in [g.mu, g.log_var] {
        let d = t.value(v).data();
        assert_eq!(d[..8], d[8..]);
    }
    let r1 = model.decode(&mut t, &b, g.mu).unwrap();
    let r2 = model.decode(&mut t, &b, g.mu).unwrap();
    assert_eq!(t.value(r1.mean), t.value(r2.mean));
    assert!(t.value(r1.mean).data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(t.value(r1.mean).shape(), &[2, 1, 16, 16]);
}

#[test]
fn shapes_hold_for_every_size_divisible_by_sixteen() {
    for side in [16, 32, 48] {
        for attention in [true, false] {
            let cfg = ModelConfig { input_size: side, attention, ..small(ModelKind::Bayesian) };
            let model = Model::new(cfg).unwrap();
            let params = model.init_params::<f32>(1).unwrap();
            let u = mc_infer(&model, &params, &image(side, 2), 2, &mut rng(0)).unwrap();
            assert_eq!((u.mean_recon.height, u.mean_recon.width), (side, side));
        }
    }
}

// ---------------------------------------------------------- uncertainty

fn trained_like(kind: ModelKind) -> (Model, LayerParams<f64>) {
    let model = Model::new(small(kind)).unwrap();
    let params = model.init_params::<f64>(21).unwrap();
    (model, params)
}

#[test]
fn single_sample_has_zero_epistemic_and_exact_total() {
    let (model, params) = trained_like(ModelKind::Bayesian);
    for seed in 0..5 {
        let img = image(16, seed);
        let u = mc_infer(&model, &params, &img, 1, &mut record_rng(seed, "x")).unwrap();
        assert!(u.epistemic.values.iter().all(|&v| v == 0.0));
        assert_eq!(u.total, u.aleatoric);
        let u = mc_infer(&model, &params, &img, 7, &mut record_rng(seed, "x")).unwrap();
        assert!(u.epistemic.values.iter().any(|&v| v > 0.0));
        for i in 0..u.total.values.len() {
            assert_eq!(u.total.values[i], u.epistemic.values[i] + u.aleatoric.values[i]);
        }
    }
}

#[test]
fn perfect_reconstruction_scores_zero() {
    let img = image(8, 3);
    let mean: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
    let u = decompose(8, 8, &[mean.clone(), mean], &[vec![0.2; 64], vec![0.4; 64]]).unwrap();
    assert!(pixel_anomaly(&img, &u).unwrap().values.iter().all(|&v| v == 0.0));
    assert_eq!(image_score(&img, &u, 0.5).unwrap(), 0.0);
}

fn zero_uncertainty(img: &Image, offset: f64) -> UncertaintyDecomposition {
    let n = img.pixels.len();
    let mean: Vec<f64> = img.pixels.iter().map(|&v| v as f64 + offset).collect();
    decompose(img.height, img.width, &[mean], &[vec![0.0; n]]).unwrap()
}

proptest! {
    #[test]
    fn scores_stay_finite_without_uncertainty(seed in any::<u64>(), offset in -1.0f64..1.0, alpha in 0.0f64..=1.0) {
        let img = image(8, seed);
        let u = zero_uncertainty(&img, offset);
        let map = pixel_anomaly(&img, &u).unwrap();
        prop_assert!(map.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        let s = image_score(&img, &u, alpha).unwrap();
        prop_assert!(s.is_finite() && s >= 0.0);
    }

    #[test]
    fn pixel_anomaly_grows_with_error(a in 0.0f64..1.0, b in 0.0f64..1.0, var in 0.0f64..1.0) {
        let img = Image::new(1, 1, vec![0.0]).unwrap();
        let u = |m: f64| decompose(1, 1, &[vec![m]], &[vec![var]]).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi > lo);
        prop_assert!(pixel_anomaly(&img, &u(hi)).unwrap().values[0] > pixel_anomaly(&img, &u(lo)).unwrap().values[0]);
    }
}

#[test]
fn clamped_decoder_variance_keeps_scores_finite() {
    // push every decoder log-variance to the lower clamp
    let (model, mut params) = trained_like(ModelKind::Bayesian);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("dec.log_var")).collect();
    assert!(!names.is_empty());
    for n in names {
        let t = params.get(&n).unwrap();
        let v = if n.ends_with("bias") { -1e4 } else { 0.0 };
        params.set(&n, Tensor::full(t.shape(), v)).unwrap();
    }
    let img = image(16, 9);
    let u = mc_infer(&model, &params, &img, 3, &mut rng(1)).unwrap();
    assert!(u.aleatoric.values.iter().all(|&v| v > 0.0 && v < 1e-8));
    let s = image_score(&img, &u, 0.5).unwrap();
    assert!(s.is_finite(), "{s}");
}

#[test]
fn batching_does_not_change_results() {
    let (model, params) = trained_like(ModelKind::Bayesian);
    let imgs: Vec<Image> = (0..3).map(|s| image(16, s)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let mut rngs: Vec<_> = (0..3).map(|i| record_rng(5, &format!("id{i}"))).collect();
    let batched = mc_infer_batch(&model, &params, &refs, 4, &mut rngs).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let single = mc_infer(&model, &params, img, 4, &mut record_rng(5, &format!("id{i}"))).unwrap();
        assert_eq!(single, batched[i]);
    }
}
