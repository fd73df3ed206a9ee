#![allow(dead_code)]

use bvae::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values in `[-1, -margin] ∪ [margin, 1]`, away from the ReLU kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

use bvae::model::{LatentGaussian, Reconstruction};
use bvae::objective::{kl_divergence, reconstruction_nll};

/// KL of one latent row `[1, n]` against the unit Gaussian.
pub fn kl(mu: &[f64], lv: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let n = mu.len();
    let g = LatentGaussian {
        mu: t.constant(Tensor::from_f64(&[1, n], mu).unwrap()),
        log_var: t.constant(Tensor::from_f64(&[1, n], lv).unwrap()),
    };
    let v = kl_divergence(&mut t, &g).unwrap();
    t.value(v).item()
}

/// Gaussian NLL of one row `[1, n]`.
pub fn nll(x: &[f64], mean: &[f64], lv: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let n = x.len();
    let xv = t.constant(Tensor::from_f64(&[1, n], x).unwrap());
    let r = Reconstruction {
        mean: t.constant(Tensor::from_f64(&[1, n], mean).unwrap()),
        log_var: t.constant(Tensor::from_f64(&[1, n], lv).unwrap()),
    };
    let v = reconstruction_nll(&mut t, xv, &r).unwrap();
    t.value(v).item()
}

/// Exhaustive (abnormal, normal) pair count, ties worth one half.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if !labels[j] {
                twice += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

/// Average precision by rescanning the whole set at every distinct threshold.
pub fn step_sum_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev) * precision;
        prev = recall;
    }
    ap
}

/// Worst relative error between tape gradients and central differences.
pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
}

/// Builds `f` on the inputs, reduces a non-scalar output with fixed random
/// weights, and compares every input gradient entry against central finite
/// differences with step [`FD_STEP`].
pub fn gradcheck<F>(seed: u64, inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut wrng = rng(seed ^ 0xfeed);
    let mut loss_of = |tape: &mut Tape<f64>, vals: &[Tensor<f64>], trainable: bool| -> (Var, Vec<Var>) {
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        let out = f(tape, &vars);
        let loss = if tape.value(out).numel() == 1 {
            tape.sum(out).unwrap()
        } else {
            let shape = tape.shape(out).to_vec();
            let w = weights.get_or_insert_with(|| uniform(&mut wrng, &shape, -1.0, 1.0)).clone();
            let w = tape.constant(w);
            let p = tape.mul(out, w).unwrap();
            tape.sum(p).unwrap()
        };
        (loss, vars)
    };

    let mut tape = Tape::new();
    let (loss, vars) = loss_of(&mut tape, inputs, true);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.to_f64()))
        .collect();

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let eval = |delta: f64, loss_of: &mut dyn FnMut(&mut Tape<f64>, &[Tensor<f64>], bool) -> (Var, Vec<Var>)| {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[j] += delta;
                let mut t = Tape::new();
                let (l, _) = loss_of(&mut t, &vals, false);
                t.value(l).item()
            };
            let fd = (eval(FD_STEP, &mut loss_of) - eval(-FD_STEP, &mut loss_of)) / (2.0 * FD_STEP);
            let err = (analytic[i][j] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(err);
            checked += 1;
        }
    }
    GradReport { worst, checked }
}

/// Runs `case` for every gradcheck seed and returns the worst error.
pub fn over_seeds(case: impl Fn(u64) -> GradReport) -> f64 {
    (0..GRADCHECK_SEEDS).map(|s| case(s).worst).fold(0.0, f64::max)
}

pub mod cases {
    use super::*;
    use bvae::model::{reparameterize, LatentGaussian, Reconstruction};
    use bvae::nn::{linear, multi_head_attention, AttentionWeights};
    use bvae::objective::{kl_divergence, reconstruction_nll};

    pub fn matmul(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4, 2], -1.0, 1.0)];
        gradcheck(seed, &ins, |t, v| t.matmul(v[0], v[1]).unwrap())
    }

    pub fn conv2d(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [uniform(&mut r, &[2, 2, 6, 6], -1.0, 1.0), uniform(&mut r, &[3, 2, 4, 4], -1.0, 1.0)];
        gradcheck(seed, &ins, |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap())
    }

    pub fn conv2d_stride1(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [uniform(&mut r, &[1, 2, 5, 4], -1.0, 1.0), uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0)];
        gradcheck(seed, &ins, |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap())
    }

    pub fn transposed_conv2d(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0)];
        gradcheck(seed, &ins, |t, v| t.conv_transpose2d(v[0], v[1], 2, 1).unwrap())
    }

    pub fn linear_layer(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [
            uniform(&mut r, &[3, 4], -1.0, 1.0),
            uniform(&mut r, &[4, 5], -1.0, 1.0),
            uniform(&mut r, &[5], -1.0, 1.0),
        ];
        gradcheck(seed, &ins, |t, v| linear(t, v[0], v[1], v[2]).unwrap())
    }

    pub fn relu(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [away_from_zero(&mut r, &[3, 4], 0.01)];
        gradcheck(seed, &ins, |t, v| t.relu(v[0]).unwrap())
    }

    pub fn softmax(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [uniform(&mut r, &[2, 3, 4], -2.0, 2.0)];
        let a = gradcheck(seed, &ins, |t, v| t.softmax(v[0], 2).unwrap());
        let b = gradcheck(seed, &ins, |t, v| t.softmax(v[0], 1).unwrap());
        GradReport { worst: a.worst.max(b.worst), checked: a.checked + b.checked }
    }

    /// The fused per-head kernel.
    pub fn attention_kernel(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [
            uniform(&mut r, &[2, 3, 4], -1.0, 1.0),
            uniform(&mut r, &[2, 5, 4], -1.0, 1.0),
            uniform(&mut r, &[2, 5, 3], -1.0, 1.0),
        ];
        gradcheck(seed, &ins, |t, v| t.attention(v[0], v[1], v[2], 0.5).unwrap())
    }

    /// Whole multi-head block: feature map plus every projection.
    pub fn multi_head(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let (c, heads) = (4, 2);
        let dk = c / heads;
        let mut ins = vec![uniform(&mut r, &[2, c, 2, 3], -1.0, 1.0)];
        for _ in 0..3 * heads {
            ins.push(uniform(&mut r, &[c, dk], -1.0, 1.0));
        }
        ins.push(uniform(&mut r, &[c, c], -1.0, 1.0));
        gradcheck(seed, &ins, |t, v| {
            let w = AttentionWeights {
                query: v[1..1 + heads].to_vec(),
                key: v[1 + heads..1 + 2 * heads].to_vec(),
                value: v[1 + 2 * heads..1 + 3 * heads].to_vec(),
                output: v[1 + 3 * heads],
            };
            multi_head_attention(t, v[0], &w, false).unwrap()
        })
    }

    pub fn reparameterize_op(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], -2.0, 2.0)];
        let noise = uniform(&mut r, &[2, 3], -2.0, 2.0);
        gradcheck(seed, &ins, |t, v| {
            let g = LatentGaussian { mu: v[0], log_var: v[1] };
            reparameterize(t, &g, noise.clone()).unwrap()
        })
    }

    pub fn reconstruction_loss(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [
            uniform(&mut r, &[2, 1, 3, 3], 0.0, 1.0),
            uniform(&mut r, &[2, 1, 3, 3], 0.0, 1.0),
            uniform(&mut r, &[2, 1, 3, 3], -2.0, 2.0),
        ];
        gradcheck(seed, &ins, |t, v| {
            let recon = Reconstruction { mean: v[1], log_var: v[2] };
            reconstruction_nll(t, v[0], &recon).unwrap()
        })
    }

    pub fn kl_loss(seed: u64) -> GradReport {
        let mut r = rng(seed);
        let ins = [uniform(&mut r, &[3, 4], -1.5, 1.5), uniform(&mut r, &[3, 4], -2.0, 2.0)];
        gradcheck(seed, &ins, |t, v| kl_divergence(t, &LatentGaussian { mu: v[0], log_var: v[1] }).unwrap())
    }

    pub const ALL: &[(&str, fn(u64) -> GradReport)] = &[
        ("matmul", matmul),
        ("conv2d", conv2d),
        ("conv2d_stride1", conv2d_stride1),
        ("transposed_conv2d", transposed_conv2d),
        ("linear", linear_layer),
        ("relu", relu),
        ("softmax", softmax),
        ("attention_kernel", attention_kernel),
        ("multi_head_attention", multi_head),
        ("reparameterize", reparameterize_op),
        ("reconstruction_nll", reconstruction_loss),
        ("kl_divergence", kl_loss),
    ];
}
