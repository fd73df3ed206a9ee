//! Reverse-mode gradients on a tape, checked against central differences.
//!
//! Run with `cargo run --example autodiff`.

use bvae::tensor::{Tape, Tensor};

/// loss = mean(relu(x W + b)^2)
fn loss(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut t = Tape::<f64>::new();
    let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let h = t.matmul(x, w).unwrap();
    let h = t.add_bias(h, b).unwrap();
    let h = t.relu(h).unwrap();
    let sq = t.mul(h, h).unwrap();
    let m = t.mean(sq).unwrap();
    t.value(m).item()
}

fn main() -> bvae::Result<()> {
    let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;
    let w = Tensor::from_f64(&[3, 2], &[0.3, -0.2, 0.8, 0.1, -0.5, 0.9])?;
    let b = Tensor::from_f64(&[2], &[0.1, 0.2])?;

    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let wv = t.param(w.clone());
    let bv = t.param(b.clone());
    let h = t.matmul(xv, wv)?;
    let h = t.add_bias(h, bv)?;
    let h = t.relu(h)?;
    let sq = t.mul(h, h)?;
    let m = t.mean(sq)?;
    t.backward(m)?;
    println!("loss = {:.6}", t.value(m).item());

    let grad = t.grad(wv).expect("W is a parameter").to_f64();
    let step = 1e-6;
    println!("{:>4} {:>12} {:>12}", "W", "tape", "finite diff");
    for i in 0..w.numel() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[i] += step;
        down.data_mut()[i] -= step;
        let fd = (loss(&x, &up, &b) - loss(&x, &down, &b)) / (2.0 * step);
        println!("{i:>4} {:>12.8} {:>12.8}", grad[i], fd);
    }
    Ok(())
}
