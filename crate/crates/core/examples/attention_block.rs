//! Multi-head self-attention over the spatial positions of a feature map.
//!
//! Run with `cargo run --example attention_block`.

use bvae::nn::{attention_logits, LayerParams, MultiHeadAttention};
use bvae::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bvae::Result<()> {
    let (channels, heads, side) = (8, 2, 3);
    let block = MultiHeadAttention::new("attn", channels, heads, false)?;
    let mut params = LayerParams::<f64>::new();
    block.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("{} heads of width {}, {} weights", heads, block.head_dim(), params.num_values());

    // one bright position in an otherwise flat map
    let mut f = vec![0.1; channels * side * side];
    for c in 0..channels {
        f[c * side * side + 4] = 1.0;
    }
    let mut t = Tape::<f64>::new();
    let binds = params.bind(&mut t, false);
    let fv = t.constant(Tensor::from_f64(&[1, channels, side, side], &f)?);
    let out = block.forward(&mut t, &binds, fv)?;
    println!("output shape {:?}", t.shape(out));

    let w = block.weights(&binds)?;
    let logits = attention_logits(&mut t, fv, w.query[0], w.key[0])?;
    let probs = t.softmax(logits, 2)?;
    println!("head 0 attention weights (row = query position):");
    for row in t.value(probs).to_f64().chunks(side * side) {
        let cells: Vec<String> = row.iter().map(|p| format!("{p:.3}")).collect();
        println!("  {}", cells.join(" "));
    }
    Ok(())
}
