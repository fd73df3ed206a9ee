//! Layers built on the tape: linear, convolution wrappers and multi-head
//! self-attention over spatial tokens.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Named parameter tensors. Names are unique and shapes are fixed once
/// inserted; only values change during training.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for LayerParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> LayerParams<T> {
    pub fn new() -> Self {
        LayerParams {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Replaces the values of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bindings { vars }
    }

    pub fn cast<U: Float>(&self) -> LayerParams<U> {
        LayerParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Tape variables for a bound [`LayerParams`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Collects gradients after `backward`; parameters the loss did not reach
    /// get zero gradients.
    pub fn gradients<T: Float>(&self, tape: &Tape<T>) -> Vec<(String, Tensor<T>)> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Uniform init in `[-bound, bound]`.
pub fn uniform_init<T: Float, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Kaiming-uniform bound for ReLU layers.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `x W + b` for `x[B, n]`, `W[n, m]`, `b[m]`.
pub fn linear<T: Float>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            name: name.to_string(),
            inputs,
            outputs,
        }
    }

    pub fn init<T: Float, R: Rng>(&self, params: &mut LayerParams<T>, rng: &mut R) -> Result<()> {
        params.insert(
            format!("{}.weight", self.name),
            uniform_init(&[self.inputs, self.outputs], kaiming_bound(self.inputs), rng),
        )?;
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.outputs]))
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        let w = binds.get(&format!("{}.weight", self.name))?;
        let b = binds.get(&format!("{}.bias", self.name))?;
        linear(tape, x, w, b)
    }
}

/// Convolution with bias; `transposed` selects the upsampling variant.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: false,
        }
    }

    pub fn transposed(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv {
            transposed: true,
            ..Conv::new(name, in_channels, out_channels, kernel, stride, padding)
        }
    }

    pub fn init<T: Float, R: Rng>(&self, params: &mut LayerParams<T>, rng: &mut R) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        let (shape, fan_in) = if self.transposed {
            // each output pixel sums roughly in_channels * k^2 / stride^2 terms
            let fan = (self.in_channels * k2 / (self.stride * self.stride)).max(1);
            ([self.in_channels, self.out_channels, self.kernel, self.kernel], fan)
        } else {
            ([self.out_channels, self.in_channels, self.kernel, self.kernel], self.in_channels * k2)
        };
        params.insert(format!("{}.weight", self.name), uniform_init(&shape, kaiming_bound(fan_in), rng))?;
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_channels]))
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        let w = binds.get(&format!("{}.weight", self.name))?;
        let b = binds.get(&format!("{}.bias", self.name))?;
        let y = if self.transposed {
            tape.conv_transpose2d(x, w, self.stride, self.padding)?
        } else {
            tape.conv2d(x, w, self.stride, self.padding)?
        };
        tape.add_bias(y, b)
    }
}

/// Multi-head self-attention over the spatial positions of a feature map.
///
/// A `[B, C, H, W]` map becomes `H*W` tokens of width `C`. Head `i` projects
/// the tokens with its own bias-free `W_q[i]`, `W_k[i]`, `W_v[i]` (each
/// `C x d_k`, `d_k = C / heads`), applies `softmax(Q K^T / sqrt(d_k)) V`, and
/// the concatenated heads are mixed by `W_o` (`C x C`).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub residual: bool,
}

/// Tape variables holding one attention block's projections.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
}

impl MultiHeadAttention {
    pub fn new(name: &str, channels: usize, heads: usize, residual: bool) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention {name}: {channels} channels not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            name: name.to_string(),
            channels,
            heads,
            residual,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn param_name(&self, kind: &str, head: usize) -> String {
        format!("{}.{kind}.{head}", self.name)
    }

    pub fn init<T: Float, R: Rng>(&self, params: &mut LayerParams<T>, rng: &mut R) -> Result<()> {
        let (c, dk) = (self.channels, self.head_dim());
        for kind in ["q", "k", "v"] {
            for h in 0..self.heads {
                params.insert(self.param_name(kind, h), uniform_init(&[c, dk], xavier_bound(c, dk), rng))?;
            }
        }
        params.insert(format!("{}.out", self.name), uniform_init(&[c, c], xavier_bound(c, c), rng))
    }

    pub fn weights(&self, binds: &Bindings) -> Result<AttentionWeights> {
        let heads = |kind: &str| (0..self.heads).map(|h| binds.get(&self.param_name(kind, h))).collect::<Result<Vec<_>>>();
        Ok(AttentionWeights {
            query: heads("q")?,
            key: heads("k")?,
            value: heads("v")?,
            output: binds.get(&format!("{}.out", self.name))?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, binds: &Bindings, f: Var) -> Result<Var> {
        let w = self.weights(binds)?;
        multi_head_attention(tape, f, &w, self.residual)
    }
}

/// `[B, C, H, W]` feature map to `[B*H*W, C]` token rows.
fn tokens<T: Float>(tape: &mut Tape<T>, f: Var) -> Result<(Var, [usize; 4])> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("attention", format!("expected [B, C, H, W], got {s:?}")));
    }
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let flat = tape.reshape(f, &[b, c, n])?;
    let tok = tape.transpose_last2(flat)?;
    Ok((tape.reshape(tok, &[b * n, c])?, [s[0], s[1], s[2], s[3]]))
}

/// Projects token rows and reshapes to `[B, N, d_k]`.
fn project<T: Float>(tape: &mut Tape<T>, tok: Var, w: Var, b: usize, n: usize) -> Result<Var> {
    let p = tape.matmul(tok, w)?;
    let dk = tape.shape(p)[1];
    tape.reshape(p, &[b, n, dk])
}

/// Scaled attention logits `Q K^T / sqrt(d_k)` for one head, `[B, N, N]`.
pub fn attention_logits<T: Float>(tape: &mut Tape<T>, f: Var, wq: Var, wk: Var) -> Result<Var> {
    let (tok, [b, _, h, w]) = tokens(tape, f)?;
    let q = project(tape, tok, wq, b, h * w)?;
    let k = project(tape, tok, wk, b, h * w)?;
    scaled_logits(tape, q, k)
}

fn scaled_logits<T: Float>(tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
    let dk = tape.shape(q)[2];
    let qk = tape.batch_matmul_nt(q, k)?;
    tape.scale(qk, 1.0 / (dk as f64).sqrt())
}

/// Multi-head attention over a feature map; output has the input's shape.
pub fn multi_head_attention<T: Float>(tape: &mut Tape<T>, f: Var, w: &AttentionWeights, residual: bool) -> Result<Var> {
    let heads = w.query.len();
    if heads == 0 || w.key.len() != heads || w.value.len() != heads {
        return Err(Error::Config("attention needs the same positive number of q/k/v heads".into()));
    }
    let (tok, [b, c, h, wd]) = tokens(tape, f)?;
    let n = h * wd;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = project(tape, tok, w.query[i], b, n)?;
        let k = project(tape, tok, w.key[i], b, n)?;
        let v = project(tape, tok, w.value[i], b, n)?;
        let scale = 1.0 / (tape.shape(q)[2] as f64).sqrt();
        outs.push(tape.attention(q, k, v, scale)?);
    }
    let cat = tape.concat_last(&outs)?;
    if tape.shape(cat)[2] != c {
        return Err(Error::dim("attention", &[c], &tape.shape(cat)[2..]));
    }
    let cat = tape.reshape(cat, &[b * n, c])?;
    let mixed = tape.matmul(cat, w.output)?;
    let mixed = tape.reshape(mixed, &[b, n, c])?;
    let back = tape.transpose_last2(mixed)?;
    let out = tape.reshape(back, &[b, c, h, wd])?;
    if residual {
        tape.add(out, f)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2], &[0.5, 0.5]));
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.5, 6.5]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2, 2], &[0.3, -1.2, 7.0, 2.5]));
        let y = linear(&mut tape, x, eye, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(linear(&mut tape, x, eye, bad).is_err());
    }

    #[test]
    fn params_reject_duplicates_and_reshapes() {
        let mut p = LayerParams::<f64>::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[2])).is_err());
        assert!(p.set("a", Tensor::zeros(&[3])).is_err());
        p.set("a", Tensor::ones(&[2])).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn attention_rejects_indivisible_channels() {
        assert!(matches!(MultiHeadAttention::new("a", 10, 4, false), Err(Error::Config(_))));
        assert!(MultiHeadAttention::new("a", 8, 4, false).is_ok());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new("attn", 4, 2, false).unwrap();
        let mut params = LayerParams::<f64>::new();
        mha.init(&mut params, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binds = params.bind(&mut tape, false);
        let x = [0.5, -1.0, 2.0, 0.25];
        let f = tape.constant(t(&[1, 4, 1, 1], &x));
        let y = mha.forward(&mut tape, &binds, f).unwrap();

        // concat_i(x W_v[i]) W_o
        let mut cat = Vec::new();
        for h in 0..2 {
            let wv = params.get(&format!("attn.v.{h}")).unwrap();
            for j in 0..2 {
                cat.push((0..4).map(|i| x[i] * wv.get(&[i, j])).sum::<f64>());
            }
        }
        let wo = params.get("attn.out").unwrap();
        for j in 0..4 {
            let e: f64 = (0..4).map(|i| cat[i] * wo.get(&[i, j])).sum();
            assert!((tape.value(y).data()[j] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mha = MultiHeadAttention::new("attn", 4, 2, false).unwrap();
        let mut params = LayerParams::<f64>::new();
        mha.init(&mut params, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binds = params.bind(&mut tape, false);
        // [B=1, C=4, H=1, W=2], both positions carry the same vector
        let f = tape.constant(t(&[1, 4, 1, 2], &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5, 3.0, 3.0]));
        let y = mha.forward(&mut tape, &binds, f).unwrap();
        let v = tape.value(y);
        for c in 0..4 {
            assert_eq!(v.get(&[0, c, 0, 0]), v.get(&[0, c, 0, 1]));
        }
    }
}
