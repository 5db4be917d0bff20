//! Transformer building blocks on top of the tape.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Param, Tape, Val};
use crate::tensor::{Element, Tensor};

/// BERT-convention layer-norm epsilon.
pub const LN_EPS: f64 = 1e-12;
/// Additive bias for masked attention positions.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// normal(0, 0.02), the BERT convention
    Normal,
    /// all zeros (prediction heads start uniform)
    Zero,
}

pub fn init_tensor<E: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, init: Init) -> Tensor<E> {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Normal => {
            let dist = Normal::new(0.0f64, 0.02).expect("valid normal");
            let n: usize = shape.iter().product();
            let data: Vec<E> = (0..n).map(|_| E::from_real(dist.sample(rng))).collect();
            Tensor::new(shape, data).expect("shape matches data")
        }
    }
}

/// Affine map `x · W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone)]
pub struct Linear<E: Element> {
    pub w: Param<E>,
    pub b: Param<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, init: Init) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), init_tensor(rng, vec![d_in, d_out], init)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(vec![d_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Val) -> Result<Val> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }

    pub fn detached_copy(&self) -> Self {
        Self {
            w: self.w.detached_copy(),
            b: self.b.detached_copy(),
        }
    }
}

#[derive(Clone)]
pub struct LayerNorm<E: Element> {
    pub gain: Param<E>,
    pub bias: Param<E>,
    pub eps: f64,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(name: &str, d: usize, eps: f64) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Tensor::full(vec![d], E::one())),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![d])),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Val) -> Result<Val> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        out.push(self.gain.clone());
        out.push(self.bias.clone());
    }

    pub fn detached_copy(&self) -> Self {
        Self {
            gain: self.gain.detached_copy(),
            bias: self.bias.detached_copy(),
            eps: self.eps,
        }
    }
}

/// Boolean attention mask, true where a query may attend to a key.
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    /// Every query sees exactly the keys enabled in `key_mask`.
    pub fn from_key_mask(queries: usize, key_mask: &[bool]) -> Self {
        let keys = key_mask.len();
        let mut allowed = Vec::with_capacity(queries * keys);
        for _ in 0..queries {
            allowed.extend_from_slice(key_mask);
        }
        Self {
            queries,
            keys,
            allowed,
        }
    }

    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allowed[q * len + k] = true;
            }
        }
        Self {
            queries: len,
            keys: len,
            allowed,
        }
    }

    fn bias_tensor<E: Element>(&self) -> Result<Tensor<E>> {
        for q in 0..self.queries {
            if !self.allowed[q * self.keys..(q + 1) * self.keys]
                .iter()
                .any(|&a| a)
            {
                return Err(Error::DegenerateMask { row: q });
            }
        }
        let data: Vec<E> = self
            .allowed
            .iter()
            .map(|&a| if a { E::zero() } else { E::from_real(MASK_BIAS) })
            .collect();
        Tensor::new(vec![self.queries, self.keys], data)
    }
}

/// Scaled dot-product attention with per-head projections and an output
/// projection. Self-attention is the `q_src == kv_src` case.
#[derive(Clone)]
pub struct MultiHeadAttention<E: Element> {
    pub q: Linear<E>,
    pub k: Linear<E>,
    pub v: Linear<E>,
    pub o: Linear<E>,
    pub n_heads: usize,
    pub d_model: usize,
}

impl<E: Element> MultiHeadAttention<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(rng, &format!("{name}.q"), d_model, d_model, Init::Normal),
            k: Linear::new(rng, &format!("{name}.k"), d_model, d_model, Init::Normal),
            v: Linear::new(rng, &format!("{name}.v"), d_model, d_model, Init::Normal),
            o: Linear::new(rng, &format!("{name}.o"), d_model, d_model, Init::Normal),
            n_heads,
            d_model,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        q_src: Val,
        kv_src: Val,
        mask: Option<&AttnMask>,
    ) -> Result<Val> {
        let lq = tape.value(q_src).shape()[0];
        let lk = tape.value(kv_src).shape()[0];
        let bias = match mask {
            Some(m) => {
                if m.queries != lq || m.keys != lk {
                    return Err(Error::ShapeMismatch {
                        op: "attention mask",
                        lhs: vec![lq, lk],
                        rhs: vec![m.queries, m.keys],
                    });
                }
                Some(tape.leaf(m.bias_tensor()?))
            }
            None => None,
        };
        let q = self.q.forward(tape, q_src)?;
        let k = self.k.forward(tape, kv_src)?;
        let v = self.v.forward(tape, kv_src)?;
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kht = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kht)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(b) = bias {
                scores = tape.add(scores, b)?;
            }
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        self.o.forward(tape, ctx)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        self.q.params(out);
        self.k.params(out);
        self.v.params(out);
        self.o.params(out);
    }

    pub fn detached_copy(&self) -> Self {
        Self {
            q: self.q.detached_copy(),
            k: self.k.detached_copy(),
            v: self.v.detached_copy(),
            o: self.o.detached_copy(),
            n_heads: self.n_heads,
            d_model: self.d_model,
        }
    }
}

/// Two-layer position-wise feed-forward with GELU.
#[derive(Clone)]
pub struct FeedForward<E: Element> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Element> FeedForward<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, d_model: usize, multiplier: usize) -> Self {
        let hidden = d_model * multiplier;
        Self {
            fc1: Linear::new(rng, &format!("{name}.fc1"), d_model, hidden, Init::Normal),
            fc2: Linear::new(rng, &format!("{name}.fc2"), hidden, d_model, Init::Normal),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Val) -> Result<Val> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        self.fc1.params(out);
        self.fc2.params(out);
    }

    pub fn detached_copy(&self) -> Self {
        Self {
            fc1: self.fc1.detached_copy(),
            fc2: self.fc2.detached_copy(),
        }
    }
}

/// Pre-LN transformer encoder layer (unimodal encoders).
#[derive(Clone)]
pub struct EncoderLayer<E: Element> {
    pub sa: MultiHeadAttention<E>,
    pub ffn: FeedForward<E>,
    pub ln1: LayerNorm<E>,
    pub ln2: LayerNorm<E>,
}

impl<E: Element> EncoderLayer<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_multiplier: usize,
    ) -> Result<Self> {
        Ok(Self {
            sa: MultiHeadAttention::new(rng, &format!("{name}.sa"), d_model, n_heads)?,
            ffn: FeedForward::new(rng, &format!("{name}.ffn"), d_model, ffn_multiplier),
            ln1: LayerNorm::new(&format!("{name}.ln1"), d_model, LN_EPS),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d_model, LN_EPS),
        })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Val, mask: Option<&AttnMask>) -> Result<Val> {
        let normed = self.ln1.forward(tape, x)?;
        let sa = self.sa.forward(tape, normed, normed, mask)?;
        let x = tape.add(x, sa)?;
        let normed = self.ln2.forward(tape, x)?;
        let ff = self.ffn.forward(tape, normed)?;
        tape.add(x, ff)
    }

    pub fn params(&self, out: &mut Vec<Param<E>>) {
        self.sa.params(out);
        self.ffn.params(out);
        self.ln1.params(out);
        self.ln2.params(out);
    }

    pub fn detached_copy(&self) -> Self {
        Self {
            sa: self.sa.detached_copy(),
            ffn: self.ffn.detached_copy(),
            ln1: self.ln1.detached_copy(),
            ln2: self.ln2.detached_copy(),
        }
    }
}
