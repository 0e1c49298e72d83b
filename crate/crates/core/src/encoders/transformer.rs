use rand::Rng;

use crate::error::Result;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Affine map `x @ weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[input, output], (1.0 / input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundLinear {
        BoundLinear { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Pre-norm transformer block: multi-head self-attention then a ReLU
/// feed-forward, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real = f32> {
    pub heads: usize,
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub out: Tensor<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    heads: usize,
    query: Var,
    key: Var,
    value: Var,
    out: Var,
    ff_in: BoundLinear,
    ff_out: BoundLinear,
}

impl<T: Real> Block<T> {
    pub fn random<R: Rng + ?Sized>(dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        let s = (1.0 / dim as f64).sqrt();
        Self {
            heads,
            query: Tensor::randn(&[dim, dim], s, rng),
            key: Tensor::randn(&[dim, dim], s, rng),
            value: Tensor::randn(&[dim, dim], s, rng),
            out: Tensor::randn(&[dim, dim], s, rng),
            ff_in: Linear::random(dim, hidden, rng),
            ff_out: Linear::random(hidden, dim, rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.query, &self.key, &self.value, &self.out];
        v.extend(self.ff_in.tensors());
        v.extend(self.ff_out.tensors());
        v
    }

    pub fn cast<U: Real>(&self) -> Block<U> {
        Block {
            heads: self.heads,
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            out: self.out.cast(),
            ff_in: self.ff_in.cast(),
            ff_out: self.ff_out.cast(),
        }
    }

    /// Records the frozen weights as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundBlock {
        BoundBlock {
            heads: self.heads,
            query: tape.constant(&self.query),
            key: tape.constant(&self.key),
            value: tape.constant(&self.value),
            out: tape.constant(&self.out),
            ff_in: BoundLinear { weight: tape.constant(&self.ff_in.weight), bias: tape.constant(&self.ff_in.bias) },
            ff_out: BoundLinear { weight: tape.constant(&self.ff_out.weight), bias: tape.constant(&self.ff_out.bias) },
        }
    }
}

impl BoundBlock {
    /// `x` is `[tokens, dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let dim = tape.shape(x)[1];
        let head_dim = dim / self.heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());

        let h = tape.layer_norm(x);
        let q = tape.matmul(h, self.query)?;
        let k = tape.matmul(h, self.key)?;
        let v = tape.matmul(h, self.value)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = tape.slice_cols(q, i * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, i * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, i * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&heads, 1)?;
        let attended = tape.matmul(merged, self.out)?;
        let x = tape.add(x, attended)?;

        let h = tape.layer_norm(x);
        let f = self.ff_in.forward(tape, h)?;
        let f = tape.relu(f);
        let f = self.ff_out.forward(tape, f)?;
        tape.add(x, f)
    }
}
