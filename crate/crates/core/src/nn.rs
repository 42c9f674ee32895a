//! Layer building blocks that operate on tape values.
//!
//! Parameters are recorded onto the tape first (as constants for the frozen
//! backbone, as traced leaves for prompts and heads); the functions here only
//! see [`Var`]s.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn randn<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn record(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            w: tape.constant(&self.weight),
            b: tape.constant(&self.bias),
        }
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add(y, self.b)
    }
}

/// Query/key/value/output projections of one multi-head attention unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn record(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            q: self.q.record(tape),
            k: self.k.record(tape),
            v: self.v.record(tape),
            o: self.o.record(tape),
        }
    }

    pub fn linears(&self) -> [(&'static str, &Linear); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

impl AttentionVars {
    /// Scaled dot-product self-attention over the second-to-last axis of
    /// `x: [.., S, d]`, split into `heads` heads.
    pub fn forward(&self, tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (s, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let dh = d / heads;

        let split = |tape: &mut Tape, lin: &LinearVars| -> Result<Var> {
            let y = lin.forward(tape, x)?;
            let y = tape.reshape(y, &[batch, s, heads, dh])?;
            tape.transpose(y, 1, 2)
        };
        let q = split(tape, &self.q)?;
        let k = split(tape, &self.k)?;
        let v = split(tape, &self.v)?;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &shape)?;
        self.o.forward(tape, ctx)
    }
}
