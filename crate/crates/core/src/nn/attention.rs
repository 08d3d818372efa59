use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Element;

use super::{Ctx, Init, Linear, ParamRegistry};

/// Multi-head self-attention over (N, T, D) with biased qkv and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(reg: &mut ParamRegistry, path: &str, dim: usize, heads: usize, init: Init) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            qkv: Linear::new(reg, &format!("{path}.qkv"), dim, 3 * dim, true, init),
            proj: Linear::new(reg, &format!("{path}.proj"), dim, dim, true, init),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Returns the attended output and the attention weights (N, h, T, T).
    pub fn forward_with_weights<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(
                "msa",
                format!("expects (N, T, {}), got {s:?}", self.dim),
            ));
        }
        let (n, t, h, dh) = (s[0], s[1], self.heads, self.head_dim());
        let qkv = self
            .qkv
            .forward(ctx, x)?
            .reshape(&[n, t, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[n, h, t, dh]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let scores = q.matmul(&k.transpose(2, 3)?)?.scale(scale)?;
        let weights = scores.softmax(3)?;
        let out = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, t, self.dim])?;
        Ok((self.proj.forward(ctx, &out)?, weights))
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count() + self.proj.param_count()
    }

    /// Projections plus the two T x T x D products (scores and weighted values).
    pub fn macs(&self, tokens: usize) -> u64 {
        self.qkv.macs(tokens) + self.proj.macs(tokens) + 2 * (tokens * tokens * self.dim) as u64
    }
}

/// Attention weights for `x`, exposed for inspection.
pub fn attention_weights<T: Element>(
    attn: &MultiHeadSelfAttention,
    ctx: &mut Ctx<'_, T>,
    x: &Var<T>,
) -> Result<Var<T>> {
    Ok(attn.forward_with_weights(ctx, x)?.1)
}
