use rand::Rng;

use super::attention::{AttentionOutput, MultiHeadAttention};
use super::{LayerNorm, Linear};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, inner: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, inner, rng),
            down: Linear::new(store, &format!("{name}.down"), inner, dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm encoder block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerEncoderBlock {
    norm_attn: LayerNorm,
    pub attention: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
    pub dim: usize,
}

impl TransformerEncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
            dim,
        })
    }

    pub fn num_params(dim: usize, ff_dim: usize) -> usize {
        2 * 2 * dim + MultiHeadAttention::num_params(dim) + Linear::num_params(dim, ff_dim) + Linear::num_params(ff_dim, dim)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, x)?.output)
    }

    /// Forward pass that also returns the self-attention weights.
    pub fn forward_with_weights(&self, g: &mut Graph, x: Var) -> Result<AttentionOutput> {
        if g.value(x).cols() != self.dim {
            return Err(Error::dim("encoder block", g.shape(x), &[self.dim]));
        }
        let a = self.norm_attn.forward(g, x)?;
        let att = self.attention.forward(g, a, a, false)?;
        let x = g.add(x, att.output)?;
        let b = self.norm_ff.forward(g, x)?;
        let f = self.ff.forward(g, b)?;
        let output = g.add(x, f)?;
        Ok(AttentionOutput {
            output,
            weights: att.weights,
        })
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over a
/// memory sequence, feed-forward; each wrapped in a residual.
#[derive(Clone, Debug)]
pub struct TransformerDecoderBlock {
    norm_self: LayerNorm,
    pub self_attention: MultiHeadAttention,
    norm_cross: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
    pub dim: usize,
}

impl TransformerDecoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
            dim,
        })
    }

    pub fn num_params(dim: usize, ff_dim: usize) -> usize {
        3 * 2 * dim
            + 2 * MultiHeadAttention::num_params(dim)
            + Linear::num_params(dim, ff_dim)
            + Linear::num_params(ff_dim, dim)
    }

    pub fn forward(&self, g: &mut Graph, y: Var, memory: Var) -> Result<Var> {
        for v in [y, memory] {
            if g.value(v).cols() != self.dim {
                return Err(Error::dim("decoder block", g.shape(v), &[self.dim]));
            }
        }
        let a = self.norm_self.forward(g, y)?;
        let s = self.self_attention.forward(g, a, a, true)?;
        let y = g.add(y, s.output)?;
        let b = self.norm_cross.forward(g, y)?;
        let c = self.cross_attention.forward(g, b, memory, false)?;
        let y = g.add(y, c.output)?;
        let n = self.norm_ff.forward(g, y)?;
        let f = self.ff.forward(g, n)?;
        g.add(y, f)
    }
}
