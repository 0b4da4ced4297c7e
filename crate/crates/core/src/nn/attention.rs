use rand::Rng;

use super::Linear;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Scaled dot-product attention with `heads` equal slices of the model dim.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of one attention call, with the per-head weight matrices kept
/// around for inspection.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }

    /// Attends from the rows of `query` (`[L × d]`) over `memory` (`[T × d]`).
    /// With `causal`, query row `i` only sees memory rows `..=i`.
    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var, causal: bool) -> Result<AttentionOutput> {
        for v in [query, memory] {
            if g.value(v).cols() != self.dim {
                return Err(Error::dim("attention", g.shape(v), &[self.dim]));
            }
        }
        let (l, t) = (g.value(query).rows(), g.value(memory).rows());
        let head_dim = self.dim / self.heads;
        let q = self.query.forward(g, query)?;
        let q = g.scale(q, 1.0 / (head_dim as f64).sqrt());
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let mask: Option<Vec<bool>> = causal.then(|| {
            (0..l)
                .flat_map(|i| (0..t).map(move |j| j <= i))
                .collect()
        });

        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim)?,
                    g.slice_cols(k, h * head_dim, head_dim)?,
                    g.slice_cols(v, h * head_dim, head_dim)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let w = g.softmax_rows(scores, mask.as_deref())?;
            contexts.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            g.concat_cols(&contexts)?
        };
        let output = self.out.forward(g, ctx)?;
        Ok(AttentionOutput { output, weights })
    }
}
