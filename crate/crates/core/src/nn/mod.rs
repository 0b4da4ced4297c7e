//! Parameterised layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and builds its forward pass on a [`Graph`].

mod attention;
mod lstm;
mod transformer;

pub use attention::MultiHeadAttention;
pub use lstm::LstmStack;
pub use transformer::{TransformerDecoderBlock, TransformerEncoderBlock};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Variance epsilon for every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x · Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), &[out_dim, in_dim], rng);
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Token embedding table `[vocab × dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    /// Entries have unit variance so token identity is not drowned out by
    /// the positional encoding added on top.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 3f64.sqrt();
        Self {
            table: store.add_uniform(format!("{name}.table"), &[vocab, dim], bound, rng),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

/// Concatenates `n` consecutive frames (zero-padding the tail) and projects
/// the stacked vectors, shortening a `[T × d]` sequence to `ceil(T/n)` rows.
#[derive(Clone, Debug)]
pub struct FrameStackProjector {
    pub stack: usize,
    pub projection: Linear,
}

impl FrameStackProjector {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        stack: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if stack == 0 {
            return Err(Error::Config("frame stack factor must be at least 1".into()));
        }
        Ok(Self {
            stack,
            projection: Linear::new(store, &format!("{name}.proj"), stack * in_dim, out_dim, rng),
        })
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stack)
    }

    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let (t, d) = (g.value(h).rows(), g.value(h).cols());
        let padded = self.output_len(t) * self.stack;
        let x = if padded > t { g.pad_rows(h, padded - t)? } else { h };
        let stacked = g.reshape(x, &[padded / self.stack, self.stack * d])?;
        self.projection.forward(g, stacked)
    }
}

/// Sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            data[pos * dim + i] = angle.sin();
            if i + 1 < dim {
                data[pos * dim + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape")
}

/// Adds sinusoidal positions to a `[T × d]` value.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (t, d) = (g.value(x).rows(), g.value(x).cols());
    let pe = g.constant(sinusoidal_positions(t, d));
    g.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projector_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p1 = FrameStackProjector::new(&mut store, "p1", 1, 3, 4, &mut rng).unwrap();
        let p2 = FrameStackProjector::new(&mut store, "p2", 2, 3, 4, &mut rng).unwrap();
        let p4 = FrameStackProjector::new(&mut store, "p4", 4, 3, 4, &mut rng).unwrap();
        assert_eq!(p4.output_len(10), 3);

        let x5 = Tensor::new(vec![5, 3], (0..15).map(f64::from).collect()).unwrap();
        let mut g = Graph::with_params(&store, Mode::Eval);
        let x = g.constant(x5.clone());
        let y1 = p1.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y1), &[5, 4]);
        let y2 = p2.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y2), &[3, 4]);

        // n = 1 is the bare linear map
        let direct = p1.projection.forward(&mut g, x).unwrap();
        assert_eq!(g.value(direct), g.value(y1));

        // the last stacked frame is [x4, 0, 0, 0]
        let w = store.value(p2.projection.weight);
        let b = store.value(p2.projection.bias.unwrap());
        for o in 0..4 {
            let expect: f64 = (0..3).map(|j| w.at(o, j) * x5.at(4, j)).sum::<f64>() + b.data()[o];
            assert!((g.value(y2).at(2, o) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 3, &mut rng);
        let x = Tensor::new(vec![2, 4], vec![0.1, -0.4, 0.7, 0.2, 1.0, 0.3, -0.9, 0.5]).unwrap();
        let rep = gradcheck::check_params(&store, 1, |g| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, xv)?;
            let t = g.tanh(y);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn positions_are_bounded() {
        let pe = sinusoidal_positions(7, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }
}
