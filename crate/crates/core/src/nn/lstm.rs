use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
struct Direction {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

impl Direction {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[4 * hidden, input], bound, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[4 * hidden], bound, rng),
        }
    }

    fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let (w_ih, w_hh, b) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.bias));
        g.lstm(x, w_ih, w_hh, b, reverse)
    }
}

/// Stacked LSTM; each layer optionally bidirectional (outputs concatenated).
/// State starts at zero for every sequence.
#[derive(Clone, Debug)]
pub struct LstmStack {
    layers: Vec<(Direction, Option<Direction>)>,
    pub input_size: usize,
    pub hidden_size: usize,
    pub bidirectional: bool,
}

impl LstmStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        bidirectional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 || hidden_size == 0 {
            return Err(Error::Config("LSTM needs at least one layer and hidden unit".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut inp = input_size;
        for l in 0..num_layers {
            let fwd = Direction::new(store, &format!("{name}.{l}.fwd"), inp, hidden_size, rng);
            let bwd = bidirectional.then(|| Direction::new(store, &format!("{name}.{l}.bwd"), inp, hidden_size, rng));
            layers.push((fwd, bwd));
            inp = if bidirectional { 2 * hidden_size } else { hidden_size };
        }
        Ok(Self {
            layers,
            input_size,
            hidden_size,
            bidirectional,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn output_size(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden_size
        } else {
            self.hidden_size
        }
    }

    pub fn num_params(input: usize, hidden: usize, layers: usize, bidirectional: bool) -> usize {
        let dirs = if bidirectional { 2 } else { 1 };
        let mut n = 0;
        let mut inp = input;
        for _ in 0..layers {
            n += dirs * (4 * hidden * inp + 4 * hidden * hidden + 4 * hidden);
            inp = dirs * hidden;
        }
        n
    }

    /// `[T × input] -> [T × output_size]`
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.input_size {
            return Err(Error::dim("lstm", g.shape(x), &[self.input_size]));
        }
        let mut h = x;
        for (fwd, bwd) in &self.layers {
            let f = fwd.run(g, h, false)?;
            h = match bwd {
                Some(b) => {
                    let r = b.run(g, h, true)?;
                    g.concat_cols(&[f, r])?
                }
                None => f,
            };
        }
        Ok(h)
    }
}
