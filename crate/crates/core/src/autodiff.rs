//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes. Values are kept on
//! the tape, and [`Graph::backward`] replays the local rules in reverse
//! insertion order. Parameters are borrowed from a [`ParamStore`] rather
//! than copied, so building a graph per sample is cheap.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation. This is the variant used everywhere in the crate.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    PadRows(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Lstm(Box<LstmTape>),
    Custom {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct LstmTape {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
    hidden: usize,
    /// `[T × 4H]` gate activations (i, f, g, o), indexed by time.
    acts: Vec<f64>,
    /// `[T × H]` cell states.
    cells: Vec<f64>,
    /// `[T × H]` tanh of the cell states.
    tanh_cells: Vec<f64>,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape of executed operations.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    grad_enabled: bool,
}

impl<'a> Graph<'a> {
    /// A graph without parameters; leaves are supplied by the caller.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            mode: Mode::Eval,
            grad_enabled: true,
        }
    }

    /// A graph that can read parameters from `store`.
    pub fn with_params(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; store.len()],
            mode,
            grad_enabled: true,
        }
    }

    /// Inference graph: nothing requires a gradient.
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut g = Self::with_params(store, Mode::Eval);
        g.grad_enabled = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameters read by this graph so far, in store order.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.param_vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Frozen parameters do not require
    /// gradients. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let needs = self.grad_enabled && !store.is_frozen(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    /// `x · wᵀ + b` applied to every row of `x`; `w` is `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let k = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[1] != k {
            return Err(Error::dim("linear", &sx, sw));
        }
        let o = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("linear bias", &[o], self.shape(b)));
            }
        }
        let m = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; m * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, m, k, o);
        let mut shape = sx;
        if let Some(last) = shape.last_mut() {
            *last = o;
        } else {
            shape.push(o);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.ng(&inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds the vector `row` (`[k]`) to every row of `a` (`[.. × k]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.clone();
        let c = out.cols();
        let rv = tr.data();
        for r in out.data_mut().chunks_mut(c) {
            r.iter_mut().zip(rv).for_each(|(x, y)| *x += y);
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(t, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Inverted dropout: identity in eval mode, Bernoulli mask scaled by
    /// `1 / (1 - rate)` in train mode.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
        }
        let keep = 1.0 - rate;
        let shape = self.shape(a).to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    // ---- normalisation --------------------------------------------------

    /// Normalises every row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", tx.shape(), self.shape(gain)));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise softmax. With a mask (same length as `x`), entries where the
    /// mask is `false` come out exactly zero; every row needs one active entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if let Some(m) = mask {
            if m.len() != out.len() {
                return Err(Error::dim("softmax mask", out.shape(), &[m.len()]));
            }
        }
        for (r, row) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
            let rm = mask.map(|m| &m[r * c..(r + 1) * c]);
            if rm.is_some_and(|m| !m.iter().any(|&b| b)) {
                return Err(Error::EmptyMask);
            }
            tensor::softmax_in_place(row, rm);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::log_softmax_rows(self.value(x));
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    // ---- shape plumbing -------------------------------------------------

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Columns `start..start + width` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start + width > c || t.shape().len() != 2 {
            return Err(Error::dim("slice_cols", t.shape(), &[start, width]));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![rows, width], out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        let mut width = 0;
        for &v in xs {
            let t = self.value(v);
            if t.rows() != rows || t.shape().len() != 2 {
                return Err(Error::dim("concat_cols", self.shape(xs[0]), t.shape()));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let ng = self.ng(xs);
        Ok(self.push(Tensor::new(vec![rows, width], out)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Rows `start..start + count` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + count > t.rows() {
            return Err(Error::dim("slice_rows", t.shape(), &[start, count]));
        }
        let c = t.cols();
        let out = t.data()[start * c..(start + count) * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![count, c], out)?, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.value(xs[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            if t.cols() != c {
                return Err(Error::dim("concat_rows", self.shape(xs[0]), t.shape()));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = self.ng(xs);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// Appends `extra` zero rows.
    pub fn pad_rows(&mut self, x: Var, extra: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::dim("pad_rows", t.shape(), &[]));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        out.resize((r + extra) * c, 0.0);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![r + extra, c], out)?, Op::PadRows(x), ng))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::UnknownToken(i));
            }
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Picks entry `idx[r]` from each row `r`, giving a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.len() != t.rows() {
            return Err(Error::dim("pick", t.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= t.cols() {
                return Err(Error::UnknownToken(i));
            }
            out.push(t.row(r)[i]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Pick { x, idx: idx.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// A scalar whose value and gradient with respect to `x` were computed
    /// outside the tape (the CTC kernel uses this).
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::dim("custom_scalar", self.shape(x), &[grad.len()]));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, grad }, ng))
    }

    // ---- recurrent ------------------------------------------------------

    /// One LSTM layer over the rows of `x` (`[T × d]`) with zero initial
    /// state. Gate order in `w_ih` (`[4H × d]`), `w_hh` (`[4H × H]`) and
    /// `bias` (`[4H]`) is input, forget, cell, output. With `reverse` the
    /// sequence is consumed from the last row; outputs stay time-aligned.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let tx = self.value(x);
        let (steps, d) = (tx.rows(), tx.cols());
        let sw = self.shape(w_ih);
        if sw.len() != 2 || sw[1] != d || !sw[0].is_multiple_of(4) {
            return Err(Error::dim("lstm input weights", tx.shape(), sw));
        }
        let h = sw[0] / 4;
        if self.shape(w_hh) != [4 * h, h] || self.shape(bias) != [4 * h] {
            return Err(Error::dim("lstm recurrent weights", &[4 * h, h], self.shape(w_hh)));
        }
        let whh = self.value(w_hh).data();
        let mut pre = vec![0.0; steps * 4 * h];
        for row in pre.chunks_mut(4 * h) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm_nt(tx.data(), self.value(w_ih).data(), &mut pre, steps, d, 4 * h);

        let mut acts = vec![0.0; steps * 4 * h];
        let mut cells = vec![0.0; steps * h];
        let mut tanh_cells = vec![0.0; steps * h];
        let mut out = vec![0.0; steps * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut gates = vec![0.0; 4 * h];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            gates.copy_from_slice(&pre[t * 4 * h..(t + 1) * 4 * h]);
            gemm_nt(&h_prev, whh, &mut gates, 1, h, 4 * h);
            let a = &mut acts[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(gates[j]);
                let f = sigmoid(gates[h + j]);
                let g = gates[2 * h + j].tanh();
                let o = sigmoid(gates[3 * h + j]);
                a[j] = i;
                a[h + j] = f;
                a[2 * h + j] = g;
                a[3 * h + j] = o;
                let c = f * c_prev[j] + i * g;
                let tc = c.tanh();
                cells[t * h + j] = c;
                tanh_cells[t * h + j] = tc;
                let hv = o * tc;
                out[t * h + j] = hv;
                c_prev[j] = c;
                h_prev[j] = hv;
            }
        }
        let ng = self.ng(&[x, w_ih, w_hh, bias]);
        Ok(self.push(
            Tensor::new(vec![steps, h], out)?,
            Op::Lstm(Box::new(LstmTape {
                x,
                w_ih,
                w_hh,
                bias,
                reverse,
                hidden: h,
                acts,
                cells,
                tanh_cells,
            })),
            ng,
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from the scalar `loss`. Gradients are returned for
    /// every leaf that requires one; intermediate buffers are released as
    /// soon as they have been consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if grads[i].is_some() {
                        params.push((id, i));
                    }
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(i, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn apply_rule(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |d| gemm_nt(g, tb.data(), d, m, n, k));
                acc(*b, &mut |d| gemm_tn(ta.data(), g, d, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                acc(*a, &mut |d| gemm_nn(g, tb.data(), d, m, n, k));
                acc(*b, &mut |d| gemm_tn(g, ta.data(), d, m, n, k));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (o, k) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.len() / k.max(1);
                acc(*x, &mut |d| gemm_nn(g, tw.data(), d, m, o, k));
                acc(*w, &mut |d| gemm_tn(g, tx.data(), d, m, o, k));
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(o) {
                            d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(tb) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(ta) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |d| add_into(d, g));
                let c = val(*r).len();
                acc(*r, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, gy)| *x += c * gy)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Tanh(a) => acc(*a, &mut |d| {
                for ((x, gy), yv) in d.iter_mut().zip(g).zip(y) {
                    *x += gy * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for ((x, gy), yv) in d.iter_mut().zip(g).zip(y) {
                    *x += gy * yv * (1.0 - yv);
                }
            }),
            Op::Relu(a) => {
                let xa = val(*a).data();
                acc(*a, &mut |d| {
                    for ((x, gy), xv) in d.iter_mut().zip(g).zip(xa) {
                        if *xv > 0.0 {
                            *x += gy;
                        }
                    }
                })
            }
            Op::Gelu(a) => {
                let xa = val(*a).data();
                acc(*a, &mut |d| {
                    for ((x, gy), xv) in d.iter_mut().zip(g).zip(xa) {
                        *x += gy * gelu_grad(*xv);
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |d| {
                for ((x, gy), yv) in d.iter_mut().zip(g).zip(y) {
                    *x += gy / (2.0 * yv);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |d| {
                for ((x, gy), yv) in d.iter_mut().zip(g).zip(y) {
                    *x += gy * yv;
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let c = gv.len();
                acc(*gain, &mut |d| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks(c) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, ((gr, hr), dr)) in g.chunks(c).zip(xhat.chunks(c)).zip(d.chunks_mut(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |d| {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(d.chunks_mut(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |d| {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(d.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                })
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (gr, dr) in g.chunks(w).zip(d.chunks_mut(c)) {
                        add_into(&mut dr[*start..start + w], gr);
                    }
                })
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut off = 0;
                for &v in xs {
                    let w = val(v).cols();
                    acc(v, &mut |d| {
                        for (gr, dr) in g.chunks(total).zip(d.chunks_mut(w)) {
                            add_into(dr, &gr[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = val(v).len();
                    acc(v, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::PadRows(a) => {
                let n = val(*a).len();
                acc(*a, &mut |d| add_into(d, &g[..n]));
            }
            Op::GatherRows { table, ids } => {
                let c = node.value.cols();
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                })
            }
            Op::Pick { x, idx } => {
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * c + j] += g[r];
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Custom { x, grad } => acc(*x, &mut |d| {
                for (x, gv) in d.iter_mut().zip(grad) {
                    *x += g[0] * gv;
                }
            }),
            Op::Lstm(tape) => {
                let tx = val(tape.x);
                let (steps, dim) = (tx.rows(), tx.cols());
                let h = tape.hidden;
                let whh = val(tape.w_hh).data();
                let mut dpre = vec![0.0; steps * 4 * h];
                let mut dh_next = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                let mut dwhh = if needs(tape.w_hh) { vec![0.0; 4 * h * h] } else { Vec::new() };
                for k in (0..steps).rev() {
                    let t = if tape.reverse { steps - 1 - k } else { k };
                    let prev = if k == 0 {
                        None
                    } else if tape.reverse {
                        Some(t + 1)
                    } else {
                        Some(t - 1)
                    };
                    let a = &tape.acts[t * 4 * h..(t + 1) * 4 * h];
                    let da = &mut dpre[t * 4 * h..(t + 1) * 4 * h];
                    for j in 0..h {
                        let (iv, fv, gv, ov) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let tc = tape.tanh_cells[t * h + j];
                        let dh = g[t * h + j] + dh_next[j];
                        let dout = dh * tc;
                        let dc = dh * ov * (1.0 - tc * tc) + dc_next[j];
                        let c_prev = prev.map_or(0.0, |p| tape.cells[p * h + j]);
                        da[j] = dc * gv * iv * (1.0 - iv);
                        da[h + j] = dc * c_prev * fv * (1.0 - fv);
                        da[2 * h + j] = dc * iv * (1.0 - gv * gv);
                        da[3 * h + j] = dout * ov * (1.0 - ov);
                        dc_next[j] = dc * fv;
                    }
                    dh_next.iter_mut().for_each(|x| *x = 0.0);
                    gemm_nn(da, whh, &mut dh_next, 1, 4 * h, h);
                    if let Some(p) = prev {
                        if !dwhh.is_empty() {
                            let h_prev = &y[p * h..(p + 1) * h];
                            gemm_tn(da, h_prev, &mut dwhh, 1, 4 * h, h);
                        }
                    }
                }
                let wih = val(tape.w_ih).data();
                acc(tape.x, &mut |d| gemm_nn(&dpre, wih, d, steps, 4 * h, dim));
                acc(tape.w_ih, &mut |d| gemm_tn(&dpre, tx.data(), d, steps, 4 * h, dim));
                acc(tape.bias, &mut |d| {
                    for row in dpre.chunks(4 * h) {
                        add_into(d, row);
                    }
                });
                if !dwhh.is_empty() {
                    acc(tape.w_hh, &mut |d| add_into(d, &dwhh));
                }
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Leaf gradients produced by one [`Graph::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the leaf does not require one or is
    /// unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, i)| self.grads[*i].as_deref())
    }

    /// Adds `scale ×` every parameter gradient into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for &(id, i) in &self.params {
            if let Some(g) = &self.grads[i] {
                let dst = store.grad_mut(id).data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.scale(c, 2.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 2.0]), false);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        assert_eq!(gelu(0.0), 0.0);
        // tanh-approximation value at 1
        assert!((gelu(1.0) - 0.841_191_990_607_9).abs() < 1e-12);
        assert!((gelu(1.0) - 0.84119).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0; 5]), false);
        let gain = g.leaf(Tensor::full(&[5], 1.0), false);
        let bias = g.leaf(Tensor::zeros(&[5]), false);
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_mismatch_is_a_dimension_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[3, 2]), false);
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let r = g.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(g.add_row(a, r), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), false);
        assert_eq!(g.dropout(x, 0.5, &mut rng).unwrap(), x);
    }
}
