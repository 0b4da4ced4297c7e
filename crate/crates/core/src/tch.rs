//! Talker-count head: masked additive attention pooling over encoder
//! frames, mean and dispersion statistics, and a small MLP that classifies
//! a mixture as two- or three-talker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Number of talkers in a mixture; only 2 and 3 are modelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct TalkerCount(usize);

impl TalkerCount {
    pub const TWO: TalkerCount = TalkerCount(2);
    pub const THREE: TalkerCount = TalkerCount(3);
    pub const ALL: [TalkerCount; 2] = [Self::TWO, Self::THREE];

    pub fn new(n: usize) -> Result<Self> {
        match n {
            2 | 3 => Ok(Self(n)),
            n => Err(Error::TalkerCount(n)),
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Classifier index: 0 for two talkers, 1 for three.
    pub fn class(self) -> usize {
        self.0 - 2
    }

    pub fn from_class(class: usize) -> Result<Self> {
        Self::new(class + 2)
    }
}

impl TryFrom<usize> for TalkerCount {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        Self::new(n)
    }
}

impl From<TalkerCount> for usize {
    fn from(c: TalkerCount) -> usize {
        c.0
    }
}

impl std::fmt::Display for TalkerCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-frame activity flags used to exclude frames from pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityMask(Vec<bool>);

impl ActivityMask {
    pub fn full(frames: usize) -> Self {
        Self(vec![true; frames])
    }

    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    /// Frames whose energy exceeds `ratio` times the loudest frame's.
    pub fn from_energy(features: &Tensor, ratio: f64) -> Self {
        let energy: Vec<f64> = (0..features.rows())
            .map(|r| features.row(r).iter().map(|x| x * x).sum())
            .collect();
        let max = energy.iter().copied().fold(0.0, f64::max);
        Self(energy.into_iter().map(|e| max > 0.0 && e > ratio * max).collect())
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

/// Which representation the head pools over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TchInput {
    /// Raw input features.
    Features,
    /// Output of the first `k` shared encoder blocks.
    SharedLayers(usize),
    /// Full shared encoder output.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TchConfig {
    pub attention_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub eps: f64,
    pub input: TchInput,
    /// Pool only over frames passing the energy rule instead of all frames.
    pub energy_mask: bool,
    /// Extra noisy copies of every clean training mixture, each with a
    /// fresh `N(0, augment_noise_std²)` draw. The count is unchanged by
    /// noise, and without the copies the head fits encoder states of
    /// memorised training mixtures that unseen ones do not reproduce.
    pub augment_copies: usize,
    pub augment_noise_std: f64,
}

impl Default for TchConfig {
    fn default() -> Self {
        Self {
            attention_dim: 32,
            hidden_dim: 32,
            dropout: 0.1,
            eps: 1e-5,
            input: TchInput::SharedLayers(1),
            energy_mask: false,
            augment_copies: 3,
            augment_noise_std: 0.1,
        }
    }
}

/// Energy threshold, relative to the loudest frame, for [`ActivityMask::from_energy`].
pub const ACTIVITY_RATIO: f64 = 0.01;

/// Parameters of the head, registered under a common name prefix.
#[derive(Clone, Debug)]
pub struct TchParams {
    /// `W`, `b` of the frame scorer.
    pub score: Linear,
    /// `v` as a `[1 × a]` matrix.
    pub v: ParamId,
    /// Scalar offset added to every frame score.
    pub c: ParamId,
    pub norm: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
    pub input_dim: usize,
    pub eps: f64,
    pub dropout: f64,
}

impl TchParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, config: &TchConfig, rng: &mut R) -> Result<Self> {
        if config.eps <= 0.0 {
            return Err(Error::Config("pooling eps must be positive".into()));
        }
        let a = config.attention_dim;
        Ok(Self {
            score: Linear::new(store, &format!("{name}.score"), input_dim, a, rng),
            v: store.add_xavier(format!("{name}.v"), &[1, a], rng),
            c: store.add_zeros(format!("{name}.c"), &[1]),
            norm: LayerNorm::new(store, &format!("{name}.norm"), 2 * input_dim),
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * input_dim, config.hidden_dim, rng),
            out: Linear::new(store, &format!("{name}.out"), config.hidden_dim, 2, rng),
            input_dim,
            eps: config.eps,
            dropout: config.dropout,
        })
    }

    pub fn num_params(input_dim: usize, config: &TchConfig) -> usize {
        let (a, p) = (config.attention_dim, config.hidden_dim);
        Linear::num_params(input_dim, a) + a + 1 + 4 * input_dim + Linear::num_params(2 * input_dim, p) + Linear::num_params(p, 2)
    }

    /// Masked attention weights `[1 × T]` over the rows of `h` (`[T × D]`).
    pub fn attention_weights(&self, g: &mut Graph, h: Var, mask: &ActivityMask) -> Result<Var> {
        let t = g.value(h).rows();
        if mask.len() != t {
            return Err(Error::dim("activity mask", g.shape(h), &[mask.len()]));
        }
        let e = self.score.forward(g, h)?;
        let e = g.tanh(e);
        let v = g.param(self.v);
        let s = g.matmul_nt(e, v)?;
        let c = g.param(self.c);
        let s = g.add_row(s, c)?;
        let s = g.reshape(s, &[1, t])?;
        g.softmax_rows(s, Some(mask.flags()))
    }

    /// Logits `[2]` from pooled statistics `z` (`[1 × 2D]`).
    pub fn logits<R: Rng>(&self, g: &mut Graph, z: Var, rng: &mut R) -> Result<Var> {
        let n = self.norm.forward(g, z)?;
        let u = self.hidden.forward(g, n)?;
        let u = g.gelu(u);
        let u = g.dropout(u, self.dropout, rng)?;
        let o = self.out.forward(g, u)?;
        g.reshape(o, &[2])
    }

    /// Attention, pooling and classifier in one pass.
    pub fn forward<R: Rng>(&self, g: &mut Graph, h: Var, mask: &ActivityMask, rng: &mut R) -> Result<Var> {
        let alpha = self.attention_weights(g, h, mask)?;
        let z = stats_pool(g, alpha, h, self.eps)?;
        self.logits(g, z, rng)
    }

    /// Eval-mode prediction for one utterance.
    pub fn predict(&self, store: &ParamStore, h: &Tensor, mask: &ActivityMask) -> Result<TalkerCount> {
        let mut g = Graph::inference(store);
        let x = g.constant(h.clone());
        let o = self.forward(&mut g, x, mask, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        Ok(predict_count(g.value(o).data()))
    }
}

/// Weighted mean and dispersion `[μ; σ]` as a `[1 × 2D]` row, with
/// `σ = sqrt(Σ α (h − μ)² + eps)`.
pub fn stats_pool(g: &mut Graph, alpha: Var, h: Var, eps: f64) -> Result<Var> {
    let d = g.value(h).cols();
    let mu = g.matmul(alpha, h)?;
    let neg = g.scale(mu, -1.0);
    let neg = g.reshape(neg, &[d])?;
    let dev = g.add_row(h, neg)?;
    let sq = g.mul(dev, dev)?;
    let var = g.matmul(alpha, sq)?;
    let var = g.add_scalar(var, eps);
    let sigma = g.sqrt(var);
    g.concat_cols(&[mu, sigma])
}

/// Argmax over the two logits; a tie goes to two talkers.
pub fn predict_count(logits: &[f64]) -> TalkerCount {
    if logits[1] > logits[0] {
        TalkerCount::THREE
    } else {
        TalkerCount::TWO
    }
}

/// Mean cross-entropy over a batch of `[2]` logit vectors.
pub fn tch_loss(g: &mut Graph, logits: &[Var], labels: &[TalkerCount]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Empty("count batch"));
    }
    if logits.len() != labels.len() {
        return Err(Error::dim("count loss", &[logits.len()], &[labels.len()]));
    }
    let rows = logits
        .iter()
        .map(|&o| g.reshape(o, &[1, 2]))
        .collect::<Result<Vec<_>>>()?;
    let all = g.concat_rows(&rows)?;
    let lp = g.log_softmax_rows(all);
    let classes: Vec<usize> = labels.iter().map(|c| c.class()).collect();
    let picked = g.pick(lp, &classes)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Training-mode graph helper: mean count loss over cached inputs.
pub fn batch_loss<'a, R: Rng>(
    params: &TchParams,
    store: &'a ParamStore,
    batch: &[(&Tensor, &ActivityMask, TalkerCount)],
    mode: Mode,
    rng: &mut R,
) -> Result<(Graph<'a>, Var)> {
    let mut g = Graph::with_params(store, mode);
    let mut logits = Vec::with_capacity(batch.len());
    for (h, mask, _) in batch {
        let x = g.constant((*h).clone());
        logits.push(params.forward(&mut g, x, mask, rng)?);
    }
    let labels: Vec<TalkerCount> = batch.iter().map(|b| b.2).collect();
    let loss = tch_loss(&mut g, &logits, &labels)?;
    Ok((g, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(dim: usize, hidden: usize) -> (ParamStore, TchParams) {
        let mut store = ParamStore::new();
        let cfg = TchConfig {
            attention_dim: 6,
            hidden_dim: hidden,
            ..Default::default()
        };
        let p = TchParams::new(&mut store, "tch", dim, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, p)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn weights(store: &ParamStore, p: &TchParams, h: &Tensor, mask: &ActivityMask) -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let x = g.constant(h.clone());
        let a = p.attention_weights(&mut g, x, mask)?;
        Ok(g.value(a).data().to_vec())
    }

    #[test]
    fn identical_frames_get_uniform_weight() {
        let (store, p) = head(3, 8);
        let h = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9]; 4]).unwrap();
        let a = weights(&store, &p, &h, &ActivityMask::full(4)).unwrap();
        assert!(a.iter().all(|w| (w - 0.25).abs() < 1e-12));
    }

    #[test]
    fn mask_gives_exact_zeros() {
        let (store, p) = head(3, 8);
        let h = random(5, 3, 2);
        let a = weights(&store, &p, &h, &ActivityMask::new(vec![false, false, true, false, false])).unwrap();
        assert_eq!(a, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let a = weights(&store, &p, &h, &ActivityMask::new(vec![true, false, true, true, false])).unwrap();
        assert_eq!((a[1], a[4]), (0.0, 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(
            weights(&store, &p, &h, &ActivityMask::new(vec![false; 5])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn offset_c_cancels() {
        let (mut store, p) = head(3, 8);
        let h = random(6, 3, 4);
        let before = weights(&store, &p, &h, &ActivityMask::full(6)).unwrap();
        store.value_mut(p.c).data_mut()[0] = 7.5;
        let after = weights(&store, &p, &h, &ActivityMask::full(6)).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn pool(alpha: &[f64], h: &Tensor, eps: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, alpha.len()], alpha.to_vec()).unwrap());
        let x = g.constant(h.clone());
        let z = stats_pool(&mut g, a, x, eps).unwrap();
        g.value(z).data().to_vec()
    }

    #[test]
    fn pooling_examples() {
        let eps = 1e-5;
        let h = Tensor::from_rows(&vec![vec![1.0, -2.0]; 3]).unwrap();
        let z = pool(&[0.2, 0.3, 0.5], &h, eps);
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] + 2.0).abs() < 1e-12);
        assert!((z[2] - eps.sqrt()).abs() < 1e-12 && (z[3] - eps.sqrt()).abs() < 1e-12);

        let h = random(4, 2, 9);
        let z = pool(&[0.0, 0.0, 1.0, 0.0], &h, eps);
        assert_eq!(&z[..2], h.row(2));
        assert!((z[2] - eps.sqrt()).abs() < 1e-12);

        let h = Tensor::from_rows(&[[0.0], [2.0]]).unwrap();
        let z = pool(&[0.5, 0.5], &h, eps);
        assert!((z[0] - 1.0).abs() < 1e-12);
        assert!((z[1] - (1.0 + eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_pass_output_bias() {
        let (mut store, p) = head(2, 4);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        store.value_mut(p.out.bias.unwrap()).data_mut().copy_from_slice(&[1.0, -1.0]);
        let mut g = Graph::inference(&store);
        let z = g.constant(random(1, 4, 1));
        let o = p.logits(&mut g, z, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.value(o).data(), &[1.0, -1.0]);
    }

    #[test]
    fn eval_logits_are_deterministic() {
        let (store, p) = head(3, 8);
        let h = random(5, 3, 3);
        let run = |seed| {
            let mut g = Graph::inference(&store);
            let x = g.constant(h.clone());
            let o = p.forward(&mut g, x, &ActivityMask::full(5), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            g.value(o).data().to_vec()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, p) = head(4, 8);
        // away from zero so that the LayerNorm and GELU are exercised
        for id in store.ids().collect::<Vec<_>>() {
            let noise = random(1, store.value(id).len(), id.index() as u64 + 50);
            store.value_mut(id).data_mut().iter_mut().zip(noise.data()).for_each(|(w, n)| *w += 0.3 * n);
        }
        let h = random(6, 4, 77);
        let mask = ActivityMask::new(vec![true, true, false, true, true, true]);
        let report = check_params(&store, 1, |g| {
            let x = g.constant(h.clone());
            let o = p.forward(g, x, &mask, &mut ChaCha8Rng::seed_from_u64(0))?;
            tch_loss(g, &[o], &[TalkerCount::THREE])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

    }

    #[test]
    fn offset_gradient_is_zero() {
        let (store, p) = head(3, 8);
        let h = random(5, 3, 21);
        let mut g = Graph::with_params(&store, Mode::Eval);
        let x = g.constant(h);
        let o = p.forward(&mut g, x, &ActivityMask::full(5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let loss = tch_loss(&mut g, &[o], &[TalkerCount::TWO]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(p.c).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn prediction_rules() {
        assert_eq!(predict_count(&[2.0, 0.0]), TalkerCount::TWO);
        assert_eq!(predict_count(&[0.0, 0.0]), TalkerCount::TWO);
        assert_eq!(predict_count(&[0.0, 0.5]), TalkerCount::THREE);
        assert_eq!(predict_count(&[100.0, 100.5]), TalkerCount::THREE);
    }

    #[test]
    fn loss_examples() {
        let loss = |logits: &[[f64; 2]], labels: &[TalkerCount]| {
            let mut g = Graph::new();
            let os: Vec<Var> = logits.iter().map(|o| g.constant(Tensor::vector(o.to_vec()))).collect();
            let l = tch_loss(&mut g, &os, labels)?;
            Ok::<f64, Error>(g.value(l).item())
        };
        assert!(loss(&[[20.0, -20.0]], &[TalkerCount::TWO]).unwrap() < 1e-15);
        let ln2 = std::f64::consts::LN_2;
        assert!((loss(&[[0.0, 0.0]], &[TalkerCount::THREE]).unwrap() - ln2).abs() < 1e-12);
        let both = loss(&[[20.0, -20.0], [0.0, 0.0]], &[TalkerCount::TWO, TalkerCount::TWO]).unwrap();
        assert!((both - ln2 / 2.0).abs() < 1e-12);
        assert!(matches!(loss(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn energy_mask() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.05, 0.0], [0.2, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(ActivityMask::from_energy(&f, ACTIVITY_RATIO).flags(), &[true, false, true, false]);
    }

    #[test]
    fn count_classes() {
        assert_eq!(TalkerCount::from_class(1).unwrap(), TalkerCount::THREE);
        assert!(TalkerCount::new(4).is_err());
        assert_eq!(serde_json::to_string(&TalkerCount::TWO).unwrap(), "2");
    }
}
