//! Connectionist temporal classification: loss with exact gradients,
//! best-path and prefix-beam decoding, and a brute-force reference.
//!
//! All recursions run in log space. The blank symbol is index 0 throughout
//! the crate ([`BLANK`]), but the kernels take it from the lattice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{log_add, logsumexp, Tensor};

pub const BLANK: usize = 0;

/// A sequence of vocabulary indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal pairs; each one forces a blank between them.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum number of frames a CTC alignment of this sequence needs.
    pub fn required_frames(&self) -> usize {
        self.len() + self.repeats()
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Per-frame log-probabilities `[T × V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    log_probs: Tensor,
    blank: usize,
}

impl LogProbLattice {
    /// Wraps rows that must each be a log-distribution (`logsumexp = 0 ± 1e-6`).
    pub fn new(log_probs: Tensor, blank: usize) -> Result<Self> {
        if log_probs.shape().len() != 2 || blank >= log_probs.cols() {
            return Err(Error::dim("lattice", log_probs.shape(), &[blank]));
        }
        for r in 0..log_probs.rows() {
            let lse = logsumexp(log_probs.row(r));
            if (lse).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "lattice row {r} is not normalised (logsumexp {lse})"
                )));
            }
        }
        Ok(Self { log_probs, blank })
    }

    /// Log-softmax of raw scores.
    pub fn from_logits(logits: &Tensor, blank: usize) -> Result<Self> {
        Self::new(crate::tensor::log_softmax_rows(logits), blank)
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.cols()
    }

    #[inline]
    fn at(&self, t: usize, k: usize) -> f64 {
        self.log_probs.at(t, k)
    }
}

fn validate(lattice: &LogProbLattice, target: &LabelSequence) -> Result<Vec<usize>> {
    for &k in target.tokens() {
        if k >= lattice.vocab() {
            return Err(Error::UnknownToken(k));
        }
        if k == lattice.blank {
            return Err(Error::Contract("CTC target contains the blank symbol".into()));
        }
    }
    let required = target.required_frames();
    if lattice.frames() < required {
        return Err(Error::InfeasibleTarget {
            frames: lattice.frames(),
            required,
        });
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(lattice.blank);
    for &k in target.tokens() {
        ext.push(k);
        ext.push(lattice.blank);
    }
    Ok(ext)
}

/// Forward and backward variables over the blank-extended label.
///
/// `alpha[t][s]` includes the emission at frame `t`; `beta[t][s]` covers
/// frames `t+1..` only, so `logsumexp_s(alpha[t][s] + beta[t][s])` equals
/// `log_likelihood` at every `t`.
#[derive(Clone, Debug)]
pub struct AlphaBeta {
    pub extended: Vec<usize>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

pub fn forward_backward(lattice: &LogProbLattice, target: &LabelSequence) -> Result<AlphaBeta> {
    let ext = validate(lattice, target)?;
    let (steps, s_len) = (lattice.frames(), ext.len());
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != lattice.blank && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![ninf; s_len]; steps];
    alpha[0][0] = lattice.at(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lattice.at(0, ext[1]);
    }
    for t in 1..steps {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == ninf { ninf } else { a + lattice.at(t, ext[s]) };
        }
    }

    let mut beta = vec![vec![ninf; s_len]; steps];
    beta[steps - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[steps - 1][s_len - 2] = 0.0;
    }
    for t in (0..steps - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + lattice.at(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1] + lattice.at(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, beta[t + 1][s + 2] + lattice.at(t + 1, ext[s + 2]));
            }
            beta[t][s] = b;
        }
    }

    let last = &alpha[steps - 1];
    let log_likelihood = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    Ok(AlphaBeta {
        extended: ext,
        alpha,
        beta,
        log_likelihood,
    })
}

/// Negative log-likelihood and its gradient with respect to the lattice's
/// log-probabilities (treated as free inputs).
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Tensor,
}

pub fn ctc_loss(lattice: &LogProbLattice, target: &LabelSequence) -> Result<CtcLoss> {
    let ab = forward_backward(lattice, target)?;
    let (steps, vocab) = (lattice.frames(), lattice.vocab());
    let mut grad = Tensor::zeros(&[steps, vocab]);
    let ll = ab.log_likelihood;
    for t in 0..steps {
        let row = grad.row_mut(t);
        for (s, &k) in ab.extended.iter().enumerate() {
            let lg = ab.alpha[t][s] + ab.beta[t][s];
            if lg > f64::NEG_INFINITY {
                row[k] -= (lg - ll).exp();
            }
        }
    }
    Ok(CtcLoss { loss: -ll, grad })
}

/// CTC loss as a graph node over a `[T × V]` log-probability variable
/// (normally the output of a log-softmax), so gradients flow further back.
pub fn ctc_loss_node(g: &mut Graph, log_probs: Var, target: &LabelSequence, blank: usize) -> Result<Var> {
    let lattice = LogProbLattice::new(g.value(log_probs).clone(), blank)?;
    let out = ctc_loss(&lattice, target)?;
    g.custom_scalar(log_probs, out.loss, out.grad.into_data())
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Largest number of paths [`brute_force_ctc`] will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// `-log Σ P(path)` over every frame-level path whose collapse equals the
/// target. Returns `+∞` when no path qualifies.
pub fn brute_force_ctc(lattice: &LogProbLattice, target: &LabelSequence) -> Result<f64> {
    let (steps, vocab) = (lattice.frames(), lattice.vocab());
    let paths = (vocab as f64).powi(steps as i32);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::EnumerationGuard {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut path = vec![0usize; steps];
    let mut total = 0.0;
    loop {
        if collapse(&path, lattice.blank) == target.tokens() {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| lattice.at(t, k)).sum();
            total += lp.exp();
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == steps {
                return Ok(-total.ln());
            }
            path[t] += 1;
            if path[t] < vocab {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Best-path decoding: per-frame argmax (lowest index on ties), collapsed.
pub fn greedy_decode(lattice: &LogProbLattice) -> LabelSequence {
    LabelSequence(collapse(&lattice.log_probs.argmax_rows(), lattice.blank))
}

/// Prefix beam search. Keeps the `beam_width` most probable prefixes per
/// frame (ties broken by lexicographically smaller prefix) and returns the
/// best one. With a beam covering every prefix the result is the exact
/// maximum-posterior label sequence.
pub fn prefix_beam_decode(lattice: &LogProbLattice, beam_width: usize) -> LabelSequence {
    prefix_beam_search(lattice, beam_width)
        .into_iter()
        .next()
        .map(|(seq, _)| seq)
        .unwrap_or_default()
}

/// Final beam, best first, with total log-probabilities.
pub fn prefix_beam_search(lattice: &LogProbLattice, beam_width: usize) -> Vec<(LabelSequence, f64)> {
    let width = beam_width.max(1);
    let ninf = f64::NEG_INFINITY;
    let blank = lattice.blank;
    // prefix -> (ends in blank, ends in non-blank)
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    for t in 0..lattice.frames() {
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, pb, pnb) in &beams {
            let total = log_add(*pb, *pnb);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = log_add(e.0, total + lattice.at(t, blank));
            for k in 0..lattice.vocab() {
                if k == blank {
                    continue;
                }
                let p = lattice.at(t, k);
                if prefix.last() == Some(&k) {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pnb + p);
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pb + p);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, total + p);
                }
            }
        }
        // BTreeMap iteration is lexicographic; a stable sort keeps that order on ties.
        let mut cand: Vec<(Vec<usize>, f64, f64)> = next.into_iter().map(|(k, (a, b))| (k, a, b)).collect();
        cand.sort_by(|x, y| log_add(y.1, y.2).total_cmp(&log_add(x.1, x.2)));
        cand.truncate(width);
        beams = cand;
    }
    beams
        .into_iter()
        .map(|(p, pb, pnb)| (LabelSequence(p), log_add(pb, pnb)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn lattice(rows: &[&[f64]]) -> LogProbLattice {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap();
        LogProbLattice::new(t, BLANK).unwrap()
    }

    #[test]
    fn single_forced_alignment() {
        let l = lattice(&[&[0.3, 0.7]]);
        let out = ctc_loss(&l, &LabelSequence(vec![1])).unwrap();
        assert!((out.loss - (-(0.7f64).ln())).abs() < 1e-12);
        assert!((out.loss - 0.356675).abs() < 1e-6);
    }

    #[test]
    fn two_frames_three_alignments() {
        // alignments a·a, a·−, −·a each 0.25
        let l = lattice(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let out = ctc_loss(&l, &LabelSequence(vec![1])).unwrap();
        assert!((out.loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((out.loss - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let l = lattice(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let err = ctc_loss(&l, &LabelSequence(vec![1, 1])).unwrap_err();
        assert!(matches!(err, Error::InfeasibleTarget { frames: 2, required: 3 }));
        assert_eq!(brute_force_ctc(&l, &LabelSequence(vec![1, 1])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let l = lattice(&[&[0.6, 0.4], &[0.2, 0.8]]);
        let expect = -(0.6f64 * 0.2).ln();
        assert!((brute_force_ctc(&l, &LabelSequence::default()).unwrap() - expect).abs() < 1e-12);
        assert!((ctc_loss(&l, &LabelSequence::default()).unwrap().loss - expect).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard() {
        let t = Tensor::from_rows(&vec![vec![(0.1f64).ln(); 10]; 7]).unwrap();
        let l = LogProbLattice::new(t, 0).unwrap();
        assert!(matches!(brute_force_ctc(&l, &LabelSequence(vec![1])), Err(Error::EnumerationGuard { .. })));
    }

    #[test]
    fn greedy_rules() {
        let onehot = |ks: &[usize]| {
            let rows: Vec<Vec<f64>> = ks
                .iter()
                .map(|&k| (0..3).map(|j| if j == k { 0.8 } else { 0.1 }).collect())
                .collect();
            let rr: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            lattice(&rr)
        };
        assert_eq!(greedy_decode(&onehot(&[1, 1, 0, 2, 2])).0, vec![1, 2]);
        assert!(greedy_decode(&onehot(&[0, 0, 0])).is_empty());
        assert_eq!(greedy_decode(&onehot(&[1, 0, 1])).0, vec![1, 1]);
    }

    #[test]
    fn beam_single_frame() {
        assert_eq!(prefix_beam_decode(&lattice(&[&[0.2, 0.5, 0.3]]), 4).0, vec![1]);
        assert!(prefix_beam_decode(&lattice(&[&[0.6, 0.1, 0.3]]), 4).is_empty());
        // exact tie between two labels goes to the lexicographically smaller prefix
        assert_eq!(prefix_beam_decode(&lattice(&[&[0.2, 0.4, 0.4]]), 1).0, vec![1]);
    }

    fn random_lattice(rng: &mut impl Rng, steps: usize, vocab: usize) -> LogProbLattice {
        let logits: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        LogProbLattice::from_logits(&Tensor::from_rows(&logits).unwrap(), BLANK).unwrap()
    }

    fn random_target(rng: &mut impl Rng, vocab: usize, max_len: usize) -> LabelSequence {
        let n = rng.random_range(0..=max_len);
        LabelSequence((0..n).map(|_| rng.random_range(1..vocab)).collect())
    }

    #[test]
    fn matches_brute_force_on_small_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut compared = 0;
        while compared < 60 {
            let (steps, vocab) = (rng.random_range(1..=5), rng.random_range(2..=4));
            let l = random_lattice(&mut rng, steps, vocab);
            let target = random_target(&mut rng, vocab, 3);
            let reference = brute_force_ctc(&l, &target).unwrap();
            match ctc_loss(&l, &target) {
                Ok(out) => {
                    assert!((out.loss - reference).abs() < 1e-10, "{} vs {reference}", out.loss);
                    compared += 1;
                }
                Err(Error::InfeasibleTarget { .. }) => assert!(reference.is_infinite()),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn cut_identity_and_tangent_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let l = random_lattice(&mut rng, 9, 5);
        let target = LabelSequence(vec![2, 2, 4, 1]);
        let ab = forward_backward(&l, &target).unwrap();
        for t in 0..l.frames() {
            let cut: Vec<f64> = ab.alpha[t].iter().zip(&ab.beta[t]).map(|(a, b)| a + b).collect();
            assert!((logsumexp(&cut) - ab.log_likelihood).abs() < 1e-9);
        }
        // occupation probabilities sum to one per frame
        let out = ctc_loss(&l, &target).unwrap();
        for t in 0..l.frames() {
            let s: f64 = out.grad.row(t).iter().sum();
            assert!((s + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_through_log_softmax_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let target = LabelSequence(vec![1, 3, 3]);
        let report = crate::gradcheck::check_inputs(&[Tensor::from_rows(&logits).unwrap()], |g, xs| {
            let lp = g.log_softmax_rows(xs[0]);
            ctc_loss_node(g, lp, &target, BLANK)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn exhaustive_beam_finds_most_probable_labelling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let l = random_lattice(&mut rng, 4, 3);
            let mut best: Option<(Vec<usize>, f64)> = None;
            let mut seen = std::collections::BTreeSet::new();
            for code in 0..3usize.pow(4) {
                let path: Vec<usize> = (0..4).map(|t| code / 3usize.pow(t) % 3).collect();
                let labels = collapse(&path, BLANK);
                if !seen.insert(labels.clone()) {
                    continue;
                }
                let p = -brute_force_ctc(&l, &LabelSequence(labels.clone())).unwrap();
                if best.as_ref().is_none_or(|(_, b)| p > *b) {
                    best = Some((labels, p));
                }
            }
            assert_eq!(prefix_beam_decode(&l, 1000).0, best.unwrap().0);
        }
    }

    #[test]
    fn unnormalised_lattice_rejected() {
        let t = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(LogProbLattice::new(t, 0).is_err());
    }
}
