//! Token error rates with position-paired multi-stream scoring.

use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;

/// Substitution, deletion and insertion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// Minimum-cost Levenshtein alignment. Among equal-cost alignments the
/// backtrace prefers a substitution (or match), then a deletion, then an
/// insertion.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut out = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if cost[(i - 1) * w + j - 1] + diff == here {
                out.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Error counts for one utterance, with the reference length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scored {
    pub counts: EditCounts,
    pub ref_tokens: usize,
}

impl Scored {
    /// Error rate in percent; `None` when the reference is empty.
    pub fn rate(&self) -> Option<f64> {
        (self.ref_tokens > 0).then(|| 100.0 * self.counts.errors() as f64 / self.ref_tokens as f64)
    }
}

/// Pairs reference and hypothesis streams by position. Extra reference
/// streams count entirely as deletions, extra hypothesis streams entirely
/// as insertions.
pub fn score_multistream(refs: &[LabelSequence], hyps: &[LabelSequence]) -> Scored {
    let mut out = Scored::default();
    for k in 0..refs.len().max(hyps.len()) {
        let r = refs.get(k).map_or(&[][..], |s| s.tokens());
        let h = hyps.get(k).map_or(&[][..], |s| s.tokens());
        out.counts += edit_distance(r, h);
        out.ref_tokens += r.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[usize]) -> LabelSequence {
        LabelSequence(v.to_vec())
    }

    #[test]
    fn edit_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditCounts::default());
        let e = edit_distance(&[1, 2, 3], &[1, 3]);
        assert_eq!((e.substitutions, e.deletions, e.insertions), (0, 1, 0));
        let s = Scored {
            counts: e,
            ref_tokens: 3,
        };
        assert!((s.rate().unwrap() - 100.0 / 3.0).abs() < 1e-12);
        let e = edit_distance(&[], &[4]);
        assert_eq!(e.insertions, 1);
        assert_eq!(Scored { counts: e, ref_tokens: 0 }.rate(), None);
    }

    #[test]
    fn substitution_preferred_on_ties() {
        // [a] vs [b] costs 1 either as S or as D+I (2); [a,b] vs [b,a] costs 2
        // as S+S or D+I: the backtrace picks substitutions
        let e = edit_distance(&[1, 2], &[2, 1]);
        assert_eq!((e.substitutions, e.deletions, e.insertions), (2, 0, 0));
        let e = edit_distance(&[1, 2, 3], &[4]);
        assert_eq!((e.substitutions, e.deletions, e.insertions), (1, 2, 0));
    }

    #[test]
    fn multistream_rules() {
        let refs = [seq(&[1, 2]), seq(&[3, 4, 5])];
        assert_eq!(score_multistream(&refs, &refs).counts.errors(), 0);
        let three = [seq(&[1, 2]), seq(&[3]), seq(&[6, 7])];
        let s = score_multistream(&three, &three[..2]);
        assert_eq!(s.counts.deletions, 2);
        assert_eq!(s.ref_tokens, 5);
        let s = score_multistream(&refs[..1], &refs);
        assert_eq!(s.counts.insertions, 3);
        // position pairing: swapping hypotheses is penalised
        let swapped = [refs[1].clone(), refs[0].clone()];
        assert!(score_multistream(&refs, &swapped).counts.errors() > 0);
    }

    #[test]
    fn rate_may_exceed_hundred() {
        let s = score_multistream(&[seq(&[1])], &[seq(&[2, 3, 4])]);
        assert_eq!(s.rate(), Some(300.0));
    }
}
