//! Serialized output training targets and the token vocabulary.
//!
//! Talkers are ordered by `(onset, talker_id)`. The teacher sees one long
//! sequence with a change-of-talker token between talker runs; the CTC
//! streams see the same runs as separate label sequences.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ctc::{LabelSequence, BLANK};
use crate::error::{Error, Result};

/// Index layout: blank, the content symbols, then `<sc>`, `<sos>`, `<eos>`, `<pad>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabRepr", try_from = "VocabRepr")]
pub struct Vocabulary {
    content: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(content: usize) -> Result<Self> {
        if content == 0 {
            return Err(Error::Config("vocabulary needs at least one content symbol".into()));
        }
        Ok(Self { content })
    }

    /// Number of content symbols.
    pub fn content_size(&self) -> usize {
        self.content
    }

    /// Total number of indices including blank and specials.
    pub fn size(&self) -> usize {
        self.content + 5
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    /// Index of the `i`-th content symbol (0-based).
    pub fn content_token(&self, i: usize) -> usize {
        debug_assert!(i < self.content);
        i + 1
    }

    pub fn sc(&self) -> usize {
        self.content + 1
    }

    pub fn sos(&self) -> usize {
        self.content + 2
    }

    pub fn eos(&self) -> usize {
        self.content + 3
    }

    pub fn pad(&self) -> usize {
        self.content + 4
    }

    pub fn is_content(&self, k: usize) -> bool {
        (1..=self.content).contains(&k)
    }

    pub fn symbol(&self, k: usize) -> Result<String> {
        Ok(match k {
            0 => "<blank>".into(),
            k if self.is_content(k) => format!("w{:02}", k - 1),
            k if k == self.sc() => "<sc>".into(),
            k if k == self.sos() => "<sos>".into(),
            k if k == self.eos() => "<eos>".into(),
            k if k == self.pad() => "<pad>".into(),
            k => return Err(Error::UnknownToken(k)),
        })
    }

    pub fn symbols(&self) -> Vec<String> {
        (0..self.size()).map(|k| self.symbol(k).expect("in range")).collect()
    }

    /// Keeps only content symbols.
    pub fn strip_specials(&self, tokens: &[usize]) -> LabelSequence {
        LabelSequence(tokens.iter().copied().filter(|&k| self.is_content(k)).collect())
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self { symbols: v.symbols() }
    }
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        let content = r
            .symbols
            .len()
            .checked_sub(5)
            .ok_or_else(|| Error::Format("vocabulary too short".into()))?;
        let v = Vocabulary::new(content)?;
        if v.symbols() != r.symbols {
            return Err(Error::Format("vocabulary symbols do not match the expected layout".into()));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TalkerId(pub u32);

impl fmt::Display for TalkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spk{}", self.0)
    }
}

/// One talker's token sequence and start frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TalkerUtterance {
    pub tokens: LabelSequence,
    pub onset: usize,
    pub talker: TalkerId,
}

/// Teacher target: `<sos> run₁ <sc> run₂ … <eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SotTarget(pub Vec<usize>);

impl SotTarget {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// Decoder input (drops the final `<eos>`) and output (drops the `<sos>`).
    pub fn teacher_forcing_pair(&self) -> (&[usize], &[usize]) {
        (&self.0[..self.0.len() - 1], &self.0[1..])
    }

    /// Strips `<sos>`/`<eos>` and splits on `<sc>`.
    pub fn segments(&self, vocab: &Vocabulary) -> Vec<LabelSequence> {
        split_serialized(&self.0, vocab)
    }
}

/// Per-talker CTC targets, position `s` = the `s`-th talker by onset.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamTargets(pub Vec<LabelSequence>);

impl StreamTargets {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn streams(&self) -> &[LabelSequence] {
        &self.0
    }
}

fn ordered(utts: &[TalkerUtterance]) -> Result<Vec<&TalkerUtterance>> {
    if utts.is_empty() {
        return Err(Error::Empty("utterance set"));
    }
    if let Some(u) = utts.iter().find(|u| u.tokens.is_empty()) {
        return Err(Error::Contract(format!("talker {} has no tokens", u.talker)));
    }
    let mut v: Vec<&TalkerUtterance> = utts.iter().collect();
    v.sort_by_key(|u| (u.onset, u.talker));
    Ok(v)
}

pub fn build_sot_target(utts: &[TalkerUtterance], vocab: &Vocabulary) -> Result<SotTarget> {
    let ordered = ordered(utts)?;
    let mut out = vec![vocab.sos()];
    for (i, u) in ordered.iter().enumerate() {
        if i > 0 {
            out.push(vocab.sc());
        }
        out.extend_from_slice(u.tokens.tokens());
    }
    out.push(vocab.eos());
    Ok(SotTarget(out))
}

pub fn build_stream_targets(utts: &[TalkerUtterance]) -> Result<StreamTargets> {
    Ok(StreamTargets(ordered(utts)?.into_iter().map(|u| u.tokens.clone()).collect()))
}

/// Splits a serialized token sequence on `<sc>`, dropping `<sos>`, `<eos>`,
/// pad and blank. Used both for targets and for teacher hypotheses.
pub fn split_serialized(tokens: &[usize], vocab: &Vocabulary) -> Vec<LabelSequence> {
    let mut out = vec![LabelSequence::default()];
    for &k in tokens {
        if k == vocab.sc() {
            out.push(LabelSequence::default());
        } else if vocab.is_content(k) {
            out.last_mut().expect("non-empty").0.push(k);
        }
    }
    out
}
