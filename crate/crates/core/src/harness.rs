//! Evaluation: error-rate and count-accuracy tables, real-time-factor
//! measurement, and report files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{score_multistream, EditCounts, Scored};
use crate::mixtures::{Condition, MixtureSample, Split};
use crate::model::{DecodeMode, ModelConfig, MtModel};
use crate::sot::split_serialized;
use crate::tch::TalkerCount;

/// Source revision this binary was built from.
pub const BUILD_ID: &str = env!("MTASR_BUILD_ID");

/// Duration of one feature frame when converting frames to seconds.
pub const FRAME_PERIOD_SECONDS: f64 = 0.020;

/// Utterances decoded before timing starts.
pub const RTF_WARMUP: usize = 5;

/// Everything needed to reproduce a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub manifest: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub model: Option<ModelConfig>,
    pub alpha: Option<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub oracle_count: bool,
    pub decode_mode: Option<DecodeMode>,
}

/// How the branch is chosen at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Oracle,
    Tch,
}

impl Routing {
    /// The count to force on the model, if any.
    pub fn count(self, s: &MixtureSample) -> Option<TalkerCount> {
        match self {
            Routing::Oracle => Some(s.talker_count),
            Routing::Tch => None,
        }
    }
}

/// One (split, talker count, condition) cell of an error-rate table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateRow {
    pub split: Split,
    pub talkers: TalkerCount,
    pub condition: Condition,
    pub utterances: usize,
    /// Utterances with an empty reference, left out of the totals.
    pub excluded: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
    pub error_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateReport {
    pub rows: Vec<ErrorRateRow>,
}

impl ErrorRateReport {
    /// Builds rows from per-utterance scores keyed by their sample.
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = (&'a MixtureSample, Scored)>) -> Self {
        let mut cells: BTreeMap<(Split, TalkerCount, Condition), (usize, usize, EditCounts, usize)> = BTreeMap::new();
        for (s, sc) in scores {
            let e = cells.entry((s.split, s.talker_count, s.condition)).or_default();
            e.0 += 1;
            if sc.ref_tokens == 0 {
                e.1 += 1;
                continue;
            }
            e.2 += sc.counts;
            e.3 += sc.ref_tokens;
        }
        let rows = cells
            .into_iter()
            .map(|((split, talkers, condition), (n, excluded, c, refs))| ErrorRateRow {
                split,
                talkers,
                condition,
                utterances: n,
                excluded,
                substitutions: c.substitutions,
                deletions: c.deletions,
                insertions: c.insertions,
                ref_tokens: refs,
                error_rate: rate(c.errors(), refs),
            })
            .collect();
        Self { rows }
    }

    /// Pooled error rate over rows matching the filter.
    pub fn pooled(&self, keep: impl Fn(&ErrorRateRow) -> bool) -> f64 {
        let (e, n) = self
            .rows
            .iter()
            .filter(|r| keep(r))
            .fold((0, 0), |(e, n), r| (e + r.substitutions + r.deletions + r.insertions, n + r.ref_tokens));
        rate(e, n)
    }

    /// Pooled over both conditions for one talker count.
    pub fn rate_for(&self, talkers: TalkerCount) -> f64 {
        self.pooled(|r| r.talkers == talkers)
    }

    pub fn overall(&self) -> f64 {
        self.pooled(|_| true)
    }
}

fn rate(errors: usize, refs: usize) -> f64 {
    if refs == 0 {
        f64::NAN
    } else {
        100.0 * errors as f64 / refs as f64
    }
}

/// Maps `f` over the samples on all available cores, keeping input order.
pub fn par_map<T, F>(samples: &[MixtureSample], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&MixtureSample) -> Result<T> + Sync,
{
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len().max(1));
    if workers == 1 {
        return samples.iter().map(&f).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Decodes every sample through the CTC path and scores it. Special
/// symbols a head may emit are dropped before scoring.
pub fn evaluate_error_rates(model: &MtModel, samples: &[MixtureSample], routing: Routing, mode: DecodeMode) -> Result<ErrorRateReport> {
    let vocab = model.vocabulary();
    let scores = par_map(samples, |s| {
        let inf = model.infer_routed(&s.features, routing.count(s), mode)?;
        let hyps: Vec<_> = inf.streams.iter().map(|h| vocab.strip_specials(h.tokens())).collect();
        Ok(score_multistream(s.stream_targets().streams(), &hyps))
    })?;
    Ok(ErrorRateReport::from_scores(samples.iter().zip(scores)))
}

/// Scores the teacher's greedy serialized output, split on `<sc>`.
pub fn evaluate_teacher(model: &MtModel, samples: &[MixtureSample], routing: Routing) -> Result<ErrorRateReport> {
    let scores = par_map(samples, |s| {
        let (_, toks) = model.teacher_decode(&s.features, routing.count(s), teacher_cap(model, s))?;
        let hyps = split_serialized(&toks, model.vocabulary());
        Ok(score_multistream(s.stream_targets().streams(), &hyps))
    })?;
    Ok(ErrorRateReport::from_scores(samples.iter().zip(scores)))
}

/// Four times the serialized reference length (content and `<sc>`).
fn teacher_cap(model: &MtModel, s: &MixtureSample) -> usize {
    4 * (s.sot_target(model.vocabulary()).tokens().len() - 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountAccuracyRow {
    pub split: Split,
    pub talkers: TalkerCount,
    pub condition: Condition,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CountAccuracyReport {
    pub rows: Vec<CountAccuracyRow>,
}

impl CountAccuracyReport {
    /// Pooled accuracy over both conditions for one talker count.
    pub fn accuracy_for(&self, talkers: TalkerCount) -> f64 {
        let (c, n) = self
            .rows
            .iter()
            .filter(|r| r.talkers == talkers)
            .fold((0, 0), |(c, n), r| (c + r.correct, n + r.total));
        100.0 * c as f64 / n.max(1) as f64
    }
}

/// Fraction of samples whose predicted count matches the truth, per cell.
/// With `Routing::Oracle` every decision is correct by construction.
pub fn count_accuracy(model: &MtModel, samples: &[MixtureSample], routing: Routing) -> Result<CountAccuracyReport> {
    let predicted = par_map(samples, |s| match routing {
        Routing::Oracle => Ok(s.talker_count),
        Routing::Tch => model.predict_count(&s.features),
    })?;
    let mut cells: BTreeMap<(Split, TalkerCount, Condition), (usize, usize)> = BTreeMap::new();
    for (s, predicted) in samples.iter().zip(predicted) {
        let e = cells.entry((s.split, s.talker_count, s.condition)).or_default();
        e.0 += usize::from(predicted == s.talker_count);
        e.1 += 1;
    }
    Ok(CountAccuracyReport {
        rows: cells
            .into_iter()
            .map(|((split, talkers, condition), (correct, total))| CountAccuracyRow {
                split,
                talkers,
                condition,
                correct,
                total,
                accuracy: 100.0 * correct as f64 / total as f64,
            })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RtfMode {
    CtcGreedy,
    TeacherAutoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub mode: RtfMode,
    pub talkers: Option<TalkerCount>,
    pub utterances: usize,
    pub warmup: usize,
    pub total_seconds: f64,
    pub total_frames: usize,
    pub frame_period_seconds: f64,
    pub input_seconds: f64,
    pub rtf: f64,
    pub batch_size: usize,
    pub hardware: String,
}

impl RtfReport {
    fn new(mode: RtfMode, talkers: Option<TalkerCount>, utterances: usize, total_seconds: f64, total_frames: usize) -> Self {
        let input_seconds = total_frames as f64 * FRAME_PERIOD_SECONDS;
        Self {
            mode,
            talkers,
            utterances,
            warmup: RTF_WARMUP,
            total_seconds,
            total_frames,
            frame_period_seconds: FRAME_PERIOD_SECONDS,
            input_seconds,
            rtf: total_seconds / input_seconds,
            batch_size: 1,
            hardware: hardware_note(),
        }
    }
}

/// CPU model and available parallelism, best effort.
pub fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {threads} hardware thread(s); single worker")
}

/// Decodes one utterance the given way and discards the output.
pub fn decode_once(model: &MtModel, s: &MixtureSample, mode: RtfMode, routing: Routing) -> Result<()> {
    match mode {
        RtfMode::CtcGreedy => {
            model.infer_routed(&s.features, routing.count(s), DecodeMode::Greedy)?;
        }
        RtfMode::TeacherAutoregressive => {
            model.teacher_decode(&s.features, routing.count(s), teacher_cap(model, s))?;
        }
    }
    Ok(())
}

/// Serial wall-clock timing at batch size 1. The first [`RTF_WARMUP`]
/// utterances are decoded but not timed.
pub fn measure_rtf(model: &MtModel, samples: &[MixtureSample], mode: RtfMode, routing: Routing) -> Result<RtfReport> {
    for s in samples.iter().take(RTF_WARMUP) {
        decode_once(model, s, mode, routing)?;
    }
    let timed = samples.get(RTF_WARMUP..).unwrap_or(&[]);
    let mut seconds = 0.0;
    let mut frames = 0;
    for s in timed {
        let t = Instant::now();
        decode_once(model, s, mode, routing)?;
        seconds += t.elapsed().as_secs_f64();
        frames += s.frames();
    }
    let talkers = samples.first().map(|s| s.talker_count).filter(|&c| samples.iter().all(|s| s.talker_count == c));
    Ok(RtfReport::new(mode, talkers, timed.len(), seconds, frames))
}

/// Writes `rows` as a comma-separated table with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Format(e.to_string())
}

/// Structured summary written next to the tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub build: String,
    pub run: RunConfig,
    pub results: serde_json::Value,
}

impl Summary {
    pub fn new(run: RunConfig, results: serde_json::Value) -> Self {
        Self {
            build: BUILD_ID.to_string(),
            run,
            results,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}
