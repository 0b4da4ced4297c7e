//! The multi-talker model: shared encoder, count-specific branches with
//! per-stream CTC heads, an autoregressive teacher over serialized targets,
//! and the talker-count head used for routing.

mod checkpoint;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_FORMAT_VERSION};
pub use train::{train_phase1, train_phase2, train_tch, TrainLog};

use crate::autodiff::{Graph, Var};
use crate::ctc::{ctc_loss_node, greedy_decode, prefix_beam_decode, LabelSequence, LogProbLattice, BLANK};
use crate::error::{Error, Result};
use crate::mixtures::MixtureSample;
use crate::nn::{
    add_positions, Embedding, FrameStackProjector, LayerNorm, Linear, LstmStack, TransformerDecoderBlock,
    TransformerEncoderBlock,
};
use crate::optim::AdamConfig;
use crate::params::{ParamId, ParamStore};
use crate::sot::{SotTarget, StreamTargets, Vocabulary};
use crate::tch::{ActivityMask, TalkerCount, TchConfig, TchInput, TchParams, ACTIVITY_RATIO};
use crate::tensor::Tensor;

/// Parameter-name prefix of the teacher (projector, embedding, decoder, output).
pub const TEACHER_PREFIX: &str = "teacher.";
pub const SHARED_PREFIX: &str = "shared.";
pub const TCH_PREFIX: &str = "tch.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

/// Which branch-side representation the teacher cross-attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// Branch encoder output, before the separator.
    Branch,
    /// Normalised separator LSTM output.
    Separator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    /// Frames stacked by the projector before cross-attention.
    pub stack: usize,
    pub source: TeacherSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub tch_steps: usize,
    pub seed: u64,
    /// Log the running loss every this many steps (0 disables).
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub shared_blocks: usize,
    pub branch_blocks: usize,
    pub separator: SeparatorConfig,
    pub vocabulary: Vocabulary,
    pub teacher: TeacherConfig,
    pub tch: TchConfig,
    /// Weight of the CTC term in the hybrid objective.
    pub alpha: f64,
    /// Keep the shared encoder fixed during both training phases.
    pub freeze_shared: bool,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            model_dim: 32,
            heads: 2,
            ff_dim: 64,
            shared_blocks: 2,
            branch_blocks: 2,
            separator: SeparatorConfig {
                hidden: 64,
                layers: 1,
                bidirectional: false,
            },
            vocabulary: Vocabulary::new(16).expect("non-empty"),
            teacher: TeacherConfig {
                dim: 96,
                heads: 2,
                ff_dim: 192,
                blocks: 2,
                stack: 4,
                source: TeacherSource::Branch,
            },
            tch: TchConfig::default(),
            alpha: 0.3,
            freeze_shared: false,
            train: TrainConfig {
                adam: AdamConfig::default(),
                batch_size: 8,
                phase1_steps: 3000,
                phase2_steps: 5000,
                tch_steps: 30_000,
                seed: 0,
                log_every: 250,
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} is outside [0, 1]", self.alpha));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!("model dim {} is not divisible by {} heads", self.model_dim, self.heads));
        }
        let t = &self.teacher;
        if t.heads == 0 || !t.dim.is_multiple_of(t.heads) {
            return bad(format!("teacher dim {} is not divisible by {} heads", t.dim, t.heads));
        }
        if t.stack == 0 || self.train.batch_size == 0 {
            return bad("projector stack and batch size must be positive".into());
        }
        if let TchInput::SharedLayers(k) = self.tch.input {
            if k > self.shared_blocks {
                return bad(format!("count head taps layer {k} of {} shared blocks", self.shared_blocks));
            }
        }
        let sd = self.tch.augment_noise_std;
        if !(sd.is_finite() && sd >= 0.0) {
            return bad(format!("count-head augmentation noise std {sd} must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let c: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        c.validate()?;
        Ok(c)
    }
}

/// How per-stream lattices are turned into label sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(DecodeMode::Greedy);
        }
        s.strip_prefix("beam:")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k > 0)
            .map(DecodeMode::Beam)
            .ok_or_else(|| Error::Config(format!("decode mode `{s}` is not `greedy` or `beam:K`")))
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeMode::Greedy => f.write_str("greedy"),
            DecodeMode::Beam(k) => write!(f, "beam:{k}"),
        }
    }
}

/// Training stage a set of weights has been through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Phase1,
    Phase2,
    Tch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub completed: Vec<Phase>,
    pub steps: u64,
}

impl TrainingState {
    pub fn phase(&self) -> Phase {
        self.completed.last().copied().unwrap_or(Phase::Init)
    }

    pub fn has(&self, p: Phase) -> bool {
        self.completed.contains(&p)
    }
}

#[derive(Clone, Debug)]
struct Separator {
    lstm: LstmStack,
    norm: LayerNorm,
    hidden: Vec<Linear>,
    out: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct Branch {
    blocks: Vec<TransformerEncoderBlock>,
    separator: Separator,
}

#[derive(Clone, Debug)]
struct Teacher {
    projector: FrameStackProjector,
    embed: Embedding,
    blocks: Vec<TransformerDecoderBlock>,
    norm: LayerNorm,
    out: Linear,
}

/// Layer handles; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
struct Layers {
    input: Linear,
    shared: Vec<TransformerEncoderBlock>,
    branches: [Branch; 2],
    teacher: Teacher,
    tch: TchParams,
}

/// Graph values produced by one branch.
pub struct BranchOutput {
    /// Branch encoder output.
    pub z: Var,
    /// Normalised separator output shared by the stream heads.
    pub separated: Var,
    /// Per-stream log-probability lattices `[T × V]`.
    pub streams: Vec<Var>,
}

/// Components of one hybrid-loss evaluation.
pub struct HybridLoss {
    pub total: Var,
    pub ctc: Option<f64>,
    pub sot: Option<f64>,
}

/// Result of count-routed inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub count: TalkerCount,
    pub streams: Vec<LabelSequence>,
    /// Parameters read while producing this result.
    pub touched: Vec<ParamId>,
}

pub struct MtModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub state: TrainingState,
    layers: Layers,
    teacher_calls: AtomicU64,
}

impl Clone for MtModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            state: self.state.clone(),
            layers: self.layers.clone(),
            teacher_calls: AtomicU64::new(self.teacher_calls()),
        }
    }
}

fn encoder_stack<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    depth: usize,
    c: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<TransformerEncoderBlock>> {
    (0..depth)
        .map(|i| TransformerEncoderBlock::new(store, &format!("{name}.{i}"), c.model_dim, c.heads, c.ff_dim, rng))
        .collect()
}

impl MtModel {
    /// Builds a freshly initialised model; parameters are drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = &config;
        let mut store = ParamStore::new();
        let vocab = c.vocabulary.size();
        let input = Linear::new(&mut store, "input", c.feature_dim, c.model_dim, rng);
        let shared = encoder_stack(&mut store, "shared", c.shared_blocks, c, rng)?;
        let mut branch = |store: &mut ParamStore, b: usize| -> Result<Branch> {
            let blocks = encoder_stack(store, &format!("branch{b}"), c.branch_blocks, c, rng)?;
            let name = format!("sep{b}");
            let s = &c.separator;
            let lstm = LstmStack::new(store, &format!("{name}.lstm"), c.model_dim, s.hidden, s.layers, s.bidirectional, rng)?;
            let width = lstm.output_size();
            let norm = LayerNorm::new(store, &format!("{name}.norm"), width);
            let mut hidden = Vec::with_capacity(b);
            let mut out = Vec::with_capacity(b);
            for s in 0..b {
                hidden.push(Linear::new(store, &format!("{name}.stream{s}.hidden"), width, c.model_dim, rng));
                out.push(Linear::new(store, &format!("{name}.stream{s}.out"), c.model_dim, vocab, rng));
            }
            Ok(Branch {
                blocks,
                separator: Separator {
                    lstm,
                    norm,
                    hidden,
                    out,
                },
            })
        };
        let branches = [branch(&mut store, 2)?, branch(&mut store, 3)?];

        let t = &c.teacher;
        let source_dim = match t.source {
            TeacherSource::Branch => c.model_dim,
            TeacherSource::Separator => {
                if c.separator.bidirectional {
                    2 * c.separator.hidden
                } else {
                    c.separator.hidden
                }
            }
        };
        let teacher = Teacher {
            projector: FrameStackProjector::new(&mut store, "teacher.projector", t.stack, source_dim, t.dim, rng)?,
            embed: Embedding::new(&mut store, "teacher.embed", vocab, t.dim, rng),
            blocks: (0..t.blocks)
                .map(|i| TransformerDecoderBlock::new(&mut store, &format!("teacher.dec.{i}"), t.dim, t.heads, t.ff_dim, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut store, "teacher.norm", t.dim),
            out: Linear::new(&mut store, "teacher.out", t.dim, vocab, rng),
        };
        let tch_dim = match c.tch.input {
            TchInput::Features => c.feature_dim,
            _ => c.model_dim,
        };
        let tch = TchParams::new(&mut store, "tch", tch_dim, &c.tch, rng)?;
        Ok(Self {
            layers: Layers {
                input,
                shared,
                branches,
                teacher,
                tch,
            },
            params: store,
            state: TrainingState::default(),
            config,
            teacher_calls: AtomicU64::new(0),
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.config.vocabulary
    }

    /// Number of teacher forward passes run so far.
    pub fn teacher_calls(&self) -> u64 {
        self.teacher_calls.load(Ordering::Relaxed)
    }

    pub fn tch_params(&self) -> &TchParams {
        &self.layers.tch
    }

    /// Input projection plus positions: `[T × feature_dim] -> [T × model_dim]`.
    pub fn embed_input(&self, g: &mut Graph, features: Var) -> Result<Var> {
        if g.value(features).cols() != self.config.feature_dim {
            return Err(Error::dim("model input", g.shape(features), &[self.config.feature_dim]));
        }
        let x = self.layers.input.forward(g, features)?;
        add_positions(g, x)
    }

    /// Shared block stack; time length is preserved.
    pub fn encode_shared(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.encode_shared_tapped(g, x, None)?.0)
    }

    /// Shared stack, also returning the output after the first `tap` blocks.
    fn encode_shared_tapped(&self, g: &mut Graph, x: Var, tap: Option<usize>) -> Result<(Var, Option<Var>)> {
        if g.value(x).cols() != self.config.model_dim {
            return Err(Error::dim("shared encoder", g.shape(x), &[self.config.model_dim]));
        }
        let mut h = x;
        let mut tapped = (tap == Some(0)).then_some(h);
        for (i, block) in self.layers.shared.iter().enumerate() {
            h = block.forward(g, h)?;
            if tap == Some(i + 1) {
                tapped = Some(h);
            }
        }
        Ok((h, tapped))
    }

    /// Features through input projection and the shared encoder.
    pub fn encode(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let x = self.embed_input(g, features)?;
        self.encode_shared(g, x)
    }

    fn branch(&self, count: TalkerCount) -> &Branch {
        &self.layers.branches[count.class()]
    }

    /// Branch encoder only.
    pub fn branch_encode(&self, g: &mut Graph, hs: Var, count: TalkerCount) -> Result<Var> {
        let mut z = hs;
        for block in &self.branch(count).blocks {
            z = block.forward(g, z)?;
        }
        Ok(z)
    }

    /// Separator over a branch output: `LayerNorm(LSTM(z))`, then one
    /// `log_softmax(Out_s(ReLU(Hidden_s(·))))` lattice per stream.
    pub fn separate(&self, g: &mut Graph, z: Var, count: TalkerCount) -> Result<(Var, Vec<Var>)> {
        let sep = &self.branch(count).separator;
        let h = sep.lstm.forward(g, z)?;
        let h = sep.norm.forward(g, h)?;
        let mut streams = Vec::with_capacity(count.get());
        for (hidden, out) in sep.hidden.iter().zip(&sep.out) {
            let u = hidden.forward(g, h)?;
            let u = g.relu(u);
            let o = out.forward(g, u)?;
            streams.push(g.log_softmax_rows(o));
        }
        Ok((h, streams))
    }

    pub fn branch_forward(&self, g: &mut Graph, hs: Var, count: TalkerCount) -> Result<BranchOutput> {
        let z = self.branch_encode(g, hs, count)?;
        let (separated, streams) = self.separate(g, z, count)?;
        Ok(BranchOutput { z, separated, streams })
    }

    /// Cross-attention memory for the teacher: projector over the chosen source.
    fn teacher_memory(&self, g: &mut Graph, z: Var, count: TalkerCount) -> Result<Var> {
        let src = match self.config.teacher.source {
            TeacherSource::Branch => z,
            TeacherSource::Separator => {
                let sep = &self.branch(count).separator;
                let h = sep.lstm.forward(g, z)?;
                sep.norm.forward(g, h)?
            }
        };
        self.layers.teacher.projector.forward(g, src)
    }

    /// Decoder over `inputs` given projected memory; returns log-probs `[L × V]`.
    fn teacher_decoder(&self, g: &mut Graph, memory: Var, inputs: &[usize]) -> Result<Var> {
        self.teacher_calls.fetch_add(1, Ordering::Relaxed);
        let t = &self.layers.teacher;
        let y = t.embed.forward(g, inputs)?;
        let mut y = add_positions(g, y)?;
        for block in &t.blocks {
            y = block.forward(g, y, memory)?;
        }
        let y = t.norm.forward(g, y)?;
        let o = t.out.forward(g, y)?;
        Ok(g.log_softmax_rows(o))
    }

    /// Teacher-forced next-token cross-entropy, averaged over non-pad
    /// target positions.
    pub fn sot_teacher_loss(&self, g: &mut Graph, z: Var, count: TalkerCount, target: &SotTarget) -> Result<Var> {
        let vocab = self.vocabulary();
        let toks = target.tokens();
        if toks.len() < 2 || toks[0] != vocab.sos() || toks[toks.len() - 1] != vocab.eos() {
            return Err(Error::Contract("teacher target must be <sos> … <eos> with content".into()));
        }
        let (inputs, outputs) = target.teacher_forcing_pair();
        let memory = self.teacher_memory(g, z, count)?;
        let lp = self.teacher_decoder(g, memory, inputs)?;
        let keep: Vec<usize> = (0..outputs.len()).filter(|&i| outputs[i] != vocab.pad()).collect();
        if keep.is_empty() {
            return Err(Error::Empty("teacher target"));
        }
        let lp = if keep.len() == outputs.len() {
            lp
        } else {
            let rows: Vec<Var> = keep.iter().map(|&i| g.slice_rows(lp, i, 1)).collect::<Result<_>>()?;
            g.concat_rows(&rows)?
        };
        let idx: Vec<usize> = keep.iter().map(|&i| outputs[i]).collect();
        let picked = g.pick(lp, &idx)?;
        let m = g.mean(picked);
        Ok(g.scale(m, -1.0))
    }

    /// Sum of per-stream CTC losses.
    pub fn serialized_ctc_loss(&self, g: &mut Graph, streams: &[Var], targets: &StreamTargets) -> Result<Var> {
        serialized_ctc_loss(g, streams, targets)
    }

    /// `α·CTC + (1−α)·SOT` on the branch of the sample's true talker count.
    /// Each term is skipped when its weight is zero.
    pub fn hybrid_loss(&self, g: &mut Graph, sample: &MixtureSample, alpha: f64) -> Result<HybridLoss> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} is outside [0, 1]")));
        }
        let count = sample.talker_count;
        let f = g.constant(sample.features.clone());
        let hs = self.encode(g, f)?;
        let z = self.branch_encode(g, hs, count)?;
        let mut total = None;
        let mut ctc_value = None;
        let mut sot_value = None;
        if alpha > 0.0 {
            let (_, streams) = self.separate(g, z, count)?;
            let ctc = serialized_ctc_loss(g, &streams, &sample.stream_targets())?;
            ctc_value = Some(g.value(ctc).item());
            total = Some(g.scale(ctc, alpha));
        }
        if alpha < 1.0 {
            let sot = self.sot_teacher_loss(g, z, count, &sample.sot_target(self.vocabulary()))?;
            sot_value = Some(g.value(sot).item());
            let weighted = g.scale(sot, 1.0 - alpha);
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
        }
        Ok(HybridLoss {
            total: total.expect("alpha lies in [0, 1]"),
            ctc: ctc_value,
            sot: sot_value,
        })
    }

    /// Input the count head pools over, for a feature matrix.
    pub fn tch_input(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let f = g.constant(features.clone());
        let v = self.tch_input_var(&mut g, f)?.0;
        Ok(g.value(v).clone())
    }

    /// Returns the count-head input and, when it was computed on the way,
    /// the full shared-encoder output.
    fn tch_input_var(&self, g: &mut Graph, f: Var) -> Result<(Var, Option<Var>)> {
        Ok(match self.config.tch.input {
            TchInput::Features => (f, None),
            TchInput::Shared => {
                let hs = self.encode(g, f)?;
                (hs, Some(hs))
            }
            TchInput::SharedLayers(k) => {
                let x = self.embed_input(g, f)?;
                let (hs, tap) = self.encode_shared_tapped(g, x, Some(k))?;
                (tap.expect("validated tap depth"), Some(hs))
            }
        })
    }

    pub fn activity_mask(&self, features: &Tensor) -> ActivityMask {
        if self.config.tch.energy_mask {
            ActivityMask::from_energy(features, ACTIVITY_RATIO)
        } else {
            ActivityMask::full(features.rows())
        }
    }

    pub fn predict_count(&self, features: &Tensor) -> Result<TalkerCount> {
        let h = self.tch_input(features)?;
        self.layers.tch.predict(&self.params, &h, &self.activity_mask(features))
    }

    /// Shared encoding and routing decision; the count head runs only
    /// when no oracle count is supplied.
    fn route(&self, g: &mut Graph, features: &Tensor, oracle: Option<TalkerCount>) -> Result<(Var, TalkerCount)> {
        let f = g.constant(features.clone());
        match oracle {
            Some(c) => Ok((self.encode(g, f)?, c)),
            None => {
                let (h, hs) = self.tch_input_var(g, f)?;
                let o = self.layers.tch.forward(g, h, &self.activity_mask(features), &mut ChaCha8Rng::seed_from_u64(0))?;
                let count = crate::tch::predict_count(g.value(o).data());
                let hs = match hs {
                    Some(hs) => hs,
                    None => self.encode(g, f)?,
                };
                Ok((hs, count))
            }
        }
    }

    /// Count (oracle or predicted), branch, separator and per-stream decoding.
    pub fn infer_routed(&self, features: &Tensor, oracle: Option<TalkerCount>, mode: DecodeMode) -> Result<Inference> {
        let mut g = Graph::inference(&self.params);
        let (hs, count) = self.route(&mut g, features, oracle)?;
        let out = self.branch_forward(&mut g, hs, count)?;
        let streams = out
            .streams
            .iter()
            .map(|&s| {
                let lattice = LogProbLattice::new(g.value(s).clone(), BLANK)?;
                Ok(match mode {
                    DecodeMode::Greedy => greedy_decode(&lattice),
                    DecodeMode::Beam(k) => prefix_beam_decode(&lattice, k),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Inference {
            count,
            streams,
            touched: g.touched_params(),
        })
    }

    /// Greedy autoregressive decoding through the teacher: starts from
    /// `<sos>` and stops at `<eos>` or after `max_len` tokens. The whole
    /// prefix is re-run at every step. Returns the generated tokens without
    /// `<sos>`/`<eos>`.
    pub fn teacher_decode(&self, features: &Tensor, oracle: Option<TalkerCount>, max_len: usize) -> Result<(TalkerCount, Vec<usize>)> {
        let mut g = Graph::inference(&self.params);
        let (hs, count) = self.route(&mut g, features, oracle)?;
        let z = self.branch_encode(&mut g, hs, count)?;
        let memory = self.teacher_memory(&mut g, z, count)?;
        let vocab = self.vocabulary();
        let mut seq = vec![vocab.sos()];
        while seq.len() <= max_len {
            let lp = self.teacher_decoder(&mut g, memory, &seq)?;
            let last = g.value(lp).row(seq.len() - 1);
            let next = crate::tensor::argmax(last);
            if next == vocab.eos() {
                break;
            }
            seq.push(next);
        }
        Ok((count, seq[1..].to_vec()))
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::from_model(self)
    }

    /// Count-specific parameter prefixes, for routing instrumentation.
    pub fn branch_prefixes(count: TalkerCount) -> [String; 2] {
        [format!("branch{count}."), format!("sep{count}.")]
    }
}

/// Sum of per-stream CTC losses; streams and targets pair by position.
pub fn serialized_ctc_loss(g: &mut Graph, streams: &[Var], targets: &StreamTargets) -> Result<Var> {
    if streams.len() != targets.len() || streams.is_empty() {
        return Err(Error::dim("serialized ctc", &[streams.len()], &[targets.len()]));
    }
    let mut total: Option<Var> = None;
    for (&s, t) in streams.iter().zip(targets.streams()) {
        let l = ctc_loss_node(g, s, t, BLANK)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

#[cfg(test)]
mod tests;
