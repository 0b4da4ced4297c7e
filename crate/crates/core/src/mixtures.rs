//! Synthetic overlapped token mixtures.
//!
//! Each content symbol renders to `r` frames of a fixed unit-norm prototype
//! plus the talker's signature vector. Talker renderings are summed at
//! strictly increasing onsets, and noisy samples add Gaussian noise drawn
//! from a stream separate from the content, so the clean and noisy variants
//! of one sample id differ only by the noise field.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::sot::{build_sot_target, build_stream_targets, SotTarget, StreamTargets, TalkerId, TalkerUtterance, Vocabulary};
use crate::tch::TalkerCount;
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const RECORD_MAGIC: &[u8; 4] = b"MTDS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noisy,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Clean, Condition::Noisy];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RendererConfig {
    pub feature_dim: usize,
    pub frames_per_symbol: usize,
    /// Size of the pool talkers are drawn from; each has its own signature.
    pub talker_pool: usize,
    pub signature_norm: f64,
    pub noise_std: f64,
    /// Minimum pairwise distance between symbol prototypes.
    pub min_separation: f64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            frames_per_symbol: 4,
            talker_pool: 8,
            signature_norm: 0.5,
            noise_std: 0.1,
            min_separation: 0.5,
        }
    }
}

/// Fixed symbol prototypes and talker signatures.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolRenderer {
    pub config: RendererConfig,
    prototypes: Tensor,
    signatures: Tensor,
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize, norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| norm * x / n).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl SymbolRenderer {
    /// Draws prototypes by rejection until every pair is at least
    /// `min_separation` apart.
    pub fn new(config: RendererConfig, vocab: usize, seed: u64) -> Result<Self> {
        if config.frames_per_symbol == 0 || config.feature_dim == 0 || config.talker_pool < 3 {
            return Err(Error::Config("renderer needs r ≥ 1, d ≥ 1 and at least 3 talkers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(vocab);
        let mut attempts = 0usize;
        while protos.len() < vocab {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!(
                    "cannot place {vocab} prototypes in {d} dims at separation {}",
                    config.min_separation
                )));
            }
            let p = unit_gaussian(&mut rng, d, 1.0);
            if protos.iter().all(|q| distance(q, &p) > config.min_separation) {
                protos.push(p);
            }
        }
        let signatures: Vec<Vec<f64>> = (0..config.talker_pool)
            .map(|_| unit_gaussian(&mut rng, d, config.signature_norm))
            .collect();
        Ok(Self {
            prototypes: Tensor::from_rows(&protos)?,
            signatures: Tensor::from_rows(&signatures)?,
            config,
        })
    }

    pub fn vocab(&self) -> usize {
        self.prototypes.rows()
    }

    /// Prototype of content token `k` (1-based like the vocabulary).
    pub fn prototype(&self, k: usize) -> Result<&[f64]> {
        if k == 0 || k > self.vocab() {
            return Err(Error::UnknownToken(k));
        }
        Ok(self.prototypes.row(k - 1))
    }

    pub fn signature(&self, talker: TalkerId) -> Result<&[f64]> {
        let t = talker.0 as usize;
        if t >= self.signatures.rows() {
            return Err(Error::Config(format!("{talker} is outside the talker pool")));
        }
        Ok(self.signatures.row(t))
    }

    /// `r` frames of `prototype + signature` per token.
    pub fn render_with_signature(&self, tokens: &[usize], signature: &[f64]) -> Result<Tensor> {
        let (r, d) = (self.config.frames_per_symbol, self.config.feature_dim);
        if signature.len() != d {
            return Err(Error::dim("render", &[d], &[signature.len()]));
        }
        let mut data = Vec::with_capacity(tokens.len() * r * d);
        for &k in tokens {
            let p = self.prototype(k)?;
            let frame: Vec<f64> = p.iter().zip(signature).map(|(a, b)| a + b).collect();
            for _ in 0..r {
                data.extend_from_slice(&frame);
            }
        }
        Tensor::new(vec![tokens.len() * r, d], data)
    }

    pub fn render_utterance(&self, tokens: &[usize], talker: TalkerId) -> Result<Tensor> {
        self.render_with_signature(tokens, self.signature(talker)?)
    }
}

/// Sums renderings placed at `onsets` into `frames` rows and adds
/// `N(0, noise_std²)` noise when `noise_std > 0`.
pub fn mix<R: Rng>(renderings: &[Tensor], onsets: &[usize], frames: usize, noise_std: f64, rng: &mut R) -> Result<Tensor> {
    if renderings.len() != onsets.len() {
        return Err(Error::dim("mix", &[renderings.len()], &[onsets.len()]));
    }
    let d = renderings.first().map_or(0, Tensor::cols);
    let mut out = Tensor::zeros(&[frames, d]);
    for (x, &onset) in renderings.iter().zip(onsets) {
        if onset + x.rows() > frames {
            return Err(Error::PlacementOverflow {
                onset,
                len: x.rows(),
                frames,
            });
        }
        if x.cols() != d {
            return Err(Error::dim("mix", x.shape(), &[d]));
        }
        let start = onset * d;
        out.data_mut()[start..start + x.len()]
            .iter_mut()
            .zip(x.data())
            .for_each(|(o, v)| *o += v);
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
        out.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    Ok(out)
}

/// How later talkers are placed relative to the previous one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnsetPolicy {
    /// The overlap with the previous talker is drawn uniformly from this
    /// range, as a fraction of the previous utterance's length.
    pub min_overlap: f64,
    pub max_overlap: f64,
    pub min_gap: usize,
    /// Shift onsets so no two talkers share a symbol boundary phase
    /// (onset differences never a multiple of `r`).
    pub stagger: bool,
}

impl Default for OnsetPolicy {
    fn default() -> Self {
        Self {
            min_overlap: 0.3,
            max_overlap: 0.8,
            min_gap: 1,
            stagger: true,
        }
    }
}

impl OnsetPolicy {
    /// Onsets for utterances of the given frame lengths, together with the
    /// overlap ratio drawn for each later talker.
    pub fn sample<R: Rng>(&self, lengths: &[usize], r: usize, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
        let mut onsets = vec![0usize];
        let mut ratios = Vec::new();
        for k in 1..lengths.len() {
            let ratio = rng.random_range(self.min_overlap..=self.max_overlap);
            ratios.push(ratio);
            let advance = ((1.0 - ratio) * lengths[k - 1] as f64).round() as usize;
            let mut o = onsets[k - 1] + advance.max(self.min_gap);
            if self.stagger && r > 1 {
                while onsets.iter().any(|&p| (o - p).is_multiple_of(r)) {
                    o += 1;
                }
            }
            onsets.push(o);
        }
        (onsets, ratios)
    }
}

/// Number of samples in one (split, talker count, condition) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub split: Split,
    pub talkers: TalkerCount,
    pub condition: Condition,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub vocabulary: Vocabulary,
    pub renderer: RendererConfig,
    pub onsets: OnsetPolicy,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Frame-rate reduction factors the CTC targets must stay feasible at.
    pub feasibility_factors: Vec<usize>,
    pub cells: Vec<CellSpec>,
    /// Record file per split, relative to the manifest.
    #[serde(default)]
    pub files: BTreeMap<Split, String>,
}

/// Mixtures per talker count in the default train, dev and eval splits.
pub const TOY_SPLIT_SIZES: [usize; 3] = [2000, 200, 200];

impl Default for DatasetManifest {
    /// The default toy dataset, seed 0.
    fn default() -> Self {
        let [train, dev, eval] = TOY_SPLIT_SIZES;
        Self::with_counts(0, train, dev, eval)
    }
}

impl DatasetManifest {
    /// `train`/`dev`/`eval` sample counts per talker count, split evenly
    /// between clean and noisy.
    pub fn with_counts(seed: u64, train: usize, dev: usize, eval: usize) -> Self {
        let mut cells = Vec::new();
        for (split, n) in [(Split::Train, train), (Split::Dev, dev), (Split::Eval, eval)] {
            for talkers in TalkerCount::ALL {
                for condition in Condition::ALL {
                    let count = match condition {
                        Condition::Clean => n.div_ceil(2),
                        Condition::Noisy => n / 2,
                    };
                    cells.push(CellSpec {
                        split,
                        talkers,
                        condition,
                        count,
                    });
                }
            }
        }
        Self {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            vocabulary: Vocabulary::new(16).expect("non-empty"),
            renderer: RendererConfig::default(),
            onsets: OnsetPolicy::default(),
            min_tokens: 4,
            max_tokens: 8,
            feasibility_factors: vec![1],
            cells,
            files: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Manifest(m.into()));
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token length range is empty");
        }
        let o = &self.onsets;
        if !(0.0..1.0).contains(&o.min_overlap) || o.min_overlap > o.max_overlap || o.max_overlap >= 1.0 {
            return bad("overlap range must lie in [0, 1)");
        }
        if o.min_gap == 0 {
            return bad("minimum onset gap must be at least one frame");
        }
        if self.feasibility_factors.contains(&0) {
            return bad("feasibility factors must be positive");
        }
        if self.renderer.talker_pool < 3 {
            return bad("talker pool must hold at least three talkers");
        }
        Ok(())
    }

    /// First sample id of every cell; cells occupy consecutive id ranges.
    pub fn cell_offsets(&self) -> Vec<u64> {
        let mut next = 0u64;
        self.cells
            .iter()
            .map(|c| {
                let start = next;
                next += c.count as u64;
                start
            })
            .collect()
    }

    pub fn renderer(&self) -> Result<SymbolRenderer> {
        SymbolRenderer::new(
            self.renderer.clone(),
            self.vocabulary.content_size(),
            derive_seed(self.seed, u64::MAX, STREAM_RENDERER),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.validate()?;
        Ok(m)
    }
}

const STREAM_CONTENT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_RENDERER: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for one random stream of one sample.
pub fn derive_seed(seed: u64, id: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(id)) ^ stream)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub id: u64,
    pub split: Split,
    pub condition: Condition,
    pub talker_count: TalkerCount,
    pub utterances: Vec<TalkerUtterance>,
    pub features: Tensor,
}

impl MixtureSample {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn stream_targets(&self) -> StreamTargets {
        build_stream_targets(&self.utterances).expect("samples always hold talkers")
    }

    pub fn sot_target(&self, vocab: &Vocabulary) -> SotTarget {
        build_sot_target(&self.utterances, vocab).expect("samples always hold talkers")
    }

    /// Every stream must be alignable at each frame-rate reduction factor.
    pub fn check_feasible(&self, factors: &[usize]) -> Result<()> {
        for &f in factors {
            let frames = self.frames().div_ceil(f);
            for u in &self.utterances {
                let required = u.tokens.required_frames();
                if frames < required {
                    return Err(Error::InfeasibleTarget { frames, required });
                }
            }
        }
        Ok(())
    }
}

/// Generates one sample. Content depends only on `(seed, id)`; the
/// condition only decides whether the separate noise stream is added.
pub fn generate_sample(
    manifest: &DatasetManifest,
    renderer: &SymbolRenderer,
    id: u64,
    split: Split,
    talkers: TalkerCount,
    condition: Condition,
) -> Result<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, id, STREAM_CONTENT));
    let r = renderer.config.frames_per_symbol;
    let n = talkers.get();
    let ids = index::sample(&mut rng, renderer.config.talker_pool, n);
    let v = manifest.vocabulary.content_size();
    let token_lists: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = rng.random_range(manifest.min_tokens..=manifest.max_tokens);
            (0..len).map(|_| manifest.vocabulary.content_token(rng.random_range(0..v))).collect()
        })
        .collect();
    let lengths: Vec<usize> = token_lists.iter().map(|t| t.len() * r).collect();
    let (onsets, _) = manifest.onsets.sample(&lengths, r, &mut rng);
    let frames = onsets.iter().zip(&lengths).map(|(o, l)| o + l).max().unwrap_or(0);

    let mut renderings = Vec::with_capacity(n);
    let mut utterances = Vec::with_capacity(n);
    for ((tokens, &onset), talker) in token_lists.into_iter().zip(&onsets).zip(ids.iter()) {
        let talker = TalkerId(talker as u32);
        renderings.push(renderer.render_utterance(&tokens, talker)?);
        utterances.push(TalkerUtterance {
            tokens: LabelSequence(tokens),
            onset,
            talker,
        });
    }
    let noise = match condition {
        Condition::Clean => 0.0,
        Condition::Noisy => renderer.config.noise_std,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, id, STREAM_NOISE));
    let features = mix(&renderings, &onsets, frames, noise, &mut noise_rng)?;
    let sample = MixtureSample {
        id,
        split,
        condition,
        talker_count: talkers,
        utterances,
        features,
    };
    sample.check_feasible(&manifest.feasibility_factors)?;
    Ok(sample)
}

/// Every sample of the manifest in id order.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<impl Iterator<Item = Result<MixtureSample>> + '_> {
    manifest.validate()?;
    let renderer = manifest.renderer()?;
    let offsets = manifest.cell_offsets();
    Ok(manifest
        .cells
        .iter()
        .zip(offsets)
        .flat_map(|(cell, start)| (0..cell.count as u64).map(move |i| (cell, start + i)))
        .map(move |(cell, id)| generate_sample(manifest, &renderer, id, cell.split, cell.talkers, cell.condition)))
}

/// Samples of one split, in id order.
pub fn generate_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<MixtureSample>> {
    manifest.validate()?;
    let renderer = manifest.renderer()?;
    let mut out = Vec::new();
    for (cell, start) in manifest.cells.iter().zip(manifest.cell_offsets()) {
        if cell.split != split {
            continue;
        }
        for i in 0..cell.count as u64 {
            out.push(generate_sample(manifest, &renderer, start + i, split, cell.talkers, cell.condition)?);
        }
    }
    Ok(out)
}

// ---- on-disk records -----------------------------------------------------
//
// file   := "MTDS" version:u32 count:u64 record*
// record := id:u64 split:u8 condition:u8 talkers:u8
//           (talker:u32 onset:u32 len:u32 token:u32*len)*talkers
//           rows:u32 cols:u32 f64*rows*cols
// All integers and floats little-endian.

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Dev => 1,
        Split::Eval => 2,
    }
}

fn put_u32(w: &mut impl Write, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in 32 bits")))?;
    Ok(w.write_all(&x.to_le_bytes())?)
}

pub fn write_records(path: &Path, samples: &[MixtureSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.id.to_le_bytes())?;
        let cond = match s.condition {
            Condition::Clean => 0u8,
            Condition::Noisy => 1,
        };
        w.write_all(&[split_code(s.split), cond, s.talker_count.get() as u8])?;
        for u in &s.utterances {
            put_u32(&mut w, u.talker.0 as usize)?;
            put_u32(&mut w, u.onset)?;
            put_u32(&mut w, u.tokens.len())?;
            for &k in u.tokens.tokens() {
                put_u32(&mut w, k)?;
            }
        }
        put_u32(&mut w, s.features.rows())?;
        put_u32(&mut w, s.features.cols())?;
        for x in s.features.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated record file: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MixtureSample>> {
    let mut c = Cursor {
        inner: BufReader::new(File::open(path)?),
    };
    if &c.bytes::<4>()? != RECORD_MAGIC {
        return Err(Error::Format(format!("{} is not a record file", path.display())));
    }
    let version = u32::from_le_bytes(c.bytes()?);
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("record format version {version} is not supported")));
    }
    let count = c.u64()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = c.u64()?;
        let split = match c.u8()? {
            0 => Split::Train,
            1 => Split::Dev,
            2 => Split::Eval,
            x => return Err(Error::Format(format!("bad split code {x}"))),
        };
        let condition = match c.u8()? {
            0 => Condition::Clean,
            1 => Condition::Noisy,
            x => return Err(Error::Format(format!("bad condition code {x}"))),
        };
        let talker_count = TalkerCount::new(c.u8()? as usize)?;
        let mut utterances = Vec::with_capacity(talker_count.get());
        for _ in 0..talker_count.get() {
            let talker = TalkerId(c.u32()? as u32);
            let onset = c.u32()?;
            let len = c.u32()?;
            let tokens = (0..len).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            utterances.push(TalkerUtterance {
                tokens: LabelSequence(tokens),
                onset,
                talker,
            });
        }
        let (rows, cols) = (c.u32()?, c.u32()?);
        let data = (0..rows * cols).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        out.push(MixtureSample {
            id,
            split,
            condition,
            talker_count,
            utterances,
            features: Tensor::new(vec![rows, cols], data)?,
        });
    }
    Ok(out)
}

/// A manifest plus its materialised splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<Split, Vec<MixtureSample>>,
}

impl Dataset {
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            splits.insert(split, generate_split(&manifest, split)?);
        }
        Ok(Self { manifest, splits })
    }

    pub fn split(&self, split: Split) -> &[MixtureSample] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    /// Writes `manifest.json` and one record file per split into `dir`.
    /// Returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = self.manifest.clone();
        for (split, samples) in &self.splits {
            let name = format!("{split}.bin");
            write_records(&dir.join(&name), samples)?;
            manifest.files.insert(*split, name);
        }
        let path = dir.join("manifest.json");
        let mut f = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(path)
    }

    /// Reads a manifest and the record files it lists. Splits without a
    /// file are regenerated from the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let samples = match manifest.files.get(&split) {
                Some(name) => read_records(&dir.join(name))?,
                None => generate_split(&manifest, split)?,
            };
            splits.insert(split, samples);
        }
        Ok(Self { manifest, splits })
    }
}
