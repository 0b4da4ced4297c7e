use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use mtasr::harness::{
    count_accuracy, evaluate_error_rates, measure_rtf, write_csv, Routing, RtfMode, RunConfig, Summary,
};
use mtasr::mixtures::{Dataset, DatasetManifest, MixtureSample, Split, TOY_SPLIT_SIZES};
use mtasr::model::{train_phase1, train_phase2, train_tch, DecodeMode, ModelConfig, MtModel, Phase, TrainLog};
use mtasr::tch::TalkerCount;

const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "mtasr", version = mtasr::harness::BUILD_ID, about = "Multi-talker CTC with serialized-output distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixture dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Mixtures per talker count in the train split.
        #[arg(long, default_value_t = TOY_SPLIT_SIZES[0])]
        train: usize,
        #[arg(long, default_value_t = TOY_SPLIT_SIZES[1])]
        dev: usize,
        #[arg(long, default_value_t = TOY_SPLIT_SIZES[2])]
        eval: usize,
    },
    /// Serialized-target training of encoder, branches and teacher.
    TrainPhase1 {
        #[command(flatten)]
        common: Common,
    },
    /// Hybrid CTC + distillation training with the teacher frozen.
    TrainPhase2 {
        #[command(flatten)]
        common: Common,
    },
    /// Train the talker-count head on a frozen encoder.
    TrainTch {
        #[command(flatten)]
        common: Common,
    },
    /// Error rates and count accuracy on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dev")]
        split: Split,
    },
    /// Real-time factor of CTC decoding and teacher decoding.
    BenchRtf {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dev")]
        split: Split,
    },
    /// Decode one mixture and print its streams.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dev")]
        split: Split,
        /// Position of the mixture within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Model configuration (JSON); built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to start from or evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CTC weight of the hybrid objective.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Route by the true talker count instead of the count head.
    #[arg(long)]
    oracle_count: bool,
    #[arg(long, default_value = "greedy")]
    decode_mode: DecodeMode,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn run_config(&self, command: &str, model: Option<ModelConfig>) -> RunConfig {
        RunConfig {
            command: command.to_string(),
            manifest: self.manifest.clone(),
            checkpoints: self.checkpoint.iter().cloned().collect(),
            model,
            alpha: self.alpha,
            seeds: self.seed.into_iter().collect(),
            out_dir: self.out.clone(),
            oracle_count: self.oracle_count,
            decode_mode: Some(self.decode_mode),
        }
    }

    fn routing(&self) -> Routing {
        if self.oracle_count {
            Routing::Oracle
        } else {
            Routing::Tch
        }
    }

    fn manifest_path(&self) -> Result<&Path> {
        self.manifest.as_deref().context("--manifest is required (run gen-data first)")
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self.manifest_path()?;
        Dataset::load(path).with_context(|| format!("loading dataset from {}", path.display()))
    }

    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_json_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => ModelConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn load_checkpoint(&self) -> Result<MtModel> {
        let path = self.checkpoint.as_deref().context("--checkpoint is required")?;
        MtModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    /// Existing checkpoint if given, else a fresh model from the config.
    fn start_model(&self) -> Result<MtModel> {
        if self.checkpoint.is_some() {
            let mut m = self.load_checkpoint()?;
            if let Some(seed) = self.seed {
                m.config.train.seed = seed;
            }
            return Ok(m);
        }
        let cfg = self.model_config()?;
        let seed = cfg.train.seed;
        Ok(MtModel::new(cfg, seed)?)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

#[derive(serde::Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
    grad_norm: f64,
}

fn finish_training(common: &Common, command: &str, model: &MtModel, log: &TrainLog) -> Result<()> {
    let out = common.out_dir()?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    let rows: Vec<LossRow> = log
        .losses
        .iter()
        .zip(&log.grad_norms)
        .enumerate()
        .map(|(i, (&loss, &grad_norm))| LossRow {
            step: i + 1,
            loss,
            grad_norm,
        })
        .collect();
    write_csv(&out.join("loss.csv"), &rows)?;
    let summary = Summary::new(
        common.run_config(command, Some(model.config.clone())),
        json!({
            "checkpoint": ckpt,
            "phase": log.phase,
            "alpha": log.alpha,
            "steps": log.losses.len(),
            "final_loss": log.final_loss(),
            "completed_phases": model.state.completed,
            "teacher_fingerprint": log.teacher_fingerprint,
        }),
    );
    summary.write(&out.join("summary.json"))?;
    info!("wrote {}", ckpt.display());
    Ok(())
}

fn gen_data(common: &Common, train: usize, dev: usize, eval: usize) -> Result<()> {
    let manifest = match &common.manifest {
        Some(p) => DatasetManifest::load(p).with_context(|| format!("reading manifest {}", p.display()))?,
        None => DatasetManifest::with_counts(common.seed.unwrap_or(0), train, dev, eval),
    };
    let out = common.out_dir()?;
    let data = Dataset::generate(manifest)?;
    let path = data.save(out)?;
    let counts: serde_json::Map<String, serde_json::Value> = [Split::Train, Split::Dev, Split::Eval]
        .into_iter()
        .map(|s| (s.to_string(), json!(data.split(s).len())))
        .collect();
    Summary::new(common.run_config("gen-data", None), json!({"manifest": path, "samples": counts}))
        .write(&out.join("summary.json"))?;
    println!("{}", path.display());
    Ok(())
}

fn train_samples(data: &Dataset) -> Result<&[MixtureSample]> {
    let s = data.split(Split::Train);
    if s.is_empty() {
        bail!("the manifest has no train samples");
    }
    Ok(s)
}

fn eval(common: &Common, split: Split) -> Result<()> {
    let model = common.load_checkpoint()?;
    let data = common.dataset()?;
    let samples = data.split(split);
    if samples.is_empty() {
        bail!("split {split} is empty");
    }
    let routing = common.routing();
    if routing == Routing::Tch && !model.state.has(Phase::Tch) {
        log::warn!("count head is untrained; pass --oracle-count to route by the true count");
    }
    let rates = evaluate_error_rates(&model, samples, routing, common.decode_mode)?;
    let acc = count_accuracy(&model, samples, routing)?;
    let out = common.out_dir()?;
    write_csv(&out.join("error_rates.csv"), &rates.rows)?;
    write_csv(&out.join("count_accuracy.csv"), &acc.rows)?;
    let per_count: serde_json::Map<String, serde_json::Value> = TalkerCount::ALL
        .into_iter()
        .map(|c| {
            (
                format!("{c}mix"),
                json!({"error_rate": rates.rate_for(c), "count_accuracy": acc.accuracy_for(c)}),
            )
        })
        .collect();
    let results = json!({
        "split": split,
        "routing": routing,
        "overall_error_rate": rates.overall(),
        "by_talkers": per_count,
        "error_rates": rates.rows,
        "count_accuracy": acc.rows,
    });
    Summary::new(common.run_config("eval", Some(model.config.clone())), results).write(&out.join("summary.json"))?;
    for c in TalkerCount::ALL {
        println!(
            "{c}-mix  error rate {:6.2}%  count accuracy {:6.2}%",
            rates.rate_for(c),
            acc.accuracy_for(c)
        );
    }
    Ok(())
}

fn bench_rtf(common: &Common, split: Split) -> Result<()> {
    let model = common.load_checkpoint()?;
    let data = common.dataset()?;
    let mut reports = Vec::new();
    for c in TalkerCount::ALL {
        let subset: Vec<MixtureSample> = data.split(split).iter().filter(|s| s.talker_count == c).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        for mode in [RtfMode::CtcGreedy, RtfMode::TeacherAutoregressive] {
            let r = measure_rtf(&model, &subset, mode, common.routing())?;
            println!("{c}-mix  {mode:?}  rtf {:.5}", r.rtf);
            reports.push(r);
        }
    }
    if reports.is_empty() {
        bail!("split {split} is empty");
    }
    let out = common.out_dir()?;
    write_csv(&out.join("rtf.csv"), &reports)?;
    Summary::new(common.run_config("bench-rtf", Some(model.config.clone())), json!({"split": split, "rtf": reports}))
        .write(&out.join("summary.json"))?;
    Ok(())
}

fn decode(common: &Common, split: Split, index: usize) -> Result<()> {
    let model = common.load_checkpoint()?;
    let data = common.dataset()?;
    let samples = data.split(split);
    let Some(s) = samples.get(index) else {
        bail!("index {index} is out of range for split {split} ({} samples)", samples.len());
    };
    let inf = model.infer_routed(&s.features, common.routing().count(s), common.decode_mode)?;
    let vocab = model.vocabulary();
    let render = |toks: &[usize]| -> String {
        toks.iter()
            .filter(|&&k| vocab.is_content(k))
            .map(|&k| vocab.symbol(k).unwrap_or_else(|_| "?".into()))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("mixture {} ({split}, {}, {}-talker)", s.id, s.condition, s.talker_count);
    println!("count: {}", inf.count);
    for (k, h) in inf.streams.iter().enumerate() {
        println!("stream {k}: {}", render(h.tokens()));
    }
    for (k, r) in s.stream_targets().streams().iter().enumerate() {
        println!("ref    {k}: {}", render(r.tokens()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, train, dev, eval } => gen_data(&common, train, dev, eval),
        Command::TrainPhase1 { common } => {
            let data = common.dataset()?;
            let mut model = common.start_model()?;
            let log = train_phase1(&mut model, train_samples(&data)?)?;
            finish_training(&common, "train-phase1", &model, &log)
        }
        Command::TrainPhase2 { common } => {
            let data = common.dataset()?;
            let mut model = common.start_model()?;
            let alpha = common.alpha.unwrap_or(model.config.alpha);
            if !(0.0..=1.0).contains(&alpha) {
                bail!("--alpha must lie in [0, 1], got {alpha}");
            }
            let log = train_phase2(&mut model, train_samples(&data)?, alpha)?;
            finish_training(&common, "train-phase2", &model, &log)
        }
        Command::TrainTch { common } => {
            let data = common.dataset()?;
            let mut model = common.load_checkpoint()?;
            let log = train_tch(&mut model, train_samples(&data)?)?;
            finish_training(&common, "train-tch", &model, &log)
        }
        Command::Eval { common, split } => eval(&common, split),
        Command::BenchRtf { common, split } => bench_rtf(&common, split),
        Command::Decode { common, split, index } => decode(&common, split, index),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
