use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MtModel, Phase, SHARED_PREFIX, TCH_PREFIX, TEACHER_PREFIX};
use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::mixtures::{derive_seed, Condition, MixtureSample};
use crate::optim::Adam;
use crate::tch::{tch_loss, ActivityMask, TalkerCount};
use crate::tensor::Tensor;

/// Per-step record of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: Option<Phase>,
    pub alpha: Option<f64>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Pre-clip global gradient norm per step.
    pub grad_norms: Vec<f64>,
    /// Teacher fingerprint before and after the run.
    pub teacher_fingerprint: (u64, u64),
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn batch_rng(model: &MtModel, phase: Phase) -> ChaCha8Rng {
    let stream = match phase {
        Phase::Init => 0,
        Phase::Phase1 => 11,
        Phase::Phase2 => 12,
        Phase::Tch => 13,
    };
    ChaCha8Rng::seed_from_u64(derive_seed(model.config.train.seed, stream, 0x7261_696e))
}

/// Freezes every parameter whose name starts with one of `prefixes`;
/// everything else becomes trainable.
fn set_trainable(model: &mut MtModel, frozen_prefixes: &[&str]) {
    model.params.freeze_all(false);
    for p in frozen_prefixes {
        model.params.set_frozen_prefix(p, true);
    }
}

/// Generic loop: `steps` Adam updates over uniformly drawn batches.
pub(super) fn run<F>(model: &mut MtModel, data: &[MixtureSample], steps: usize, phase: Phase, mut loss_fn: F) -> Result<TrainLog>
where
    F: FnMut(&MtModel, &mut Graph, &MixtureSample) -> Result<crate::autodiff::Var>,
{
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let bs = model.config.train.batch_size;
    let log_every = model.config.train.log_every;
    let mut opt = Adam::new(&model.params, model.config.train.adam);
    let mut rng = batch_rng(model, phase);
    let teacher_before = model.params.fingerprint(TEACHER_PREFIX);
    let mut log = TrainLog {
        phase: Some(phase),
        ..Default::default()
    };
    for step in 0..steps {
        model.params.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..bs {
            let sample = &data[rng.random_range(0..data.len())];
            let grads = {
                let mut g = Graph::with_params(&model.params, Mode::Train);
                let loss = loss_fn(model, &mut g, sample)?;
                batch_loss += g.value(loss).item();
                g.backward(loss)?
            };
            grads.accumulate_into(&mut model.params, 1.0 / bs as f64);
        }
        let norm = opt.step(&mut model.params);
        log.losses.push(batch_loss / bs as f64);
        log.grad_norms.push(norm);
        model.state.steps += 1;
        if log_every > 0 && (step + 1) % log_every == 0 {
            let window = &log.losses[log.losses.len().saturating_sub(log_every)..];
            info!(
                "{phase:?} step {} loss {:.4}",
                step + 1,
                window.iter().sum::<f64>() / window.len() as f64
            );
        }
    }
    log.teacher_fingerprint = (teacher_before, model.params.fingerprint(TEACHER_PREFIX));
    model.state.completed.push(phase);
    model.params.freeze_all(false);
    Ok(log)
}

/// Teacher-forced serialized-target training of encoder, branches and
/// teacher, each sample routed through its true-count branch.
pub fn train_phase1(model: &mut MtModel, data: &[MixtureSample]) -> Result<TrainLog> {
    for c in TalkerCount::ALL {
        if !data.iter().any(|s| s.talker_count == c) {
            return Err(Error::Config(format!("phase 1 needs {c}-talker samples")));
        }
    }
    let mut frozen = vec![TCH_PREFIX];
    if model.config.freeze_shared {
        frozen.push(SHARED_PREFIX);
    }
    set_trainable(model, &frozen);
    let steps = model.config.train.phase1_steps;
    run(model, data, steps, Phase::Phase1, |m, g, s| Ok(m.hybrid_loss(g, s, 0.0)?.total))
}

/// Hybrid-objective training with the teacher frozen. Starting without a
/// completed phase 1 is only allowed for the pure CTC objective (`α = 1`).
pub fn train_phase2(model: &mut MtModel, data: &[MixtureSample], alpha: f64) -> Result<TrainLog> {
    if alpha < 1.0 && !model.state.has(Phase::Phase1) {
        return Err(Error::Config(
            "phase 2 with a teacher term needs weights that completed phase 1".into(),
        ));
    }
    let mut frozen = vec![TEACHER_PREFIX, TCH_PREFIX];
    if model.config.freeze_shared {
        frozen.push(SHARED_PREFIX);
    }
    set_trainable(model, &frozen);
    let steps = model.config.train.phase2_steps;
    let mut log = run(model, data, steps, Phase::Phase2, |m, g, s| Ok(m.hybrid_loss(g, s, alpha)?.total))?;
    log.alpha = Some(alpha);
    if log.teacher_fingerprint.0 != log.teacher_fingerprint.1 {
        return Err(Error::Contract("teacher parameters changed while frozen".into()));
    }
    Ok(log)
}

/// Trains only the count head, on cached (frozen) encoder outputs.
/// Features and labels the count head trains on: every mixture, plus
/// noisy copies of the clean ones.
pub(super) fn tch_training_set(model: &MtModel, data: &[MixtureSample]) -> Result<Vec<(Tensor, TalkerCount)>> {
    let cfg = &model.config.tch;
    let mut out: Vec<(Tensor, TalkerCount)> = data.iter().map(|s| (s.features.clone(), s.talker_count)).collect();
    if cfg.augment_copies == 0 || cfg.augment_noise_std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, cfg.augment_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.config.train.seed, 15, 0x6e6f_6973));
    for _ in 0..cfg.augment_copies {
        for s in data.iter().filter(|s| s.condition == Condition::Clean) {
            let mut f = s.features.clone();
            f.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            out.push((f, s.talker_count));
        }
    }
    Ok(out)
}

pub fn train_tch(model: &mut MtModel, data: &[MixtureSample]) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let cache: Vec<(Tensor, ActivityMask, TalkerCount)> = tch_training_set(model, data)?
        .iter()
        .map(|(f, c)| Ok((model.tch_input(f)?, model.activity_mask(f), *c)))
        .collect::<Result<_>>()?;
    model.params.freeze_all(true);
    model.params.set_frozen_prefix(TCH_PREFIX, false);

    let bs = model.config.train.batch_size;
    let steps = model.config.train.tch_steps;
    let log_every = model.config.train.log_every;
    let mut opt = Adam::new(&model.params, model.config.train.adam);
    let mut rng = batch_rng(model, Phase::Tch);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(model.config.train.seed, 14, 0x6472_6f70));
    let tch = model.tch_params().clone();
    let mut log = TrainLog {
        phase: Some(Phase::Tch),
        teacher_fingerprint: (model.params.fingerprint(TEACHER_PREFIX), 0),
        ..Default::default()
    };
    for step in 0..steps {
        model.params.zero_grad();
        let picks: Vec<usize> = (0..bs).map(|_| rng.random_range(0..cache.len())).collect();
        let grads = {
            let mut g = Graph::with_params(&model.params, Mode::Train);
            let mut logits = Vec::with_capacity(bs);
            for &i in &picks {
                let x = g.constant(cache[i].0.clone());
                logits.push(tch.forward(&mut g, x, &cache[i].1, &mut dropout_rng)?);
            }
            let labels: Vec<TalkerCount> = picks.iter().map(|&i| cache[i].2).collect();
            let loss = tch_loss(&mut g, &logits, &labels)?;
            log.losses.push(g.value(loss).item());
            g.backward(loss)?
        };
        grads.accumulate_into(&mut model.params, 1.0);
        log.grad_norms.push(opt.step(&mut model.params));
        model.state.steps += 1;
        if log_every > 0 && (step + 1) % log_every == 0 {
            info!("Tch step {} loss {:.4}", step + 1, log.losses[step]);
        }
    }
    log.teacher_fingerprint.1 = model.params.fingerprint(TEACHER_PREFIX);
    model.state.completed.push(Phase::Tch);
    model.params.freeze_all(false);
    Ok(log)
}
