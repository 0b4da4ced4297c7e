use super::*;
use crate::autodiff::Mode;
use crate::ctc::ctc_loss;
use crate::mixtures::{generate_split, Condition, DatasetManifest, Split};
use crate::nn::LstmStack;

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.model_dim = 8;
    c.ff_dim = 16;
    c.shared_blocks = 1;
    c.branch_blocks = 1;
    c.separator.hidden = 8;
    c.teacher.dim = 8;
    c.teacher.ff_dim = 16;
    c.teacher.blocks = 1;
    c.tch.attention_dim = 4;
    c.tch.hidden_dim = 4;
    c.train.batch_size = 2;
    c.train.log_every = 0;
    c
}

fn samples(n: usize) -> Vec<MixtureSample> {
    generate_split(&DatasetManifest::with_counts(5, n, 0, 0), Split::Train).unwrap()
}

#[test]
fn parameter_count_matches_layer_formulas() {
    let c = ModelConfig::default();
    let m = MtModel::new(c.clone(), 0).unwrap();
    let v = c.vocabulary.size();
    let enc = TransformerEncoderBlock::num_params(c.model_dim, c.ff_dim);
    let sep = |b: usize| {
        LstmStack::num_params(c.model_dim, c.separator.hidden, 1, false)
            + 2 * c.separator.hidden
            + b * (Linear::num_params(c.separator.hidden, c.model_dim) + Linear::num_params(c.model_dim, v))
    };
    let t = &c.teacher;
    let teacher = Linear::num_params(t.stack * c.model_dim, t.dim)
        + v * t.dim
        + t.blocks * TransformerDecoderBlock::num_params(t.dim, t.ff_dim)
        + 2 * t.dim
        + Linear::num_params(t.dim, v);
    let expected = Linear::num_params(c.feature_dim, c.model_dim)
        + c.shared_blocks * enc
        + 2 * c.branch_blocks * enc
        + sep(2)
        + sep(3)
        + teacher
        + TchParams::num_params(c.model_dim, &c.tch);
    assert_eq!(m.params.num_scalars(), expected);
    assert_eq!(m.params.num_scalars_with_prefix(TEACHER_PREFIX), teacher);
}

#[test]
fn zero_depth_shared_stack_is_identity() {
    let mut c = tiny_config();
    c.shared_blocks = 0;
    c.tch.input = TchInput::Features;
    let m = MtModel::new(c, 1).unwrap();
    let mut g = Graph::inference(&m.params);
    let x = g.constant(Tensor::full(&[5, 8], 0.25));
    let h = m.encode_shared(&mut g, x).unwrap();
    assert_eq!(g.value(h), g.value(x));
}

#[test]
fn encoding_is_deterministic_and_checks_width() {
    let m = MtModel::new(tiny_config(), 2).unwrap();
    let s = &samples(2)[0];
    let run = || {
        let mut g = Graph::inference(&m.params);
        let f = g.constant(s.features.clone());
        let h = m.encode(&mut g, f).unwrap();
        g.value(h).clone()
    };
    assert_eq!(run(), run());
    let mut g = Graph::inference(&m.params);
    let bad = g.constant(Tensor::zeros(&[3, 5]));
    assert!(matches!(m.encode(&mut g, bad), Err(Error::Dimension { .. })));
}

#[test]
fn gradient_reaches_features() {
    let m = MtModel::new(tiny_config(), 3).unwrap();
    let s = &samples(2)[1];
    let loss_at = |f: &Tensor| {
        let mut g = Graph::with_params(&m.params, Mode::Eval);
        let x = g.constant(f.clone());
        let h = m.encode(&mut g, x).unwrap();
        let sq = g.mul(h, h).unwrap();
        let l = g.sum(sq);
        g.value(l).item()
    };
    let mut g = Graph::with_params(&m.params, Mode::Eval);
    let x = g.leaf(s.features.clone(), true);
    let h = m.encode(&mut g, x).unwrap();
    let sq = g.mul(h, h).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.wrt(x).unwrap();
    for j in [0, 7, 33, s.features.len() - 1] {
        let mut up = s.features.clone();
        up.data_mut()[j] += 1e-5;
        let mut down = s.features.clone();
        down.data_mut()[j] -= 1e-5;
        let numeric = (loss_at(&up) - loss_at(&down)) / 2e-5;
        assert!(crate::gradcheck::relative_error(analytic[j], numeric) < 1e-4);
    }
}

#[test]
fn branch_outputs_are_normalised_and_isolated() {
    let mut m = MtModel::new(tiny_config(), 4).unwrap();
    let s = &samples(2)[0];
    let streams_for = |m: &MtModel, c: TalkerCount| {
        let mut g = Graph::inference(&m.params);
        let f = g.constant(s.features.clone());
        let hs = m.encode(&mut g, f).unwrap();
        let out = m.branch_forward(&mut g, hs, c).unwrap();
        out.streams.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
    };
    for c in TalkerCount::ALL {
        let streams = streams_for(&m, c);
        assert_eq!(streams.len(), c.get());
        for lp in &streams {
            assert_eq!(lp.rows(), s.frames());
            assert!(LogProbLattice::new(lp.clone(), BLANK).is_ok());
        }
    }
    let three = streams_for(&m, TalkerCount::THREE);
    let ids: Vec<ParamId> = m.params.ids().filter(|&id| m.params.name(id).starts_with("branch2.")).collect();
    for id in ids {
        m.params.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.5);
    }
    assert_eq!(streams_for(&m, TalkerCount::THREE), three);
}

#[test]
fn serialized_ctc_is_additive() {
    let m = MtModel::new(tiny_config(), 5).unwrap();
    let s = &samples(4)[3];
    let mut g = Graph::inference(&m.params);
    let f = g.constant(s.features.clone());
    let hs = m.encode(&mut g, f).unwrap();
    let out = m.branch_forward(&mut g, hs, s.talker_count).unwrap();
    let targets = s.stream_targets();
    let total = m.serialized_ctc_loss(&mut g, &out.streams, &targets).unwrap();
    let separate: f64 = out
        .streams
        .iter()
        .zip(targets.streams())
        .map(|(&v, t)| ctc_loss(&LogProbLattice::new(g.value(v).clone(), BLANK).unwrap(), t).unwrap().loss)
        .sum();
    assert_eq!(g.value(total).item(), separate);

    // identical lattice and target twice is exactly double
    let one = StreamTargets(vec![targets.streams()[0].clone()]);
    let two = StreamTargets(vec![targets.streams()[0].clone(), targets.streams()[0].clone()]);
    let a = m.serialized_ctc_loss(&mut g, &out.streams[..1], &one).unwrap();
    let b = m.serialized_ctc_loss(&mut g, &[out.streams[0], out.streams[0]], &two).unwrap();
    assert_eq!(g.value(b).item(), 2.0 * g.value(a).item());
    assert!(m.serialized_ctc_loss(&mut g, &out.streams[..1], &two).is_err());
}

#[test]
fn uniform_teacher_gives_log_vocab() {
    let mut m = MtModel::new(tiny_config(), 6).unwrap();
    for name in ["teacher.out.weight", "teacher.out.bias"] {
        let id = m.params.id(name).unwrap();
        m.params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let s = &samples(2)[0];
    let mut g = Graph::inference(&m.params);
    let f = g.constant(s.features.clone());
    let hs = m.encode(&mut g, f).unwrap();
    let z = m.branch_encode(&mut g, hs, s.talker_count).unwrap();
    let l = m.sot_teacher_loss(&mut g, z, s.talker_count, &s.sot_target(m.vocabulary())).unwrap();
    let v = m.vocabulary().size() as f64;
    assert!((g.value(l).item() - v.ln()).abs() < 1e-12);
    assert!(m.sot_teacher_loss(&mut g, z, s.talker_count, &SotTarget(vec![1, 2])).is_err());
}

#[test]
fn teacher_loss_reaches_shared_encoder() {
    let m = MtModel::new(tiny_config(), 7).unwrap();
    let s = &samples(2)[0];
    let mut g = Graph::with_params(&m.params, Mode::Train);
    let l = m.hybrid_loss(&mut g, s, 0.0).unwrap();
    let grads = g.backward(l.total).unwrap();
    let mut store = m.params.clone();
    grads.accumulate_into(&mut store, 1.0);
    assert!(store.grad_norm_with_prefix(SHARED_PREFIX) > 0.0);
    assert!(store.grad_norm_with_prefix(TEACHER_PREFIX) > 0.0);
    assert_eq!(store.grad_norm_with_prefix("sep"), 0.0);
}

#[test]
fn hybrid_endpoints_and_linearity() {
    let m = MtModel::new(tiny_config(), 8).unwrap();
    let s = &samples(4)[2];
    let value = |alpha: f64| {
        let mut g = Graph::inference(&m.params);
        let l = m.hybrid_loss(&mut g, s, alpha).unwrap();
        (g.value(l.total).item(), l.ctc, l.sot)
    };
    let (one, ctc, sot) = value(1.0);
    assert!(sot.is_none());
    assert_eq!(one, ctc.unwrap());
    let (zero, ctc0, sot0) = value(0.0);
    assert!(ctc0.is_none());
    assert_eq!(zero, sot0.unwrap());
    for a in [0.25, 0.5] {
        let line = a * one + (1.0 - a) * zero;
        assert!((value(a).0 - line).abs() < 1e-12);
    }
    let mut g = Graph::inference(&m.params);
    assert!(m.hybrid_loss(&mut g, s, 1.5).is_err());
}

#[test]
fn phase1_is_deterministic_and_moves_teacher() {
    let data = samples(6);
    let mut c = tiny_config();
    c.train.phase1_steps = 4;
    let run = || {
        let mut m = MtModel::new(c.clone(), 9).unwrap();
        let log = train_phase1(&mut m, &data).unwrap();
        (m, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la.losses, lb.losses);
    assert_eq!(a.params.fingerprint(""), b.params.fingerprint(""));
    assert_ne!(la.teacher_fingerprint.0, la.teacher_fingerprint.1);
    assert!(la.grad_norms.iter().all(|&n| n > 0.0));
    assert_eq!(a.state.phase(), Phase::Phase1);
}

#[test]
fn phase2_freezes_teacher_and_skips_it_at_alpha_one() {
    let data = samples(6);
    let mut c = tiny_config();
    c.train.phase1_steps = 2;
    c.train.phase2_steps = 3;
    let mut m = MtModel::new(c.clone(), 10).unwrap();
    assert!(train_phase2(&mut m, &data, 0.3).is_err());
    train_phase1(&mut m, &data).unwrap();
    let before = m.params.fingerprint(TEACHER_PREFIX);
    let branch_before = m.params.fingerprint("branch");
    let log = train_phase2(&mut m, &data, 0.3).unwrap();
    assert_eq!(m.params.fingerprint(TEACHER_PREFIX), before);
    assert_eq!(log.teacher_fingerprint, (before, before));
    assert_ne!(m.params.fingerprint("branch"), branch_before);

    let mut fresh = MtModel::new(c, 11).unwrap();
    train_phase2(&mut fresh, &data, 1.0).unwrap();
    assert_eq!(fresh.teacher_calls(), 0);
}

#[test]
fn single_sample_teacher_overfits() {
    let data = vec![samples(2)[0].clone()];
    let mut c = ModelConfig::default();
    c.train.phase1_steps = 200;
    c.train.log_every = 0;
    // one sample cannot cover both counts; train the loop directly
    let mut m = MtModel::new(c, 12).unwrap();
    let log = train::run(&mut m, &data, 200, Phase::Phase1, |m, g, s| Ok(m.hybrid_loss(g, s, 0.0)?.total)).unwrap();
    assert!(log.final_loss().unwrap() < 0.05, "{:?}", log.final_loss());
}

#[test]
fn routing_respects_oracle_and_touches_one_branch() {
    let m = MtModel::new(tiny_config(), 13).unwrap();
    let s = &samples(4)[3];
    for c in TalkerCount::ALL {
        let inf = m.infer_routed(&s.features, Some(c), DecodeMode::Greedy).unwrap();
        assert_eq!(inf.count, c);
        assert_eq!(inf.streams.len(), c.get());
        let other = if c == TalkerCount::TWO { TalkerCount::THREE } else { TalkerCount::TWO };
        let prefixes = MtModel::branch_prefixes(other);
        for id in &inf.touched {
            let name = m.params.name(*id);
            assert!(!prefixes.iter().any(|p| name.starts_with(p.as_str())), "{name}");
            assert!(!name.starts_with(TEACHER_PREFIX) && !name.starts_with(TCH_PREFIX));
        }
    }
    let routed = m.infer_routed(&s.features, None, DecodeMode::Beam(4)).unwrap();
    assert_eq!(routed.streams.len(), routed.count.get());
    assert!(routed.touched.iter().any(|&id| m.params.name(id).starts_with(TCH_PREFIX)));
}

#[test]
fn teacher_decoding_respects_cap() {
    let m = MtModel::new(tiny_config(), 14).unwrap();
    let s = &samples(2)[0];
    let (_, toks) = m.teacher_decode(&s.features, Some(s.talker_count), 5).unwrap();
    assert!(toks.len() <= 5);
    assert!(!toks.contains(&m.vocabulary().eos()));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = samples(4);
    let mut c = tiny_config();
    c.train.phase1_steps = 2;
    let mut m = MtModel::new(c, 15).unwrap();
    train_phase1(&mut m, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = MtModel::load(&path).unwrap();
    assert_eq!(back.state, m.state);
    assert_eq!(back.config, m.config);
    for s in &data {
        let mut ga = Graph::inference(&m.params);
        let mut gb = Graph::inference(&back.params);
        let la = m.hybrid_loss(&mut ga, s, 0.3).unwrap();
        let lb = back.hybrid_loss(&mut gb, s, 0.3).unwrap();
        assert_eq!(ga.value(la.total).item().to_bits(), gb.value(lb.total).item().to_bits());
    }
    // a flipped value byte is caught
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(MtModel::load(&path), Err(Error::Format(_))));
}

#[test]
fn decode_mode_parsing() {
    assert_eq!("greedy".parse::<DecodeMode>().unwrap(), DecodeMode::Greedy);
    assert_eq!("beam:8".parse::<DecodeMode>().unwrap(), DecodeMode::Beam(8));
    assert!("beam:0".parse::<DecodeMode>().is_err());
    assert!("nope".parse::<DecodeMode>().is_err());
}

#[test]
fn count_head_augments_only_clean_mixtures() {
    let mut c = tiny_config();
    c.tch.augment_copies = 2;
    let model = MtModel::new(c, 3).unwrap();
    let data = generate_split(&DatasetManifest::with_counts(6, 4, 0, 0), Split::Train).unwrap();
    let clean: Vec<&MixtureSample> = data.iter().filter(|s| s.condition == Condition::Clean).collect();
    assert!(!clean.is_empty() && clean.len() < data.len());

    let set = train::tch_training_set(&model, &data).unwrap();
    assert_eq!(set.len(), data.len() + 2 * clean.len());
    for (k, (f, count)) in set[data.len()..].iter().enumerate() {
        let src = clean[k % clean.len()];
        assert_eq!(*count, src.talker_count);
        assert_eq!(f.shape(), src.features.shape());
        let rms = (f.data().iter().zip(src.features.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f.data().len() as f64).sqrt();
        assert!((0.05..0.2).contains(&rms), "noise rms {rms}");
    }
    assert_eq!(set, train::tch_training_set(&model, &data).unwrap());

    let mut off = model.clone();
    off.config.tch.augment_copies = 0;
    assert_eq!(train::tch_training_set(&off, &data).unwrap().len(), data.len());
}
