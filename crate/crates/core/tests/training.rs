use relcon::corpus::PreprocessConfig;
use relcon::encoder::EncoderConfig;
use relcon::pipeline::{prepare_synth, SynthData};
use relcon::synth::{generate, SynthSpec};
use relcon::tensor::{Checkpoint, Graph};
use relcon::training::*;
use relcon::Error;
use std::collections::HashSet;

fn data(n_relations: usize, per: usize) -> SynthData {
    let spec = SynthSpec {
        n_relations,
        instances_per_relation: per,
        vocab_size: 200,
        n_train_relations: n_relations,
        ..SynthSpec::default()
    };
    prepare_synth(&generate(&spec).unwrap(), 32).unwrap()
}

fn encoder(d: &SynthData) -> EncoderConfig {
    EncoderConfig {
        vocab_size: d.vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 32,
        max_seq_len: 32,
        ..EncoderConfig::default()
    }
}

fn pre() -> PreprocessConfig {
    PreprocessConfig {
        max_seq_len: 32,
        ..PreprocessConfig::default()
    }
}

fn train_cfg(batch_size: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        ..TrainConfig::default()
    }
}

fn collect(t: &mut Trainer, d: &SynthData, until: u64) -> Vec<TrainLogRecord> {
    let mut log = Vec::new();
    t.run(&d.train, Some(until), |_, r| {
        log.push(TrainLogRecord { wall_ms: 0.0, ..r.clone() });
        Ok(())
    })
    .unwrap();
    log
}

#[test]
fn every_sentence_once_per_epoch() {
    let d = data(4, 25);
    for sampler in [Sampler::Uniform, Sampler::ClassBalanced] {
        let cfg = TrainConfig { sampler, ..train_cfg(8) };
        for epoch in 0..3 {
            let batches = make_batches(&d.train, &cfg, epoch);
            let seen: Vec<usize> = batches.iter().flatten().copied().collect();
            assert_eq!(seen.len(), 100);
            assert_eq!(seen.iter().collect::<HashSet<_>>().len(), 100);
            assert!(batches.iter().all(|b| b.len() <= 8));
        }
    }
    let a = make_batches(&d.train, &train_cfg(8), 0);
    assert_eq!(a, make_batches(&d.train, &train_cfg(8), 0));
    assert_ne!(a, make_batches(&d.train, &train_cfg(8), 1));
}

#[test]
fn class_balanced_batches_mix_relations() {
    let d = data(4, 25);
    let cfg = TrainConfig {
        sampler: Sampler::ClassBalanced,
        ..train_cfg(8)
    };
    for b in make_batches(&d.train, &cfg, 0) {
        let rels: HashSet<&str> = b.iter().map(|&i| d.train.relations[i].as_str()).collect();
        assert_eq!(rels.len(), 4);
    }
}

#[test]
fn small_corpus_gives_one_short_batch() {
    let d = data(2, 3);
    let batches = make_batches(&d.train, &train_cfg(32), 0);
    assert_eq!(batches.len(), 1);
    assert_eq!(batches[0].len(), 6);
}

#[test]
fn batch_bookkeeping() {
    let d = data(4, 25);
    let idx: Vec<usize> = (0..20).collect();
    let b = prepare_batch(&d.train, &idx, &pre(), 0, 0).unwrap();
    assert_eq!(b.pairing.n(), 20);
    let distinct: HashSet<&str> = idx.iter().map(|&i| d.train.relations[i].as_str()).collect();
    assert_eq!(b.pairing.m(), distinct.len());
    assert_eq!(b.pairing.positives.iter().map(Vec::len).sum::<usize>(), 20);
    assert_eq!(b.labels.len(), b.pairing.m());
    // Same indices, same masks.
    assert_eq!(b, prepare_batch(&d.train, &idx, &pre(), 0, 0).unwrap());
}

#[test]
fn single_relation_batch_has_zero_sentence_loss() {
    let d = data(4, 25);
    let t = Trainer::new(encoder(&d), train_cfg(8), pre()).unwrap();
    let one: Vec<usize> = (0..100).filter(|&i| d.train.relations[i] == "R01").take(8).collect();
    let b = prepare_batch(&d.train, &one, &pre(), 0, 0).unwrap();
    assert_eq!(b.pairing.m(), 1);
    let mut g = Graph::new();
    let terms = build_loss(&mut g, &t.model.store, &t.model, &b, ObjectiveMode::Full, false).unwrap();
    assert!(g.value(terms.scl_s).item().abs() < 1e-12);
}

#[test]
fn mode_algebra() {
    let d = data(4, 25);
    let t = Trainer::new(encoder(&d), train_cfg(16), pre()).unwrap();
    let b = prepare_batch(&d.train, &(0..100).step_by(6).collect::<Vec<_>>(), &pre(), 0, 0).unwrap();
    let value = |mode| {
        let mut g = Graph::new();
        let terms = build_loss(&mut g, &t.model.store, &t.model, &b, mode, false).unwrap();
        let v = |x| g.value(x).item();
        (v(terms.objective), v(terms.scl_s), v(terms.scl_l), v(terms.scl), v(terms.mlm))
    };
    let (full, scl_s, scl_l, scl, mlm) = value(ObjectiveMode::Full);
    let (s_only, ..) = value(ObjectiveMode::SentenceAnchoredOnly);
    let (l_only, ..) = value(ObjectiveMode::LabelAnchoredOnly);
    let (no_mlm, ..) = value(ObjectiveMode::NoMlm);
    assert!(mlm > 0.0 && scl_s > 0.0 && scl_l > 0.0);
    assert!((scl - (scl_s + scl_l)).abs() < 1e-12);
    assert!((full - (0.5 * scl + mlm)).abs() < 1e-12);
    assert!((s_only - (0.5 * scl_s + mlm)).abs() < 1e-12);
    assert!((l_only - (0.5 * scl_l + mlm)).abs() < 1e-12);
    assert!((no_mlm - 0.5 * scl).abs() < 1e-12);
    assert!((full - (s_only + l_only - mlm)).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = data(4, 25);
    let cfg = TrainConfig { lr: 0.0, ..train_cfg(16) };
    let mut t = Trainer::new(encoder(&d), cfg, pre()).unwrap();
    let before = t.model.store.clone();
    let log = collect(&mut t, &d, 3);
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    for ((_, a), (_, b)) in before.iter().zip(t.model.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn same_seed_same_log() {
    let d = data(4, 25);
    let run = |seed| {
        let cfg = TrainConfig { rng_seed: seed, ..train_cfg(16) };
        let mut t = Trainer::new(encoder(&d), cfg, pre()).unwrap();
        collect(&mut t, &d, 12)
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
    let steps: Vec<u64> = a.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=12).collect::<Vec<_>>());
    // 100 sentences in batches of 16: seven per epoch.
    assert_eq!(a[6].epoch, 0);
    assert_eq!(a[7].epoch, 1);
    assert_eq!(a[7].batch, 0);
}

#[test]
fn nan_aborts_with_batch_id() {
    let d = data(4, 25);
    let mut t = Trainer::new(encoder(&d), train_cfg(16), pre()).unwrap();
    collect(&mut t, &d, 2);
    let id = t.model.store.id("sentence_encoder.layer0.attn.wq").unwrap();
    t.model.store.value_mut(id).data_mut()[0] = f64::NAN;
    let err = t.run(&d.train, Some(5), |_, _| Ok(())).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("step 3") && msg.contains("batch 2"), "{msg}");
}

#[test]
fn restore_continues_bit_identically() {
    let d = data(4, 25);
    let mut straight = Trainer::new(encoder(&d), train_cfg(16), pre()).unwrap();
    let full = collect(&mut straight, &d, 110);

    let mut first = Trainer::new(encoder(&d), train_cfg(16), pre()).unwrap();
    collect(&mut first, &d, 100);
    let bytes = first.checkpoint(&d.vocab).unwrap().to_bytes().unwrap();
    let (mut resumed, vocab) = Trainer::restore(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(vocab, d.vocab);
    assert_eq!(resumed.step(), 100);
    assert_eq!(resumed.model.temperature_value(), first.model.temperature_value());
    assert_eq!(resumed.optimizer.first_moments(), first.optimizer.first_moments());
    assert_eq!(resumed.optimizer.second_moments(), first.optimizer.second_moments());
    let tail = collect(&mut resumed, &d, 110);
    assert_eq!(tail, full[100..]);
    for ((_, a), (_, b)) in straight.model.store.iter().zip(resumed.model.store.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn restore_with_other_width_names_shapes() {
    let d = data(4, 25);
    let t = Trainer::new(encoder(&d), train_cfg(16), pre()).unwrap();
    let mut ck = t.checkpoint(&d.vocab).unwrap();
    ck.meta["encoder"]["d_model"] = 32.into();
    let err = Trainer::restore(&ck).unwrap_err();
    assert!(matches!(err, Error::Shape { .. } | Error::Checkpoint(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("16") && msg.contains("32"), "{msg}");
}

#[test]
fn temperature_never_below_floor() {
    let d = data(4, 25);
    let cfg = TrainConfig { lr: 0.05, ..train_cfg(16) };
    let mut t = Trainer::new(encoder(&d), cfg, pre()).unwrap();
    let log = collect(&mut t, &d, 40);
    assert!(log.iter().all(|r| r.tau >= 0.01));
    // A value under the floor is raised by the step's clamp.
    let cfg = TrainConfig { lr: 0.0, ..train_cfg(16) };
    let mut t = Trainer::new(encoder(&d), cfg, pre()).unwrap();
    let tau = t.model.temperature;
    t.model.store.value_mut(tau).data_mut()[0] = 0.004;
    let log = collect(&mut t, &d, 1);
    assert_eq!(log[0].tau, 0.01);
}

#[test]
fn contrastive_loss_halves_in_200_steps() {
    let d = data(4, 50);
    let enc = EncoderConfig {
        vocab_size: d.vocab.len(),
        max_seq_len: 32,
        ..EncoderConfig::default()
    };
    let mut t = Trainer::new(enc, train_cfg(16), pre()).unwrap();
    let log = collect(&mut t, &d, 200);
    let (first, last) = (log[0].scl, log[199].scl);
    assert!(last <= 0.5 * first, "scl {first} -> {last}");
}

#[test]
fn invalid_configs_rejected() {
    let d = data(2, 5);
    assert!(Trainer::new(encoder(&d), train_cfg(1), pre()).is_err());
    let long = PreprocessConfig { max_seq_len: 64, ..pre() };
    assert!(Trainer::new(encoder(&d), train_cfg(8), long).is_err());
}
