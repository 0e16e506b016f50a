mod common;

use av2vec::corruption::ModalitySelection;
use av2vec::synthdata::{build_eval_sets, EVAL_SNR_LEVELS};
use av2vec::trainkit::{
    decode_checkpoint, encode_checkpoint, evaluate, finetune_probe, lr_at, pretrain, read_metrics, Checkpoint,
    Condition, FinetuneConfig, LrSchedule, MetricsWriter, Pretrainer, ProbeModel, TrainState,
};
use av2vec::{model, Error};
use common::{fixture, tiny_config};

#[test]
fn resume_midway_is_bit_exact() {
    let ((a, ma), (b, mb)) = common::resume_pair(&tiny_config(), 100, 50);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert_eq!(ma.len(), 100);
    assert_eq!(mb[50].step, 51);
}

#[test]
fn checkpoint_bytes_are_stable() {
    let fx = fixture(tiny_config());
    let pc = fx.cfg.pretrain_config();
    let trainer = Pretrainer::new(&pc, &fx.train, None, &fx.bank).unwrap();
    let mut s = TrainState::init(&pc);
    trainer.step(&mut s).unwrap();
    let bytes = encode_checkpoint(&Checkpoint::from_state(&s, &pc));
    let p = std::path::Path::new("mem");
    let again = encode_checkpoint(&decode_checkpoint(&bytes, p).unwrap());
    assert_eq!(bytes, again);
    assert_eq!(decode_checkpoint(&bytes, p).unwrap().into_state(&pc).unwrap(), s);

    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let e = decode_checkpoint(&bytes[..cut], p).unwrap_err();
        assert!(matches!(e, Error::CorruptFile { .. }), "cut {cut}: {e}");
    }
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad, p), Err(Error::Version { .. })));
}

#[test]
fn checkpoint_rejects_mismatched_model() {
    let fx = fixture(tiny_config());
    let pc = fx.cfg.pretrain_config();
    let ckpt = Checkpoint::from_state(&TrainState::init(&pc), &pc);
    let mut other = fx.cfg.clone();
    other.encoder.d_model = 8;
    other.encoder.ffn_dim = 12;
    assert!(matches!(ckpt.clone().into_state(&other.pretrain_config()), Err(Error::Config(_))));
    let mut reseeded = fx.cfg.clone();
    reseeded.seed += 1;
    assert!(matches!(ckpt.into_state(&reseeded.pretrain_config()), Err(Error::Config(_))));
}

#[test]
fn zero_updates_returns_initialisation() {
    let mut cfg = tiny_config();
    cfg.train.total_updates = 0;
    let fx = fixture(cfg.clone());
    let pc = cfg.pretrain_config();
    let (state, metrics) = pretrain(&pc, &fx.train, None, &fx.bank).unwrap();
    assert!(metrics.is_empty());
    assert_eq!(state, TrainState::init(&pc));
}

#[test]
fn metrics_stream_is_deterministic_and_roundtrips() {
    let fx = fixture(tiny_config());
    let pc = fx.cfg.pretrain_config();
    let (_, a) = pretrain(&pc, &fx.train, None, &fx.bank).unwrap();
    let (_, b) = pretrain(&pc, &fx.train, None, &fx.bank).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|m| m.loss_mlm.is_none() && m.loss_reg.is_finite() && m.masked_frames > 0));
    assert_eq!(a.iter().map(|m| m.step).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    for m in &a {
        assert_eq!(m.lr, lr_at(m.step, &pc.train.schedule()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let mut w = MetricsWriter::create(&path).unwrap();
    for m in &a {
        w.write(m).unwrap();
    }
    drop(w);
    assert_eq!(read_metrics(&path).unwrap(), a);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(!text.contains("loss_mlm"));
    // Resuming at step 5 truncates the later records.
    let mut w = MetricsWriter::resume(&path, 5).unwrap();
    w.write(&a[5]).unwrap();
    drop(w);
    assert_eq!(read_metrics(&path).unwrap(), a[..6].to_vec());
}

#[test]
fn mlm_metrics_carry_both_losses() {
    let mut cfg = tiny_config();
    cfg.mode = av2vec::config::Mode::Av2vecMlm;
    let fx = fixture(cfg.clone());
    let pc = cfg.pretrain_config();
    assert!(matches!(Pretrainer::new(&pc, &fx.train, None, &fx.bank), Err(Error::Config(_))));
    let targets = common::fake_targets(&fx.train, 4);
    let (_, m) = pretrain(&pc, &fx.train, Some(&targets), &fx.bank).unwrap();
    for r in &m {
        let mlm = r.loss_mlm.unwrap();
        assert!(mlm.is_finite());
        assert!((r.loss_total - (r.loss_reg + mlm)).abs() < 1e-12);
    }
    let mut misaligned = targets.clone();
    misaligned[0].labels.pop();
    assert!(Pretrainer::new(&pc, &fx.train, Some(&misaligned), &fx.bank).is_err());
    let mut wrong_k = targets;
    wrong_k.iter_mut().for_each(|t| t.k = 5);
    assert!(Pretrainer::new(&pc, &fx.train, Some(&wrong_k), &fx.bank).is_err());
}

#[test]
fn lr_schedule_reference_points() {
    let s = LrSchedule {
        peak_lr: 5e-4,
        total_updates: 100_000,
        warmup_frac: 0.03,
        constant_frac: 0.90,
        decay_frac: 0.07,
        final_lr_ratio: 0.05,
    };
    assert!((lr_at(3000, &s) - 5e-4).abs() < 1e-18);
    assert!((lr_at(1500, &s) - 2.5e-4).abs() < 1e-18);
    assert!((lr_at(100_000, &s) - 2.5e-5).abs() < 1e-15);
    assert_eq!(lr_at(0, &s), 0.0);
}

fn probe_fixture(freeze: u64, total: u64) -> (common::Fixture, ProbeModel, FinetuneConfig) {
    let fx = fixture(tiny_config());
    let mcfg = fx.cfg.model_config();
    let enc = model::init_student(&mcfg, &mut av2vec::rng::derive(2, av2vec::rng::Stream::Init, &[]));
    let probe = ProbeModel::new(mcfg, &enc, fx.cfg.synth.num_latent_states, 3).unwrap();
    let cfg = FinetuneConfig { total_updates: total, freeze_steps: freeze, ..fx.cfg.finetune.clone() };
    (fx, probe, cfg)
}

#[test]
fn frozen_finetune_leaves_encoder_untouched() {
    let (fx, mut probe, cfg) = probe_fixture(5, 5);
    let before = probe.params.clone();
    finetune_probe(&mut probe, &fx.train, &fx.bank, &fx.cfg.corruption, &cfg, 1).unwrap();
    for (name, v) in probe.params.iter() {
        if name.starts_with("probe.") {
            assert_ne!(v, before.get(name).unwrap(), "{name} should train");
        } else {
            assert_eq!(v, before.get(name).unwrap(), "{name} should be frozen");
        }
    }
}

#[test]
fn encoder_trains_after_the_freeze() {
    let (fx, mut probe, cfg) = probe_fixture(2, 5);
    let before = probe.params.clone();
    let report = finetune_probe(&mut probe, &fx.train, &fx.bank, &fx.cfg.corruption, &cfg, 1).unwrap();
    assert_eq!(report.losses.len(), 5);
    assert_ne!(probe.params.get("encoder.in.w"), before.get("encoder.in.w"));
    let chance = 1.0 / fx.cfg.synth.num_latent_states as f64;
    assert!(report.train_accuracy >= 0.0 && chance > 0.0);
}

#[test]
fn finetune_rejects_misaligned_labels() {
    let (mut fx, mut probe, cfg) = probe_fixture(2, 3);
    fx.train[1].latent_labels.pop();
    assert!(finetune_probe(&mut probe, &fx.train, &fx.bank, &fx.cfg.corruption, &cfg, 1).is_err());
}

#[test]
fn evaluation_grid_shape_and_video_invariance() {
    let (fx, probe, _) = probe_fixture(1, 1);
    let sets = build_eval_sets(&fx.eval, &fx.bank, 4).unwrap();
    let table = evaluate(&probe, &sets, &Condition::ALL).unwrap();
    assert_eq!(table.rows.len(), 18);
    let v: Vec<_> = EVAL_SNR_LEVELS.iter().map(|&s| table.get(Condition::VideoOnly, s).unwrap().correct).collect();
    assert!(v.windows(2).all(|w| w[0] == w[1]));
    let csv = table.to_csv();
    assert!(csv.starts_with("condition,snr_db,frame_accuracy,n_frames\n"));
    assert_eq!(csv.lines().count(), 19);
    assert!(csv.contains(",inf,"));
    assert!(evaluate(&probe, &sets, &[]).unwrap().rows.is_empty());

    let p = probe.predict(&fx.eval[0].audio_clean, &fx.eval[0].video, ModalitySelection::Both).unwrap();
    assert_eq!(p.len(), fx.eval[0].num_frames());
}

#[test]
fn probe_checkpoint_roundtrip() {
    let (fx, probe, _) = probe_fixture(1, 1);
    let adam = av2vec::trainkit::Adam::new(Default::default(), &probe.params);
    let ckpt = probe.to_checkpoint(&adam, 3, 0);
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes, std::path::Path::new("p")).unwrap();
    assert_eq!(ProbeModel::from_checkpoint(back.clone(), &fx.cfg.model_config()).unwrap(), probe);
    let mut other = fx.cfg.clone();
    other.encoder.num_layers = 1;
    other.distill.avg_last_k = 1;
    assert!(ProbeModel::from_checkpoint(back, &other.model_config()).is_err());
}
