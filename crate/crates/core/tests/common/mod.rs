#![allow(dead_code)]

use av2vec::config::RunConfig;
use av2vec::synthdata::{FeatureSequence, SyntheticSample};

pub const TOY_CONFIG: &str = include_str!("../../../../configs/toy.toml");

/// Small enough that a handful of updates runs in well under a second.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 11;
    c.synth.num_utterances = 6;
    c.synth.frames_min = 10;
    c.synth.frames_max = 14;
    c.synth.video_height = 4;
    c.synth.video_width = 4;
    c.synth.seed = 5;
    c.data.eval_utterances = 3;
    c.data.noise_bank_size = 3;
    c.features.d_feat = 8;
    c.features.conv_channels = 2;
    c.encoder.num_layers = 2;
    c.encoder.d_model = 16;
    c.encoder.ffn_dim = 24;
    c.encoder.num_heads = 2;
    c.encoder.num_clusters = 4;
    c.cluster.k = 4;
    c.distill.avg_last_k = 2;
    c.distill.ema_n = 10;
    c.train.batch_size = 3;
    c.train.total_updates = 8;
    c.train.peak_lr = 1e-3;
    c.finetune.total_updates = 6;
    c.finetune.freeze_steps = 3;
    c.finetune.batch_size = 3;
    c.validate().unwrap();
    c
}

pub struct Fixture {
    pub cfg: RunConfig,
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
    pub bank: Vec<FeatureSequence>,
}

pub fn fixture(cfg: RunConfig) -> Fixture {
    let (train, eval) = cfg.generate_corpora().unwrap();
    let bank = cfg.noise_bank();
    Fixture { cfg, train, eval, bank }
}

use av2vec::cluster::DiscreteTargetSet;
use av2vec::config::Mode;
use av2vec::corruption::ModalitySelection;
use av2vec::params::ParamStore;
use av2vec::trainkit::{Pretrainer, TrainState};

/// Config for the finite-difference check: 2 layers, d_model 16, d_feat 8,
/// both heads present.
pub fn gradcheck_config() -> RunConfig {
    let mut c = tiny_config();
    c.mode = Mode::Av2vecMlm;
    c.synth.num_utterances = 2;
    c.synth.frames_min = 8;
    c.synth.frames_max = 8;
    c.corruption.p_noise = 1.0;
    c.validate().unwrap();
    c
}

/// Deterministic pseudo-labels for MLM runs that skip clustering.
pub fn fake_targets(train: &[SyntheticSample], k: usize) -> Vec<DiscreteTargetSet> {
    train
        .iter()
        .map(|s| DiscreteTargetSet {
            utterance_id: s.utterance_id.clone(),
            labels: (0..s.num_frames()).map(|t| (t * 7 + s.num_frames()) % k).collect(),
            k,
        })
        .collect()
}

pub struct GroupError {
    pub group: String,
    pub scalars: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub rel: f64,
}

/// Analytic vs central-difference gradients of `L_MT` for one sample with
/// both streams kept, grouped by parameter-name prefix.
pub fn gradient_check(cfg: &RunConfig, h: f64) -> Vec<GroupError> {
    let fx = fixture(cfg.clone());
    let pc = cfg.pretrain_config();
    let targets = fake_targets(&fx.train, cfg.encoder.num_clusters);
    let trainer = Pretrainer::new(&pc, &fx.train, Some(&targets), &fx.bank).unwrap();
    let mut state = TrainState::init(&pc);
    // Move off the initialisation so no parameter sits at a special value.
    for (_, m) in state.student.iter_mut() {
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i as f64 * 1.618).sin());
        }
    }
    let mut plan = trainer.plan(0, 0, 0);
    plan.corruption.selection = ModalitySelection::Both;
    let y = trainer.targets_for(&state, &plan).unwrap();

    let loss_at = |p: &ParamStore| {
        let l = trainer.student_loss(p, 0, 0, &plan, &y).unwrap();
        l.graph.value(l.total).item()
    };
    let l = trainer.student_loss(&state.student, 0, 0, &plan, &y).unwrap();
    let grads = l.graph.backward(l.total, state.student.len());

    let groups = ["audio.", "video.", "mask.", "encoder.", "head.reg.", "head.mlm."];
    let mut acc: Vec<(f64, f64, f64, usize)> = vec![(0.0, 0.0, 0.0, 0); groups.len()];
    let names: Vec<String> = state.student.names().map(str::to_string).collect();
    let mut p = state.student.clone();
    for (slot, name) in names.iter().enumerate() {
        let gi = groups.iter().position(|g| name.starts_with(g)).expect("every tensor belongs to a group");
        let n = p.by_slot(slot).len();
        for i in 0..n {
            let orig = p.by_slot(slot).data()[i];
            p.by_slot_mut(slot).data_mut()[i] = orig + h;
            let lp = loss_at(&p);
            p.by_slot_mut(slot).data_mut()[i] = orig - h;
            let lm = loss_at(&p);
            p.by_slot_mut(slot).data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads[slot].as_ref().map_or(0.0, |g| g.data()[i]);
            let e = &mut acc[gi];
            e.0 += (ana - num) * (ana - num);
            e.1 += ana * ana;
            e.2 += num * num;
            e.3 += 1;
        }
    }
    groups
        .iter()
        .zip(acc)
        .map(|(g, (d, a, n, c))| GroupError {
            group: g.trim_end_matches('.').to_string(),
            scalars: c,
            rel: d.sqrt() / a.sqrt().max(n.sqrt()).max(1e-300),
        })
        .collect()
}

use av2vec::distill::TeacherState;

/// Student extractors and heads with the teacher's encoder body swapped in:
/// what the teacher path should be evaluating.
pub fn merged_teacher_store(student: &ParamStore, teacher: &TeacherState) -> ParamStore {
    let mut m = student.without_prefix("encoder.");
    for (name, v) in teacher.params.iter() {
        m.insert(name, v.clone());
    }
    m
}

/// Runs `steps` updates, checking the EMA formula after each one; returns the
/// largest deviation seen over all teacher tensors.
pub fn max_ema_deviation(trainer: &Pretrainer, state: &mut TrainState, steps: usize) -> f64 {
    let sched = trainer.config().distill.schedule();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let prev = state.teacher.clone();
        let lambda = av2vec::distill::lambda_at(prev.update_step, &sched);
        trainer.step(state).unwrap();
        assert_eq!(state.teacher.update_step, prev.update_step + 1);
        for (name, theta) in state.teacher.params.iter() {
            let before = prev.params.get(name).unwrap();
            let phi = state.student.get(name).unwrap();
            for ((t, b), p) in theta.data().iter().zip(before.data()).zip(phi.data()) {
                worst = worst.max((t - (lambda * b + (1.0 - lambda) * p)).abs());
            }
        }
    }
    worst
}

use av2vec::Matrix;
use rand::Rng;

/// Two well-separated blobs, `n` points in total, `d` dims.
pub fn two_blob_fixture(seed: u64, n: usize, d: usize) -> Matrix {
    let mut r = av2vec::rng::derive(seed, av2vec::rng::Stream::Corpus, &[n as u64, d as u64]);
    let split = r.random_range(1..n);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let centre = if i < split { 0.0 } else { 10.0 };
        for _ in 0..d {
            data.push(centre + r.random_range(-0.5..0.5));
        }
    }
    // Interleave so blob membership is not sorted by row.
    let mut rows: Vec<Vec<f64>> = data.chunks(d).map(<[f64]>::to_vec).collect();
    for i in (1..n).rev() {
        rows.swap(i, r.random_range(0..=i));
    }
    Matrix::from_rows(&rows)
}

/// Minimum 2-means objective over every non-trivial 2-partition, with means
/// and sums accumulated in row order.
pub fn exhaustive_two_partition_optimum(x: &Matrix) -> f64 {
    let n = x.rows();
    let d = x.cols();
    assert!(n <= 16);
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let label = |i: usize| ((mask >> i) & 1) as usize;
        let mut sums = [vec![0.0; d], vec![0.0; d]];
        let mut counts = [0usize; 2];
        for i in 0..n {
            counts[label(i)] += 1;
            for (s, v) in sums[label(i)].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..2 {
            let m = counts[c] as f64;
            sums[c].iter_mut().for_each(|s| *s /= m);
        }
        let obj: f64 =
            (0..n).map(|i| x.row(i).iter().zip(&sums[label(i)]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum();
        best = best.min(obj);
    }
    best
}

use av2vec::trainkit::{load_checkpoint, save_checkpoint, Checkpoint, StepMetrics};

/// Trains `total` updates straight through, and again with a save/load at
/// `split`; returns both final states and metric streams.
pub fn resume_pair(
    cfg: &RunConfig,
    total: u64,
    split: u64,
) -> ((TrainState, Vec<StepMetrics>), (TrainState, Vec<StepMetrics>)) {
    let mut cfg = cfg.clone();
    cfg.train.total_updates = total;
    let fx = fixture(cfg.clone());
    let pc = cfg.pretrain_config();
    let trainer = Pretrainer::new(&pc, &fx.train, None, &fx.bank).unwrap();

    let mut straight = TrainState::init(&pc);
    let mut m1 = Vec::new();
    trainer
        .run(&mut straight, |_, m| {
            m1.push(m.clone());
            Ok(())
        })
        .unwrap();

    let mut first = TrainState::init(&pc);
    let mut m2 = Vec::new();
    while first.step < split {
        m2.push(trainer.step(&mut first).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.av2c");
    save_checkpoint(&Checkpoint::from_state(&first, &pc), &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&path).unwrap().into_state(&pc).unwrap();
    trainer
        .run(&mut resumed, |_, m| {
            m2.push(m.clone());
            Ok(())
        })
        .unwrap();
    ((straight, m1), (resumed, m2))
}
