use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::schedule::{lr_at, LrSchedule};
use crate::autograd::{Graph, ParamGrads, Var};
use crate::cluster::DiscreteTargetSet;
use crate::corruption::{self, CorruptionConfig, ModalitySelection};
use crate::distill::{self, DistillConfig, DistillTargets, TeacherState};
use crate::error::{config_err, Error, Result};
use crate::model::{self, Corruption, ModelConfig};
use crate::params::{accumulate, Binder, ParamStore};
use crate::rng::{self, Stream};
use crate::synthdata::{mix_noise, FeatureSequence, SyntheticSample, TRAIN_SNR_LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_updates: u64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub constant_frac: f64,
    pub decay_frac: f64,
    pub final_lr_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Save a checkpoint every this many updates; 0 keeps only the last one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_updates: 2000,
            peak_lr: 5e-4,
            warmup_frac: 0.03,
            constant_frac: 0.90,
            decay_frac: 0.07,
            final_lr_ratio: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            total_updates: self.total_updates,
            warmup_frac: self.warmup_frac,
            constant_frac: self.constant_frac,
            decay_frac: self.decay_frac,
            final_lr_ratio: self.final_lr_ratio,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(config_err("batch_size must be >= 1"));
        }
        let a = self.adam();
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(config_err("Adam needs betas in [0, 1) and eps > 0"));
        }
        self.schedule().validate()
    }
}

/// Everything one pretraining run depends on besides its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub corruption: CorruptionConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corruption.validate()?;
        self.distill.validate(self.model.encoder.num_layers)?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: TeacherState,
    pub adam: Adam,
    /// Completed optimizer updates.
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &PretrainConfig) -> Self {
        let mut rng = rng::derive(cfg.seed, Stream::Init, &[]);
        let student = model::init_student(&cfg.model, &mut rng);
        let teacher = TeacherState::from_student(&student);
        let adam = Adam::new(cfg.train.adam(), &student);
        Self { student, teacher, adam, step: 0 }
    }
}

/// One record of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Per-masked-frame mean of the regression loss over the batch.
    pub loss_reg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mlm: Option<f64>,
    pub loss_total: f64,
    pub lr: f64,
    pub lambda: f64,
    pub target_std: f64,
    pub masked_frames: usize,
}

/// Per-sample randomness and corruption decisions, exposed for inspection.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub corpus_index: usize,
    pub noisy: bool,
    pub snr_db: Option<f64>,
    pub corruption: Corruption,
    pub teacher_selection: ModalitySelection,
}

/// A per-sample loss graph.
pub struct StudentLoss {
    pub graph: Graph,
    pub reg: Var,
    pub mlm: Option<Var>,
    pub total: Var,
}

struct SampleResult {
    grads: ParamGrads,
    reg: f64,
    mlm: Option<f64>,
    masked: usize,
    target_std: f64,
}

/// Corpus, optional MLM targets and noise bank bound to a configuration.
pub struct Pretrainer<'a> {
    cfg: &'a PretrainConfig,
    corpus: &'a [SyntheticSample],
    targets: Option<&'a [DiscreteTargetSet]>,
    noise_bank: &'a [FeatureSequence],
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        cfg: &'a PretrainConfig,
        corpus: &'a [SyntheticSample],
        targets: Option<&'a [DiscreteTargetSet]>,
        noise_bank: &'a [FeatureSequence],
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(config_err("pretraining corpus is empty"));
        }
        if cfg.corruption.p_noise > 0.0 && noise_bank.is_empty() {
            return Err(config_err("p_noise > 0 needs a non-empty noise bank"));
        }
        match (cfg.model.mlm_enabled, targets) {
            (true, None) => {
                return Err(config_err("MLM pretraining needs discrete targets; run clustering first"));
            }
            (true, Some(t)) => {
                if t.len() != corpus.len() {
                    return Err(config_err(format!("{} target sets for {} utterances", t.len(), corpus.len())));
                }
                for (ts, s) in t.iter().zip(corpus) {
                    if ts.utterance_id != s.utterance_id || ts.labels.len() != s.num_frames() {
                        return Err(config_err(format!("targets misaligned for `{}`", s.utterance_id)));
                    }
                    if ts.k != cfg.model.encoder.num_clusters {
                        return Err(config_err(format!(
                            "targets use K = {}, encoder.num_clusters = {}",
                            ts.k, cfg.model.encoder.num_clusters
                        )));
                    }
                }
            }
            (false, _) => {}
        }
        Ok(Self { cfg, corpus, targets: if cfg.model.mlm_enabled { targets } else { None }, noise_bank })
    }

    pub fn config(&self) -> &PretrainConfig {
        self.cfg
    }

    /// Corpus indices of the batch consumed by update `step` (0-based). Each
    /// epoch is an independent seeded permutation.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.corpus.len() as u64;
        let b = self.cfg.train.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..b)
            .map(|j| {
                let pos = step * b + j;
                let epoch = pos / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.corpus.len()).collect();
                    perm.shuffle(&mut rng::derive(self.cfg.seed, Stream::Shuffle, &[epoch]));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[(pos % n) as usize]
            })
            .collect()
    }

    /// Corruption decisions for slot `slot` of update `step`.
    pub fn plan(&self, step: u64, slot: usize, corpus_index: usize) -> SamplePlan {
        let c = &self.cfg.corruption;
        let keys = [step, slot as u64];
        let t = self.corpus[corpus_index].num_frames();
        let mut noise_rng = rng::derive(self.cfg.seed, Stream::Noise, &keys);
        let noisy = corruption::sample_noise_decision(c.p_noise, &mut noise_rng);
        let snr_db = noisy.then(|| TRAIN_SNR_LEVELS[noise_rng.random_range(0..TRAIN_SNR_LEVELS.len())]);
        let mask_audio = corruption::sample_span_mask(
            t,
            &c.audio_policy(),
            &mut rng::derive(self.cfg.seed, Stream::MaskAudio, &keys),
        );
        let mask_video = if c.tied_masks {
            mask_audio.clone()
        } else {
            corruption::sample_span_mask(
                t,
                &c.video_policy(),
                &mut rng::derive(self.cfg.seed, Stream::MaskVideo, &keys),
            )
        };
        let selection =
            corruption::sample_modality_dropout(c.p_m, c.p_a, &mut rng::derive(self.cfg.seed, Stream::Dropout, &keys));
        SamplePlan {
            corpus_index,
            noisy,
            snr_db,
            corruption: Corruption { mask_audio, mask_video, selection },
            teacher_selection: self.cfg.distill.teacher_dropout_mode.teacher_selection(selection),
        }
    }

    /// Student audio input: the clean track, or a noisy mix when the plan says so.
    fn student_audio(&self, step: u64, slot: usize, plan: &SamplePlan) -> Result<FeatureSequence> {
        let s = &self.corpus[plan.corpus_index];
        match plan.snr_db {
            None => Ok(s.audio_clean.clone()),
            Some(snr) => {
                let mut r = rng::derive_named(self.cfg.seed, Stream::Noise, "mix", &[step, slot as u64]);
                let clip = &self.noise_bank[r.random_range(0..self.noise_bank.len())];
                mix_noise(&s.audio_clean, clip, snr, &mut r)
            }
        }
    }

    /// Teacher targets for one planned sample.
    pub fn targets_for(&self, state: &TrainState, plan: &SamplePlan) -> Result<DistillTargets> {
        let s = &self.corpus[plan.corpus_index];
        let m = &self.cfg.model;
        let clean = model::aligned_audio(&s.audio_clean, &s.video, m.video_rate_hz)?;
        let layers = distill::teacher_forward(
            m,
            &state.student,
            &state.teacher,
            &clean,
            &s.video,
            self.cfg.distill.teacher_dropout_mode,
            plan.corruption.selection,
        )?;
        let y = distill::make_targets(&layers, self.cfg.distill.avg_last_k, self.cfg.distill.instance_norm_eps)?;
        Ok(DistillTargets { y, valid: plan.corruption.mask_audio.union(&plan.corruption.mask_video) })
    }

    /// Student forward and `L_MT` on a graph whose leaves are `student`'s
    /// parameters, against fixed targets.
    pub fn student_loss(
        &self,
        student: &ParamStore,
        step: u64,
        slot: usize,
        plan: &SamplePlan,
        targets: &DistillTargets,
    ) -> Result<StudentLoss> {
        let s = &self.corpus[plan.corpus_index];
        let m = &self.cfg.model;
        let audio = model::aligned_audio(&self.student_audio(step, slot, plan)?, &s.video, m.video_rate_hz)?;
        let mut g = Graph::new();
        let mut b = Binder::tracked(student);
        let out = model::student_forward(&mut g, &mut b, m, &audio, &s.video, &plan.corruption)?;
        let reg = distill::loss_reg(&mut g, out.regression, targets)?;
        let mlm = match (out.mlm_logits, self.targets) {
            (Some(logits), Some(t)) => {
                Some(distill::loss_mlm(&mut g, logits, &t[plan.corpus_index].labels, &targets.valid)?)
            }
            _ => None,
        };
        let total = distill::loss_total(&mut g, reg, mlm, &self.cfg.distill);
        Ok(StudentLoss { graph: g, reg, mlm, total })
    }

    fn run_sample(&self, state: &TrainState, step: u64, slot: usize, plan: &SamplePlan) -> Result<SampleResult> {
        let targets = self.targets_for(state, plan)?;
        let n = targets.y.len() as f64;
        let mean = targets.y.sum() / n;
        let target_std = (targets.y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let l = self.student_loss(&state.student, step, slot, plan, &targets)?;
        Ok(SampleResult {
            grads: l.graph.backward(l.total, state.student.len()),
            reg: l.graph.value(l.reg).item(),
            mlm: l.mlm.map(|v| l.graph.value(v).item()),
            masked: targets.valid.len(),
            target_std,
        })
    }

    /// Mean batch gradient (normalised by masked frames) without updating.
    pub fn batch_gradients(&self, state: &TrainState) -> Result<(ParamGrads, StepMetrics)> {
        let step = state.step;
        let plans: Vec<SamplePlan> =
            self.batch_indices(step).into_iter().enumerate().map(|(slot, idx)| self.plan(step, slot, idx)).collect();
        let results = plans
            .par_iter()
            .enumerate()
            .map(|(slot, p)| self.run_sample(state, step, slot, p))
            .collect::<Result<Vec<_>>>()?;

        let mut grads: ParamGrads = vec![None; state.student.len()];
        let (mut reg, mut mlm, mut masked, mut std) = (0.0, 0.0, 0usize, 0.0);
        let batch = results.len() as f64;
        for r in results {
            reg += r.reg;
            mlm += r.mlm.unwrap_or(0.0);
            masked += r.masked;
            std += r.target_std;
            accumulate(&mut grads, r.grads);
        }
        let denom = masked.max(1) as f64;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(1.0 / denom);
        }
        let loss_reg = reg / denom;
        let loss_mlm = self.targets.map(|_| mlm / denom);
        let loss_total =
            self.cfg.distill.reg_weight * loss_reg + loss_mlm.map_or(0.0, |v| self.cfg.distill.mlm_weight * v);
        let metrics = StepMetrics {
            step: step + 1,
            loss_reg,
            loss_mlm,
            loss_total,
            lr: lr_at(step + 1, &self.cfg.train.schedule()),
            lambda: distill::lambda_at(state.teacher.update_step, &self.cfg.distill.schedule()),
            target_std: std / batch,
            masked_frames: masked,
        };
        if !loss_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                detail: format!("loss_reg = {loss_reg}, loss_mlm = {loss_mlm:?}, target_std = {}", metrics.target_std),
            });
        }
        Ok((grads, metrics))
    }

    /// Student update with Adam, then the EMA teacher update.
    pub fn step(&self, state: &mut TrainState) -> Result<StepMetrics> {
        self.step_with_lambda(state, None)
    }

    /// As [`Self::step`], optionally overriding the EMA coefficient.
    pub fn step_with_lambda(&self, state: &mut TrainState, lambda: Option<f64>) -> Result<StepMetrics> {
        let (grads, mut metrics) = self.batch_gradients(state)?;
        if let Some(l) = lambda {
            metrics.lambda = l;
        }
        state.adam.step(&mut state.student, &grads, metrics.lr);
        if !state.student.is_finite() {
            return Err(Error::NonFiniteLoss { step: metrics.step, detail: "student parameters diverged".into() });
        }
        state.teacher.ema_update(&state.student, metrics.lambda)?;
        state.step += 1;
        Ok(metrics)
    }

    /// Runs until `state.step == total_updates`, calling `on_step` after each update.
    pub fn run(
        &self,
        state: &mut TrainState,
        mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        while state.step < self.cfg.train.total_updates {
            let m = self.step(state)?;
            log::debug!("step {} loss_reg {:.4} lr {:.2e}", m.step, m.loss_reg, m.lr);
            on_step(state, &m)?;
        }
        Ok(())
    }
}

/// Fresh-initialised pretraining over the full schedule.
pub fn pretrain(
    cfg: &PretrainConfig,
    corpus: &[SyntheticSample],
    targets: Option<&[DiscreteTargetSet]>,
    noise_bank: &[FeatureSequence],
) -> Result<(TrainState, Vec<StepMetrics>)> {
    let trainer = Pretrainer::new(cfg, corpus, targets, noise_bank)?;
    let mut state = TrainState::init(cfg);
    let mut log = Vec::new();
    trainer.run(&mut state, |_, m| {
        log.push(m.clone());
        Ok(())
    })?;
    Ok((state, log))
}
