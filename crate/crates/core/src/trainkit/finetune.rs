use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{Checkpoint, CheckpointKind};
use crate::autograd::{Graph, ParamGrads, Var};
use crate::corruption::{self, CorruptionConfig, ModalitySelection};
use crate::error::{config_err, shape_err, Result};
use crate::model::{self, ModelConfig};
use crate::params::{accumulate, init_linear, Binder, ParamStore};
use crate::rng::{self, Stream};
use crate::synthdata::{mix_noise, FeatureSequence, SyntheticSample, VideoClip, TRAIN_SNR_LEVELS};
use crate::tensor::Matrix;

pub const PROBE_PREFIX: &str = "probe.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub total_updates: u64,
    /// Encoder and extractors stay fixed for the first `freeze_steps` updates.
    pub freeze_steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Train on noisy audio and single-modality inputs with the pretraining
    /// probabilities.
    pub augment: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { total_updates: 400, freeze_steps: 200, lr: 1e-3, batch_size: 8, augment: true }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze_steps > self.total_updates {
            return Err(config_err("freeze_steps must not exceed total_updates"));
        }
        if self.batch_size < 1 || !(self.lr > 0.0) {
            return Err(config_err("finetune needs batch_size >= 1 and lr > 0"));
        }
        Ok(())
    }
}

/// Encoder plus a linear frame classifier on its top output.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub model: ModelConfig,
    pub params: ParamStore,
}

impl ProbeModel {
    pub fn new(model: ModelConfig, encoder_params: &ParamStore, num_classes: usize, seed: u64) -> Result<Self> {
        model.check_params(encoder_params)?;
        let mut params = encoder_params.clone();
        let mut r = rng::derive_named(seed, Stream::Init, "probe", &[]);
        params.insert("probe.w", init_linear(model.encoder.d_model, num_classes, &mut r));
        params.insert("probe.b", Matrix::zeros(1, num_classes));
        Ok(Self { model, params })
    }

    /// Re-wraps stored parameters, checking the layout.
    pub fn from_params(model: ModelConfig, params: ParamStore) -> Result<Self> {
        let w = params.get("probe.w").ok_or_else(|| config_err("parameters lack a probe"))?;
        let body = params.without_prefix(PROBE_PREFIX);
        model.check_params(&body)?;
        if w.rows() != model.encoder.d_model {
            return Err(config_err("probe width does not match d_model"));
        }
        Ok(Self { model, params })
    }

    pub fn to_checkpoint(&self, adam: &Adam, seed: u64, step: u64) -> Checkpoint {
        let config = serde_json::to_string(&self.model).expect("config serialises");
        Checkpoint::params_only(CheckpointKind::Probe, config, self.params.clone(), adam, seed, step)
    }

    /// Restores a probe, requiring its stored model config to equal `expected`.
    pub fn from_checkpoint(ckpt: Checkpoint, expected: &ModelConfig) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Probe {
            return Err(config_err("not a probe checkpoint"));
        }
        let stored: ModelConfig =
            serde_json::from_str(&ckpt.config).map_err(|e| config_err(format!("probe config: {e}")))?;
        if &stored != expected {
            return Err(config_err("probe checkpoint was trained with a different model configuration"));
        }
        Self::from_params(stored, ckpt.student)
    }

    pub fn num_classes(&self) -> usize {
        self.params.get("probe.w").expect("probe present").cols()
    }

    fn logits(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        audio: &FeatureSequence,
        video: &VideoClip,
        sel: ModalitySelection,
    ) -> Result<Var> {
        let aligned = model::aligned_audio(audio, video, self.model.video_rate_hz)?;
        let out = model::clean_forward(g, b, &self.model, &aligned, video, sel)?;
        let w = b.get(g, "probe.w");
        let bias = b.get(g, "probe.b");
        let h = g.matmul(out.top, w);
        Ok(g.add_row(h, bias))
    }

    /// Arg-max class per frame (lowest index on ties).
    pub fn predict(&self, audio: &FeatureSequence, video: &VideoClip, sel: ModalitySelection) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let mut b = Binder::constant(&self.params);
        let l = self.logits(&mut g, &mut b, audio, video, sel)?;
        let m = g.value(l);
        Ok((0..m.rows())
            .map(|r| {
                let row = m.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }

    /// Fraction of frames labelled correctly on clean two-stream input.
    pub fn accuracy(&self, corpus: &[SyntheticSample]) -> Result<f64> {
        let counts = corpus
            .par_iter()
            .map(|s| {
                let p = self.predict(&s.audio_clean, &s.video, ModalitySelection::Both)?;
                Ok((p.iter().zip(&s.latent_labels).filter(|(a, b)| a == b).count(), p.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (c, n) = counts.iter().fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
        Ok(c as f64 / n.max(1) as f64)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    /// Mean per-frame cross-entropy of each update.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub adam: Adam,
}

/// Trains a frame classifier on latent labels: probe-only for the first
/// `freeze_steps` updates, then jointly with the encoder.
pub fn finetune_probe(
    probe: &mut ProbeModel,
    corpus: &[SyntheticSample],
    noise_bank: &[FeatureSequence],
    corruption_cfg: &CorruptionConfig,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(config_err("finetuning corpus is empty"));
    }
    let k = probe.num_classes();
    for s in corpus {
        if s.latent_labels.len() != s.video.len() {
            return Err(shape_err(format!(
                "`{}`: {} labels for {} frames",
                s.utterance_id,
                s.latent_labels.len(),
                s.video.len()
            )));
        }
        if s.latent_labels.iter().any(|&l| l >= k) {
            return Err(shape_err(format!("`{}` has labels outside the {k} probe classes", s.utterance_id)));
        }
    }
    let augment = cfg.augment && !noise_bank.is_empty();
    let mut adam = Adam::new(AdamConfig::default(), &probe.params);
    let n = corpus.len() as u64;
    let b = cfg.batch_size as u64;
    let mut losses = Vec::with_capacity(cfg.total_updates as usize);
    for step in 0..cfg.total_updates {
        let frozen = step < cfg.freeze_steps;
        let batch: Vec<usize> = (0..b)
            .map(|j| {
                let pos = step * b + j;
                let mut perm: Vec<usize> = (0..corpus.len()).collect();
                perm.shuffle(&mut rng::derive_named(seed, Stream::Shuffle, "finetune", &[pos / n]));
                perm[(pos % n) as usize]
            })
            .collect();
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let s = &corpus[idx];
                let mut r = rng::derive_named(seed, Stream::Dropout, "finetune", &[step, slot as u64]);
                let (audio, sel) = if augment {
                    let audio = if corruption::sample_noise_decision(corruption_cfg.p_noise, &mut r) {
                        let snr = TRAIN_SNR_LEVELS[r.random_range(0..TRAIN_SNR_LEVELS.len())];
                        let clip = &noise_bank[r.random_range(0..noise_bank.len())];
                        mix_noise(&s.audio_clean, clip, snr, &mut r)?
                    } else {
                        s.audio_clean.clone()
                    };
                    (audio, corruption::sample_modality_dropout(corruption_cfg.p_m, corruption_cfg.p_a, &mut r))
                } else {
                    (s.audio_clean.clone(), ModalitySelection::Both)
                };
                let mut g = Graph::new();
                let mut binder = Binder::tracked(&probe.params);
                if frozen {
                    for p in ["audio.", "video.", "mask.", "encoder.", "head."] {
                        binder = binder.freeze_prefix(p);
                    }
                }
                let logits = probe.logits(&mut g, &mut binder, &audio, &s.video, sel)?;
                let all: Vec<usize> = (0..s.num_frames()).collect();
                let loss = g.masked_ce(logits, &s.latent_labels, &all);
                Ok((g.backward(loss, probe.params.len()), g.value(loss).item(), s.num_frames()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads: ParamGrads = vec![None; probe.params.len()];
        let (mut total, mut frames) = (0.0, 0usize);
        for (gr, l, f) in results {
            accumulate(&mut grads, gr);
            total += l;
            frames += f;
        }
        for g in grads.iter_mut().flatten() {
            g.scale_assign(1.0 / frames as f64);
        }
        adam.step(&mut probe.params, &grads, cfg.lr);
        losses.push(total / frames as f64);
    }
    Ok(FinetuneReport { losses, train_accuracy: probe.accuracy(corpus)?, adam })
}
