//! Student-side input corruption: noise decisions, span masking with
//! learned mask embeddings, and modality dropout.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};

/// Sorted, unique masked frame indices in `[0, T)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSet {
    indices: Vec<usize>,
}

impl MaskSet {
    pub fn new(indices: impl IntoIterator<Item = usize>, t: usize) -> Result<Self> {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&i| i >= t) {
            return Err(Error::Range(format!("mask index {bad} out of range for T = {t}")));
        }
        Ok(Self { indices: set.into_iter().collect() })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }

    pub fn union(&self, other: &MaskSet) -> MaskSet {
        let set: BTreeSet<usize> = self.indices.iter().chain(&other.indices).copied().collect();
        MaskSet { indices: set.into_iter().collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub mask_rate: f64,
    pub span_length: usize,
}

impl MaskPolicy {
    pub fn new(mask_rate: f64, span_length: usize) -> Result<Self> {
        let p = Self { mask_rate, span_length };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(config_err(format!("mask rate {} outside [0, 1]", self.mask_rate)));
        }
        if self.span_length < 1 {
            return Err(config_err("span length must be >= 1"));
        }
        Ok(())
    }

    /// Exact number of frames masked in a length-`t` sequence.
    pub fn target_count(&self, t: usize) -> usize {
        ((self.mask_rate * t as f64).round() as usize).min(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalitySelection {
    Both,
    AudioOnly,
    VideoOnly,
}

impl ModalitySelection {
    pub fn keeps_audio(self) -> bool {
        self != ModalitySelection::VideoOnly
    }

    pub fn keeps_video(self) -> bool {
        self != ModalitySelection::AudioOnly
    }
}

/// Corruption hyperparameters as they appear in the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub mask_rate_audio: f64,
    pub mask_rate_video: f64,
    pub span_len_audio: usize,
    pub span_len_video: usize,
    pub p_noise: f64,
    pub p_m: f64,
    pub p_a: f64,
    /// Reuse the audio mask for video (the inferior variant).
    pub tied_masks: bool,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mask_rate_audio: 0.8,
            mask_rate_video: 0.3,
            span_len_audio: 10,
            span_len_video: 5,
            p_noise: 0.25,
            p_m: 0.5,
            p_a: 0.5,
            tied_masks: false,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        self.audio_policy().validate()?;
        self.video_policy().validate()?;
        for (name, p) in [("p_noise", self.p_noise), ("p_m", self.p_m), ("p_a", self.p_a)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn audio_policy(&self) -> MaskPolicy {
        MaskPolicy { mask_rate: self.mask_rate_audio, span_length: self.span_len_audio }
    }

    pub fn video_policy(&self) -> MaskPolicy {
        MaskPolicy { mask_rate: self.mask_rate_video, span_length: self.span_len_video }
    }
}

pub fn sample_noise_decision(p_noise: f64, rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < p_noise
}

/// Span starts are drawn uniformly without replacement; spans are clipped at
/// the sequence end and the last span's tail is trimmed so exactly
/// `round(mask_rate · T)` frames are masked.
pub fn sample_span_mask(t: usize, policy: &MaskPolicy, rng: &mut impl Rng) -> MaskSet {
    let target = policy.target_count(t);
    if target == 0 {
        return MaskSet::empty();
    }
    let mut starts: Vec<usize> = (0..t).collect();
    starts.shuffle(rng);
    let mut set = BTreeSet::new();
    for s in starts {
        let mut added = Vec::new();
        for i in s..(s + policy.span_length).min(t) {
            if set.insert(i) {
                added.push(i);
            }
        }
        if set.len() >= target {
            while set.len() > target {
                let tail = added.pop().expect("overshoot only comes from this span");
                set.remove(&tail);
            }
            break;
        }
    }
    MaskSet { indices: set.into_iter().collect() }
}

/// Replaces the masked frames of `features` by the embedding row `embedding`.
pub fn apply_mask(g: &mut Graph, features: Var, mask: &MaskSet, embedding: Var) -> Result<Var> {
    let (t, d) = g.value(features).shape();
    let e = g.value(embedding);
    if e.shape() != (1, d) {
        return Err(shape_err(format!("mask embedding is {:?}, expected (1, {d})", e.shape())));
    }
    if let Some(&bad) = mask.indices().iter().find(|&&i| i >= t) {
        return Err(Error::Range(format!("mask index {bad} out of range for T = {t}")));
    }
    Ok(g.replace_rows(features, embedding, mask.indices()))
}

pub fn sample_modality_dropout(p_m: f64, p_a: f64, rng: &mut impl Rng) -> ModalitySelection {
    if rng.random::<f64>() < p_m {
        ModalitySelection::Both
    } else if rng.random::<f64>() < p_a {
        ModalitySelection::AudioOnly
    } else {
        ModalitySelection::VideoOnly
    }
}

/// Replaces the dropped stream by a zero constant of the same shape; no
/// gradient reaches the dropped stream.
pub fn apply_modality_dropout(g: &mut Graph, audio: Var, video: Var, sel: ModalitySelection) -> Result<(Var, Var)> {
    let (ta, da) = g.value(audio).shape();
    let (tv, dv) = g.value(video).shape();
    if ta != tv {
        return Err(shape_err(format!("audio has {ta} frames, video has {tv}")));
    }
    let a = if sel.keeps_audio() { audio } else { g.constant(crate::Matrix::zeros(ta, da)) };
    let v = if sel.keeps_video() { video } else { g.constant(crate::Matrix::zeros(tv, dv)) };
    Ok((a, v))
}
