//! Parameter layout of the full student network and its forward passes.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corruption::{apply_mask, apply_modality_dropout, MaskSet, ModalitySelection};
use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::{config_err, Result};
use crate::features::{self, FeatureConfig};
use crate::params::{init_normal, Binder, ParamStore};
use crate::synthdata::{FeatureSequence, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    /// Width of a rate-aligned audio frame.
    pub audio_in_dim: usize,
    pub video_channels: usize,
    pub video_rate_hz: f64,
    pub mlm_enabled: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.encoder.validate()?;
        if self.audio_in_dim == 0 || self.video_channels == 0 {
            return Err(config_err("audio_in_dim and video_channels must be >= 1"));
        }
        if self.mlm_enabled && self.encoder.num_clusters < 1 {
            return Err(config_err("MLM head needs num_clusters >= 1"));
        }
        Ok(())
    }

    /// Checks whether a stored layout could have come from this config.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = init_student(self, &mut rng);
        if reference.same_layout(store) {
            Ok(())
        } else {
            Err(config_err("checkpoint parameters do not match the configured model dimensions"))
        }
    }
}

/// Extractors, mask embeddings, encoder and heads.
pub fn init_student(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    features::init_audio_params(&mut store, cfg.audio_in_dim, &cfg.features, rng);
    features::init_video_params(&mut store, cfg.video_channels, &cfg.features, rng);
    store.insert("mask.audio", init_normal(1, cfg.features.d_feat, 0.5, rng));
    store.insert("mask.video", init_normal(1, cfg.features.d_feat, 0.5, rng));
    encoder::init_encoder_params(&mut store, 2 * cfg.features.d_feat, &cfg.encoder, rng);
    encoder::init_regression_head(&mut store, &cfg.encoder, rng);
    if cfg.mlm_enabled {
        encoder::init_mlm_head(&mut store, &cfg.encoder, rng);
    }
    store
}

/// Rate-aligns raw audio to the video frame grid and checks frame counts.
pub fn aligned_audio(audio: &FeatureSequence, video: &VideoClip, rate_hz: f64) -> Result<FeatureSequence> {
    let a = features::align_rates(audio, rate_hz)?;
    if a.len() != video.len() {
        return Err(crate::error::shape_err(format!(
            "aligned audio has {} frames, video has {}",
            a.len(),
            video.len()
        )));
    }
    Ok(a)
}

/// Extracted per-modality features for one sample.
pub struct Extracted {
    pub audio: Var,
    pub video: Var,
}

pub fn extract(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    audio: &FeatureSequence,
    video: &VideoClip,
) -> Result<Extracted> {
    let audio = features::extract_audio(g, b, audio)?;
    let video = features::extract_video(g, b, video, &cfg.features)?;
    Ok(Extracted { audio, video })
}

/// Student corruption choices for one sample.
#[derive(Clone, Debug)]
pub struct Corruption {
    pub mask_audio: MaskSet,
    pub mask_video: MaskSet,
    pub selection: ModalitySelection,
}

pub struct StudentOutput {
    pub encoded: EncoderOutput,
    pub regression: Var,
    pub mlm_logits: Option<Var>,
}

/// extract → mask → modality dropout → fuse → encode → heads.
pub fn student_forward(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    audio: &FeatureSequence,
    video: &VideoClip,
    corruption: &Corruption,
) -> Result<StudentOutput> {
    let feats = extract(g, b, cfg, audio, video)?;
    let ea = b.get(g, "mask.audio");
    let ev = b.get(g, "mask.video");
    let fa = apply_mask(g, feats.audio, &corruption.mask_audio, ea)?;
    let fv = apply_mask(g, feats.video, &corruption.mask_video, ev)?;
    let (fa, fv) = apply_modality_dropout(g, fa, fv, corruption.selection)?;
    let fused = encoder::fuse(g, fa, fv)?;
    let encoded = encoder::encode(g, b, fused, &cfg.encoder)?;
    let regression = encoder::regression_head(g, b, encoded.top);
    let mlm_logits = cfg.mlm_enabled.then(|| encoder::mlm_head(g, b, encoded.top));
    Ok(StudentOutput { encoded, regression, mlm_logits })
}

/// Uncorrupted forward with an optional modality zeroed; used for feature
/// dumping, probing and evaluation.
pub fn clean_forward(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    audio: &FeatureSequence,
    video: &VideoClip,
    selection: ModalitySelection,
) -> Result<EncoderOutput> {
    let feats = extract(g, b, cfg, audio, video)?;
    let (fa, fv) = apply_modality_dropout(g, feats.audio, feats.video, selection)?;
    let fused = encoder::fuse(g, fa, fv)?;
    encoder::encode(g, b, fused, &cfg.encoder)
}
