//! Modality-specific feature extractors.
//!
//! Audio: frame stacking to the video rate followed by one affine layer.
//! Video: a 3-D convolution stem, residual blocks with per-sample channel
//! normalization, spatial average pooling and a projection to `d_feat`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{init_linear, Binder, ParamStore};
use crate::synthdata::{FeatureSequence, VideoClip};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Output width of each extractor.
    pub d_feat: usize,
    pub conv_channels: usize,
    pub res_blocks: usize,
    pub kernel_t: usize,
    pub kernel_s: usize,
    pub norm_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { d_feat: 64, conv_channels: 8, res_blocks: 1, kernel_t: 3, kernel_s: 3, norm_eps: 1e-5 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.conv_channels == 0 {
            return Err(config_err("d_feat and conv_channels must be >= 1"));
        }
        if self.kernel_t % 2 == 0 || self.kernel_s % 2 == 0 {
            return Err(config_err("kernel_t and kernel_s must be odd"));
        }
        Ok(())
    }
}

/// Stacks `ratio` consecutive frames channel-wise so the sequence runs at
/// `target_rate_hz`; a trailing partial group is dropped.
pub fn align_rates(audio: &FeatureSequence, target_rate_hz: f64) -> Result<FeatureSequence> {
    let ratio_f = audio.frame_rate_hz / target_rate_hz;
    let ratio = ratio_f.round();
    if !(ratio >= 1.0) || (ratio_f - ratio).abs() > 1e-9 {
        return Err(config_err(format!(
            "audio rate {} Hz is not an integer multiple of {} Hz",
            audio.frame_rate_hz, target_rate_hz
        )));
    }
    let ratio = ratio as usize;
    if ratio == 1 {
        return Ok(audio.clone());
    }
    let out_t = audio.len() / ratio;
    if out_t == 0 {
        return Err(shape_err("fewer audio frames than the stacking ratio"));
    }
    let d = audio.dim();
    let data = audio.frames.data()[..out_t * ratio * d].to_vec();
    FeatureSequence::new(audio.modality, Matrix::from_vec(out_t, ratio * d, data), target_rate_hz)
}

pub fn init_audio_params(store: &mut ParamStore, in_dim: usize, cfg: &FeatureConfig, rng: &mut impl Rng) {
    store.insert("audio.w", init_linear(in_dim, cfg.d_feat, rng));
    store.insert("audio.b", Matrix::zeros(1, cfg.d_feat));
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

pub fn init_video_params(store: &mut ParamStore, in_channels: usize, cfg: &FeatureConfig, rng: &mut impl Rng) {
    let k = cfg.kernel_t * cfg.kernel_s * cfg.kernel_s;
    let c = cfg.conv_channels;
    let (w, b) = conv_names("video.stem");
    store.insert(w, init_linear(k * in_channels, c, rng));
    store.insert(b, Matrix::zeros(1, c));
    for i in 0..cfg.res_blocks {
        for j in 1..=2 {
            let (w, b) = conv_names(&format!("video.block{i}.conv{j}"));
            store.insert(w, init_linear(k * c, c, rng));
            store.insert(b, Matrix::zeros(1, c));
            // The second norm gain starts at zero so each block is initially the identity.
            let gain = if j == 1 { 1.0 } else { 0.0 };
            store.insert(format!("video.block{i}.norm{j}.g"), Matrix::filled(1, c, gain));
            store.insert(format!("video.block{i}.norm{j}.b"), Matrix::zeros(1, c));
        }
    }
    store.insert("video.proj.w", init_linear(c, cfg.d_feat, rng));
    store.insert("video.proj.b", Matrix::zeros(1, cfg.d_feat));
}

pub fn extract_audio(g: &mut Graph, b: &mut Binder, audio: &FeatureSequence) -> Result<Var> {
    let w_rows = b.lookup("audio.w").map(Matrix::rows).unwrap_or(0);
    if w_rows != audio.dim() {
        return Err(shape_err(format!("audio extractor expects {w_rows}-dim frames, got {}", audio.dim())));
    }
    let x = g.constant(audio.frames.clone());
    let w = b.get(g, "audio.w");
    let bias = b.get(g, "audio.b");
    let h = g.matmul(x, w);
    Ok(g.add_row(h, bias))
}

/// Patch gather for a stride-1 "same" 3-D convolution: replicate padding in
/// time, zero padding in space.
fn conv_index(t: usize, h: usize, w: usize, kt: usize, ks: usize) -> Vec<Option<usize>> {
    let (pt, ps) = ((kt / 2) as isize, (ks / 2) as isize);
    let mut idx = Vec::with_capacity(t * h * w * kt * ks * ks);
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for dt in 0..kt as isize {
                    let st = (ti as isize + dt - pt).clamp(0, t as isize - 1) as usize;
                    for dh in 0..ks as isize {
                        for dw in 0..ks as isize {
                            let sh = hi as isize + dh - ps;
                            let sw = wi as isize + dw - ps;
                            if sh < 0 || sw < 0 || sh >= h as isize || sw >= w as isize {
                                idx.push(None);
                            } else {
                                idx.push(Some((st * h + sh as usize) * w + sw as usize));
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

fn conv3d(g: &mut Graph, b: &mut Binder, x: Var, index: &[Option<usize>], blocks: usize, prefix: &str) -> Var {
    let (wn, bn) = conv_names(prefix);
    let patches = g.gather_blocks(x, index.to_vec(), blocks);
    let w = b.get(g, &wn);
    let bias = b.get(g, &bn);
    let y = g.matmul(patches, w);
    g.add_row(y, bias)
}

fn channel_norm(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str, eps: f64) -> Var {
    let n = g.norm_cols(x, eps);
    let gain = b.get(g, &format!("{prefix}.g"));
    let bias = b.get(g, &format!("{prefix}.b"));
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

pub fn extract_video(g: &mut Graph, b: &mut Binder, video: &VideoClip, cfg: &FeatureConfig) -> Result<Var> {
    if video.height < cfg.kernel_s || video.width < cfg.kernel_s {
        return Err(shape_err(format!(
            "video frames {}x{} are smaller than the {}x{} kernel",
            video.height, video.width, cfg.kernel_s, cfg.kernel_s
        )));
    }
    let stem_rows = b.lookup("video.stem.w").map(Matrix::rows).unwrap_or(0);
    let blocks = cfg.kernel_t * cfg.kernel_s * cfg.kernel_s;
    if stem_rows != blocks * video.channels {
        return Err(shape_err(format!(
            "video stem expects {} input channels, got {}",
            stem_rows / blocks,
            video.channels
        )));
    }
    let index = conv_index(video.len(), video.height, video.width, cfg.kernel_t, cfg.kernel_s);
    let x = g.constant(video.pixel_rows());
    let h = conv3d(g, b, x, &index, blocks, "video.stem");
    let mut h = g.gelu(h);
    for i in 0..cfg.res_blocks {
        let p = format!("video.block{i}");
        let r = conv3d(g, b, h, &index, blocks, &format!("{p}.conv1"));
        let r = channel_norm(g, b, r, &format!("{p}.norm1"), cfg.norm_eps);
        let r = g.gelu(r);
        let r = conv3d(g, b, r, &index, blocks, &format!("{p}.conv2"));
        let r = channel_norm(g, b, r, &format!("{p}.norm2"), cfg.norm_eps);
        let s = g.add(h, r);
        h = g.gelu(s);
    }
    let pooled = g.group_mean_rows(h, video.height * video.width);
    let w = b.get(g, "video.proj.w");
    let bias = b.get(g, "video.proj.b");
    let y = g.matmul(pooled, w);
    Ok(g.add_row(y, bias))
}
