//! Synthetic paired audio-visual corpus and SNR-controlled noise mixing.
//!
//! Both modalities are rendered from one hidden piecewise-constant state
//! path: audio as a fixed linear map of per-state templates plus jitter,
//! video as a temporally smoothed per-state spatial pattern plus jitter.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Matrix;

/// SNR levels of the evaluation grid, in dB; `INFINITY` is the clean set.
pub const EVAL_SNR_LEVELS: [f64; 6] = [-10.0, -5.0, 0.0, 5.0, 10.0, f64::INFINITY];
/// Levels drawn uniformly when noise is injected during training.
pub const TRAIN_SNR_LEVELS: [f64; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

/// A time-major `T × D` sequence of frames for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub frames: Matrix,
    pub frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(modality: Modality, frames: Matrix, frame_rate_hz: f64) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(shape_err("feature sequence needs at least one frame"));
        }
        if !frames.is_finite() {
            return Err(Error::DegenerateInput("non-finite feature value".into()));
        }
        Ok(Self { modality, frames, frame_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn energy(&self) -> f64 {
        self.frames.sum_sq()
    }
}

/// Video as `T` frames of `height × width × channels`, each frame flattened
/// row-major (`(h·W + w)·C + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub seq: FeatureSequence,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// The same data viewed as `(T·H·W) × C` pixel rows.
    pub fn pixel_rows(&self) -> Matrix {
        Matrix::from_vec(self.len() * self.height * self.width, self.channels, self.seq.frames.data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_utterances: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub num_latent_states: usize,
    pub audio_dim: usize,
    /// Audio frames per video frame.
    pub audio_rate_ratio: usize,
    pub video_rate_hz: f64,
    pub video_height: usize,
    pub video_width: usize,
    pub video_channels: usize,
    /// Mean number of frames spent in one latent state.
    pub latent_dwell: f64,
    pub audio_jitter: f64,
    pub video_jitter: f64,
    /// Weight of the previous rendered frame in the video smoother.
    pub video_smoothing: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            frames_min: 20,
            frames_max: 40,
            num_latent_states: 8,
            audio_dim: 8,
            audio_rate_ratio: 4,
            video_rate_hz: 25.0,
            video_height: 6,
            video_width: 6,
            video_channels: 1,
            latent_dwell: 6.0,
            audio_jitter: 1.0,
            video_jitter: 0.5,
            video_smoothing: 0.5,
            seed: 0,
            id_prefix: "utt".into(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_min < 1 || self.frames_max < self.frames_min {
            return Err(config_err("frames range must satisfy 1 <= frames_min <= frames_max"));
        }
        if self.num_latent_states < 2 {
            return Err(config_err("num_latent_states must be >= 2"));
        }
        for (name, v) in [
            ("audio_dim", self.audio_dim),
            ("audio_rate_ratio", self.audio_rate_ratio),
            ("video_height", self.video_height),
            ("video_width", self.video_width),
            ("video_channels", self.video_channels),
        ] {
            if v < 1 {
                return Err(config_err(format!("{name} must be >= 1")));
            }
        }
        if !(self.latent_dwell >= 1.0) {
            return Err(config_err("latent_dwell must be >= 1"));
        }
        if !(self.audio_jitter >= 0.0 && self.video_jitter >= 0.0) {
            return Err(config_err("jitter must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.video_smoothing) {
            return Err(config_err("video_smoothing must lie in [0, 1)"));
        }
        if !(self.video_rate_hz > 0.0) {
            return Err(config_err("video_rate_hz must be positive"));
        }
        Ok(())
    }

    pub fn audio_rate_hz(&self) -> f64 {
        self.video_rate_hz * self.audio_rate_ratio as f64
    }

    pub fn video_pixels(&self) -> usize {
        self.video_height * self.video_width * self.video_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub utterance_id: String,
    pub latent_labels: Vec<usize>,
    /// Clean audio at `audio_rate_ratio` frames per video frame.
    pub audio_clean: FeatureSequence,
    pub video: VideoClip,
}

impl SyntheticSample {
    pub fn num_frames(&self) -> usize {
        self.latent_labels.len()
    }
}

/// The fixed generative parameters shared by every utterance of a corpus.
pub struct SyntheticWorld {
    spec: CorpusSpec,
    audio_templates: Matrix,
    audio_map: Matrix,
    video_patterns: Matrix,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

impl SyntheticWorld {
    pub fn new(spec: CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::derive(spec.seed, Stream::Corpus, &[]);
        let audio_templates = normal_matrix(spec.num_latent_states, spec.audio_dim, &mut rng);
        let mut audio_map = normal_matrix(spec.audio_dim, spec.audio_dim, &mut rng);
        audio_map.scale_assign(1.0 / (spec.audio_dim as f64).sqrt());
        let video_patterns = normal_matrix(spec.num_latent_states, spec.video_pixels(), &mut rng);
        Ok(Self { spec, audio_templates, audio_map, video_patterns })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    /// The noiseless audio frame emitted in each latent state (`S × audio_dim`),
    /// rounded to storage precision.
    pub fn audio_prototypes(&self) -> Matrix {
        let mut p = self.audio_templates.matmul(&self.audio_map);
        p.round_to_f32();
        p
    }

    pub fn sample(&self, index: usize) -> SyntheticSample {
        let s = &self.spec;
        let mut rng = rng::derive(s.seed, Stream::Utterance, &[index as u64]);
        let t = rng.random_range(s.frames_min..=s.frames_max);

        let switch_p = 1.0 / s.latent_dwell;
        let mut labels = Vec::with_capacity(t);
        let mut state = rng.random_range(0..s.num_latent_states);
        for i in 0..t {
            if i > 0 && rng.random::<f64>() < switch_p {
                let step = rng.random_range(1..s.num_latent_states);
                state = (state + step) % s.num_latent_states;
            }
            labels.push(state);
        }

        let prototypes = self.audio_templates.matmul(&self.audio_map);
        let ratio = s.audio_rate_ratio;
        let mut audio = Matrix::zeros(t * ratio, s.audio_dim);
        for (i, &lab) in labels.iter().enumerate() {
            for j in 0..ratio {
                for (c, o) in audio.row_mut(i * ratio + j).iter_mut().enumerate() {
                    let jit: f64 = StandardNormal.sample(&mut rng);
                    *o = prototypes[(lab, c)] + s.audio_jitter * jit;
                }
            }
        }
        audio.round_to_f32();

        let px = s.video_pixels();
        let mut video = Matrix::zeros(t, px);
        let mut rendered = self.video_patterns.row(labels[0]).to_vec();
        for (i, &lab) in labels.iter().enumerate() {
            let pattern = self.video_patterns.row(lab);
            for (r, p) in rendered.iter_mut().zip(pattern) {
                *r = s.video_smoothing * *r + (1.0 - s.video_smoothing) * p;
            }
            for (o, r) in video.row_mut(i).iter_mut().zip(&rendered) {
                let jit: f64 = StandardNormal.sample(&mut rng);
                *o = r + s.video_jitter * jit;
            }
        }
        video.round_to_f32();

        SyntheticSample {
            utterance_id: format!("{}{:05}", s.id_prefix, index),
            latent_labels: labels,
            audio_clean: FeatureSequence { modality: Modality::Audio, frames: audio, frame_rate_hz: s.audio_rate_hz() },
            video: VideoClip {
                seq: FeatureSequence { modality: Modality::Video, frames: video, frame_rate_hz: s.video_rate_hz },
                height: s.video_height,
                width: s.video_width,
                channels: s.video_channels,
            },
        }
    }

    pub fn generate(&self) -> Vec<SyntheticSample> {
        (0..self.spec.num_utterances).into_par_iter().map(|i| self.sample(i)).collect()
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SyntheticSample>> {
    Ok(SyntheticWorld::new(spec.clone())?.generate())
}

/// Seeded colored (AR(1), channel-mixed) noise sequences.
pub fn generate_noise_bank(
    size: usize,
    frames: usize,
    dim: usize,
    color: f64,
    rate_hz: f64,
    seed: u64,
) -> Vec<FeatureSequence> {
    (0..size)
        .map(|k| {
            let mut rng = rng::derive(seed, Stream::NoiseBank, &[k as u64]);
            let mut mix = normal_matrix(dim, dim, &mut rng);
            mix.scale_assign(1.0 / (dim as f64).sqrt());
            let innov = (1.0 - color * color).sqrt();
            let mut state = vec![0.0; dim];
            let mut white = Matrix::zeros(frames, dim);
            for t in 0..frames {
                for (c, s) in state.iter_mut().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *s = color * *s + innov * e;
                    white[(t, c)] = *s;
                }
            }
            FeatureSequence { modality: Modality::Audio, frames: white.matmul(&mix), frame_rate_hz: rate_hz }
        })
        .collect()
}

/// Adds `noise` (cropped at a random offset) to `clean`, scaled so the
/// clean-to-added-noise energy ratio is `snr_db`.
pub fn mix_noise(
    clean: &FeatureSequence,
    noise: &FeatureSequence,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<FeatureSequence> {
    if snr_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(config_err(format!("invalid snr_db {snr_db}")));
    }
    if noise.dim() != clean.dim() {
        return Err(shape_err(format!("noise dim {} != clean dim {}", noise.dim(), clean.dim())));
    }
    if noise.len() < clean.len() {
        return Err(shape_err(format!("noise has {} frames, clean needs {}", noise.len(), clean.len())));
    }
    let e_clean = clean.energy();
    if e_clean == 0.0 {
        return Err(Error::DegenerateInput("clean signal has zero energy".into()));
    }
    let offset = rng.random_range(0..=noise.len() - clean.len());
    let d = clean.dim();
    let crop = &noise.frames.data()[offset * d..(offset + clean.len()) * d];
    let e_noise: f64 = crop.iter().map(|v| v * v).sum();
    if e_noise == 0.0 {
        return Err(Error::DegenerateInput("noise crop has zero energy".into()));
    }
    let gain = (e_clean / (e_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out = clean.frames.clone();
    for (o, n) in out.data_mut().iter_mut().zip(crop) {
        *o += gain * n;
    }
    Ok(FeatureSequence { modality: clean.modality, frames: out, frame_rate_hz: clean.frame_rate_hz })
}

/// Measured SNR in dB of `noisy` relative to `clean`.
pub fn measure_snr_db(clean: &FeatureSequence, noisy: &FeatureSequence) -> f64 {
    let added: f64 = noisy.frames.data().iter().zip(clean.frames.data()).map(|(n, c)| (n - c) * (n - c)).sum();
    10.0 * (clean.energy() / added).log10()
}

/// One utterance as seen by an evaluation condition.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub utterance_id: String,
    pub latent_labels: Vec<usize>,
    pub audio: FeatureSequence,
    pub video: VideoClip,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub snr_db: f64,
    pub items: Vec<EvalItem>,
}

/// One noisy copy of `corpus` per finite level of [`EVAL_SNR_LEVELS`] plus
/// the clean set; video is carried over unchanged.
pub fn build_eval_sets(corpus: &[SyntheticSample], noise_bank: &[FeatureSequence], seed: u64) -> Result<Vec<EvalSet>> {
    if noise_bank.is_empty() {
        return Err(config_err("noise bank is empty"));
    }
    if corpus.is_empty() {
        return Err(config_err("evaluation corpus is empty"));
    }
    EVAL_SNR_LEVELS
        .iter()
        .enumerate()
        .map(|(level_idx, &snr)| {
            let items = corpus
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut r = rng::derive(seed, Stream::EvalNoise, &[level_idx as u64, i as u64]);
                    let noise = &noise_bank[r.random_range(0..noise_bank.len())];
                    Ok(EvalItem {
                        utterance_id: s.utterance_id.clone(),
                        latent_labels: s.latent_labels.clone(),
                        audio: mix_noise(&s.audio_clean, noise, snr, &mut r)?,
                        video: s.video.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalSet { snr_db: snr, items })
        })
        .collect()
}

const CORPUS_MAGIC: &[u8; 4] = b"AV2V";
const CORPUS_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vals: impl Iterator<Item = f64>) {
    for v in vals {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Binary record: magic, version, `T`, dim count, dims, then `f32` payloads
/// for labels, audio and video. Dims are `[audio_frames, audio_dim, height,
/// width, channels, video_rate_mhz, audio_rate_mhz]`.
pub fn encode_record(s: &SyntheticSample) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CORPUS_MAGIC);
    put_u32(&mut buf, CORPUS_VERSION);
    put_u32(&mut buf, s.num_frames() as u32);
    let dims = [
        s.audio_clean.len() as u32,
        s.audio_clean.dim() as u32,
        s.video.height as u32,
        s.video.width as u32,
        s.video.channels as u32,
        (s.video.seq.frame_rate_hz * 1000.0).round() as u32,
        (s.audio_clean.frame_rate_hz * 1000.0).round() as u32,
    ];
    put_u32(&mut buf, dims.len() as u32);
    for d in dims {
        put_u32(&mut buf, d);
    }
    put_f32s(&mut buf, s.latent_labels.iter().map(|&l| l as f64));
    put_f32s(&mut buf, s.audio_clean.frames.data().iter().copied());
    put_f32s(&mut buf, s.video.seq.frames.data().iter().copied());
    buf
}

/// Little-endian cursor over a byte buffer that reports truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &Path) -> Self {
        Self { buf, pos: 0, path: path.display().to_string() }
    }

    pub(crate) fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptFile { path: self.path.clone(), reason: reason.into() }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.take(4)? != expected {
            return Err(self.corrupt("bad magic"));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

pub fn decode_record(bytes: &[u8], utterance_id: &str, path: &Path) -> Result<SyntheticSample> {
    let mut r = Reader::new(bytes, path);
    r.magic(CORPUS_MAGIC)?;
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Version { found: version, expected: CORPUS_VERSION });
    }
    let t = r.u32()? as usize;
    let ndims = r.u32()? as usize;
    if ndims != 7 {
        return Err(r.corrupt(format!("expected 7 dims, found {ndims}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [a_frames, a_dim, h, w, c, v_mhz, a_mhz] = dims;
    let labels = r.f32s(t)?;
    let audio = r.f32s(a_frames * a_dim)?;
    let video = r.f32s(t * h * w * c)?;
    r.finish()?;
    let latent_labels =
        labels
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(r.corrupt(format!("invalid label {l}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSample {
        utterance_id: utterance_id.to_string(),
        latent_labels,
        audio_clean: FeatureSequence::new(
            Modality::Audio,
            Matrix::from_vec(a_frames, a_dim, audio),
            a_mhz as f64 / 1000.0,
        )?,
        video: VideoClip {
            seq: FeatureSequence::new(Modality::Video, Matrix::from_vec(t, h * w * c, video), v_mhz as f64 / 1000.0)?,
            height: h,
            width: w,
            channels: c,
        },
    })
}

/// Writes one record per utterance plus `manifest.txt`
/// (`id<TAB>relative path<TAB>T` per line).
pub fn write_corpus(dir: &Path, corpus: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in corpus {
        let rel = format!("{}.av2v", s.utterance_id);
        fs::write(dir.join(&rel), encode_record(s))?;
        manifest.push_str(&format!("{}\t{}\t{}\n", s.utterance_id, rel, s.num_frames()));
    }
    let mut f = fs::File::create(dir.join(MANIFEST_NAME))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String, usize)>> {
    let path = dir.join(MANIFEST_NAME);
    let f = fs::File::open(&path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || Error::CorruptFile {
            path: path.display().to_string(),
            reason: format!("malformed manifest line {}", n + 1),
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let t = parts[2].parse::<usize>().map_err(|_| bad())?;
        out.push((parts[0].to_string(), parts[1].to_string(), t));
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<SyntheticSample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|(id, rel, t)| {
            let path = dir.join(&rel);
            let s = decode_record(&fs::read(&path)?, &id, &path)?;
            if s.num_frames() != t {
                return Err(Error::CorruptFile {
                    path: path.display().to_string(),
                    reason: format!("manifest says {t} frames, record has {}", s.num_frames()),
                });
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { num_utterances: 5, frames_min: 4, frames_max: 9, ..CorpusSpec::default() }
    }

    #[test]
    fn same_seed_gives_identical_corpora() {
        let spec = small_spec();
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
        let other = CorpusSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_corpus(&spec).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn zero_utterances_is_empty() {
        let spec = CorpusSpec { num_utterances: 0, ..small_spec() };
        assert!(generate_corpus(&spec).unwrap().is_empty());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            CorpusSpec { frames_min: 0, ..small_spec() },
            CorpusSpec { num_latent_states: 1, ..small_spec() },
            CorpusSpec { audio_dim: 0, ..small_spec() },
            CorpusSpec { frames_max: 2, frames_min: 3, ..small_spec() },
        ] {
            assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn noiseless_audio_takes_exactly_two_template_values() {
        let spec = CorpusSpec { num_latent_states: 2, audio_jitter: 0.0, num_utterances: 8, ..small_spec() };
        let world = SyntheticWorld::new(spec).unwrap();
        let protos = world.audio_prototypes();
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        for s in world.generate() {
            for (t, &lab) in s.latent_labels.iter().enumerate() {
                for j in 0..world.spec().audio_rate_ratio {
                    let row = s.audio_clean.frames.row(t * world.spec().audio_rate_ratio + j);
                    assert_eq!(row, protos.row(lab));
                    if !distinct.iter().any(|d| d.as_slice() == row) {
                        distinct.push(row.to_vec());
                    }
                }
            }
        }
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn sample_shapes_are_frame_aligned() {
        let spec = small_spec();
        for s in generate_corpus(&spec).unwrap() {
            let t = s.num_frames();
            assert!((spec.frames_min..=spec.frames_max).contains(&t));
            assert_eq!(s.audio_clean.len(), t * spec.audio_rate_ratio);
            assert_eq!(s.video.len(), t);
            assert!(s.latent_labels.iter().all(|&l| l < spec.num_latent_states));
        }
    }

    fn energy(m: &Matrix) -> f64 {
        m.data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn infinite_snr_returns_clean() {
        let s = &generate_corpus(&small_spec()).unwrap()[0];
        let bank = generate_noise_bank(1, 100, 8, 0.9, 100.0, 3);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mix_noise(&s.audio_clean, &bank[0], f64::INFINITY, &mut r).unwrap(), s.audio_clean);
    }

    #[test]
    fn mixed_noise_hits_requested_energy_ratio() {
        let s = &generate_corpus(&small_spec()).unwrap()[0];
        let bank = generate_noise_bank(1, 100, 8, 0.9, 100.0, 3);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for snr in [0.0, 10.0] {
            let out = mix_noise(&s.audio_clean, &bank[0], snr, &mut r).unwrap();
            let mut added = out.frames.clone();
            let mut neg = s.audio_clean.frames.clone();
            neg.scale_assign(-1.0);
            added.add_assign(&neg);
            let ratio = energy(&s.audio_clean.frames) / energy(&added);
            let expected = 10f64.powf(snr / 10.0);
            assert!((10.0 * (ratio / expected).log10()).abs() < 0.1, "snr {snr}: ratio {ratio}");
        }
    }

    #[test]
    fn zero_clean_signal_is_degenerate() {
        let clean = FeatureSequence::new(Modality::Audio, Matrix::zeros(4, 2), 100.0).unwrap();
        let bank = generate_noise_bank(1, 10, 2, 0.5, 100.0, 1);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(mix_noise(&clean, &bank[0], 5.0, &mut r), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn eval_sets_cover_grid() {
        let corpus = generate_corpus(&CorpusSpec { num_utterances: 10, ..small_spec() }).unwrap();
        let bank = generate_noise_bank(3, 40, 8, 0.9, 100.0, 3);
        let sets = build_eval_sets(&corpus, &bank, 11).unwrap();
        assert_eq!(sets.len(), 6);
        for set in &sets {
            assert_eq!(set.items.len(), 10);
            for (item, s) in set.items.iter().zip(&corpus) {
                assert_eq!(item.video, s.video);
                if set.snr_db.is_infinite() {
                    assert_eq!(item.audio, s.audio_clean);
                } else {
                    assert!((measure_snr_db(&s.audio_clean, &item.audio) - set.snr_db).abs() < 0.1);
                }
            }
        }
        assert!(matches!(build_eval_sets(&corpus, &[], 1), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_roundtrips_through_disk() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap().len(), corpus.len());
        assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn truncated_record_is_corrupt() {
        let s = &generate_corpus(&small_spec()).unwrap()[0];
        let bytes = encode_record(s);
        let p = Path::new("x.av2v");
        assert!(matches!(decode_record(&bytes[..bytes.len() - 3], "x", p), Err(Error::CorruptFile { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_record(&bad, "x", p), Err(Error::Version { .. })));
    }
}
