//! k-means over hidden features of a pretrained model, producing discrete
//! frame targets for the MLM head.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::corruption::ModalitySelection;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::{Binder, ParamStore};
use crate::rng::{self, Stream};
use crate::synthdata::{Reader, SyntheticSample};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// `K × d`.
    pub centroids: Matrix,
    /// 1-based encoder layer whose output was clustered.
    pub feature_layer: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Nearest centroid per row of `features`.
    pub fn assign(&self, features: &Matrix) -> Result<Vec<usize>> {
        if features.cols() != self.dim() {
            return Err(shape_err(format!("features have dim {}, centroids {}", features.cols(), self.dim())));
        }
        Ok(assign_all(features, &self.centroids).0)
    }
}

/// Per-utterance labels in `[0, k)`, one per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteTargetSet {
    pub utterance_id: String,
    pub labels: Vec<usize>,
    pub k: usize,
}

/// Frame features of a whole corpus, stacked in corpus order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub features: Matrix,
    pub utterance_ids: Vec<String>,
    /// `offsets[i]..offsets[i + 1]` are the rows of utterance `i`.
    pub offsets: Vec<usize>,
}

impl FrameFeatures {
    pub fn rows_of(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Hidden output of encoder layer `layer` (1-based) on clean, unmasked,
/// two-stream input.
pub fn dump_features(
    cfg: &ModelConfig,
    params: &ParamStore,
    corpus: &[SyntheticSample],
    layer: usize,
) -> Result<FrameFeatures> {
    cfg.check_params(params)?;
    let layers = cfg.encoder.num_layers;
    if layer < 1 || layer > layers {
        return Err(config_err(format!("feature layer {layer} outside [1, {layers}]")));
    }
    let per_utt = corpus
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let mut b = Binder::constant(params);
            let audio = model::aligned_audio(&s.audio_clean, &s.video, cfg.video_rate_hz)?;
            let out = model::clean_forward(&mut g, &mut b, cfg, &audio, &s.video, ModalitySelection::Both)?;
            Ok(g.value(out.layers[layer - 1]).clone())
        })
        .collect::<Result<Vec<Matrix>>>()?;

    let d = cfg.encoder.d_model;
    let mut offsets = vec![0];
    let mut data = Vec::new();
    for m in &per_utt {
        data.extend_from_slice(m.data());
        offsets.push(offsets.last().unwrap() + m.rows());
    }
    Ok(FrameFeatures {
        features: Matrix::from_vec(*offsets.last().unwrap(), d, data),
        utterance_ids: corpus.iter().map(|s| s.utterance_id.clone()).collect(),
        offsets,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lowest index.
fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Labels plus the objective summed in row order.
fn assign_all(x: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = (0..x.rows()).into_par_iter().map(|i| nearest(x.row(i), centroids)).collect();
    let objective = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), objective)
}

/// `Σ_i ‖x_i − c_{label_i}‖²`, accumulated in row order.
pub fn objective(x: &Matrix, centroids: &Matrix, labels: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(i, &l)| sq_dist(x.row(i), centroids.row(l))).sum()
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // All points coincide with a centroid already; take the first unused index.
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let d = x.cols();
    let mut c = Matrix::zeros(k, d);
    for (j, &i) in chosen.iter().enumerate() {
        c.row_mut(j).copy_from_slice(x.row(i));
    }
    c
}

/// Centroid means of the current assignment. Empty clusters are reseeded at
/// the point farthest from its nearest non-empty centroid (lowest index on
/// ties), one at a time.
fn update_centroids(x: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let d = x.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n);
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut live: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
        for c in empty {
            let mut far = (0, -1.0);
            for i in 0..x.rows() {
                let dmin = live.iter().map(|&j| sq_dist(x.row(i), sums.row(j))).fold(f64::INFINITY, f64::min);
                if dmin > far.1 {
                    far = (i, dmin);
                }
            }
            log::debug!("k-means: cluster {c} empty, reseeded at point {}", far.0);
            let row = x.row(far.0).to_vec();
            sums.row_mut(c).copy_from_slice(&row);
            live.push(c);
        }
    }
    sums
}

/// Result of a k-means fit.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    /// Objective after each assignment step, first entry from the seeding.
    pub history: Vec<f64>,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.history.last().expect("at least one assignment")
    }
}

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iters` updates
/// or once assignments stop changing.
pub fn kmeans_fit(features: &Matrix, k: usize, max_iters: usize, seed: u64, feature_layer: usize) -> Result<KMeansFit> {
    let n = features.rows();
    if k < 2 {
        return Err(config_err(format!("k-means needs K >= 2, got {k}")));
    }
    if n < k {
        return Err(config_err(format!("K = {k} exceeds the {n} available frames")));
    }
    if !features.is_finite() {
        return Err(Error::DegenerateInput("non-finite features passed to k-means".into()));
    }
    let mut rng = rng::derive(seed, Stream::KMeans, &[k as u64, n as u64]);
    let mut centroids = plus_plus_init(features, k, &mut rng);
    let (mut labels, obj) = assign_all(features, &centroids);
    let mut history = vec![obj];
    for _ in 0..max_iters {
        centroids = update_centroids(features, &labels, k);
        let (next, obj) = assign_all(features, &centroids);
        history.push(obj);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(KMeansFit { model: ClusterModel { centroids, feature_layer }, labels, history })
}

/// Labels every utterance of `corpus` with its nearest centroid.
pub fn assign_targets(
    cluster: &ClusterModel,
    cfg: &ModelConfig,
    params: &ParamStore,
    corpus: &[SyntheticSample],
) -> Result<Vec<DiscreteTargetSet>> {
    let dumped = dump_features(cfg, params, corpus, cluster.feature_layer)?;
    let labels = cluster.assign(&dumped.features)?;
    Ok(dumped
        .utterance_ids
        .iter()
        .enumerate()
        .map(|(i, id)| DiscreteTargetSet {
            utterance_id: id.clone(),
            labels: labels[dumped.rows_of(i)].to_vec(),
            k: cluster.k(),
        })
        .collect())
}

const CLUSTER_MAGIC: &[u8; 4] = b"AV2K";
const CLUSTER_VERSION: u32 = 1;
const TARGET_MAGIC: &[u8; 4] = b"AV2T";
const TARGET_VERSION: u32 = 1;

/// `AV2K`, version, K, d, feature layer, then `K·d` f32 centroids.
pub fn encode_cluster_model(m: &ClusterModel) -> Vec<u8> {
    let mut buf = CLUSTER_MAGIC.to_vec();
    for v in [CLUSTER_VERSION, m.k() as u32, m.dim() as u32, m.feature_layer as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in m.centroids.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_cluster_model(bytes: &[u8], path: &Path) -> Result<ClusterModel> {
    let mut r = Reader::new(bytes, path);
    r.magic(CLUSTER_MAGIC)?;
    let version = r.u32()?;
    if version != CLUSTER_VERSION {
        return Err(Error::Version { found: version, expected: CLUSTER_VERSION });
    }
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let feature_layer = r.u32()? as usize;
    let data = r.f32s(k.checked_mul(d).ok_or_else(|| r.corrupt("size overflow"))?)?;
    r.finish()?;
    let centroids = Matrix::from_vec(k, d, data);
    if k < 2 || !centroids.is_finite() {
        return Err(r.corrupt("invalid centroid table"));
    }
    Ok(ClusterModel { centroids, feature_layer })
}

pub fn save_cluster_model(m: &ClusterModel, path: &Path) -> Result<()> {
    fs::write(path, encode_cluster_model(m))?;
    Ok(())
}

pub fn load_cluster_model(path: &Path) -> Result<ClusterModel> {
    decode_cluster_model(&fs::read(path)?, path)
}

fn target_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.av2t"))
}

/// One `AV2T` file per utterance: magic, version, K, T, then `T` u32 labels.
pub fn write_targets(dir: &Path, targets: &[DiscreteTargetSet]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in targets {
        let mut buf = TARGET_MAGIC.to_vec();
        for v in [TARGET_VERSION, t.k as u32, t.labels.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &t.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        fs::write(target_path(dir, &t.utterance_id), buf)?;
    }
    Ok(())
}

/// Reads the targets for every utterance of `corpus`, checking alignment.
pub fn read_targets(dir: &Path, corpus: &[SyntheticSample]) -> Result<Vec<DiscreteTargetSet>> {
    corpus
        .iter()
        .map(|s| {
            let path = target_path(dir, &s.utterance_id);
            let bytes = fs::read(&path)?;
            let mut r = Reader::new(&bytes, &path);
            r.magic(TARGET_MAGIC)?;
            let version = r.u32()?;
            if version != TARGET_VERSION {
                return Err(Error::Version { found: version, expected: TARGET_VERSION });
            }
            let k = r.u32()? as usize;
            let t = r.u32()? as usize;
            let labels = (0..t).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
            r.finish()?;
            if t != s.num_frames() {
                return Err(shape_err(format!(
                    "targets for `{}` have {t} frames, utterance has {}",
                    s.utterance_id,
                    s.num_frames()
                )));
            }
            if labels.iter().any(|&l| l >= k) {
                return Err(r.corrupt("label out of range"));
            }
            Ok(DiscreteTargetSet { utterance_id: s.utterance_id.clone(), labels, k })
        })
        .collect()
}
