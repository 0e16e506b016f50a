//! Channel-wise fusion, a pre-norm Transformer encoder, and the two heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::params::{init_linear, Binder, ParamStore};
use crate::tensor::Matrix;

/// Parameter names under this prefix form the EMA-tracked teacher body.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    /// Cluster count `K` of the MLM head.
    pub num_clusters: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { num_layers: 2, d_model: 128, ffn_dim: 256, num_heads: 4, num_clusters: 16, ln_eps: 1e-5 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.ffn_dim == 0 || self.num_heads == 0 {
            return Err(config_err("encoder dimensions must be >= 1"));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(config_err(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_clusters < 1 {
            return Err(config_err("num_clusters must be >= 1"));
        }
        Ok(())
    }
}

fn layer(l: usize, name: &str) -> String {
    format!("encoder.l{l}.{name}")
}

pub fn init_encoder_params(store: &mut ParamStore, in_dim: usize, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    store.insert("encoder.in.w", init_linear(in_dim, d, rng));
    store.insert("encoder.in.b", Matrix::zeros(1, d));
    for l in 0..cfg.num_layers {
        store.insert(layer(l, "ln1.g"), Matrix::filled(1, d, 1.0));
        store.insert(layer(l, "ln1.b"), Matrix::zeros(1, d));
        for p in ["q", "k", "v", "o"] {
            store.insert(layer(l, &format!("attn.w{p}")), init_linear(d, d, rng));
            store.insert(layer(l, &format!("attn.b{p}")), Matrix::zeros(1, d));
        }
        store.insert(layer(l, "ln2.g"), Matrix::filled(1, d, 1.0));
        store.insert(layer(l, "ln2.b"), Matrix::zeros(1, d));
        store.insert(layer(l, "ffn.w1"), init_linear(d, cfg.ffn_dim, rng));
        store.insert(layer(l, "ffn.b1"), Matrix::zeros(1, cfg.ffn_dim));
        store.insert(layer(l, "ffn.w2"), init_linear(cfg.ffn_dim, d, rng));
        store.insert(layer(l, "ffn.b2"), Matrix::zeros(1, d));
    }
    store.insert("encoder.ln_f.g", Matrix::filled(1, d, 1.0));
    store.insert("encoder.ln_f.b", Matrix::zeros(1, d));
}

pub fn init_regression_head(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) {
    store.insert("head.reg.w", init_linear(cfg.d_model, cfg.d_model, rng));
    store.insert("head.reg.b", Matrix::zeros(1, cfg.d_model));
}

pub fn init_mlm_head(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) {
    store.insert("head.mlm.w", init_linear(cfg.d_model, cfg.num_clusters, rng));
    store.insert("head.mlm.b", Matrix::zeros(1, cfg.num_clusters));
}

/// `[audio | video]` channel-wise concatenation, audio first.
pub fn fuse(g: &mut Graph, audio: Var, video: Var) -> Result<Var> {
    let (ta, tv) = (g.value(audio).rows(), g.value(video).rows());
    if ta != tv {
        return Err(shape_err(format!("fuse: audio has {ta} frames, video has {tv}")));
    }
    Ok(g.concat_cols(&[audio, video]))
}

/// Fixed sinusoidal positional table, `T × d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(t, d);
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            pe[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub struct EncoderOutput {
    /// Residual-stream output of every block, first to last.
    pub layers: Vec<Var>,
    /// Final layer-normed hidden state consumed by the heads.
    pub top: Var,
}

fn affine_norm(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str, eps: f64) -> Var {
    let n = g.norm_rows(x, eps);
    let gain = b.get(g, &format!("{prefix}.g"));
    let bias = b.get(g, &format!("{prefix}.b"));
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

fn linear(g: &mut Graph, b: &mut Binder, x: Var, w: &str, bias: &str) -> Var {
    let wv = b.get(g, w);
    let bv = b.get(g, bias);
    let y = g.matmul(x, wv);
    g.add_row(y, bv)
}

fn self_attention(g: &mut Graph, b: &mut Binder, x: Var, l: usize, cfg: &EncoderConfig) -> Var {
    let q = linear(g, b, x, &layer(l, "attn.wq"), &layer(l, "attn.bq"));
    let k = linear(g, b, x, &layer(l, "attn.wk"), &layer(l, "attn.bk"));
    let v = linear(g, b, x, &layer(l, "attn.wv"), &layer(l, "attn.bv"));
    let dh = cfg.d_model / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Var> = (0..cfg.num_heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            g.matmul(p, vh)
        })
        .collect();
    let o = g.concat_cols(&heads);
    linear(g, b, o, &layer(l, "attn.wo"), &layer(l, "attn.bo"))
}

/// Bidirectional encoder over one fused sequence.
pub fn encode(g: &mut Graph, b: &mut Binder, fused: Var, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    let in_rows = b.lookup("encoder.in.w").map(Matrix::rows).unwrap_or(0);
    let (t, width) = g.value(fused).shape();
    if width != in_rows {
        return Err(shape_err(format!("encoder expects {in_rows}-dim input, got {width}")));
    }
    let h = linear(g, b, fused, "encoder.in.w", "encoder.in.b");
    let pe = g.constant(sinusoidal_positions(t, cfg.d_model));
    let mut h = g.add(h, pe);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let a = affine_norm(g, b, h, &layer(l, "ln1"), cfg.ln_eps);
        let att = self_attention(g, b, a, l, cfg);
        h = g.add(h, att);
        let a = affine_norm(g, b, h, &layer(l, "ln2"), cfg.ln_eps);
        let f = linear(g, b, a, &layer(l, "ffn.w1"), &layer(l, "ffn.b1"));
        let f = g.gelu(f);
        let f = linear(g, b, f, &layer(l, "ffn.w2"), &layer(l, "ffn.b2"));
        h = g.add(h, f);
        layers.push(h);
    }
    let top = affine_norm(g, b, h, "encoder.ln_f", cfg.ln_eps);
    Ok(EncoderOutput { layers, top })
}

pub fn regression_head(g: &mut Graph, b: &mut Binder, h: Var) -> Var {
    linear(g, b, h, "head.reg.w", "head.reg.b")
}

pub fn mlm_head(g: &mut Graph, b: &mut Binder, h: Var) -> Var {
    linear(g, b, h, "head.mlm.w", "head.mlm.b")
}
