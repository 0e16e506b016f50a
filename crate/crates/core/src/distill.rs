//! Self-distillation: the EMA teacher, its targets, and the losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{normalize_cols, Graph, Var};
use crate::corruption::{MaskSet, ModalitySelection};
use crate::encoder::{EncoderOutput, ENCODER_PREFIX};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::{Binder, ParamStore};
use crate::synthdata::{FeatureSequence, VideoClip};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub lambda_b: f64,
    pub lambda_e: f64,
    pub n: u64,
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lambda_b && self.lambda_b <= self.lambda_e && self.lambda_e < 1.0) {
            return Err(config_err("EMA schedule needs 0 < lambda_b <= lambda_e < 1"));
        }
        if self.n < 1 {
            return Err(config_err("ema_n must be >= 1"));
        }
        Ok(())
    }
}

/// Linear ramp from `lambda_b` to `lambda_e` over the first `n` updates.
pub fn lambda_at(step: u64, sched: &EmaSchedule) -> f64 {
    let frac = step.min(sched.n) as f64 / sched.n as f64;
    sched.lambda_b + (sched.lambda_e - sched.lambda_b) * frac
}

/// Which stream the teacher drops when the student dropped one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherDropoutMode {
    #[default]
    None,
    Same,
    Opposite,
}

impl TeacherDropoutMode {
    pub fn teacher_selection(self, student: ModalitySelection) -> ModalitySelection {
        use ModalitySelection::*;
        match (self, student) {
            (TeacherDropoutMode::None, _) | (_, Both) => Both,
            (TeacherDropoutMode::Same, s) => s,
            (TeacherDropoutMode::Opposite, AudioOnly) => VideoOnly,
            (TeacherDropoutMode::Opposite, VideoOnly) => AudioOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub ema_lambda_b: f64,
    pub ema_lambda_e: f64,
    pub ema_n: u64,
    pub avg_last_k: usize,
    pub teacher_dropout_mode: TeacherDropoutMode,
    pub instance_norm_eps: f64,
    pub reg_weight: f64,
    pub mlm_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ema_lambda_b: 0.999,
            ema_lambda_e: 0.9999,
            ema_n: 30_000,
            // 8 of 12 at base scale; the toy encoder has 2.
            avg_last_k: 2,
            teacher_dropout_mode: TeacherDropoutMode::None,
            instance_norm_eps: 1e-5,
            reg_weight: 1.0,
            mlm_weight: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn schedule(&self) -> EmaSchedule {
        EmaSchedule { lambda_b: self.ema_lambda_b, lambda_e: self.ema_lambda_e, n: self.ema_n }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.schedule().validate()?;
        if self.avg_last_k < 1 || self.avg_last_k > num_layers {
            return Err(config_err(format!(
                "avg_last_k = {} must lie in [1, num_layers = {num_layers}]",
                self.avg_last_k
            )));
        }
        if !(self.instance_norm_eps > 0.0) {
            return Err(config_err("instance_norm_eps must be positive"));
        }
        Ok(())
    }
}

/// EMA copy of the student's encoder body. Extractors are never copied: the
/// teacher path always reads them from the student.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub update_step: u64,
}

impl TeacherState {
    pub fn from_student(student: &ParamStore) -> Self {
        Self { params: student.filter_prefix(ENCODER_PREFIX), update_step: 0 }
    }

    /// `θ ← λ·θ + (1 − λ)·φ` over every encoder tensor. `student` may be the
    /// full student store; only encoder tensors are read.
    pub fn ema_update(&mut self, student: &ParamStore, lambda: f64) -> Result<()> {
        for (name, theta) in self.params.iter_mut() {
            let phi = student.get(name).ok_or_else(|| shape_err(format!("student lacks teacher tensor `{name}`")))?;
            if phi.shape() != theta.shape() {
                return Err(shape_err(format!("shape mismatch for `{name}`")));
            }
            for (t, p) in theta.data_mut().iter_mut().zip(phi.data()) {
                *t = lambda * *t + (1.0 - lambda) * p;
            }
        }
        self.update_step += 1;
        Ok(())
    }
}

/// Per-channel normalisation over the time axis (population variance).
pub fn instance_norm(h: &Matrix, eps: f64) -> Matrix {
    normalize_cols(h, eps).0
}

/// Teacher regression targets restricted to the masked union.
#[derive(Clone, Debug)]
pub struct DistillTargets {
    pub y: Matrix,
    pub valid: MaskSet,
}

/// Mean of the instance-normalised outputs of the last `k` layers.
pub fn make_targets(layers: &[Matrix], k: usize, eps: f64) -> Result<Matrix> {
    if k == 0 || k > layers.len() {
        return Err(config_err(format!("cannot average last {k} of {} layers", layers.len())));
    }
    let mut acc: Option<Matrix> = None;
    for l in &layers[layers.len() - k..] {
        let n = instance_norm(l, eps);
        match &mut acc {
            Some(a) => a.add_assign(&n),
            None => acc = Some(n),
        }
    }
    let mut y = acc.expect("k >= 1");
    y.scale_assign(1.0 / k as f64);
    Ok(y)
}

/// Teacher pass: clean aligned audio and full video through the student's
/// extractors and the teacher's encoder, all as constants. Returns the graph
/// so callers can confirm nothing in it is tracked.
pub fn teacher_graph(
    cfg: &ModelConfig,
    student: &ParamStore,
    teacher: &TeacherState,
    audio_clean: &FeatureSequence,
    video: &VideoClip,
    selection: ModalitySelection,
) -> Result<(Graph, EncoderOutput)> {
    let mut g = Graph::new();
    let mut b = Binder::layered(&teacher.params, student);
    let out = model::clean_forward(&mut g, &mut b, cfg, audio_clean, video, selection)?;
    Ok((g, out))
}

/// Per-layer teacher outputs for a student that chose `student_sel`.
pub fn teacher_forward(
    cfg: &ModelConfig,
    student: &ParamStore,
    teacher: &TeacherState,
    audio_clean: &FeatureSequence,
    video: &VideoClip,
    mode: TeacherDropoutMode,
    student_sel: ModalitySelection,
) -> Result<Vec<Matrix>> {
    let sel = mode.teacher_selection(student_sel);
    let (g, out) = teacher_graph(cfg, student, teacher, audio_clean, video, sel)?;
    debug_assert_eq!(g.tracked_nodes(), 0);
    Ok(out.layers.iter().map(|v| g.value(*v).clone()).collect())
}

/// `Σ_{t ∈ valid} ‖x_t − y_t‖²`.
pub fn loss_reg(g: &mut Graph, x: Var, targets: &DistillTargets) -> Result<Var> {
    if g.value(x).shape() != targets.y.shape() {
        return Err(shape_err(format!("predictions {:?} vs targets {:?}", g.value(x).shape(), targets.y.shape())));
    }
    if targets.valid.is_empty() {
        log::warn!("regression loss over an empty mask union");
    }
    Ok(g.masked_sq_err(x, &targets.y, targets.valid.indices()))
}

/// `Σ_{t ∈ valid} CE(labels_t, softmax(logits_t))`.
pub fn loss_mlm(g: &mut Graph, logits: Var, labels: &[usize], valid: &MaskSet) -> Result<Var> {
    let (t, k) = g.value(logits).shape();
    if labels.len() != t {
        return Err(shape_err(format!("{} labels for {t} frames", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Range(format!("label {bad} >= K = {k}")));
    }
    Ok(g.masked_ce(logits, labels, valid.indices()))
}

/// `L_reg + L_mlm` with optional weights (1.0 by default).
pub fn loss_total(g: &mut Graph, reg: Var, mlm: Option<Var>, cfg: &DistillConfig) -> Var {
    let r = if cfg.reg_weight == 1.0 { reg } else { g.scale(reg, cfg.reg_weight) };
    match mlm {
        Some(m) => {
            let m = if cfg.mlm_weight == 1.0 { m } else { g.scale(m, cfg.mlm_weight) };
            g.add(r, m)
        }
        None => r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_schedule() -> EmaSchedule {
        EmaSchedule { lambda_b: 0.999, lambda_e: 0.9999, n: 30_000 }
    }

    #[test]
    fn lambda_schedule_values() {
        let s = reference_schedule();
        assert_eq!(lambda_at(0, &s), 0.999);
        assert_eq!(lambda_at(30_000, &s), 0.9999);
        assert_eq!(lambda_at(60_000, &s), 0.9999);
        assert!((lambda_at(15_000, &s) - 0.99945).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lambda_is_monotone_and_clamped(a in 0u64..100_000, b in 0u64..100_000) {
            let s = reference_schedule();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(lambda_at(lo, &s) <= lambda_at(hi, &s));
            prop_assert!(lambda_at(hi, &s) <= s.lambda_e);
        }
    }

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("encoder.x", Matrix::filled(2, 2, v));
        s.insert("audio.w", Matrix::filled(1, 1, 5.0));
        s
    }

    #[test]
    fn ema_update_arithmetic() {
        let mut t = TeacherState::from_student(&store(1.0));
        assert_eq!(t.params.len(), 1);
        t.ema_update(&store(0.0), 1.0).unwrap();
        assert_eq!(t.params.get("encoder.x").unwrap(), &Matrix::filled(2, 2, 1.0));
        t.ema_update(&store(0.0), 0.999).unwrap();
        assert!(t.params.get("encoder.x").unwrap().data().iter().all(|&v| v == 0.999));
        t.ema_update(&store(3.0), 0.0).unwrap();
        assert_eq!(t.params.get("encoder.x").unwrap(), &Matrix::filled(2, 2, 3.0));
        assert_eq!(t.update_step, 3);
        let mut bad = ParamStore::new();
        bad.insert("encoder.x", Matrix::zeros(3, 2));
        assert!(t.ema_update(&bad, 0.5).is_err());
    }

    #[test]
    fn instance_norm_cases() {
        let c = Matrix::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]);
        assert!(instance_norm(&c, 1e-5).data().iter().all(|&v| v == 0.0));
        let h = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let n = instance_norm(&h, 1e-5);
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in n.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn make_targets_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 4.0], vec![6.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![3.0, 1.0], vec![0.0, 1.5]]);
        assert_eq!(make_targets(&[b.clone(), a.clone()], 1, 1e-5).unwrap(), instance_norm(&a, 1e-5));
        let same = make_targets(&[a.clone(), a.clone(), a.clone()], 3, 1e-5).unwrap();
        assert!(same.max_abs_diff(&instance_norm(&a, 1e-5)) < 1e-15);
        assert!(matches!(make_targets(&[a], 2, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn teacher_selection_modes() {
        use ModalitySelection::*;
        assert_eq!(TeacherDropoutMode::None.teacher_selection(AudioOnly), Both);
        assert_eq!(TeacherDropoutMode::Same.teacher_selection(AudioOnly), AudioOnly);
        assert_eq!(TeacherDropoutMode::Opposite.teacher_selection(AudioOnly), VideoOnly);
        assert_eq!(TeacherDropoutMode::Opposite.teacher_selection(VideoOnly), AudioOnly);
        assert_eq!(TeacherDropoutMode::Same.teacher_selection(Both), Both);
    }

    #[test]
    fn regression_loss_arithmetic() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[vec![1.0, -1.0], vec![5.0, 5.0]]));
        let t = DistillTargets { y: Matrix::zeros(2, 2), valid: MaskSet::new([0], 2).unwrap() };
        let l = loss_reg(&mut g, x, &t).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let t2 = DistillTargets { y: g.value(x).clone(), valid: MaskSet::new([0, 1], 2).unwrap() };
        let l = loss_reg(&mut g, x, &t2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let empty = DistillTargets { y: Matrix::zeros(2, 2), valid: MaskSet::empty() };
        let l = loss_reg(&mut g, x, &empty).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn mlm_loss_cases() {
        let mut g = Graph::new();
        let k = 5;
        let logits = g.constant(Matrix::zeros(4, k));
        let m = MaskSet::new([0, 2, 3], 4).unwrap();
        let l = loss_mlm(&mut g, logits, &[0, 4, 1, 2], &m).unwrap();
        assert!((g.value(l).item() - 3.0 * (k as f64).ln()).abs() < 1e-12);

        let one = g.constant(Matrix::from_rows(&[vec![0.3], vec![-2.0]]));
        let l = loss_mlm(&mut g, one, &[0, 0], &MaskSet::new([0, 1], 2).unwrap()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let sharp = g.constant(Matrix::from_rows(&[vec![60.0, 0.0]]));
        let l = loss_mlm(&mut g, sharp, &[0], &MaskSet::new([0], 1).unwrap()).unwrap();
        assert!(g.value(l).item() < 1e-20);

        // Two classes, logits (0.5, −1.2), label 1: −log(e^{−1.2} / (e^{0.5} + e^{−1.2})).
        let two = g.constant(Matrix::from_rows(&[vec![0.5, -1.2]]));
        let l = loss_mlm(&mut g, two, &[1], &MaskSet::new([0], 1).unwrap()).unwrap();
        let p1 = (-1.2f64).exp() / (0.5f64.exp() + (-1.2f64).exp());
        assert!((g.value(l).item() + p1.ln()).abs() < 1e-10);

        assert!(matches!(loss_mlm(&mut g, two, &[2], &MaskSet::empty()), Err(Error::Range(_))));
    }

    #[test]
    fn total_loss_is_unit_weighted_sum() {
        let cfg = DistillConfig::default();
        let mut g = Graph::new();
        let r = g.constant(Matrix::scalar(1.5));
        let m = g.constant(Matrix::scalar(2.5));
        let both = loss_total(&mut g, r, Some(m), &cfg);
        assert_eq!(g.value(both).item(), 4.0);
        let only = loss_total(&mut g, r, None, &cfg);
        assert_eq!(g.value(only).item(), 1.5);
    }
}
