//! `AV2C` checkpoints.
//!
//! Layout (little-endian): magic, version `u32`, kind `u32`, config blob
//! (`u64` length + UTF-8), tensor count `u32`, then per tensor: group `u8`,
//! name (`u16` length + UTF-8), dtype `u8`, rank `u8`, dims `u32 × rank`,
//! payload. Trailer: seed, step, teacher update step, Adam step, all `u64`.
//! Tensors are stored as f64 so that resuming is bit-exact.

use std::fs;
use std::path::Path;

use super::adam::{Adam, AdamConfig};
use super::pretrain::{PretrainConfig, TrainState};
use crate::distill::TeacherState;
use crate::error::{config_err, Error, Result};
use crate::params::ParamStore;
use crate::synthdata::Reader;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"AV2C";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain = 0,
    Probe = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Student = 0,
    Teacher = 1,
    AdamM = 2,
    AdamV = 3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: String,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    pub seed: u64,
    pub step: u64,
    pub teacher_update_step: u64,
    pub adam_t: u64,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cfg: &PretrainConfig) -> Self {
        Self {
            kind: CheckpointKind::Pretrain,
            config: serde_json::to_string(cfg).expect("config serialises"),
            student: state.student.clone(),
            teacher: state.teacher.params.clone(),
            adam_m: state.adam.m.clone(),
            adam_v: state.adam.v.clone(),
            seed: cfg.seed,
            step: state.step,
            teacher_update_step: state.teacher.update_step,
            adam_t: state.adam.t,
        }
    }

    /// The stored pretraining configuration.
    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        serde_json::from_str(&self.config).map_err(|e| config_err(format!("checkpoint config: {e}")))
    }

    /// Rebuilds training state, checking it against `cfg`.
    pub fn into_state(self, cfg: &PretrainConfig) -> Result<TrainState> {
        if self.kind != CheckpointKind::Pretrain {
            return Err(config_err("not a pretraining checkpoint"));
        }
        cfg.model.check_params(&self.student)?;
        let expected_teacher = TeacherState::from_student(&self.student);
        if !expected_teacher.params.same_layout(&self.teacher)
            || !self.student.same_layout(&self.adam_m)
            || !self.student.same_layout(&self.adam_v)
        {
            return Err(config_err("checkpoint tensor groups are inconsistent"));
        }
        if self.seed != cfg.seed {
            return Err(config_err(format!("checkpoint seed {} differs from configured seed {}", self.seed, cfg.seed)));
        }
        Ok(TrainState {
            student: self.student,
            teacher: TeacherState { params: self.teacher, update_step: self.teacher_update_step },
            adam: Adam { cfg: cfg.train.adam(), m: self.adam_m, v: self.adam_v, t: self.adam_t },
            step: self.step,
        })
    }

    /// Checkpoint holding params only (probe models).
    pub fn params_only(
        kind: CheckpointKind,
        config: String,
        params: ParamStore,
        adam: &Adam,
        seed: u64,
        step: u64,
    ) -> Self {
        Self {
            kind,
            config,
            student: params,
            teacher: ParamStore::new(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            seed,
            step,
            teacher_update_step: 0,
            adam_t: adam.t,
        }
    }

    pub fn adam(&self, cfg: AdamConfig) -> Adam {
        Adam { cfg, m: self.adam_m.clone(), v: self.adam_v.clone(), t: self.adam_t }
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut b = MAGIC.to_vec();
    put_u32(&mut b, CHECKPOINT_VERSION);
    put_u32(&mut b, c.kind as u32);
    put_u64(&mut b, c.config.len() as u64);
    b.extend_from_slice(c.config.as_bytes());
    let groups = [
        (Group::Student, &c.student),
        (Group::Teacher, &c.teacher),
        (Group::AdamM, &c.adam_m),
        (Group::AdamV, &c.adam_v),
    ];
    put_u32(&mut b, groups.iter().map(|(_, s)| s.len() as u32).sum());
    for (group, store) in groups {
        for (name, m) in store.iter() {
            b.push(group as u8);
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F64);
            b.push(2);
            put_u32(&mut b, m.rows() as u32);
            put_u32(&mut b, m.cols() as u32);
            for v in m.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for v in [c.seed, c.step, c.teacher_update_step, c.adam_t] {
        put_u64(&mut b, v);
    }
    b
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let kind = match r.u32()? {
        0 => CheckpointKind::Pretrain,
        1 => CheckpointKind::Probe,
        k => return Err(r.corrupt(format!("unknown checkpoint kind {k}"))),
    };
    let clen = usize::try_from(r.u64()?).map_err(|_| r.corrupt("config length overflow"))?;
    let config = String::from_utf8(r.take(clen)?.to_vec()).map_err(|_| r.corrupt("config is not UTF-8"))?;
    let count = r.u32()?;
    let mut stores: [ParamStore; 4] = Default::default();
    for _ in 0..count {
        let group = r.u8()? as usize;
        if group >= stores.len() {
            return Err(r.corrupt(format!("unknown tensor group {group}")));
        }
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.corrupt("tensor name is not UTF-8"))?;
        if r.u8()? != DTYPE_F64 {
            return Err(r.corrupt(format!("unsupported dtype for `{name}`")));
        }
        if r.u8()? != 2 {
            return Err(r.corrupt(format!("unsupported rank for `{name}`")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| r.corrupt("tensor size overflow"))?;
        let data = r.f64s(n)?;
        stores[group].insert(name, Matrix::from_vec(rows, cols, data));
    }
    let seed = r.u64()?;
    let step = r.u64()?;
    let teacher_update_step = r.u64()?;
    let adam_t = r.u64()?;
    r.finish()?;
    let [student, teacher, adam_m, adam_v] = stores;
    Ok(Checkpoint { kind, config, student, teacher, adam_m, adam_v, seed, step, teacher_update_step, adam_t })
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(c))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, path)
}
