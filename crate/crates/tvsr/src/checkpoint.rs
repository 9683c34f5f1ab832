//! Checkpoint archive.
//!
//! ```text
//! "TVCK"  u32 tensor count
//! per tensor: u16 name length, name (UTF-8), u8 ndim, u32 dims, f32 payload
//! u32 settings length, settings as key=value text
//! ```
//!
//! Weights are stored under their parameter names; shared TAB layers appear
//! once. Training checkpoints add the Adam moments as `adam.m.<name>` and
//! `adam.v.<name>` and the loss history as `train.losses`.

use std::collections::HashMap;
use std::path::Path;

use tvsr_core::model::{TvsrnConfig, TvsrnParams};
use tvsr_core::train::{Adam, TrainConfig, TrainState, Trainer};
use tvsr_core::{ParamStore, Tensor};

use crate::config::{model_to_kv, settings_from_kv, train_to_kv, Key};
use crate::container::Reader;
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 4] = b"TVCK";
const LOSSES: &str = "train.losses";
const STATE_KEYS: &[Key] = &[
    Key { name: "step", default: "", help: "completed steps" },
    Key { name: "adam_t", default: "", help: "Adam update count" },
];

/// A trained model, optionally with everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TvsrnParams,
    pub store: ParamStore<f32>,
    pub training: Option<(TrainConfig, TrainState)>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self { params: t.params.clone(), store: t.store.clone(), training: Some((t.cfg.clone(), t.state.clone())) }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let (cfg, state) = self
            .training
            .ok_or_else(|| Error::Data("checkpoint holds weights only, no optimizer state".into()))?;
        Ok(Trainer::resume(self.params, self.store, cfg, state)?)
    }

    pub fn config(&self) -> &TvsrnConfig {
        &self.params.config
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor<f32>)> =
        ck.store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    let mut text = model_to_kv(&ck.params.config);
    let losses;
    if let Some((cfg, state)) = &ck.training {
        for (prefix, moments) in [("adam.m.", &state.adam.m), ("adam.v.", &state.adam.v)] {
            for ((_, n, _), m) in ck.store.iter().zip(moments) {
                tensors.push((format!("{prefix}{n}"), m));
            }
        }
        if !state.losses.is_empty() {
            losses = Tensor::from_vec(&[state.losses.len()], state.losses.clone()).unwrap();
            tensors.push((LOSSES.to_string(), &losses));
        }
        text.push_str(&train_to_kv(cfg));
        text.push_str(&format!("step={}\nadam_t={}\n", state.step, state.adam.t));
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (n, t) in &tensors {
        put_tensor(&mut out, n, t);
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(path, bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"TVCK\""));
    }
    let count = r.u32("tensor count")?;
    let mut tensors: HashMap<String, (usize, Tensor<f32>)> = HashMap::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail(at, "size overflow"))?;
        let data = r.f32s(n, &name)?;
        let t = Tensor::from_vec(&dims, data).map_err(|e| r.fail(at, e.to_string()))?;
        if tensors.insert(name.clone(), (at, t)).is_some() {
            return Err(r.fail(at, format!("duplicate tensor {name:?}")));
        }
    }
    let text_at = r.pos;
    let len = r.u32("settings length")? as usize;
    let text = std::str::from_utf8(r.take(len, "settings")?).map_err(|_| r.fail(text_at + 4, "settings are not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after settings"));
    }
    let settings = settings_from_kv(text, &path.display().to_string(), STATE_KEYS)
        .map_err(|e| r.fail(text_at, e.to_string()))?;
    let model = settings.model_config().map_err(|e| r.fail(text_at, e.to_string()))?;
    let (params, mut store) = TvsrnParams::init::<f32>(&model, 0)?;

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let (at, t) = tensors.remove(name).ok_or_else(|| r.fail(8, format!("missing tensor {name:?}")))?;
        if t.shape() != shape {
            return Err(r.fail(at, format!("tensor {name:?} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let layout: Vec<(String, Vec<usize>)> = store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for ((name, shape), id) in layout.iter().zip(store.ids().collect::<Vec<_>>()) {
        *store.get_mut(id) = take(name, shape)?;
    }
    let training = if settings.raw("step").is_some() {
        let cfg = settings.train_config().map_err(|e| r.fail(text_at, e.to_string()))?;
        let step: u64 = settings.get("step").map_err(|e| r.fail(text_at, e.to_string()))?;
        let mut adam = Adam::from_config(&store, &cfg);
        adam.t = settings.get("adam_t").map_err(|e| r.fail(text_at, e.to_string()))?;
        for (i, (name, shape)) in layout.iter().enumerate() {
            adam.m[i] = take(&format!("adam.m.{name}"), shape)?;
            adam.v[i] = take(&format!("adam.v.{name}"), shape)?;
        }
        let losses = match tensors.remove(LOSSES) {
            Some((_, t)) => t.into_vec(),
            None => Vec::new(),
        };
        Some((cfg, TrainState { step, adam, losses }))
    } else {
        None
    };
    if let Some((name, (at, _))) = tensors.iter().min_by_key(|(_, (at, _))| *at) {
        return Err(r.fail(*at, format!("unexpected tensor {name:?}")));
    }
    Ok(Checkpoint { params, store, training })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_file(path)?)
}
