//! Binary checkpoint: `MGMS`, a `u32` format version, a `u32`-prefixed JSON
//! metadata block, a `u32` record count, then one record per tensor in name
//! order (name length, name, rank, dims, little-endian `f32` payload).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Stage, TrainState};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Moments, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MGMS";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_STEP: &str = "adam.step";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Last finished stage.
    pub completed: Option<Stage>,
    /// Stage in progress and steps taken, for training checkpoints.
    pub training: Option<(Stage, u64)>,
    pub adam: Option<AdamConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn collect(stores: &[&ParamStore<f32>]) -> BTreeMap<String, Tensor<f32>> {
    let mut out = BTreeMap::new();
    for s in stores {
        for (name, t) in s.iter() {
            let mut t = t.clone();
            t.set_requires_grad(false);
            out.insert(name.to_string(), t);
        }
    }
    out
}

impl Checkpoint {
    /// Parameters only. The encoder is rebuilt from the seed in its config.
    pub fn from_model(model: &Model) -> Self {
        let c = &model.codec;
        let tensors = collect(&[&c.encoder, &c.decoder, &c.codebook, &model.transformer.params]);
        Self { meta: CheckpointMeta { model: model.config.clone(), completed: model.completed, training: None, adam: None }, tensors }
    }

    /// Parameters plus optimizer state, enough to resume exactly.
    pub fn from_state(state: &TrainState) -> Self {
        let mut ck = Self::from_model(&state.model);
        ck.meta.training = Some((state.stage, state.step));
        ck.meta.adam = Some(state.adam.config);
        for (name, m) in state.adam.state() {
            ck.tensors.insert(format!("{ADAM_M}{name}"), m.m.clone());
            ck.tensors.insert(format!("{ADAM_V}{name}"), m.v.clone());
        }
        ck.tensors.insert(ADAM_STEP.into(), Tensor::new(&[1], vec![state.adam.steps_taken() as f32]).expect("one element"));
        ck
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.model.clone(), 0)?;
        model.codec.encoder.load_from(&self.tensors)?;
        model.codec.decoder.load_from(&self.tensors)?;
        model.codec.codebook.load_from(&self.tensors)?;
        model.transformer.params.load_from(&self.tensors)?;
        model.completed = self.meta.completed;
        Ok(model)
    }

    pub fn to_state(&self) -> Result<TrainState> {
        let (Some((stage, step)), Some(adam_cfg)) = (self.meta.training, self.meta.adam) else {
            return Err(Error::Checkpoint("not a training checkpoint: no optimizer state".into()));
        };
        let steps = self.tensors.get(ADAM_STEP).ok_or_else(|| Error::Checkpoint("missing adam.step".into()))?;
        let mut state = BTreeMap::new();
        for (name, m) in &self.tensors {
            if let Some(param) = name.strip_prefix(ADAM_M) {
                let v = self.tensors.get(&format!("{ADAM_V}{param}")).ok_or_else(|| Error::Checkpoint(format!("missing second moment of {param}")))?;
                state.insert(param.to_string(), Moments { m: m.clone(), v: v.clone() });
            }
        }
        Ok(TrainState { model: self.to_model()?, stage, step, adam: Adam::from_parts(adam_cfg, steps.data()[0] as u64, state) })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit the u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ck.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut out = Vec::with_capacity(64 + meta.len() + ck.tensors.values().map(|t| 4 * t.numel() + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    put_u32(&mut out, ck.tensors.len())?;
    for (name, t) in &ck.tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic bytes, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let len = r.u32("metadata length")?;
    let at = r.pos;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len, "metadata")?).map_err(|e| Error::Format { offset: at, message: format!("metadata: {e}") })?;
    let count = r.u32("record count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?).map_err(|_| Error::Format { offset: at, message: "name is not utf-8".into() })?;
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail(format!("tensor {name} is too large")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?, "payload")?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if tensors.insert(name.to_string(), Tensor::new(&shape, data)?).is_some() {
            return Err(r.fail(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after the last record"));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
