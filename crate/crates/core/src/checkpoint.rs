//! Single-file checkpoints: magic, little-endian `u64` header length, JSON
//! header, then raw little-endian tensor payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::model::{Group, Model};
use crate::nn::Param;
use crate::optim::Adam;
use crate::train::{config_hash, TrainConfig, Trainer, TrainerState};

pub const MAGIC: &[u8; 8] = b"TADAPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorGroup {
    Frozen,
    Trainable,
    Optimizer,
    Affinity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub group: TensorGroup,
    pub shape: [usize; 2],
    pub dtype: Dtype,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of the config file the run was started from, if any.
    pub config_file_hash: Option<String>,
    pub state: TrainerState,
    pub affinity_version: u64,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<TensorData>,
}

fn push_params(out: &mut Vec<(TensorMeta, TensorData)>, group: TensorGroup, name: &str, p: &Param<f32>) {
    let (r, c) = p.value.dim();
    let meta = TensorMeta { name: name.to_string(), group, shape: [r, c], dtype: Dtype::F32 };
    out.push((meta, TensorData::F32(p.value.iter().copied().collect())));
}

fn push_adam(out: &mut Vec<(TensorMeta, TensorData)>, prefix: &str, adam: &Adam<f32>) {
    for (kind, list) in [("m", &adam.m), ("v", &adam.v)] {
        for (i, a) in list.iter().enumerate() {
            let (r, c) = a.dim();
            let meta = TensorMeta { name: format!("{prefix}.{kind}.{i}"), group: TensorGroup::Optimizer, shape: [r, c], dtype: Dtype::F32 };
            out.push((meta, TensorData::F32(a.iter().copied().collect())));
        }
    }
}

impl Checkpoint {
    pub fn from_trainer(trainer: &mut Trainer, config_file_hash: Option<String>) -> Self {
        let mut tensors = Vec::new();
        trainer.model.visit_frozen(&mut |name, p| push_params(&mut tensors, TensorGroup::Frozen, name, p));
        trainer.model.visit_trainable(Group::All, &mut |name, p| push_params(&mut tensors, TensorGroup::Trainable, name, p));
        push_adam(&mut tensors, "adam", &trainer.adam);
        push_adam(&mut tensors, "troa_adam", &trainer.troa_adam);
        let aff = trainer.affinity();
        let n = aff.num_tasks();
        tensors.push((
            TensorMeta { name: "affinity.columns".into(), group: TensorGroup::Affinity, shape: [n, n], dtype: Dtype::F64 },
            TensorData::F64(aff.columns.iter().flatten().copied().collect()),
        ));
        let (metas, data) = tensors.into_iter().unzip();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config_hash: config_hash(&trainer.config),
            config: trainer.config.clone(),
            config_file_hash,
            state: trainer.state(),
            affinity_version: aff.step_count,
            tensors: metas,
        };
        Self { header, data }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for d in &self.data {
            match d {
                TensorData::F32(v) => v.iter().try_for_each(|x| f.write_all(&x.to_le_bytes()))?,
                TensorData::F64(v) => v.iter().try_for_each(|x| f.write_all(&x.to_le_bytes()))?,
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        if config_hash(&header.config) != header.config_hash {
            return Err(bad("config hash does not match the stored config"));
        }
        let mut pos = 16 + len;
        let mut data = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.shape[0] * t.shape[1];
            let chunk = bytes.get(pos..pos + n * t.dtype.size()).ok_or_else(|| bad(&format!("truncated payload for {}", t.name)))?;
            pos += chunk.len();
            data.push(match t.dtype {
                Dtype::F32 => TensorData::F32(chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                Dtype::F64 => TensorData::F64(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { header, data })
    }

    fn tensors(&self, group: TensorGroup) -> impl Iterator<Item = (&TensorMeta, &TensorData)> {
        self.header.tensors.iter().zip(&self.data).filter(move |(m, _)| m.group == group)
    }

    /// Rebuilds the model and overwrites every parameter with the stored values.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(&self.header.config.model, self.header.config.seed)?;
        let mut frozen = self.tensors(TensorGroup::Frozen);
        let mut err = None;
        model.visit_frozen(&mut |name, p| load_param(&mut frozen, name, p, &mut err));
        let mut trainable = self.tensors(TensorGroup::Trainable);
        model.visit_trainable(Group::All, &mut |name, p| load_param(&mut trainable, name, p, &mut err));
        if let Some(e) = err {
            return Err(e);
        }
        if frozen.next().is_some() || trainable.next().is_some() {
            return Err(Error::Checkpoint("checkpoint has more parameters than the model".into()));
        }
        Ok(model)
    }

    pub fn affinity(&self) -> Result<AffinityMatrix> {
        let (meta, data) = self.tensors(TensorGroup::Affinity).next().ok_or_else(|| Error::Checkpoint("no affinity tensor".into()))?;
        let TensorData::F64(v) = data else {
            return Err(Error::Checkpoint("affinity must be stored as f64".into()));
        };
        let n = meta.shape[1];
        Ok(AffinityMatrix { columns: v.chunks(n).map(|c| c.to_vec()).collect(), step_count: self.header.affinity_version })
    }

    fn adam(&self, prefix: &str) -> Result<Adam<f32>> {
        let mut adam = Adam::new(&self.header.config.optimizer);
        for (meta, data) in self.tensors(TensorGroup::Optimizer) {
            let Some(rest) = meta.name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) else { continue };
            let TensorData::F32(v) = data else {
                return Err(Error::Checkpoint(format!("{} must be f32", meta.name)));
            };
            let a = Array2::from_shape_vec((meta.shape[0], meta.shape[1]), v.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            match rest.split_once('.') {
                Some(("m", _)) => adam.m.push(a),
                Some(("v", _)) => adam.v.push(a),
                _ => return Err(Error::Checkpoint(format!("unknown optimizer tensor {}", meta.name))),
            }
        }
        Ok(adam)
    }

    /// A trainer that continues exactly where the saved one stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let model = self.model()?;
        let affinity = self.affinity()?;
        let adam = self.adam("adam")?;
        let troa_adam = self.adam("troa_adam")?;
        Trainer::resume(self.header.config, model, adam, troa_adam, affinity, self.header.state)
    }
}

fn load_param<'a>(
    it: &mut impl Iterator<Item = (&'a TensorMeta, &'a TensorData)>,
    name: &str,
    p: &mut Param<f32>,
    err: &mut Option<Error>,
) {
    if err.is_some() {
        return;
    }
    let fail = |m: String| Some(Error::Checkpoint(m));
    match it.next() {
        None => *err = fail(format!("missing tensor {name}")),
        Some((meta, data)) => {
            let (r, c) = p.value.dim();
            if meta.name != name || meta.shape != [r, c] {
                *err = fail(format!("expected {name} {:?}, found {} {:?}", [r, c], meta.name, meta.shape));
            } else if let TensorData::F32(v) = data {
                p.value.as_slice_mut().expect("contiguous parameter").copy_from_slice(v);
            } else {
                *err = fail(format!("{name} must be f32"));
            }
        }
    }
}
