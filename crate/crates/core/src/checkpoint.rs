//! `FISH` checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FISH"  version:u16
//! config_len:u32  config text (UTF-8)
//! count:u32  then per tensor, sorted by name:
//!     name_len:u32  name  rank:u32  dims:u32×rank  data:f32×numel
//! has_momentum:u8  [count:u32  tensors as above]
//! ```
//!
//! Tensors are the model parameters, batch-norm running statistics
//! (`{bn}.running_mean`, `{bn}.running_var`) and the input normalization
//! (`__norm.mean`, `__norm.std`). Momentum buffers are keyed by parameter
//! name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::fishnet::{build, FishNetConfig, Model};
use crate::graph::{NodeId, Op};
use crate::optim::Sgd;

pub const MAGIC: &[u8; 4] = b"FISH";
pub const VERSION: u16 = 1;
pub const NORM_MEAN: &str = "__norm.mean";
pub const NORM_STD: &str = "__norm.std";

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: BTreeMap<String, StoredTensor>,
    pub momentum: Option<BTreeMap<String, StoredTensor>>,
}

impl Checkpoint {
    /// Snapshot of a model, its input normalization and optionally the
    /// optimizer state.
    pub fn capture(model: &Model<f32>, norm: &Normalization, sgd: Option<&Sgd<f32>>) -> Self {
        let g = &model.graph;
        let mut tensors = BTreeMap::new();
        for n in g.nodes() {
            match n.op() {
                Op::Parameter => {
                    let v = n.value().expect("parameters hold values");
                    tensors.insert(n.name().to_string(), StoredTensor::new(v.shape(), v.data().to_vec()));
                }
                Op::BatchNorm { .. } => {
                    let rs = n.running_stats().expect("batch norm keeps running stats");
                    let c = rs.mean.len();
                    tensors.insert(format!("{}.running_mean", n.name()), StoredTensor::new(&[c], rs.mean.clone()));
                    tensors.insert(format!("{}.running_var", n.name()), StoredTensor::new(&[c], rs.var.clone()));
                }
                _ => {}
            }
        }
        let c = norm.mean.len();
        tensors.insert(NORM_MEAN.into(), StoredTensor::new(&[c], norm.mean.clone()));
        tensors.insert(NORM_STD.into(), StoredTensor::new(&[c], norm.std.clone()));
        let momentum = sgd.map(|s| {
            s.velocity()
                .iter()
                .map(|(name, v)| {
                    let shape = g
                        .find(name)
                        .map(|id| g.node(id).shape().to_vec())
                        .unwrap_or_else(|| vec![v.len()]);
                    (name.clone(), StoredTensor::new(&shape, v.clone()))
                })
                .collect()
        });
        Checkpoint {
            config_text: model.config.to_text(),
            tensors,
            momentum,
        }
    }

    pub fn config(&self) -> Result<FishNetConfig> {
        FishNetConfig::parse(&self.config_text)
    }

    pub fn normalization(&self) -> Result<Normalization> {
        let get = |k: &str| {
            self.tensors
                .get(k)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))
        };
        Ok(Normalization {
            mean: get(NORM_MEAN)?,
            std: get(NORM_STD)?,
        })
    }

    /// Copy stored values into a model built from the same config. Every
    /// parameter and running statistic must be present with its shape.
    pub fn restore_into(&self, model: &mut Model<f32>) -> Result<()> {
        let g = &mut model.graph;
        let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id()).collect();
        for id in ids {
            let name = g.node(id).name().to_string();
            match g.node(id).op() {
                Op::Parameter => {
                    let t = self.lookup(&name, g.node(id).shape())?;
                    g.param_mut(id).data_mut().copy_from_slice(&t.data);
                }
                Op::BatchNorm { .. } => {
                    let c = g.node(id).shape()[1];
                    let mean = self.lookup(&format!("{name}.running_mean"), &[c])?.data.clone();
                    let var = self.lookup(&format!("{name}.running_var"), &[c])?.data.clone();
                    let rs = g.running_stats_mut(id).expect("batch norm keeps running stats");
                    rs.mean = mean;
                    rs.var = var;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Rebuild the model described by the embedded config and load it.
    pub fn to_model(&self, batch: usize) -> Result<Model<f32>> {
        let mut model = build(&self.config()?, batch, 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Optimizer with the stored momentum buffers, if any.
    pub fn restore_sgd(&self, momentum: f64, weight_decay: f64) -> Sgd<f32> {
        let mut sgd = Sgd::new(momentum, weight_decay);
        for (name, t) in self.momentum.iter().flatten() {
            sgd.set_velocity(name.clone(), t.data.clone());
        }
        sgd
    }

    fn lookup(&self, name: &str, shape: &[usize]) -> Result<&StoredTensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?} in the checkpoint, model expects {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_tensors(&mut out, &self.tensors);
        match &self.momentum {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                put_tensors(&mut out, m);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a FISH checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()?;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let tensors = r.tensors()?;
        let momentum = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.tensors()?),
            f => return Err(Error::Format(format!("bad momentum flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_text,
            tensors,
            momentum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &BTreeMap<String, StoredTensor>) {
    put_u32(out, tensors.len());
    for (name, t) in tensors {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape.len());
        for &d in &t.shape {
            put_u32(out, d);
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, StoredTensor>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let len = self.u32()?;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Format(format!("tensor `{name}` out of name order")));
            }
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.bytes.len()))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` shape {shape:?} is too large")))?;
            let data = self
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            prev = Some(name.clone());
            out.insert(name, StoredTensor { shape, data });
        }
        Ok(out)
    }
}
