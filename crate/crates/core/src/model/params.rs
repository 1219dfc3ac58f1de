//! Parameter storage, initialization and the checkpoint container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// The five learnable components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    ImageEncoder,
    SparsePromptEncoder,
    DensePromptEncoder,
    MaskDecoder,
    ErrorDecoder,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::ImageEncoder,
        Component::SparsePromptEncoder,
        Component::DensePromptEncoder,
        Component::MaskDecoder,
        Component::ErrorDecoder,
    ];
}

pub struct Param {
    pub name: String,
    pub component: Component,
    pub var: Var,
    pub trainable: bool,
}

/// Every learnable tensor of a model, in creation order.
pub struct ParamStore {
    params: Vec<Param>,
    device: Device,
}

impl ParamStore {
    pub(crate) fn new(device: Device) -> Self {
        Self {
            params: Vec::new(),
            device,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn of_component(&self, c: Component) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.component == c)
    }

    pub(crate) fn set_trainable(&mut self, f: impl Fn(Component) -> bool) {
        for p in &mut self.params {
            p.trainable = f(p.component);
        }
    }

    /// Flat copy of every parameter value, for exact before/after comparisons.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f32>)>> {
        self.params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }

    fn push(&mut self, component: Component, name: String, value: Tensor) -> Result<Tensor> {
        if self.get(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.params.push(Param {
            name,
            component,
            var,
            trainable: true,
        });
        Ok(t)
    }

    /// Overwrites values in place from `(name, data)` pairs; shapes must match.
    pub(crate) fn assign(&self, name: &str, data: Vec<f32>) -> Result<()> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if p.var.elem_count() != data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected {} values, found {}",
                p.var.elem_count(),
                data.len()
            )));
        }
        let t = Tensor::from_vec(data, p.var.shape(), &self.device)?;
        p.var.set(&t)?;
        Ok(())
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
}

/// Scoped parameter creation with a name prefix and a seeded initializer.
pub(crate) struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut StreamRng,
    prefix: String,
    component: Component,
}

impl<'a> ParamBuilder<'a> {
    pub(crate) fn new(store: &'a mut ParamStore, rng: &'a mut StreamRng, component: Component, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
            component,
        }
    }

    pub(crate) fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{}", self.prefix, name),
            component: self.component,
        }
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}.{}", self.prefix, name)
    }

    /// Uniform in `[-bound, bound]`.
    pub(crate) fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| (self.rng.random::<f64>() * 2.0 - 1.0) * bound)
            .map(|v| v as f32)
            .collect();
        self.tensor(name, shape, data)
    }

    pub(crate) fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut *self.rng) as f32).collect();
        self.tensor(name, shape, data)
    }

    pub(crate) fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.tensor(name, shape, vec![value; n])
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        let full = self.full_name(name);
        self.store.push(self.component, full, t)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cosam-checkpoint-v1";
const MAGIC: &[u8; 8] = b"COSAMCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch_hash: String,
    /// Architecture description needed to rebuild the model.
    pub arch: serde_json::Value,
    /// Trainer bookkeeping (epoch, step, optimizer metadata); free-form.
    pub state: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

/// A header plus raw little-endian `f32` payloads in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.header.tensors.len() != self.data.len() {
            return Err(Error::Checkpoint("header/data length mismatch".into()));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for values in &self.data {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format '{}' (expected '{CHECKPOINT_FORMAT}')",
                header.format
            )));
        }
        let mut data = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let n: usize = meta.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            data.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, data })
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorMeta, &[f32])> {
        self.header
            .tensors
            .iter()
            .zip(&self.data)
            .find(|(m, _)| m.name == name)
            .map(|(m, d)| (m, d.as_slice()))
    }
}

pub(crate) fn tensor_data(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
