use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Ones,
}

/// Named parameter tensors with same-shaped gradient slots.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    init_seed: u64,
}

/// Parameter gradients produced by one backward pass, indexed like the store.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(len: usize) -> Self {
        Gradients { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add_to(&mut self, id: usize, g: &Tensor) {
        if self.grads.len() <= id {
            self.grads.resize(id + 1, None);
        }
        match &mut self.grads[id] {
            Some(t) => t.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Elementwise sum; summation order is the caller's responsibility.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_to(i, g);
            }
        }
    }
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new(), init_seed }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        let id = self.values.len();
        let t = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::from_vec(rows, cols, vec![1.0; rows * cols]),
            Init::Glorot => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let mut r = rng::stream(self.init_seed, &[0x1417, id as u64]);
                Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-bound..bound)).collect())
            }
        };
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(rows, cols));
        self.values.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Add `grads` into the gradient slots; repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (slot, g) in self.grads.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                slot.add_assign(g);
            }
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub(crate) fn values_and_grads(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.values.iter_mut().zip(self.grads.iter())
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            init_seed: self.init_seed,
            config,
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, t)| NamedTensor { name: name.clone(), tensor: t.clone() })
                .collect(),
        }
    }

    /// Overwrite values from `ckpt`, requiring identical names and shapes.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!("unsupported checkpoint format {:?}", ckpt.format)));
        }
        if ckpt.tensors.len() != self.values.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} tensors, network expects {}",
                ckpt.tensors.len(),
                self.values.len()
            )));
        }
        for (i, nt) in ckpt.tensors.iter().enumerate() {
            if nt.name != self.names[i] || nt.tensor.shape() != self.values[i].shape() {
                return Err(Error::Input(format!(
                    "checkpoint tensor {:?} {:?} does not match {:?} {:?}",
                    nt.name,
                    nt.tensor.shape(),
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            if nt.tensor.data.len() != nt.tensor.rows * nt.tensor.cols {
                return Err(Error::Input(format!("checkpoint tensor {:?} is truncated", nt.name)));
            }
        }
        for (v, nt) in self.values.iter_mut().zip(&ckpt.tensors) {
            *v = nt.tensor.clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "vagco-params/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

/// Serialized parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub init_seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
