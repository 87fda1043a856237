use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::NnError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a parameter is initialised and whether weight decay applies to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    Normal { std: f32 },
    Constant(f32),
}

/// Ordered, named collection of parameter tensors.
///
/// Two stores built by the same architecture code have the same names in the
/// same order, so they can be combined element-wise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on duplicate names since those are
    /// always an architecture bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.decay.push(decay);
        ParamId(id)
    }

    pub fn add_init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        decay: bool,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f32).sqrt();
                sample_normal(n, std, rng)
            }
            Init::Normal { std } => sample_normal(n, std, rng),
            Init::Constant(v) => vec![v; n],
        };
        self.add(name, Tensor::new(shape.to_vec(), data), decay)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// True when both stores have identical names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Replaces the tensor stored under `name`, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), NnError> {
        let id = self
            .id(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(NnError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Largest element-wise absolute difference against a store with the same layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f32 {
        assert!(self.same_layout(other));
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f32::max)
    }

    /// Euclidean distance between two stores, accumulated in `f64`.
    pub fn l2_distance(&self, other: &ParamStore) -> f64 {
        assert!(self.same_layout(other));
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn sample_normal<R: Rng>(n: usize, std: f32, rng: &mut R) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}
