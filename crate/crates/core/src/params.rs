//! Named parameter storage shared by every module.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered parameter table with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(alloc::format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Kaiming-style uniform init: `U(-sqrt(1/fan_in), sqrt(1/fan_in)) * gain`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = gain * crate::math::sqrt(1.0 / fan_in.max(1) as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    /// Entries drawn from `N(0, std²)`, the usual embedding-table init.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| crate::rng::normal(rng, 0.0, std)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds graph gradients into the stored `grad` buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.per_param.iter().enumerate() {
            if let (Some(g), Some(p)) = (g, self.params.get_mut(i)) {
                p.grad.add_assign(g);
            }
        }
    }

    /// Overwrites the value of `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "ParamStore::assign",
                p.value.shape(),
                value.shape(),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .per_param
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum();
        crate::math::sqrt(sq)
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.per_param.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
