use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` (Kaiming-uniform with
    /// `a = sqrt(5)`, the usual conv/linear default).
    KaimingUniform {
        fan_in: usize,
    },
    /// Uniform in `[-sqrt(3/fan_in), sqrt(3/fan_in)]`: unit output variance
    /// for unit-variance input, for stacks of linear convs.
    LecunUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
    Normal(f64),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub init: Init,
    pub trainable: bool,
}

/// Named learnable tensors; names iterate in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for LayerParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> LayerParams<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Creates and initialises a parameter.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let value = sample_init(shape, init, rng);
        self.entries.insert(name, Param { value, init, trainable });
        Ok(())
    }

    /// Inserts an existing tensor (e.g. loaded from a checkpoint).
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        self.entries.insert(name, Param { value, init: Init::Zeros, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value).ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of scalar values across all (or only trainable) parameters.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries.values().filter(|p| p.trainable || !trainable_only).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), init: p.init, trainable: p.trainable }))
                .collect(),
        }
    }

    /// Copies values by name from `other`, which must hold exactly the same
    /// names and shapes. Trainability flags stay as configured here.
    pub fn load_values(&mut self, other: &LayerParams<T>) -> Result<()> {
        for name in self.entries.keys() {
            if !other.contains(name) {
                return Err(Error::Config(format!("checkpoint is missing parameter '{name}'")));
            }
        }
        for (name, p) in &other.entries {
            self.set_value(name, p.value.clone()).map_err(|e| match e {
                Error::Config(_) => Error::Config(format!("checkpoint has unexpected parameter '{name}'")),
                other => other,
            })?;
        }
        Ok(())
    }
}

fn sample_init<T: Scalar>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Constant(c) => Tensor::full(shape, T::from_f64_lossy(c)),
        Init::KaimingUniform { fan_in } => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        }
        Init::LecunUniform { fan_in } => {
            let bound = (3.0 / fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
        }
    }
}
