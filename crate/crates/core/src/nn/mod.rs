//! Parameters and the pieces that operate on them: lazy binding onto a tape,
//! low-rank deltas, the AdamW optimiser and the checkpoint container.

pub mod checkpoint;
pub mod lowrank;
pub mod optim;
pub mod params;

use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use lowrank::LowRankDelta;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, LayerParams, Param};

/// A tape plus a parameter set. Parameters become tape leaves the first
/// time a block asks for them; frozen ones are recorded as constants.
pub struct Graph<'t, 'p, T: Scalar> {
    tape: &'t mut Tape<T>,
    params: &'p LayerParams<T>,
    bound: HashMap<String, Var>,
}

impl<'t, 'p, T: Scalar> Graph<'t, 'p, T> {
    pub fn new(tape: &'t mut Tape<T>, params: &'p LayerParams<T>) -> Self {
        Self { tape, params, bound: HashMap::new() }
    }

    /// Routes parameter `name` to an existing tape variable instead of the
    /// stored value (used by gradient checks that perturb parameters).
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = self.params.get(name).ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn params(&self) -> &LayerParams<T> {
        self.params
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(name, _)| self.params.get(name).is_some_and(|p| p.trainable))
            .filter_map(|(name, v)| self.tape.grad(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

impl<T: Scalar> Deref for Graph<'_, '_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, '_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        self.tape
    }
}

/// Registers a conv weight (`O x I/groups x k x k`, Kaiming) and zero bias
/// under `prefix.w` / `prefix.b`.
pub fn add_conv<T: Scalar>(
    params: &mut LayerParams<T>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    groups: usize,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    add_conv_with(params, prefix, (in_ch, out_ch, k, groups), |fan_in| Init::KaimingUniform { fan_in }, rng)
}

/// [`add_conv`] with a caller-chosen weight init; `geom` is
/// `(in, out, kernel, groups)`.
pub fn add_conv_with<T: Scalar>(
    params: &mut LayerParams<T>,
    prefix: &str,
    (in_ch, out_ch, k, groups): (usize, usize, usize, usize),
    init: impl Fn(usize) -> Init,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    let fan_in = in_ch / groups * k * k;
    params.add(format!("{prefix}.w"), &[out_ch, in_ch / groups, k, k], init(fan_in), true, rng)?;
    params.add(format!("{prefix}.b"), &[out_ch], Init::Zeros, true, rng)
}

/// Registers a linear layer (`O x I` Kaiming weight, zero bias).
pub fn add_linear<T: Scalar>(
    params: &mut LayerParams<T>,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    params.add(format!("{prefix}.w"), &[out_dim, in_dim], Init::KaimingUniform { fan_in: in_dim }, true, rng)?;
    params.add(format!("{prefix}.b"), &[out_dim], Init::Zeros, true, rng)
}

impl<T: Scalar> Graph<'_, '_, T> {
    /// Convolution with parameters `prefix.w` / `prefix.b`.
    pub fn conv(
        &mut self,
        prefix: &str,
        x: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, Some(b), stride, padding, dilation, groups)
    }

    pub fn dense(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.linear(x, w, Some(b))
    }
}
