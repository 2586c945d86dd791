//! Low-rank weight deltas for frozen projections.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, LayerParams};
use crate::tensor::Scalar;

/// Trainable `B (O x r) . A (r x I)` added to a frozen `O x I` weight,
/// scaled by `alpha`. `B` starts at zero so the delta is inert at step 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDelta {
    pub prefix: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankDelta {
    pub const DEFAULT_RANK: usize = 4;

    pub fn new(prefix: impl Into<String>, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("low-rank delta needs rank >= 1".into()));
        }
        Ok(Self { prefix: prefix.into(), rank, alpha })
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.prefix)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.prefix)
    }

    /// Registers `A ~ N(0, 0.02)` and `B = 0`.
    pub fn register<T: Scalar>(
        &self,
        params: &mut LayerParams<T>,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        params.add(self.a_name(), &[self.rank, in_dim], Init::Normal(0.02), true, rng)?;
        params.add(self.b_name(), &[out_dim, self.rank], Init::Zeros, true, rng)
    }

    /// `x . (W + alpha B A)^T + bias`, computed as the frozen product plus
    /// `alpha (x A^T) B^T`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, x: Var, base_w: Var, bias: Option<Var>) -> Result<Var> {
        let base = g.linear(x, base_w, bias)?;
        let a = g.param(&self.a_name())?;
        let b = g.param(&self.b_name())?;
        let down = g.linear(x, a, None)?;
        let up = g.linear(down, b, None)?;
        let delta = g.scale(up, self.alpha);
        g.add(base, delta)
    }
}
