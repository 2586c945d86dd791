//! Multiscale aware flow aggregation: flow prediction, cross-temporal warped
//! differences and the MSAI multiscale block.
//!
//! ```text
//! (Ff, F'f) = split(flow_proj(gconv5(concat(f0, f1))))
//! Fb  = MSAI(branch_proj(f0))      F'b = MSAI(branch_proj(f1))
//! F'out = warp(Fb, Ff) - F'b       Fout = warp(F'b, F'f) - Fb
//! out = fuse_proj(concat(Fout, F'out))
//! ```

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{add_conv_with, Graph, Init, LayerParams};
use crate::tensor::{Scalar, Tensor};

/// MSAI is a linear stack of about seven convs; the default init would
/// shrink the signal by roughly sqrt(3) at each, so these keep unit gain.
fn lecun(fan_in: usize) -> Init {
    Init::LecunUniform { fan_in }
}

/// Per-pixel displacement `N x 2 x H x W` in pixels; channel 0 is dx
/// (positive samples from the right), channel 1 is dy (positive samples
/// from below).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T: Scalar>(Tensor<T>);

impl<T: Scalar> FlowField<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 4 || t.shape()[1] != 2 {
            return Err(Error::Dimension(format!("flow field must be N x 2 x H x W, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::Data("flow field has non-finite values".into()));
        }
        Ok(Self(t))
    }

    /// The same displacement everywhere.
    pub fn uniform(n: usize, h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let plane = h * w;
        Self(Tensor::from_fn(&[n, 2, h, w], |i| T::from_f64_lossy(if (i / plane) % 2 == 0 { dx } else { dy })))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsafaConfig {
    pub channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub rates: Vec<usize>,
    /// Start the flow projection at zero so both flows begin as identity warps.
    pub zero_init_flow: bool,
}

impl MsafaConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, out_channels: 64, groups: 4, rates: vec![5, 7, 9, 11], zero_init_flow: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::Config("MSAFA widths and groups must be positive".into()));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "MSAFA channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        if self.rates.is_empty() || self.rates.contains(&0) {
            return Err(Error::Config("MSAI needs at least one positive dilation rate".into()));
        }
        Ok(())
    }
}

/// Intermediate maps of one fusion pass, kept for tests and diagnostics.
pub struct MsafaTrace {
    pub fused: Var,
    pub flow: Var,
    pub flow_prime: Var,
    pub fb: Var,
    pub fb_prime: Var,
    /// `warp(F'b, F'f) - Fb`
    pub out: Var,
    /// `warp(Fb, Ff) - F'b`
    pub out_prime: Var,
}

#[derive(Clone, Debug)]
pub struct Msafa {
    pub prefix: String,
    pub config: MsafaConfig,
}

impl Msafa {
    pub fn new(prefix: impl Into<String>, config: MsafaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { prefix: prefix.into(), config })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn msai(&self) -> Msai {
        Msai {
            prefix: self.name("msai"),
            channels: self.config.channels,
            groups: self.config.groups,
            rates: self.config.rates.clone(),
        }
    }

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl Rng) -> Result<()> {
        let c = self.config.channels;
        add_conv_with(params, &self.name("gconv5"), (2 * c, 2 * c, 5, self.config.groups), lecun, rng)?;
        if self.config.zero_init_flow {
            params.add(self.name("flow_proj.w"), &[4, 2 * c, 1, 1], Init::Zeros, true, rng)?;
            params.add(self.name("flow_proj.b"), &[4], Init::Zeros, true, rng)?;
        } else {
            add_conv_with(params, &self.name("flow_proj"), (2 * c, 4, 1, 1), lecun, rng)?;
        }
        add_conv_with(params, &self.name("branch_proj"), (c, c, 1, 1), lecun, rng)?;
        self.msai().register(params, rng)?;
        add_conv_with(params, &self.name("fuse_proj"), (2 * c, self.config.out_channels, 1, 1), lecun, rng)
    }

    /// The two flow fields `(F_f, F'_f)`, each `N x 2 x H x W`.
    pub fn compute_flows<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, f0: Var, f1: Var) -> Result<(Var, Var)> {
        self.check_pair(g, f0, f1)?;
        let cat = g.concat(&[f0, f1], 1)?;
        let mid = g.conv(&self.name("gconv5"), cat, 1, 2, 1, self.config.groups)?;
        let mid = g.conv(&self.name("flow_proj"), mid, 1, 0, 1, 1)?;
        let parts = g.split(mid, 1, 2)?;
        Ok((parts[0], parts[1]))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, f0: Var, f1: Var) -> Result<Var> {
        Ok(self.trace(g, f0, f1, None)?.fused)
    }

    /// Full pass; `flows` replaces the predicted flow fields when given.
    pub fn trace<T: Scalar>(
        &self,
        g: &mut Graph<'_, '_, T>,
        f0: Var,
        f1: Var,
        flows: Option<(Var, Var)>,
    ) -> Result<MsafaTrace> {
        self.check_pair(g, f0, f1)?;
        let (flow, flow_prime) = match flows {
            Some(f) => f,
            None => self.compute_flows(g, f0, f1)?,
        };
        // Both temporal branches share weights, so run them as one batch.
        let n = g.shape(f0)[0];
        let both = g.concat(&[f0, f1], 0)?;
        let both = g.conv(&self.name("branch_proj"), both, 1, 0, 1, 1)?;
        let both = self.msai().forward(g, both)?;
        let fb = g.narrow(both, 0, 0, n)?;
        let fb_prime = g.narrow(both, 0, n, n)?;

        let warped = g.grid_sample(fb, flow)?;
        let out_prime = g.sub(warped, fb_prime)?;
        let warped = g.grid_sample(fb_prime, flow_prime)?;
        let out = g.sub(warped, fb)?;
        let cat = g.concat(&[out, out_prime], 1)?;
        let fused = g.conv(&self.name("fuse_proj"), cat, 1, 0, 1, 1)?;
        Ok(MsafaTrace { fused, flow, flow_prime, fb, fb_prime, out, out_prime })
    }

    fn check_pair<T: Scalar>(&self, g: &Graph<'_, '_, T>, f0: Var, f1: Var) -> Result<()> {
        let (s0, s1) = (g.shape(f0), g.shape(f1));
        if s0 != s1 {
            return Err(Error::Dimension(format!("MSAFA inputs differ: {s0:?} vs {s1:?}")));
        }
        if s0.len() != 4 || s0[1] != self.config.channels {
            return Err(Error::Dimension(format!("MSAFA expects N x {} x H x W, got {s0:?}", self.config.channels)));
        }
        Ok(())
    }
}

/// Multiscale aware integration: parallel dilated convs, softmax-weighted
/// 3x3 neighbourhood aggregation, a residual 1x1 and a three-conv ensemble.
#[derive(Clone, Debug)]
pub struct Msai {
    pub prefix: String,
    pub channels: usize,
    pub groups: usize,
    pub rates: Vec<usize>,
}

/// Number of convs averaged at the end of MSAI.
pub const ENSEMBLE: usize = 3;

impl Msai {
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl Rng) -> Result<()> {
        let c = self.channels;
        for &r in &self.rates {
            add_conv_with(params, &self.name(&format!("dil{r}")), (c, c, 3, 1), lecun, rng)?;
            add_conv_with(params, &self.name(&format!("dil{r}.gconv")), (c, c, 3, self.groups), lecun, rng)?;
            add_conv_with(params, &self.name(&format!("dil{r}.pconv")), (c, c, 1, 1), lecun, rng)?;
        }
        add_conv_with(params, &self.name("weight"), (c, 9, 1, 1), lecun, rng)?;
        add_conv_with(params, &self.name("conv_uw"), (c, c, 3, 1), lecun, rng)?;
        add_conv_with(params, &self.name("res"), (c, c, 1, 1), lecun, rng)?;
        for i in 0..ENSEMBLE {
            add_conv_with(params, &self.name(&format!("ens{i}")), (c, c, 3, 1), lecun, rng)?;
        }
        Ok(())
    }

    /// Sum over rates of `pconv(gconv(dilated_conv(f)))`.
    pub fn dilation_stage<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, f: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(f).dims4()?;
        if c != self.channels {
            return Err(Error::Dimension(format!("MSAI expects {} channels, got {:?}", self.channels, g.shape(f))));
        }
        let mut acc: Option<Var> = None;
        for &r in &self.rates {
            let y = g.conv(&self.name(&format!("dil{r}")), f, 1, r, r, 1)?;
            let y = g.conv(&self.name(&format!("dil{r}.gconv")), y, 1, 1, 1, self.groups)?;
            let y = g.conv(&self.name(&format!("dil{r}.pconv")), y, 1, 0, 1, 1)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("rates validated non-empty"))
    }

    /// Softmax weights over the 9 neighbourhood positions, `N x 9 x H x W`.
    pub fn position_weights<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, fd: Var) -> Result<Var> {
        let scores = g.conv(&self.name("weight"), fd, 1, 0, 1, 1)?;
        g.softmax(scores, 1)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, f: Var) -> Result<Var> {
        let (n, c, h, w) = g.value(f).dims4()?;
        let fd = self.dilation_stage(g, f)?;
        let weights = self.position_weights(g, fd)?;
        let weights = g.reshape(weights, &[n, 1, 9, h * w])?;
        let cols = g.unfold3x3(fd)?;
        let cols = g.reshape(cols, &[n, c, 9, h * w])?;
        let weighted = g.mul(cols, weights)?;
        let fuw = g.sum_axes(weighted, &[2])?;
        let fuw = g.reshape(fuw, &[n, c, h, w])?;
        let fuw = g.conv(&self.name("conv_uw"), fuw, 1, 1, 1, 1)?;
        let res = g.conv(&self.name("res"), fuw, 1, 0, 1, 1)?;
        let fr = g.add(res, fuw)?;
        let mut acc: Option<Var> = None;
        for i in 0..ENSEMBLE {
            let y = g.conv(&self.name(&format!("ens{i}")), fr, 1, 1, 1, 1)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(g.scale(acc.expect("non-empty ensemble"), 1.0 / ENSEMBLE as f64))
    }
}
