//! Distribution-aware Fourier aggregated adapter.
//!
//! Input and output are `N x L x C` token tensors on an `h x w` grid
//! (`L = h*w`, row-major). Inside, the block works on `N x C x h x w` maps:
//!
//! ```text
//! F'a  = in_proj(x)
//! Fdc  = proj(sigmoid(conv1d(stats(F'a))) * F'a)        channel statistics
//! Fdf  = Re DFT2(F'a)                                   spectral branch
//! F'd  = gconv3(Fdc + Fdf)
//! gate = sigmoid(linear(concat_i linear_i(AAP(F'd) + AMP(F'd))))
//! out  = x + out_proj(gate * F'd)
//! ```
//!
//! `out_proj` starts at zero, so a fresh adapter is an identity.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{add_conv, add_linear, Graph, Init, LayerParams};
use crate::ops::{PoolMode, SpectralMode};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DafaConfig {
    pub channels: usize,
    pub branches: usize,
    pub groups: usize,
    /// Kernel of the 1-D convolution over the three statistics. With
    /// kernel < 3 the remaining positions are averaged.
    pub stats_kernel: usize,
    pub spectral: SpectralMode,
    /// Scale the spectrum by `1/sqrt(L*C)` so its magnitude does not grow
    /// with the token count.
    pub normalize_spectrum: bool,
}

impl DafaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            branches: 4,
            groups: 4,
            stats_kernel: 3,
            spectral: SpectralMode::Real,
            normalize_spectrum: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || self.groups == 0 || self.branches == 0 {
            return Err(Error::Config("DAFA channels, groups and branches must be positive".into()));
        }
        if c % self.groups != 0 {
            return Err(Error::Config(format!("DAFA channels {c} not divisible by groups {}", self.groups)));
        }
        if c % self.branches != 0 {
            return Err(Error::Config(format!("DAFA channels {c} not divisible by branches {}", self.branches)));
        }
        if !(1..=3).contains(&self.stats_kernel) {
            return Err(Error::Config(format!("DAFA stats kernel must be 1..=3, got {}", self.stats_kernel)));
        }
        Ok(())
    }
}

/// A DAFA block whose parameters live under `prefix`.
#[derive(Clone, Debug)]
pub struct Dafa {
    pub prefix: String,
    pub config: DafaConfig,
}

impl Dafa {
    pub fn new(prefix: impl Into<String>, config: DafaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { prefix: prefix.into(), config })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl Rng) -> Result<()> {
        let c = self.config.channels;
        let k = self.config.stats_kernel;
        add_conv(params, &self.name("in_proj"), c, c, 1, 1, rng)?;
        params.add(self.name("daca.conv1d.w"), &[1, 1, k], Init::KaimingUniform { fan_in: k }, true, rng)?;
        params.add(self.name("daca.conv1d.b"), &[1], Init::Zeros, true, rng)?;
        add_conv(params, &self.name("daca.proj"), c, c, 1, 1, rng)?;
        add_conv(params, &self.name("gconv"), c, c, 3, self.config.groups, rng)?;
        let width = c / self.config.branches;
        for i in 0..self.config.branches {
            add_linear(params, &self.name(&format!("branch{i}")), c, width, rng)?;
        }
        add_linear(params, &self.name("gate"), c, c, rng)?;
        params.add(self.name("out_proj.w"), &[c, c, 1, 1], Init::Zeros, true, rng)?;
        params.add(self.name("out_proj.b"), &[c], Init::Zeros, true, rng)
    }

    /// Channel-statistics attention on an NCHW map, producing `F_dc`.
    pub fn daca_forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, f: Var) -> Result<Var> {
        let (n, c, _, _) = g.value(f).dims4()?;
        if c != self.config.channels {
            return Err(Error::Dimension(format!(
                "DAFA expects {} channels, got input {:?}",
                self.config.channels,
                g.shape(f)
            )));
        }
        let stats = daca_stats(g, f)?;
        let rows = g.reshape(stats, &[n * c, 1, 3])?;
        let w = g.param(&self.name("daca.conv1d.w"))?;
        let b = g.param(&self.name("daca.conv1d.b"))?;
        let red = g.conv1d(rows, w, Some(b), 0)?;
        let red = if g.shape(red)[2] > 1 { g.mean_axes(red, &[2])? } else { red };
        let red = g.reshape(red, &[n, c, 1, 1])?;
        let scale = g.sigmoid(red);
        let scaled = g.mul(f, scale)?;
        g.conv(&self.name("daca.proj"), scaled, 1, 0, 1, 1)
    }

    /// Applies the adapter to `N x L x C` tokens laid out on an `h x w` grid.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        let &[n, l, c] = &shape[..] else {
            return Err(Error::Dimension(format!("DAFA expects N x L x C tokens, got {shape:?}")));
        };
        if l != h * w {
            return Err(Error::Dimension(format!("token count {l} does not match a {h}x{w} grid")));
        }
        if c != self.config.channels {
            return Err(Error::Dimension(format!("DAFA expects {} channels, got {shape:?}", self.config.channels)));
        }
        let map = tokens_to_map(g, tokens, h, w)?;
        let fa = g.conv(&self.name("in_proj"), map, 1, 0, 1, 1)?;
        let fdc = self.daca_forward(g, fa)?;

        let fd = match self.config.spectral {
            SpectralMode::Off => fdc,
            mode => {
                let seq = map_to_tokens(g, fa)?;
                let spec = g.dft2(seq, mode)?;
                let spec =
                    if self.config.normalize_spectrum { g.scale(spec, 1.0 / ((l * c) as f64).sqrt()) } else { spec };
                let fdf = tokens_to_map(g, spec, h, w)?;
                g.add(fdc, fdf)?
            }
        };
        let fd = g.conv(&self.name("gconv"), fd, 1, 1, 1, self.config.groups)?;

        let avg = g.adaptive_pool(fd, PoolMode::Avg)?;
        let max = g.adaptive_pool(fd, PoolMode::Max)?;
        let pooled = g.add(avg, max)?;
        let pooled = g.reshape(pooled, &[n, c])?;
        let mut parts = Vec::with_capacity(self.config.branches);
        for i in 0..self.config.branches {
            parts.push(g.dense(&self.name(&format!("branch{i}")), pooled)?);
        }
        let fl = g.concat(&parts, 1)?;
        let gate = g.dense(&self.name("gate"), fl)?;
        let gate = g.sigmoid(gate);
        let gate = g.reshape(gate, &[n, c, 1, 1])?;
        let fld = g.mul(gate, fd)?;
        let ha = g.conv(&self.name("out_proj"), fld, 1, 0, 1, 1)?;
        let ha = map_to_tokens(g, ha)?;
        g.add(tokens, ha)
    }
}

/// Per-channel `(mean |f|, mean f, population std f)` as `N x C x 3`.
pub fn daca_stats<T: Scalar>(g: &mut Graph<'_, '_, T>, f: Var) -> Result<Var> {
    let (n, c, _, _) = g.value(f).dims4()?;
    let a = g.abs(f);
    let mean_abs = g.mean_axes(a, &[2, 3])?;
    let mean = g.mean_axes(f, &[2, 3])?;
    let std = g.std_axes(f, &[2, 3])?;
    let cols: Vec<Var> = [mean_abs, mean, std].into_iter().map(|s| g.reshape(s, &[n, c, 1])).collect::<Result<_>>()?;
    g.concat(&cols, 2)
}

/// `N x L x C -> N x C x h x w`.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<'_, '_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let &[n, _, c] = &shape[..] else {
        return Err(Error::Dimension(format!("expected N x L x C tokens, got {shape:?}")));
    };
    let t = g.permute(tokens, &[0, 2, 1])?;
    g.reshape(t, &[n, c, h, w])
}

/// `N x C x h x w -> N x L x C`.
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<'_, '_, T>, map: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(map).dims4()?;
    let t = g.reshape(map, &[n, c, h * w])?;
    g.permute(t, &[0, 2, 1])
}
