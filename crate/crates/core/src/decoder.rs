//! Simple feature pyramid decoder producing 2-class change logits.
//!
//! The fused map is rescaled to x4, x2, x1 and x1/2, each scale projected to
//! a common width, resized to the x4 grid and concatenated, then two 1x1
//! convs produce the logits, which are resized to the image size.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{add_conv, Graph, Init, LayerParams};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub in_channels: usize,
    /// Width of each pyramid level after projection.
    pub level_width: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl DecoderConfig {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, level_width: 32, hidden: 64, classes: 2 }
    }
}

const LEVELS: [&str; 4] = ["up4", "up2", "id", "down2"];

#[derive(Clone, Debug)]
pub struct Decoder {
    pub prefix: String,
    pub config: DecoderConfig,
}

impl Decoder {
    pub fn new(prefix: impl Into<String>, config: DecoderConfig) -> Result<Self> {
        if config.in_channels < 4 || config.in_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder input width must be a positive multiple of 4, got {}",
                config.in_channels
            )));
        }
        Ok(Self { prefix: prefix.into(), config })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn add_transpose<T: Scalar>(
        &self,
        params: &mut LayerParams<T>,
        part: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        params.add(
            self.name(&format!("{part}.w")),
            &[cin, cout, 2, 2],
            Init::KaimingUniform { fan_in: cin * 4 },
            true,
            rng,
        )?;
        params.add(self.name(&format!("{part}.b")), &[cout], Init::Zeros, true, rng)
    }

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl Rng) -> Result<()> {
        let c = self.config.in_channels;
        let lw = self.config.level_width;
        self.add_transpose(params, "up4.t1", c, c / 2, rng)?;
        self.add_transpose(params, "up4.t2", c / 2, c / 4, rng)?;
        self.add_transpose(params, "up2.t1", c, c / 2, rng)?;
        add_conv(params, &self.name("down2.conv"), c, c, 2, 1, rng)?;
        let widths = [c / 4, c / 2, c, c];
        for (level, w) in LEVELS.iter().zip(widths) {
            add_conv(params, &self.name(&format!("{level}.proj")), w, lw, 1, 1, rng)?;
        }
        add_conv(params, &self.name("head1"), 4 * lw, self.config.hidden, 1, 1, rng)?;
        add_conv(params, &self.name("head2"), self.config.hidden, self.config.classes, 1, 1, rng)
    }

    fn transpose<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, part: &str, x: Var) -> Result<Var> {
        let w = g.param(&self.name(&format!("{part}.w")))?;
        let b = g.param(&self.name(&format!("{part}.b")))?;
        g.conv_transpose(x, w, Some(b))
    }

    /// `fused` is `N x C x h x w` with `h, w >= 2`; returns `N x classes x H x W`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, fused: Var, out_hw: (usize, usize)) -> Result<Var> {
        let (_, c, h, w) = g.value(fused).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "decoder expects {} channels, got {:?}",
                self.config.in_channels,
                g.shape(fused)
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!("decoder needs a grid of at least 2x2, got {:?}", g.shape(fused))));
        }
        let up4 = self.transpose(g, "up4.t1", fused)?;
        let up4 = g.gelu(up4);
        let up4 = self.transpose(g, "up4.t2", up4)?;
        let up2 = self.transpose(g, "up2.t1", fused)?;
        let down = g.conv(&self.name("down2.conv"), fused, 2, 0, 1, 1)?;
        let (th, tw) = (4 * h, 4 * w);
        let mut levels = Vec::with_capacity(4);
        for (name, x) in LEVELS.iter().zip([up4, up2, fused, down]) {
            let y = g.conv(&self.name(&format!("{name}.proj")), x, 1, 0, 1, 1)?;
            levels.push(resize_to(g, y, th, tw)?);
        }
        let cat = g.concat(&levels, 1)?;
        let y = g.conv(&self.name("head1"), cat, 1, 0, 1, 1)?;
        let y = g.gelu(y);
        let y = g.conv(&self.name("head2"), y, 1, 0, 1, 1)?;
        resize_to(g, y, out_hw.0, out_hw.1)
    }
}

/// Bilinear resize that is skipped when the size already matches.
pub fn resize_to<T: Scalar>(g: &mut Graph<'_, '_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x);
    if s.len() == 4 && s[2] == h && s[3] == w {
        Ok(x)
    } else {
        g.resize_bilinear(x, h, w)
    }
}
