//! The full Siamese change detector: encoder, fusion and decoder.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Tape, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::msafa::{Msafa, MsafaConfig};
use crate::nn::{add_conv, Graph, LayerParams};
use crate::ops::SpectralMode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub use_dafa: bool,
    pub use_msafa: bool,
    pub msafa: MsafaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let msafa = MsafaConfig::new(encoder.dim);
        Self { encoder, use_dafa: true, use_msafa: true, msafa }
    }
}

impl ModelConfig {
    /// Encoder width and a square image size in one go, keeping the
    /// dependent widths consistent.
    pub fn with_dims(mut self, image: usize, patch: usize, dim: usize) -> Self {
        self.encoder.image_size = (image, image);
        self.encoder.patch = patch;
        self.encoder.dim = dim;
        self.encoder.dafa.channels = dim;
        self.msafa.channels = dim;
        self
    }

    pub fn with_toggles(mut self, dafa: bool, msafa: bool) -> Self {
        self.use_dafa = dafa;
        self.use_msafa = msafa;
        self
    }

    pub fn with_spectral(mut self, mode: SpectralMode) -> Self {
        self.encoder.dafa.spectral = mode;
        self
    }

    /// Encoder configuration with the DAFA toggle applied.
    pub fn effective_encoder(&self) -> EncoderConfig {
        let mut e = self.encoder.clone();
        if !self.use_dafa {
            e.dafa_position = None;
        }
        e
    }

    pub fn fuse_channels(&self) -> usize {
        self.msafa.out_channels
    }
}

/// Either the flow-aligned MSAFA head or plain concat + 1x1 conv.
#[derive(Clone, Debug)]
pub enum Fusion {
    Msafa(Msafa),
    Concat { prefix: String, in_channels: usize, out_channels: usize },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let encoder = Encoder::new(config.effective_encoder())?;
        if config.msafa.channels != config.encoder.dim {
            return Err(Error::Config(format!(
                "fusion width {} differs from encoder dim {}",
                config.msafa.channels, config.encoder.dim
            )));
        }
        let fusion = if config.use_msafa {
            Fusion::Msafa(Msafa::new("fuse", config.msafa.clone())?)
        } else {
            Fusion::Concat {
                prefix: "fuse.concat".into(),
                in_channels: 2 * config.encoder.dim,
                out_channels: config.msafa.out_channels,
            }
        };
        let decoder = Decoder::new("dec", DecoderConfig::new(config.fuse_channels()))?;
        Ok(Self { config, encoder, fusion, decoder })
    }

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl rand::Rng) -> Result<()> {
        self.encoder.register(params, rng)?;
        match &self.fusion {
            Fusion::Msafa(m) => m.register(params, rng)?,
            Fusion::Concat { prefix, in_channels, out_channels } => {
                add_conv(params, prefix, *in_channels, *out_channels, 1, 1, rng)?
            }
        }
        self.decoder.register(params, rng)
    }

    /// Freshly initialised parameters from `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<LayerParams<T>> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut params = LayerParams::new();
        self.register(&mut params, &mut rng)?;
        Ok(params)
    }

    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, f0: Var, f1: Var) -> Result<Var> {
        match &self.fusion {
            Fusion::Msafa(m) => m.forward(g, f0, f1),
            Fusion::Concat { prefix, .. } => {
                let cat = g.concat(&[f0, f1], 1)?;
                g.conv(prefix, cat, 1, 0, 1, 1)
            }
        }
    }

    /// Change logits `N x 2 x H x W` for an image pair.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, img0: Var, img1: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(img0).dims4()?;
        let feats = self.encoder.encode_pair(g, img0, img1)?;
        let fused = self.fuse(g, feats.f0, feats.f1)?;
        self.decoder.forward(g, fused, (h, w))
    }

    /// Hard predictions (`0`/`1` per pixel, `N x H x W` row-major).
    pub fn predict(&self, params: &LayerParams<f32>, img0: &Tensor<f32>, img1: &Tensor<f32>) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, params);
        let a = g.constant(img0.clone());
        let b = g.constant(img1.clone());
        let logits = self.forward(&mut g, a, b)?;
        Ok(argmax_classes(g.value(logits)))
    }
}

/// Per-pixel argmax over the class axis of `N x 2 x H x W` logits; ties
/// resolve to class 0.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(i * k + c) * plane + p] > d[(i * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
