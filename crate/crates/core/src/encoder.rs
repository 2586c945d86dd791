//! Shared-weight Siamese transformer encoder.
//!
//! Both images are patch-embedded and pushed through the same stack of
//! attention blocks as one `2N` batch. A cross-temporal gate (TTAG) follows
//! every local block; the DAFA adapter follows the chosen global block.
//! Query and value projections are frozen with trainable low-rank deltas.

use rand::Rng;

use crate::autograd::Var;
use crate::dafa::{map_to_tokens, tokens_to_map, Dafa, DafaConfig};
use crate::error::{Error, Result};
use crate::nn::{add_conv, add_linear, Graph, Init, LayerParams, LowRankDelta};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Attention inside non-overlapping `window x window` token windows.
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: (usize, usize),
    pub patch: usize,
    pub dim: usize,
    pub blocks: Vec<BlockKind>,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub ttag: bool,
    pub pos_embed: bool,
    /// Block index after which DAFA runs; must name a global block.
    pub dafa_position: Option<usize>,
    pub dafa: DafaConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        use BlockKind::*;
        Self {
            in_channels: 3,
            image_size: (64, 64),
            patch: 8,
            dim: 64,
            blocks: vec![Local, Local, Local, Global],
            window: 4,
            heads: 4,
            mlp_ratio: 2,
            lora_rank: LowRankDelta::DEFAULT_RANK,
            lora_alpha: 1.0,
            ttag: true,
            pos_embed: true,
            dafa_position: Some(3),
            dafa: DafaConfig::new(64),
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by patch {}", self.patch)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        let (gh, gw) = self.grid();
        if self.blocks.contains(&BlockKind::Local)
            && (self.window == 0 || gh % self.window != 0 || gw % self.window != 0)
        {
            return Err(Error::Config(format!("token grid {gh}x{gw} not divisible by window {}", self.window)));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("low-rank delta needs rank >= 1".into()));
        }
        if let Some(p) = self.dafa_position {
            if self.blocks.get(p) != Some(&BlockKind::Global) {
                return Err(Error::Config(format!("DAFA position {p} is not a global attention block")));
            }
            if self.dafa.channels != self.dim {
                return Err(Error::Config(format!(
                    "DAFA width {} differs from encoder dim {}",
                    self.dafa.channels, self.dim
                )));
            }
            self.dafa.validate()?;
        }
        Ok(())
    }

    /// Stable fingerprint of the configuration.
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(format!("{self:?}").as_bytes())
    }
}

/// Encoder outputs for the two dates, each `N x C x h x w`.
#[derive(Clone, Copy, Debug)]
pub struct BitemporalFeatures {
    pub f0: Var,
    pub f1: Var,
    pub fingerprint: u32,
}

/// Pre-norm multi-head self-attention plus MLP, both residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub prefix: String,
    pub kind: BlockKind,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub q_delta: LowRankDelta,
    pub v_delta: LowRankDelta,
}

impl AttentionBlock {
    pub fn new(prefix: &str, kind: BlockKind, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            kind,
            dim: cfg.dim,
            heads: cfg.heads,
            window: cfg.window,
            mlp_ratio: cfg.mlp_ratio,
            q_delta: LowRankDelta::new(format!("{prefix}.q"), cfg.lora_rank, cfg.lora_alpha)?,
            v_delta: LowRankDelta::new(format!("{prefix}.v"), cfg.lora_rank, cfg.lora_alpha)?,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl Rng) -> Result<()> {
        let c = self.dim;
        for ln in ["ln1", "ln2"] {
            params.add(self.name(&format!("{ln}.g")), &[c], Init::Ones, true, rng)?;
            params.add(self.name(&format!("{ln}.b")), &[c], Init::Zeros, true, rng)?;
        }
        // Frozen base projections for q and v; k and the output stay trainable.
        // k has no bias: softmax over keys is blind to it.
        for p in ["q", "v"] {
            params.add(self.name(&format!("{p}.w")), &[c, c], Init::KaimingUniform { fan_in: c }, false, rng)?;
            params.add(self.name(&format!("{p}.b")), &[c], Init::Zeros, false, rng)?;
        }
        self.q_delta.register(params, c, c, rng)?;
        self.v_delta.register(params, c, c, rng)?;
        params.add(self.name("k.w"), &[c, c], Init::KaimingUniform { fan_in: c }, true, rng)?;
        add_linear(params, &self.name("proj"), c, c, rng)?;
        add_linear(params, &self.name("mlp1"), c, c * self.mlp_ratio, rng)?;
        add_linear(params, &self.name("mlp2"), c * self.mlp_ratio, c, rng)
    }

    /// `tokens` is `N x L x C` on an `h x w` grid.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        let &[n, l, c] = &shape[..] else {
            return Err(Error::Dimension(format!("attention expects N x L x C, got {shape:?}")));
        };
        if l != h * w || c != self.dim {
            return Err(Error::Dimension(format!(
                "attention block got {shape:?} for a {h}x{w} grid of width {}",
                self.dim
            )));
        }
        let ln = self.norm(g, tokens, "ln1")?;
        let seq = match self.kind {
            BlockKind::Global => ln,
            BlockKind::Local => {
                if self.window == 0 || h % self.window != 0 || w % self.window != 0 {
                    return Err(Error::Config(format!("grid {h}x{w} not divisible by window {}", self.window)));
                }
                window_partition(g, ln, n, h, w, self.window)?
            }
        };
        let att = self.attend(g, seq)?;
        let att = match self.kind {
            BlockKind::Global => att,
            BlockKind::Local => window_merge(g, att, n, h, w, self.window)?,
        };
        let att = g.dense(&self.name("proj"), att)?;
        let x = g.add(tokens, att)?;

        let y = self.norm(g, x, "ln2")?;
        let y = g.dense(&self.name("mlp1"), y)?;
        let y = g.gelu(y);
        let y = g.dense(&self.name("mlp2"), y)?;
        g.add(x, y)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, x: Var, which: &str) -> Result<Var> {
        let gamma = g.param(&self.name(&format!("{which}.g")))?;
        let beta = g.param(&self.name(&format!("{which}.b")))?;
        g.layer_norm(x, gamma, beta, 1e-6)
    }

    /// Multi-head attention over `B x T x C` sequences (no output projection).
    pub fn attend<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let &[b, t, c] = &shape[..] else {
            return Err(Error::Dimension(format!("attention expects B x T x C, got {shape:?}")));
        };
        let (nh, d) = (self.heads, c / self.heads);
        let qw = g.param(&self.name("q.w"))?;
        let qb = g.param(&self.name("q.b"))?;
        let q = self.q_delta.apply(g, x, qw, Some(qb))?;
        let kw = g.param(&self.name("k.w"))?;
        let k = g.linear(x, kw, None)?;
        let vw = g.param(&self.name("v.w"))?;
        let vb = g.param(&self.name("v.b"))?;
        let v = self.v_delta.apply(g, x, vw, Some(vb))?;
        let heads = |g: &mut Graph<'_, '_, T>, m: Var| -> Result<Var> {
            let m = g.reshape(m, &[b, t, nh, d])?;
            let m = g.permute(m, &[0, 2, 1, 3])?;
            g.reshape(m, &[b * nh, t, d])
        };
        let (q, k, v) = (heads(g, q)?, heads(g, k)?, heads(g, v)?);
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let out = g.bmm(attn, v, false, false)?;
        let out = g.reshape(out, &[b, nh, t, d])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        g.reshape(out, &[b, t, c])
    }
}

/// `N x (h*w) x C -> (N * windows) x (ws*ws) x C`.
pub fn window_partition<T: Scalar>(
    g: &mut Graph<'_, '_, T>,
    x: Var,
    n: usize,
    h: usize,
    w: usize,
    ws: usize,
) -> Result<Var> {
    let c = g.shape(x)[2];
    let x = g.reshape(x, &[n * h / ws, ws, w / ws, ws * c])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[n * (h / ws) * (w / ws), ws * ws, c])
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Scalar>(
    g: &mut Graph<'_, '_, T>,
    x: Var,
    n: usize,
    h: usize,
    w: usize,
    ws: usize,
) -> Result<Var> {
    let c = g.shape(x)[2];
    let x = g.reshape(x, &[n * h / ws, w / ws, ws, ws * c])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[n, h * w, c])
}

/// Cross-temporal gate: `out_j = f_j + sigmoid(conv1x1(concat(f_j, f_other))) * f_other`.
#[derive(Clone, Debug)]
pub struct Ttag {
    pub prefix: String,
    pub channels: usize,
}

impl Ttag {
    pub const BIAS_INIT: f64 = -4.0;

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl Rng) -> Result<()> {
        let c = self.channels;
        params.add(
            format!("{}.w", self.prefix),
            &[c, 2 * c, 1, 1],
            Init::KaimingUniform { fan_in: 2 * c },
            true,
            rng,
        )?;
        params.add(format!("{}.b", self.prefix), &[c], Init::Constant(Self::BIAS_INIT), true, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, f0: Var, f1: Var) -> Result<(Var, Var)> {
        if g.shape(f0) != g.shape(f1) {
            return Err(Error::Dimension(format!("TTAG inputs differ: {:?} vs {:?}", g.shape(f0), g.shape(f1))));
        }
        let n = g.shape(f0)[0];
        let selfs = g.concat(&[f0, f1], 0)?;
        let others = g.concat(&[f1, f0], 0)?;
        let both = self.forward_stacked(g, selfs, others)?;
        Ok((g.narrow(both, 0, 0, n)?, g.narrow(both, 0, n, n)?))
    }

    /// Same gate on pre-stacked `(self, other)` batches.
    pub fn forward_stacked<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, selfs: Var, others: Var) -> Result<Var> {
        let cat = g.concat(&[selfs, others], 1)?;
        let gate = g.conv(&self.prefix, cat, 1, 0, 1, 1)?;
        let gate = g.sigmoid(gate);
        let mixed = g.mul(gate, others)?;
        g.add(selfs, mixed)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    blocks: Vec<AttentionBlock>,
    dafa: Option<Dafa>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, &k)| AttentionBlock::new(&format!("enc.block{i}"), k, &config))
            .collect::<Result<_>>()?;
        let dafa = match config.dafa_position {
            Some(_) => Some(Dafa::new("enc.dafa", config.dafa.clone())?),
            None => None,
        };
        Ok(Self { config, blocks, dafa })
    }

    pub fn blocks(&self) -> &[AttentionBlock] {
        &self.blocks
    }

    pub fn dafa(&self) -> Option<&Dafa> {
        self.dafa.as_ref()
    }

    fn ttag(&self, i: usize) -> Ttag {
        Ttag { prefix: format!("enc.ttag{i}"), channels: self.config.dim }
    }

    pub fn register<T: Scalar>(&self, params: &mut LayerParams<T>, rng: &mut impl Rng) -> Result<()> {
        let cfg = &self.config;
        add_conv(params, "enc.patch", cfg.in_channels, cfg.dim, cfg.patch, 1, rng)?;
        if cfg.pos_embed {
            let (h, w) = cfg.grid();
            params.add("enc.pos", &[1, h * w, cfg.dim], Init::Normal(0.02), true, rng)?;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.register(params, rng)?;
            if cfg.ttag && b.kind == BlockKind::Local {
                self.ttag(i).register(params, rng)?;
            }
        }
        if let Some(d) = &self.dafa {
            d.register(params, rng)?;
        }
        Ok(())
    }

    /// Encodes `N x 3 x H x W` images for both dates.
    pub fn encode_pair<T: Scalar>(&self, g: &mut Graph<'_, '_, T>, img0: Var, img1: Var) -> Result<BitemporalFeatures> {
        let cfg = &self.config;
        if g.shape(img0) != g.shape(img1) {
            return Err(Error::Dimension(format!("image pair differs: {:?} vs {:?}", g.shape(img0), g.shape(img1))));
        }
        let (n, ch, hh, ww) = g.value(img0).dims4()?;
        if ch != cfg.in_channels || (hh, ww) != cfg.image_size {
            return Err(Error::Dimension(format!(
                "encoder configured for {}x{}x{} images, got {:?}",
                cfg.in_channels,
                cfg.image_size.0,
                cfg.image_size.1,
                g.shape(img0)
            )));
        }
        let (h, w) = cfg.grid();
        let both = g.concat(&[img0, img1], 0)?;
        let x = g.conv("enc.patch", both, cfg.patch, 0, 1, 1)?;
        let mut x = map_to_tokens(g, x)?;
        if cfg.pos_embed {
            let pos = g.param("enc.pos")?;
            x = g.add(x, pos)?;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(g, x, h, w)?;
            if cfg.ttag && b.kind == BlockKind::Local {
                let m = tokens_to_map(g, x, h, w)?;
                let a = g.narrow(m, 0, 0, n)?;
                let c = g.narrow(m, 0, n, n)?;
                let others = g.concat(&[c, a], 0)?;
                let m = self.ttag(i).forward_stacked(g, m, others)?;
                x = map_to_tokens(g, m)?;
            }
            if cfg.dafa_position == Some(i) {
                if let Some(d) = &self.dafa {
                    x = d.forward(g, x, h, w)?;
                }
            }
        }
        let maps = tokens_to_map(g, x, h, w)?;
        Ok(BitemporalFeatures {
            f0: g.narrow(maps, 0, 0, n)?,
            f1: g.narrow(maps, 0, n, n)?,
            fingerprint: cfg.fingerprint(),
        })
    }
}
