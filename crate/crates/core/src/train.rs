//! Loss, training loop, evaluation and the ablation harness.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Tape, Var};
use crate::config::KvConfig;
use crate::data::{augment, images_to_tensor, masks_to_vec, AugmentFlags, ChangeSample};
use crate::error::{Error, Result};
use crate::metrics::{confusion_counts, derive_metrics, ConfusionCounts, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, Graph, LayerParams};
use crate::ops::SpectralMode;
use crate::tensor::{Scalar, Tensor};

/// Mean pixel cross-entropy of `N x 2 x H x W` logits against a `{0,1}`
/// mask of `N*H*W` values.
pub fn loss_ce<T: Scalar>(g: &mut Graph<'_, '_, T>, logits: Var, mask: &[u8]) -> Result<Var> {
    let (n, k, h, w) = g.value(logits).dims4()?;
    if k != 2 {
        return Err(Error::Dimension(format!("change logits need 2 classes, got {:?}", g.shape(logits))));
    }
    let plane = h * w;
    if mask.len() != n * plane {
        return Err(Error::Dimension(format!("mask has {} values for logits {:?}", mask.len(), g.shape(logits))));
    }
    if let Some(v) = mask.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("mask value {v} is not binary")));
    }
    let onehot = Tensor::from_fn(&[n, 2, h, w], |i| {
        let (s, c, p) = (i / (2 * plane), (i / plane) % 2, i % plane);
        if mask[s * plane + p] as usize == c {
            T::one()
        } else {
            T::zero()
        }
    });
    let onehot = g.constant(onehot);
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / (n * plane) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
    /// Validate every this many steps (and after the last step); 0 = only at the end.
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: AdamWConfig::default().lr,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            augment: AugmentFlags::all(),
            eval_every: 250,
            model: ModelConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "steps",
        "batch",
        "lr",
        "weight_decay",
        "seed",
        "flip",
        "photometric",
        "temporal_shuffle",
        "eval_every",
        "dafa",
        "msafa",
        "dft_mode",
        "dafa_position",
        "image_size",
        "patch",
        "dim",
        "heads",
        "window",
        "ttag",
    ];

    /// Overrides defaults from the keys in [`Self::KEYS`].
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        c.steps = kv.get_or("steps", c.steps)?;
        c.batch = kv.get_or("batch", c.batch)?;
        c.lr = kv.get_or("lr", c.lr)?;
        c.weight_decay = kv.get_or("weight_decay", c.weight_decay)?;
        c.seed = kv.get_or("seed", c.seed)?;
        c.augment.flip = kv.get_or("flip", c.augment.flip)?;
        c.augment.photometric = kv.get_or("photometric", c.augment.photometric)?;
        c.augment.temporal_swap = kv.get_or("temporal_shuffle", c.augment.temporal_swap)?;
        c.eval_every = kv.get_or("eval_every", c.eval_every)?;
        let m = &mut c.model;
        let size = kv.get_or("image_size", m.encoder.image_size.0)?;
        let patch = kv.get_or("patch", m.encoder.patch)?;
        let dim = kv.get_or("dim", m.encoder.dim)?;
        *m = m.clone().with_dims(size, patch, dim);
        m.use_dafa = kv.get_or("dafa", m.use_dafa)?;
        m.use_msafa = kv.get_or("msafa", m.use_msafa)?;
        m.encoder.dafa.spectral = kv.get_or("dft_mode", m.encoder.dafa.spectral)?;
        m.encoder.heads = kv.get_or("heads", m.encoder.heads)?;
        m.encoder.window = kv.get_or("window", m.encoder.window)?;
        m.encoder.ttag = kv.get_or("ttag", m.encoder.ttag)?;
        if let Some(p) = kv.get("dafa_position") {
            m.encoder.dafa_position = Some(p.parse().map_err(|e| Error::Config(format!("dafa_position: {e}")))?);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        Model::new(self.model.clone()).map(|_| ())
    }

    pub fn dft_mode(&self) -> SpectralMode {
        self.model.encoder.dafa.spectral
    }
}

/// One line of the metric trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub report: Option<MetricReport>,
}

impl fmt::Display for TraceRecord {
    /// `step\tloss` plus `\tPr\tRc\tF1\tIoU` on validation steps.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}", self.step, self.loss)?;
        if let Some(r) = &self.report {
            write!(f, "\t{}", r.row())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: LayerParams<f32>,
    pub trace: Vec<TraceRecord>,
    /// Validation report after the last step (`None` without a validation set).
    pub final_report: Option<MetricReport>,
}

impl TrainOutcome {
    pub fn best_f1(&self) -> Option<f64> {
        self.trace.iter().filter_map(|r| r.report.map(|m| m.f1)).reduce(f64::max)
    }
}

/// Micro-averaged metrics of `params` over `samples`.
pub fn evaluate(
    model: &Model,
    params: &LayerParams<f32>,
    samples: &[ChangeSample],
    batch: usize,
) -> Result<MetricReport> {
    let mut counts = ConfusionCounts::default();
    for chunk in samples.chunks(batch.max(1)) {
        let a = images_to_tensor(chunk.iter().map(|s| &s.t1))?;
        let b = images_to_tensor(chunk.iter().map(|s| &s.t2))?;
        let pred = model.predict(params, &a, &b)?;
        let truth = masks_to_vec(chunk.iter().map(|s| &s.mask));
        counts += confusion_counts(&pred, &truth)?;
    }
    Ok(derive_metrics(counts))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains from a fresh initialisation. `on_record` sees each trace line as
/// it is produced.
pub fn train(
    cfg: &TrainRunConfig,
    train_set: &[ChangeSample],
    val_set: &[ChangeSample],
    mut on_record: impl FnMut(&TraceRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let model = Model::new(cfg.model.clone())?;
    let mut params = model.init_params::<f32>(cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() });
    let mut order_rng = Xoshiro256PlusPlus::seed_from_u64(mix(cfg.seed, 1, 0));
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut final_report = None;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let idx = order.pop().expect("refilled");
            batch.push(augment(&train_set[idx], cfg.augment, mix(cfg.seed, step as u64, i as u64)));
        }
        let a = images_to_tensor(batch.iter().map(|s| &s.t1))?;
        let b = images_to_tensor(batch.iter().map(|s| &s.t2))?;
        let mask = masks_to_vec(batch.iter().map(|s| &s.mask));

        let mut tape = Tape::new();
        let (loss, grads) = {
            let mut g = Graph::new(&mut tape, &params);
            let va = g.constant(a);
            let vb = g.constant(b);
            let logits = model.forward(&mut g, va, vb)?;
            let loss = loss_ce(&mut g, logits, &mask)?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            g.backward(loss)?;
            (value, g.param_grads())
        };
        opt.step(&mut params, &grads)?;

        let validate = !val_set.is_empty() && (step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0));
        let report = if validate { Some(evaluate(&model, &params, val_set, 8)?) } else { None };
        if step == cfg.steps {
            final_report = report;
        }
        let rec = TraceRecord { step, loss, report };
        on_record(&rec);
        trace.push(rec);
    }
    if cfg.steps == 0 && !val_set.is_empty() {
        final_report = Some(evaluate(&model, &params, val_set, 8)?);
    }
    Ok(TrainOutcome { params, trace, final_report })
}

/// Rows of the module ablation, in table order.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] =
    [("Baseline", false, false), ("+ DAFA", true, false), ("+ MSAFA", false, true), ("+ DAFA + MSAFA", true, true)];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub reports: Vec<MetricReport>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&MetricReport) -> f64) -> f64 {
        self.reports.iter().map(f).sum::<f64>() / self.reports.len().max(1) as f64
    }

    pub fn mean_rc(&self) -> f64 {
        self.mean(|r| r.rc)
    }

    pub fn mean_f1(&self) -> f64 {
        self.mean(|r| r.f1)
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean(|r| r.iou)
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "row\truns\tRc\tF1\tIoU")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}",
                r.name,
                r.reports.len(),
                r.mean_rc(),
                r.mean_f1(),
                r.mean_iou()
            )?;
        }
        Ok(())
    }
}

/// Trains every `(name, config)` under every seed and tabulates the final
/// validation metrics.
pub fn ablate(
    configs: &[(String, TrainRunConfig)],
    seeds: &[u64],
    train_set: &[ChangeSample],
    val_set: &[ChangeSample],
    mut on_run: impl FnMut(&str, u64, &MetricReport),
) -> Result<AblationTable> {
    if val_set.is_empty() {
        return Err(Error::Data("ablation needs a validation set".into()));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = TrainRunConfig { seed, ..cfg.clone() };
            let out = train(&run, train_set, val_set, |_| {})?;
            let rep = out.final_report.expect("validation set is non-empty");
            on_run(name, seed, &rep);
            reports.push(rep);
        }
        rows.push(AblationRow { name: name.clone(), reports });
    }
    Ok(AblationTable { rows })
}

/// The four module-toggle rows derived from `base`.
pub fn module_ablation_configs(base: &TrainRunConfig) -> Vec<(String, TrainRunConfig)> {
    ABLATION_ROWS
        .iter()
        .map(|&(name, dafa, msafa)| {
            let mut c = base.clone();
            c.model = c.model.with_toggles(dafa, msafa);
            (name.to_string(), c)
        })
        .collect()
}

/// One row per spectral reduction of the DAFA Fourier branch.
pub fn spectral_configs(base: &TrainRunConfig) -> Vec<(String, TrainRunConfig)> {
    SpectralMode::ALL
        .iter()
        .map(|&m| {
            let mut c = base.clone();
            let msafa = c.model.use_msafa;
            c.model = c.model.with_spectral(m).with_toggles(true, msafa);
            (m.name().to_string(), c)
        })
        .collect()
}
