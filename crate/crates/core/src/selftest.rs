//! Built-in verification: oracle suites and the finite-difference gradient
//! registry used by the command line and the test suite.

use std::sync::atomic::Ordering;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Tape, Var};
use crate::dafa::{Dafa, DafaConfig};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{AttentionBlock, BlockKind, Encoder, EncoderConfig, Ttag};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, random_projection, GradCheckOptions, GradCheckReport};
use crate::metrics::{counts_for, derive_metrics};
use crate::msafa::{Msafa, MsafaConfig};
use crate::nn::{Graph, LayerParams, LowRankDelta};
use crate::ops::{PoolMode, SpectralMode};
use crate::tensor::Tensor;
use crate::train::loss_ce;

fn rand_tensor(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Faults that can be injected to prove a suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Unfold gathers from one column to the right.
    UnfoldOffByOne,
}

impl std::str::FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unfold" | "unfold-off-by-one" => Ok(Self::UnfoldOffByOne),
            _ => Err(Error::Usage(format!("unknown mutation '{s}'"))),
        }
    }
}

/// Enables a mutation until dropped.
pub struct MutationGuard(Mutation);

impl MutationGuard {
    pub fn new(m: Mutation) -> Self {
        match m {
            Mutation::UnfoldOffByOne => crate::ops::shape::UNFOLD_OFF_BY_ONE.store(true, Ordering::SeqCst),
        }
        Self(m)
    }
}

impl Drop for MutationGuard {
    fn drop(&mut self) {
        match self.0 {
            Mutation::UnfoldOffByOne => crate::ops::shape::UNFOLD_OFF_BY_ONE.store(false, Ordering::SeqCst),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Suite = fn() -> (bool, String);

const SUITES: &[(&str, Suite)] = &[
    ("dft", suite_dft),
    ("conv", suite_conv),
    ("unfold", suite_unfold),
    ("warp", suite_warp),
    ("metrics", suite_metrics),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

/// Runs every suite whose name contains `filter`; an empty selection is a
/// configuration error.
pub fn run_suites(filter: Option<&str>) -> Result<Vec<SuiteResult>> {
    let chosen: Vec<_> = SUITES.iter().filter(|(n, _)| filter.map_or(true, |f| n.contains(f))).collect();
    if chosen.is_empty() {
        return Err(Error::Config(format!("no self-test suite matches '{}'", filter.unwrap_or(""))));
    }
    Ok(chosen
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = f();
            SuiteResult { name, passed, detail }
        })
        .collect())
}

fn eval_op(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<Tensor<f64>> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let y = f(&mut t, &vars)?;
    Ok(t.value(y).clone())
}

fn suite_dft() -> (bool, String) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (l, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let x = rand_tensor(&[1, l, c], &mut rng);
        let Ok(got) = eval_op(&[x.clone()], |t, v| t.dft_real_2axes(v[0])) else {
            return (false, "dft failed to run".into());
        };
        for k in 0..l {
            for m in 0..c {
                let mut re = 0.0;
                for p in 0..l {
                    for q in 0..c {
                        let turns = ((k * p) % l) as f64 / l as f64 + ((m * q) % c) as f64 / c as f64;
                        re += x.data()[p * c + q] * (2.0 * std::f64::consts::PI * turns).cos();
                    }
                }
                worst = worst.max((got.data()[k * c + m] - re).abs());
            }
        }
    }
    (worst <= 1e-10, format!("max abs error {worst:.2e} over 50 inputs"))
}

fn suite_conv() -> (bool, String) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
    let mut worst = 0.0f64;
    for &(c, o, k, s, p, d, g) in
        &[(4, 4, 3, 1, 1, 1, 2), (3, 6, 3, 2, 0, 1, 1), (8, 8, 3, 1, 5, 5, 1), (4, 8, 1, 1, 0, 1, 4)]
    {
        let (h, w) = (7, 6);
        let x = rand_tensor(&[2, c, h, w], &mut rng);
        let wt = rand_tensor(&[o, c / g, k, k], &mut rng);
        let b = rand_tensor(&[o], &mut rng);
        let Ok(got) = eval_op(&[x.clone(), wt.clone(), b.clone()], |t, v| t.conv2d(v[0], v[1], Some(v[2]), s, p, d, g))
        else {
            return (false, "conv failed to run".into());
        };
        let ho = (h + 2 * p - d * (k - 1) - 1) / s + 1;
        let wo = (w + 2 * p - d * (k - 1) - 1) / s + 1;
        let ci = c / g;
        for n in 0..2 {
            for oc in 0..o {
                let grp = oc / (o / g);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[oc];
                        for ic in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky * d) as isize - p as isize;
                                    let ix = (ox * s + kx * d) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.at(&[n, grp * ci + ic, iy as usize, ix as usize])
                                            * wt.at(&[oc, ic, ky, kx]);
                                    }
                                }
                            }
                        }
                        worst = worst.max((got.at(&[n, oc, oy, ox]) - acc).abs());
                    }
                }
            }
        }
    }
    (worst <= 1e-12, format!("max abs error {worst:.2e} over 4 geometries"))
}

fn suite_unfold() -> (bool, String) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(13);
    let mut mismatches = 0usize;
    for &(c, h, w) in &[(2, 4, 4), (3, 5, 2), (1, 1, 1)] {
        let x = rand_tensor(&[1, c, h, w], &mut rng);
        let Ok(got) = eval_op(&[x.clone()], |t, v| t.unfold3x3(v[0])) else {
            return (false, "unfold failed to run".into());
        };
        for ch in 0..c {
            for k in 0..9 {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                for y in 0..h {
                    for xx in 0..w {
                        let (sy, sx) = (y as isize + dy, xx as isize + dx);
                        let want = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            x.at(&[0, ch, sy as usize, sx as usize])
                        } else {
                            0.0
                        };
                        if got.at(&[0, ch * 9 + k, y * w + xx]) != want {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    (mismatches == 0, format!("{mismatches} mismatched entries"))
}

fn suite_warp() -> (bool, String) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(14);
    let x = rand_tensor(&[1, 3, 6, 7], &mut rng);
    let zero = Tensor::zeros(&[1, 2, 6, 7]);
    let ident = eval_op(&[x.clone(), zero], |t, v| t.grid_sample(v[0], v[1]));
    if ident.as_ref().ok() != Some(&x) {
        return (false, "zero flow is not the identity".into());
    }
    let konst = Tensor::full(&[1, 2, 6, 7], 0.375);
    for i in 0..100 {
        let flow = Tensor::from_fn(&[1, 2, 6, 7], |_| rng.gen_range(-10.0..10.0));
        match eval_op(&[konst.clone(), flow], |t, v| t.grid_sample(v[0], v[1])) {
            Ok(y) if y.data().iter().all(|&v| v == 0.375) => {}
            _ => return (false, format!("constant image changed under random flow {i}")),
        }
    }
    let shift = Tensor::from_fn(&[1, 2, 6, 7], |i| if i < 42 { 1.0 } else { 0.0 });
    let Ok(y) = eval_op(&[x.clone(), shift], |t, v| t.grid_sample(v[0], v[1])) else {
        return (false, "shifted warp failed".into());
    };
    for c in 0..3 {
        for r in 0..6 {
            for col in 0..7 {
                if y.at(&[0, c, r, col]) != x.at(&[0, c, r, (col + 1).min(6)]) {
                    return (false, format!("integer shift differs at ({c}, {r}, {col})"));
                }
            }
        }
    }
    (true, "identity, constant invariance (100 flows) and unit shift exact".into())
}

/// Reference `(Pr, Rc, F1, IoU)` rows with four-way consistent values.
pub const REFERENCE_ROWS: [(f64, f64, f64, f64); 3] =
    [(93.56, 91.29, 92.41, 85.89), (73.08, 64.68, 68.63, 52.24), (95.79, 94.20, 94.99, 90.45)];

fn suite_metrics() -> (bool, String) {
    let mut worst = 0.0f64;
    for &(pr, rc, f1, iou) in &REFERENCE_ROWS {
        let r = derive_metrics(counts_for(pr, rc, 1_000_000, 100_000_000));
        for (got, want) in [(r.pr, pr), (r.rc, rc), (r.f1, f1), (r.iou, iou)] {
            worst = worst.max((got - want).abs());
        }
    }
    (worst <= 0.01, format!("max deviation {worst:.4} percentage points over 3 rows"))
}

// ---- gradient registry ----------------------------------------------------

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One finite-difference check: a scalar function of some inputs.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub max_elems: Option<usize>,
    f: CaseFn,
}

impl GradCase {
    pub fn run(&self, tol: f64) -> Result<GradCheckReport> {
        let opts = GradCheckOptions { tol, max_elems: self.max_elems, ..Default::default() };
        grad_check(&self.f, &self.inputs, &opts)
    }
}

/// Case for a plain op; the output is reduced by a fixed random projection.
fn op_case(
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        max_elems: Some(48),
        f: Box::new(move |t, v| {
            let y = f(t, v)?;
            random_projection(t, y, 5)
        }),
    }
}

/// Replaces all-zero parameters with small random values so that every
/// path carries gradient.
fn wake(params: &mut LayerParams<f64>, rng: &mut Xoshiro256PlusPlus) {
    for (_, p) in params.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-0.5..0.5));
        }
    }
}

/// Case for a parameterised block: inputs are the data tensors followed by
/// every trainable parameter.
fn block_case(
    name: String,
    params: LayerParams<f64>,
    data: Vec<Tensor<f64>>,
    forward: impl Fn(&mut Graph<'_, '_, f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let names: Vec<String> = params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    let mut inputs = data;
    let n_data = inputs.len();
    inputs.extend(names.iter().map(|n| params.value(n).expect("listed").clone()));
    GradCase {
        name,
        inputs,
        max_elems: Some(6),
        f: Box::new(move |t, v| {
            let y = {
                let mut g = Graph::new(t, &params);
                for (n, var) in names.iter().zip(&v[n_data..]) {
                    g.bind(n, *var);
                }
                forward(&mut g, &v[..n_data])?
            };
            random_projection(t, y, 9)
        }),
    }
}

fn away_from_zero(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn small_encoder_config(image: usize, dim: usize, spectral: SpectralMode) -> EncoderConfig {
    let mut dafa = DafaConfig::new(dim);
    dafa.spectral = spectral;
    EncoderConfig {
        image_size: (image, image),
        patch: 4,
        dim,
        blocks: vec![BlockKind::Local, BlockKind::Global],
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        lora_rank: 2,
        dafa_position: Some(1),
        dafa,
        ..EncoderConfig::default()
    }
}

/// Every gradient check in the suite: each op and composite at three shapes.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2024);
    let r = &mut rng;
    let mut cases = Vec::new();
    let shapes4: [[usize; 4]; 3] = [[1, 2, 3, 4], [2, 3, 4, 2], [1, 4, 5, 5]];

    for (i, s) in shapes4.iter().enumerate() {
        let bshape = [1, s[1], 1, s[3]];
        let x = rand_tensor(s, r);
        let y = rand_tensor(&bshape, r);
        cases.push(op_case(format!("add/{i}"), vec![x.clone(), y.clone()], |t, v| t.add(v[0], v[1])));
        cases.push(op_case(format!("sub/{i}"), vec![x.clone(), y.clone()], |t, v| t.sub(v[0], v[1])));
        cases.push(op_case(format!("mul/{i}"), vec![x.clone(), y.clone()], |t, v| t.mul(v[0], v[1])));
        cases.push(op_case(format!("scale/{i}"), vec![x.clone()], |t, v| Ok(t.scale(v[0], -1.7))));
        cases.push(op_case(format!("add_scalar/{i}"), vec![x.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3))));
        cases.push(op_case(format!("sigmoid/{i}"), vec![x.clone()], |t, v| Ok(t.sigmoid(v[0]))));
        cases.push(op_case(format!("gelu/{i}"), vec![x.clone()], |t, v| Ok(t.gelu(v[0]))));
        cases.push(op_case(format!("abs/{i}"), vec![away_from_zero(s, r)], |t, v| Ok(t.abs(v[0]))));
        let axis = i % 4;
        cases.push(op_case(format!("softmax/{i}"), vec![x.clone()], move |t, v| t.softmax(v[0], axis)));
        cases.push(op_case(format!("log_softmax/{i}"), vec![x.clone()], move |t, v| t.log_softmax(v[0], axis)));
        cases.push(op_case(format!("sum/{i}"), vec![x.clone()], |t, v| Ok(t.sum(v[0]))));
        cases.push(op_case(format!("sum_axes/{i}"), vec![x.clone()], |t, v| t.sum_axes(v[0], &[1, 3])));
        cases.push(op_case(format!("mean_axes/{i}"), vec![x.clone()], |t, v| t.mean_axes(v[0], &[2, 3])));
        cases.push(op_case(format!("std_axes/{i}"), vec![x.clone()], |t, v| t.std_axes(v[0], &[2, 3])));
        let flat = [s[0] * s[1], s[2] * s[3]];
        cases.push(op_case(format!("reshape/{i}"), vec![x.clone()], move |t, v| t.reshape(v[0], &flat)));
        cases.push(op_case(format!("permute/{i}"), vec![x.clone()], |t, v| t.permute(v[0], &[3, 1, 0, 2])));
        let z = rand_tensor(&[s[0], 2, s[2], s[3]], r);
        cases.push(op_case(format!("concat/{i}"), vec![x.clone(), z], |t, v| t.concat(&[v[0], v[1]], 1)));
        let parts = s[2].min(2);
        cases.push(op_case(format!("split/{i}"), vec![rand_tensor(&[s[0], s[1], 2 * s[2], s[3]], r)], move |t, v| {
            let p = t.split(v[0], 2, parts)?;
            let a = t.scale(p[0], 2.0);
            t.sub(a, p[parts - 1])
        }));
        for mode in [PoolMode::Avg, PoolMode::Max] {
            cases.push(op_case(format!("pool_{mode:?}/{i}").to_lowercase(), vec![x.clone()], move |t, v| {
                t.adaptive_pool(v[0], mode)
            }));
        }
        cases.push(op_case(format!("unfold3x3/{i}"), vec![x.clone()], |t, v| t.unfold3x3(v[0])));
        let (oh, ow) = (s[2] * 2 + 1, s[3] + 3);
        cases.push(op_case(format!("resize/{i}"), vec![x.clone()], move |t, v| t.resize_bilinear(v[0], oh, ow)));
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let flow = Tensor::from_fn(&[n, 2, h, w], |_| r.gen_range(-2i32..2) as f64 + r.gen_range(0.1..0.9));
        cases.push(op_case(format!("grid_sample/{i}"), vec![x.clone(), flow], |t, v| t.grid_sample(v[0], v[1])));
        let gamma = rand_tensor(&[w], r);
        let beta = rand_tensor(&[w], r);
        cases.push(op_case(format!("layer_norm/{i}"), vec![x.clone(), gamma, beta], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-6)
        }));
        let _ = c;
    }

    // Matrix products and linear maps.
    for (i, &(b, m, k, n)) in [(1, 2, 3, 4), (2, 3, 1, 2), (3, 4, 5, 3)].iter().enumerate() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(&if ta { [b, k, m] } else { [b, m, k] }, r);
            let bb = rand_tensor(&if tb { [b, n, k] } else { [b, k, n] }, r);
            cases.push(op_case(format!("bmm_{}{}/{i}", ta as u8, tb as u8), vec![a, bb], move |t, v| {
                t.bmm(v[0], v[1], ta, tb)
            }));
        }
        let x = rand_tensor(&[b, m, k], r);
        let w = rand_tensor(&[n, k], r);
        let bias = rand_tensor(&[n], r);
        cases.push(op_case(format!("linear/{i}"), vec![x.clone(), w.clone(), bias], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }));
        let base = rand_tensor(&[n, k], r);
        let la = rand_tensor(&[2, k], r);
        let lb = rand_tensor(&[n, 2], r);
        cases.push(op_case(format!("lowrank/{i}"), vec![x, la, lb], move |t, v| {
            let mut params = LayerParams::new();
            params.insert("p.lora_a", Tensor::zeros(&[2, k]), true)?;
            params.insert("p.lora_b", Tensor::zeros(&[n, 2]), true)?;
            let mut g = Graph::new(t, &params);
            g.bind("p.lora_a", v[1]);
            g.bind("p.lora_b", v[2]);
            let w = g.constant(base.clone());
            LowRankDelta::new("p", 2, 0.5)?.apply(&mut g, v[0], w, None)
        }));
    }

    // Convolutions.
    let convs: [(&str, [usize; 4], [usize; 4], usize, usize, usize, usize); 9] = [
        ("conv_plain", [1, 2, 5, 5], [3, 2, 3, 3], 1, 1, 1, 1),
        ("conv_plain", [2, 3, 4, 6], [2, 3, 1, 1], 1, 0, 1, 1),
        ("conv_plain", [1, 2, 7, 6], [2, 2, 3, 3], 2, 0, 1, 1),
        ("conv_dilated", [1, 2, 8, 8], [2, 2, 3, 3], 1, 5, 5, 1),
        ("conv_dilated", [1, 1, 6, 9], [2, 1, 3, 3], 1, 2, 2, 1),
        ("conv_dilated", [2, 2, 5, 5], [2, 2, 3, 3], 1, 11, 11, 1),
        ("conv_grouped", [1, 4, 4, 4], [4, 2, 3, 3], 1, 1, 1, 2),
        ("conv_grouped", [1, 4, 6, 6], [8, 1, 5, 5], 1, 2, 1, 4),
        ("conv_grouped", [2, 6, 3, 5], [3, 2, 3, 3], 1, 1, 1, 3),
    ];
    for (i, (name, xs, ws, s, p, d, g)) in convs.into_iter().enumerate() {
        let x = rand_tensor(&xs, r);
        let w = rand_tensor(&ws, r);
        let b = rand_tensor(&[ws[0]], r);
        cases.push(op_case(format!("{name}/{}", i % 3), vec![x, w, b], move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), s, p, d, g)
        }));
    }
    for (i, &(c, l, o, k, p)) in [(1, 3, 1, 3, 0), (2, 5, 3, 3, 1), (3, 7, 2, 2, 0)].iter().enumerate() {
        let x = rand_tensor(&[2, c, l], r);
        let w = rand_tensor(&[o, c, k], r);
        let b = rand_tensor(&[o], r);
        cases.push(op_case(format!("conv1d/{i}"), vec![x, w, b], move |t, v| t.conv1d(v[0], v[1], Some(v[2]), p)));
    }
    for (i, &(c, o, k, h)) in [(2, 3, 2, 2), (3, 2, 2, 3), (1, 2, 4, 2)].iter().enumerate() {
        let x = rand_tensor(&[1, c, h, h + 1], r);
        let w = rand_tensor(&[c, o, k, k], r);
        let b = rand_tensor(&[o], r);
        cases.push(op_case(format!("conv_transpose/{i}"), vec![x, w, b], |t, v| {
            t.conv_transpose(v[0], v[1], Some(v[2]))
        }));
    }

    // Spectral reductions.
    for (i, &(n, l, c)) in [(1, 4, 4), (2, 3, 5), (1, 6, 2)].iter().enumerate() {
        for mode in SpectralMode::ALL {
            let x = rand_tensor(&[n, l, c], r);
            cases.push(op_case(format!("dft_{}/{i}", mode.name()), vec![x], move |t, v| t.dft2(v[0], mode)));
        }
    }

    // Loss.
    for (i, &(n, h, w)) in [(1, 2, 3), (2, 3, 3), (1, 4, 2)].iter().enumerate() {
        let logits = rand_tensor(&[n, 2, h, w], r);
        let mask: Vec<u8> = (0..n * h * w).map(|_| r.gen_range(0..2)).collect();
        cases.push(GradCase {
            name: format!("loss_ce/{i}"),
            inputs: vec![logits],
            max_elems: None,
            f: Box::new(move |t, v| {
                let params = LayerParams::new();
                let mut g = Graph::new(t, &params);
                loss_ce(&mut g, v[0], &mask)
            }),
        });
    }

    // Composite blocks.
    for (i, &(n, c, h, w)) in [(1, 4, 2, 2), (2, 8, 3, 2), (1, 8, 4, 4)].iter().enumerate() {
        let dafa = Dafa::new("dafa", DafaConfig::new(c)).expect("valid config");
        let mut p = LayerParams::new();
        dafa.register(&mut p, r).expect("fresh names");
        wake(&mut p, r);
        let x = rand_tensor(&[n, c, h, w], r);
        let d2 = dafa.clone();
        cases.push(block_case(format!("daca/{i}"), p.clone(), vec![x], move |g, v| d2.daca_forward(g, v[0])));
        for mode in SpectralMode::ALL {
            let mut cfg = DafaConfig::new(c);
            cfg.spectral = mode;
            let d = Dafa::new("dafa", cfg).expect("valid config");
            let tokens = rand_tensor(&[n, h * w, c], r);
            cases.push(block_case(format!("dafa_{}/{i}", mode.name()), p.clone(), vec![tokens], move |g, v| {
                d.forward(g, v[0], h, w)
            }));
        }
    }
    for (i, &(n, c, h, w)) in [(1, 4, 3, 3), (2, 4, 2, 3), (1, 8, 4, 4)].iter().enumerate() {
        let mut cfg = MsafaConfig::new(c);
        cfg.out_channels = 4;
        let m = Msafa::new("fuse", cfg).expect("valid config");
        let mut p = LayerParams::new();
        m.register(&mut p, r).expect("fresh names");
        wake(&mut p, r);
        let msai = m.msai();
        let x = rand_tensor(&[n, c, h, w], r);
        cases.push(block_case(format!("msai/{i}"), p.clone(), vec![x], move |g, v| msai.forward(g, v[0])));
        let f0 = rand_tensor(&[n, c, h, w], r);
        let f1 = rand_tensor(&[n, c, h, w], r);
        // A spatially constant ensemble bias cancels in the warped difference,
        // so its gradient is exactly zero here; the msai case covers it.
        let mut p = p;
        for k in 0..crate::msafa::ENSEMBLE {
            p.get_mut(&format!("fuse.msai.ens{k}.b")).expect("registered").trainable = false;
        }
        let m2 = m.clone();
        cases.push(block_case(format!("msafa/{i}"), p, vec![f0.clone(), f1.clone()], move |g, v| {
            m2.forward(g, v[0], v[1])
        }));

        let tt = Ttag { prefix: "ttag".into(), channels: c };
        let mut p = LayerParams::new();
        tt.register(&mut p, r).expect("fresh names");
        cases.push(block_case(format!("ttag/{i}"), p, vec![f0, f1], move |g, v| {
            let (a, b) = tt.forward(g, v[0], v[1])?;
            g.concat(&[a, b], 1)
        }));
    }
    for (i, &(n, c, h, w)) in [(1, 4, 2, 2), (2, 4, 2, 4), (1, 8, 4, 4)].iter().enumerate() {
        for kind in [BlockKind::Local, BlockKind::Global] {
            let mut cfg = small_encoder_config(4 * h, c, SpectralMode::Real);
            cfg.image_size = (4 * h, 4 * w);
            let blk = AttentionBlock::new("blk", kind, &cfg).expect("valid config");
            let mut p = LayerParams::new();
            blk.register(&mut p, r).expect("fresh names");
            wake(&mut p, r);
            let x = rand_tensor(&[n, h * w, c], r);
            cases.push(block_case(format!("attention_{kind:?}/{i}").to_lowercase(), p, vec![x], move |g, v| {
                blk.forward(g, v[0], h, w)
            }));
        }
    }
    for (i, &(n, image, dim)) in [(1, 8, 4), (1, 16, 4), (2, 8, 8)].iter().enumerate() {
        let enc = Encoder::new(small_encoder_config(image, dim, SpectralMode::Real)).expect("valid config");
        let mut p = LayerParams::new();
        enc.register(&mut p, r).expect("fresh names");
        wake(&mut p, r);
        let a = rand_tensor(&[n, 3, image, image], r);
        let b = rand_tensor(&[n, 3, image, image], r);
        cases.push(block_case(format!("encode_pair/{i}"), p, vec![a, b], move |g, v| {
            let f = enc.encode_pair(g, v[0], v[1])?;
            g.concat(&[f.f0, f.f1], 1)
        }));
    }
    for (i, &(n, c, h, w, out)) in
        [(1, 4, 2, 2, (8, 8)), (2, 8, 3, 2, (10, 7)), (1, 4, 4, 4, (16, 16))].iter().enumerate()
    {
        let mut cfg = DecoderConfig::new(c);
        cfg.level_width = 3;
        cfg.hidden = 4;
        let dec = Decoder::new("dec", cfg).expect("valid config");
        let mut p = LayerParams::new();
        dec.register(&mut p, r).expect("fresh names");
        let x = rand_tensor(&[n, c, h, w], r);
        cases.push(block_case(format!("decoder/{i}"), p, vec![x], move |g, v| dec.forward(g, v[0], out)));
    }
    cases
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub name: String,
    pub report: GradCheckReport,
}

/// Runs the registry cases whose name contains `filter`.
pub fn run_gradient_suite(filter: Option<&str>, tol: f64) -> Result<Vec<GradResult>> {
    let cases: Vec<GradCase> =
        gradient_cases().into_iter().filter(|c| filter.map_or(true, |f| c.name.contains(f))).collect();
    if cases.is_empty() {
        return Err(Error::Config(format!("no gradient case matches '{}'", filter.unwrap_or(""))));
    }
    cases.iter().map(|c| Ok(GradResult { name: c.name.clone(), report: c.run(tol)? })).collect()
}

/// Difference energies of one pair under an injected shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpEnergy {
    pub seed: u64,
    /// `|warp(Fb, Ff) - F'b|^2` with the true flow.
    pub warped: f64,
    /// `|Fb - F'b|^2`
    pub unwarped: f64,
}

/// Pure-translation pairs: T2 is T1 moved by `(dx, 0)` pixels with no
/// building changes. MSAFA runs on the raw images with randomly initialised
/// weights and the ground-truth flows `Ff = (-dx, 0)`, `F'f = (dx, 0)`
/// substituted for the predicted ones.
pub fn warp_benefit(count: usize, dx: i32, seed: u64) -> Result<Vec<WarpEnergy>> {
    use crate::data::{generate, images_to_tensor, translate, GenSpec};
    use crate::msafa::FlowField;
    let spec = GenSpec { max_shift: 0, jitter: 0.0, change_probs: (0.0, 0.0, 1.0), ..GenSpec::default() };
    let msafa = Msafa::new("m", MsafaConfig { groups: 1, zero_init_flow: false, ..MsafaConfig::new(3) })?;
    let mut params = LayerParams::<f64>::new();
    msafa.register(&mut params, &mut Xoshiro256PlusPlus::seed_from_u64(seed))?;
    let energy = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
    let mut out = Vec::with_capacity(count);
    for s in seed..seed + count as u64 {
        let sample = generate(&spec, s)?;
        let a = images_to_tensor([&sample.t1])?.cast::<f64>();
        let b = images_to_tensor([&translate(&sample.t2, dx, 0)])?.cast::<f64>();
        let (_, _, h, w) = a.dims4()?;
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &params);
        let (va, vb) = (g.constant(a), g.constant(b));
        let flow = g.constant(FlowField::uniform(1, h, w, -dx as f64, 0.0).into_tensor());
        let flow_prime = g.constant(FlowField::uniform(1, h, w, dx as f64, 0.0).into_tensor());
        let tr = msafa.trace(&mut g, va, vb, Some((flow, flow_prime)))?;
        let plain = g.sub(tr.fb, tr.fb_prime)?;
        out.push(WarpEnergy { seed: s, warped: energy(g.value(tr.out_prime)), unwarped: energy(g.value(plain)) });
    }
    Ok(out)
}
