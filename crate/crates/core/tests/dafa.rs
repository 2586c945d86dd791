mod common;

use common::*;
use faewnet::dafa::{daca_stats, Dafa, DafaConfig};
use faewnet::nn::{Graph, LayerParams};
use faewnet::ops::SpectralMode;
use faewnet::{Error, Tape, Tensor};
use proptest::prelude::*;

fn block(c: usize, mode: SpectralMode) -> Dafa {
    let mut cfg = DafaConfig::new(c);
    cfg.spectral = mode;
    Dafa::new("a", cfg).unwrap()
}

fn fresh<T: faewnet::Scalar>(d: &Dafa, seed: u64) -> LayerParams<T> {
    let mut p = LayerParams::new();
    d.register(&mut p, &mut rng(seed)).unwrap();
    p
}

fn run_forward(d: &Dafa, p: &LayerParams<f64>, x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, p);
    let v = g.constant(x.clone());
    let y = d.forward(&mut g, v, h, w).unwrap();
    g.value(y).clone()
}

/// DAFA on one sample written out with loops.
fn reference(p: &LayerParams<f64>, cfg: &DafaConfig, tokens: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = cfg.channels;
    let l = h * w;
    let v = |n: &str| p.value(&format!("a.{n}")).unwrap().data().to_vec();
    let mut map = vec![0.0; c * l];
    for i in 0..l {
        for ch in 0..c {
            map[ch * l + i] = tokens[i * c + ch];
        }
    }
    let dims = (1, c, h, w);
    let (fa, _, _) = conv2d(&map, dims, &v("in_proj.w"), &v("in_proj.b"), (c, 1), 1, 0, 1, 1);

    let (kw, kb) = (v("daca.conv1d.w"), v("daca.conv1d.b"));
    let mut scaled = fa.clone();
    for ch in 0..c {
        let xs = &fa[ch * l..][..l];
        let mean = xs.iter().sum::<f64>() / l as f64;
        let mabs = xs.iter().map(|x| x.abs()).sum::<f64>() / l as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / l as f64).sqrt();
        let s = sigmoid(kb[0] + kw[0] * mabs + kw[1] * mean + kw[2] * std);
        scaled[ch * l..][..l].iter_mut().for_each(|x| *x *= s);
    }
    let (mut fd, _, _) = conv2d(&scaled, dims, &v("daca.proj.w"), &v("daca.proj.b"), (c, 1), 1, 0, 1, 1);

    if cfg.spectral != SpectralMode::Off {
        let mut seq = vec![0.0; l * c];
        for i in 0..l {
            for ch in 0..c {
                seq[i * c + ch] = fa[ch * l + i];
            }
        }
        let (re, im) = dft2(&seq, l, c);
        let norm = 1.0 / ((l * c) as f64).sqrt();
        for i in 0..l {
            for ch in 0..c {
                let k = i * c + ch;
                let s = match cfg.spectral {
                    SpectralMode::Real => re[k],
                    SpectralMode::Imag => im[k],
                    _ => re[k].hypot(im[k]),
                };
                fd[ch * l + i] += s * norm;
            }
        }
    }
    let (fd, _, _) = conv2d(&fd, dims, &v("gconv.w"), &v("gconv.b"), (c, 3), 1, 1, 1, cfg.groups);
    let pooled: Vec<f64> = (0..c)
        .map(|ch| {
            let xs = &fd[ch * l..][..l];
            xs.iter().sum::<f64>() / l as f64 + xs.iter().cloned().fold(f64::MIN, f64::max)
        })
        .collect();
    let mut fl = Vec::new();
    for i in 0..cfg.branches {
        fl.extend(linear(&pooled, &v(&format!("branch{i}.w")), &v(&format!("branch{i}.b"))));
    }
    let gate: Vec<f64> = linear(&fl, &v("gate.w"), &v("gate.b")).into_iter().map(sigmoid).collect();
    let fld: Vec<f64> = fd.iter().enumerate().map(|(i, x)| x * gate[i / l]).collect();
    let (ha, _, _) = conv2d(&fld, dims, &v("out_proj.w"), &v("out_proj.b"), (c, 1), 1, 0, 1, 1);
    let mut out = tokens.to_vec();
    for i in 0..l {
        for ch in 0..c {
            out[i * c + ch] += ha[ch * l + i];
        }
    }
    out
}

#[test]
fn forward_matches_loop_reference_in_every_spectral_mode() {
    let mut r = rng(1);
    for mode in SpectralMode::ALL {
        for &(c, h, w) in &[(4, 2, 3), (8, 3, 3)] {
            let d = block(c, mode);
            let mut p = fresh::<f64>(&d, 2);
            randomize(&mut p, 0.6, &mut r);
            let x = rand_tensor(&[1, h * w, c], &mut r);
            let got = run_forward(&d, &p, &x, h, w);
            let want = reference(&p, &d.config, x.data(), h, w);
            let err = max_abs_diff(got.data(), &want);
            assert!(err <= 1e-12, "{mode:?} {c}x{h}x{w}: {err:.2e}");
        }
    }
}

#[test]
fn fresh_adapter_is_bit_exact_identity_in_f32() {
    let d = block(64, SpectralMode::Real);
    let p = fresh::<f32>(&d, 3);
    let mut r = rng(4);
    let x: Tensor<f32> = Tensor::from_fn(&[2, 64, 64], |_| rand::Rng::gen_range(&mut r, -3.0..3.0));
    let mut t = Tape::<f32>::new();
    let mut g = Graph::new(&mut t, &p);
    let v = g.constant(x.clone());
    let y = d.forward(&mut g, v, 8, 8).unwrap();
    assert_eq!(g.shape(y), &[2, 64, 64]);
    assert_eq!(g.value(y), &x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identity_at_init_for_any_input(vals in prop::collection::vec(-50.0f32..50.0, 2 * 16 * 8), seed in 0u64..1000) {
        let d = block(8, SpectralMode::Real);
        let p = fresh::<f32>(&d, seed);
        let x = Tensor::new(&[2, 16, 8], vals).unwrap();
        let mut t = Tape::<f32>::new();
        let mut g = Graph::new(&mut t, &p);
        let v = g.constant(x.clone());
        let y = d.forward(&mut g, v, 4, 4).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn daca_scale_is_strictly_inside_unit_interval(vals in prop::collection::vec(-10.0f64..10.0, 8 * 9), seed in 0u64..1000) {
        // With an identity projection, F_dc / f is the per-channel scale.
        let d = block(8, SpectralMode::Real);
        let mut p = fresh::<f64>(&d, seed);
        let eye = Tensor::from_fn(&[8, 8, 1, 1], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        p.set_value("a.daca.proj.w", eye).unwrap();
        let x = Tensor::new(&[1, 8, 3, 3], vals).unwrap();
        let mut t = Tape::new();
        let mut g = Graph::new(&mut t, &p);
        let v = g.constant(x.clone());
        let y = d.daca_forward(&mut g, v).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            if b.abs() > 1e-3 {
                let s = a / b;
                prop_assert!(s > 0.0 && s < 1.0, "scale {}", s);
            }
        }
    }

    #[test]
    fn stats_rows_follow_a_channel_permutation(vals in prop::collection::vec(-5.0f64..5.0, 6 * 4), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let x = Tensor::new(&[1, 6, 2, 2], vals).unwrap();
        let xp = Tensor::from_fn(&[1, 6, 2, 2], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let (s, sp) = (stats_of(&x), stats_of(&xp));
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&sp.data()[row * 3..][..3], &s.data()[src * 3..][..3]);
        }
    }
}

fn stats_of(x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let p = LayerParams::new();
    let mut g = Graph::new(&mut t, &p);
    let s = daca_stats(&mut g, v).unwrap();
    g.value(s).clone()
}

#[test]
fn stats_of_zero_constant_and_random_inputs() {
    assert!(stats_of(&Tensor::zeros(&[2, 3, 4, 4])).data().iter().all(|&v| v == 0.0));
    let s = stats_of(&Tensor::full(&[1, 2, 3, 3], 2.5));
    for ch in 0..2 {
        assert_eq!(&s.data()[ch * 3..][..2], &[2.5, 2.5]);
        assert!(s.data()[ch * 3 + 2].abs() < 1e-15);
    }
    let mut r = rng(5);
    let x = rand_tensor(&[2, 5, 3, 7], &mut r);
    let s = stats_of(&x);
    assert_eq!(s.shape(), &[2, 5, 3]);
    for nc in 0..10 {
        let xs = &x.data()[nc * 21..][..21];
        let mean = xs.iter().sum::<f64>() / 21.0;
        let mabs = xs.iter().map(|v| v.abs()).sum::<f64>() / 21.0;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 21.0;
        let got = &s.data()[nc * 3..][..3];
        assert!(
            (got[0] - mabs).abs() <= 1e-12 && (got[1] - mean).abs() <= 1e-12 && (got[2] - var.sqrt()).abs() <= 1e-12
        );
    }
}

#[test]
fn zero_stats_conv_gives_half_scale() {
    let d = block(4, SpectralMode::Real);
    let mut p = fresh::<f64>(&d, 6);
    p.set_value("a.daca.conv1d.w", Tensor::zeros(&[1, 1, 3])).unwrap();
    let mut r = rng(7);
    let x = rand_tensor(&[2, 4, 3, 3], &mut r);
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let v = g.constant(x.clone());
    let y = d.daca_forward(&mut g, v).unwrap();
    let half = g.constant(x.map(|v| 0.5 * v));
    let want = g.conv("a.daca.proj", half, 1, 0, 1, 1).unwrap();
    assert_eq!(g.value(y), g.value(want));
}

#[test]
fn daca_on_a_tiny_case_follows_the_scalar_trace() {
    // (1,4,2,2): stats -> one conv1d tap sum -> sigmoid -> scale -> 1x1 conv.
    let d = block(4, SpectralMode::Real);
    let mut p = fresh::<f64>(&d, 8);
    p.set_value("a.daca.conv1d.w", Tensor::from_f64(&[1, 1, 3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
    p.set_value("a.daca.conv1d.b", Tensor::from_f64(&[1], &[0.25]).unwrap()).unwrap();
    let pw: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5) / 8.0).collect();
    p.set_value("a.daca.proj.w", Tensor::from_f64(&[4, 4, 1, 1], &pw).unwrap()).unwrap();
    p.set_value("a.daca.proj.b", Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.0]).unwrap()).unwrap();
    let xs = [1.0, -2.0, 3.0, 0.5, 0.0, 0.0, 0.0, 0.0, -1.0, -1.0, -1.0, -1.0, 4.0, 2.0, -3.0, 1.0];
    let x = Tensor::from_f64(&[1, 4, 2, 2], &xs).unwrap();

    let mut scale = [0.0; 4];
    for ch in 0..4 {
        let v = &xs[ch * 4..][..4];
        let mean = (v[0] + v[1] + v[2] + v[3]) / 4.0;
        let mabs = (v[0].abs() + v[1].abs() + v[2].abs() + v[3].abs()) / 4.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        scale[ch] = sigmoid(0.25 + 0.5 * mabs - mean + 2.0 * var.sqrt());
    }
    let mut want = [0.0; 16];
    for o in 0..4 {
        for px in 0..4 {
            let mut acc = [0.1, -0.2, 0.3, 0.0][o];
            for i in 0..4 {
                acc += pw[o * 4 + i] * scale[i] * xs[i * 4 + px];
            }
            want[o * 4 + px] = acc;
        }
    }

    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let v = g.constant(x);
    let y = d.daca_forward(&mut g, v).unwrap();
    assert!(max_abs_diff(g.value(y).data(), &want) <= 1e-14);
}

#[test]
fn constant_input_has_a_dc_only_spectrum() {
    let (l, c) = (6, 4);
    let x = Tensor::<f64>::full(&[1, l, c], 1.5);
    for mode in [SpectralMode::Real, SpectralMode::Amplitude] {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.dft2(v, mode).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 1.5 * (l * c) as f64).abs() < 1e-12);
        assert!(d[1..].iter().all(|v| v.abs() < 1e-12), "{mode:?}");
    }
}

#[test]
fn imag_mode_matches_naive_complex_dft() {
    let mut r = rng(9);
    for &(l, c) in &[(5, 3), (16, 16), (1, 7)] {
        let x = rand_tensor(&[2, l, c], &mut r);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.dft2(v, SpectralMode::Imag).unwrap();
        for s in 0..2 {
            let (_, im) = dft2(&x.data()[s * l * c..][..l * c], l, c);
            assert!(max_abs_diff(&t.value(y).data()[s * l * c..][..l * c], &im) <= 1e-10);
        }
    }
}

#[test]
fn shapes_and_error_paths() {
    let d = block(64, SpectralMode::Real);
    let p = fresh::<f64>(&d, 10);
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let x = g.constant(Tensor::zeros(&[1, 64, 64]));
    let y = d.forward(&mut g, x, 8, 8).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 64]);
    assert!(matches!(d.forward(&mut g, x, 8, 7), Err(Error::Dimension(_))));
    let m = g.constant(Tensor::zeros(&[1, 64, 8, 8]));
    let y = d.daca_forward(&mut g, m).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 8, 8]);
    let bad = g.constant(Tensor::zeros(&[1, 32, 8, 8]));
    assert!(matches!(d.daca_forward(&mut g, bad), Err(Error::Dimension(_))));
    let bad = g.constant(Tensor::zeros(&[1, 64, 32]));
    assert!(matches!(d.forward(&mut g, bad, 8, 8), Err(Error::Dimension(_))));
}

#[test]
fn branch_widths_sum_to_channels() {
    for branches in [3, 4] {
        let mut cfg = DafaConfig::new(12);
        cfg.branches = branches;
        let d = Dafa::new("a", cfg).unwrap();
        let p = fresh::<f64>(&d, 0);
        let total: usize = (0..branches).map(|i| p.value(&format!("a.branch{i}.w")).unwrap().shape()[0]).sum();
        assert_eq!(total, 12);
        assert_eq!(p.value("a.gate.w").unwrap().shape(), &[12, 12]);
    }
    let mut cfg = DafaConfig::new(10);
    cfg.branches = 4;
    cfg.groups = 2;
    assert!(matches!(Dafa::new("a", cfg), Err(Error::Config(_))));
}
