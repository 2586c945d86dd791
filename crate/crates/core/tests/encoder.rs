mod common;

use common::*;
use faewnet::encoder::{AttentionBlock, BlockKind, Encoder, EncoderConfig, Ttag};
use faewnet::nn::{Graph, LayerParams};
use faewnet::{Error, Scalar, Tape, Tensor};

fn encode<T: Scalar>(enc: &Encoder, p: &LayerParams<T>, a: &Tensor<T>, b: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, p);
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let f = enc.encode_pair(&mut g, x, y).unwrap();
    assert_eq!(f.fingerprint, enc.config.fingerprint());
    (g.value(f.f0).clone(), g.value(f.f1).clone())
}

fn images(n: usize, size: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = rng(seed);
    let mut img = || Tensor::from_fn(&[n, 3, size, size], |_| rand::Rng::gen_range(&mut r, -1.0f32..1.0));
    (img(), img())
}

fn default_encoder(seed: u64) -> (Encoder, LayerParams<f32>) {
    let enc = Encoder::new(EncoderConfig::default()).unwrap();
    let mut p = LayerParams::new();
    enc.register(&mut p, &mut rng(seed)).unwrap();
    (enc, p)
}

#[test]
fn shapes_for_the_default_config() {
    let (enc, p) = default_encoder(1);
    let (a, b) = images(1, 64, 2);
    let (f0, f1) = encode(&enc, &p, &a, &b);
    assert_eq!(f0.shape(), &[1, 64, 8, 8]);
    assert_eq!(f1.shape(), &[1, 64, 8, 8]);
}

#[test]
fn identical_inputs_give_identical_features() {
    let (enc, mut p) = default_encoder(3);
    // open the gates and the adapter so every path is exercised
    let mut r = rng(4);
    for name in ["enc.dafa.out_proj.w", "enc.block0.q.lora_b", "enc.block3.v.lora_b"] {
        let shape = p.value(name).unwrap().shape().to_vec();
        p.set_value(name, Tensor::from_fn(&shape, |_| rand::Rng::gen_range(&mut r, -0.2f32..0.2))).unwrap();
    }
    let (a, _) = images(2, 64, 5);
    let (f0, f1) = encode(&enc, &p, &a, &a);
    assert_eq!(f0, f1);
}

#[test]
fn swapping_dates_swaps_features() {
    let (enc, p) = default_encoder(6);
    let (a, b) = images(2, 64, 7);
    let (f0, f1) = encode(&enc, &p, &a, &b);
    let (g0, g1) = encode(&enc, &p, &b, &a);
    assert!(f0.max_abs_diff(&g1) <= 1e-6);
    assert!(f1.max_abs_diff(&g0) <= 1e-6);
}

#[test]
fn closed_gates_and_fresh_adapter_reduce_to_plain_towers() {
    let mut cfg = EncoderConfig::default();
    let full = Encoder::new(cfg.clone()).unwrap();
    let mut p = LayerParams::<f64>::new();
    full.register(&mut p, &mut rng(8)).unwrap();
    for i in 0..3 {
        p.set_value(&format!("enc.ttag{i}.w"), Tensor::zeros(&[64, 128, 1, 1])).unwrap();
        p.set_value(&format!("enc.ttag{i}.b"), Tensor::full(&[64], -1e4)).unwrap();
    }
    cfg.ttag = false;
    cfg.dafa_position = None;
    let plain = Encoder::new(cfg).unwrap();
    let mut r = rng(9);
    let a = rand_tensor(&[1, 3, 64, 64], &mut r);
    let b = rand_tensor(&[1, 3, 64, 64], &mut r);
    assert_eq!(encode(&full, &p, &a, &b), encode(&plain, &p, &a, &b));
}

#[test]
fn divisibility_violations_are_errors() {
    let (enc, p) = default_encoder(10);
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let x = g.constant(Tensor::zeros(&[1, 3, 60, 64]));
    assert!(matches!(enc.encode_pair(&mut g, x, x), Err(Error::Dimension(_))));
    let bad = |f: fn(&mut EncoderConfig)| {
        let mut c = EncoderConfig::default();
        f(&mut c);
        Encoder::new(c)
    };
    assert!(matches!(bad(|c| c.image_size = (60, 60)), Err(Error::Config(_))));
    assert!(matches!(bad(|c| c.heads = 3), Err(Error::Config(_))));
    assert!(matches!(bad(|c| c.window = 3), Err(Error::Config(_))));
    assert!(matches!(bad(|c| c.dafa_position = Some(1)), Err(Error::Config(_))));
}

fn block_f64(kind: BlockKind, dim: usize, heads: usize, seed: u64) -> (AttentionBlock, LayerParams<f64>) {
    let cfg = EncoderConfig { dim, heads, window: 2, lora_rank: 2, lora_alpha: 0.5, ..EncoderConfig::default() };
    let blk = AttentionBlock::new("b", kind, &cfg).unwrap();
    let mut p = LayerParams::new();
    blk.register(&mut p, &mut rng(seed)).unwrap();
    randomize(&mut p, 0.5, &mut rng(seed + 1));
    (blk, p)
}

fn matmul_t(x: &[f64], rows: usize, w: &[f64], out: usize) -> Vec<f64> {
    let inn = x.len() / rows;
    (0..rows * out).map(|i| (0..inn).map(|k| x[(i / out) * inn + k] * w[(i % out) * inn + k]).sum()).collect()
}

#[test]
fn attention_matches_dense_softmax_oracle() {
    let (t_len, c, heads) = (5, 8, 2);
    let (blk, p) = block_f64(BlockKind::Global, c, heads, 11);
    let x = rand_tensor(&[2, t_len, c], &mut rng(12));
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let v = g.constant(x.clone());
    let y = blk.attend(&mut g, v).unwrap();
    let got = g.value(y).clone();

    let val = |n: &str| p.value(&format!("b.{n}")).unwrap().data().to_vec();
    // effective weight W + alpha B A
    let eff = |which: &str| {
        let (w, a, b) = (val(&format!("{which}.w")), val(&format!("{which}.lora_a")), val(&format!("{which}.lora_b")));
        (0..c * c)
            .map(|i| w[i] + 0.5 * (0..2).map(|r| b[(i / c) * 2 + r] * a[r * c + i % c]).sum::<f64>())
            .collect::<Vec<_>>()
    };
    let d = c / heads;
    for s in 0..2 {
        let xs = &x.data()[s * t_len * c..][..t_len * c];
        let add_bias = |m: Vec<f64>, b: &[f64]| m.iter().enumerate().map(|(i, v)| v + b[i % c]).collect::<Vec<_>>();
        let q = add_bias(matmul_t(xs, t_len, &eff("q"), c), &val("q.b"));
        let k = matmul_t(xs, t_len, &val("k.w"), c);
        let vv = add_bias(matmul_t(xs, t_len, &eff("v"), c), &val("v.b"));
        for h in 0..heads {
            for i in 0..t_len {
                let sc: Vec<f64> = (0..t_len)
                    .map(|j| {
                        (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = sc.iter().map(|v| (v - mx).exp()).sum();
                for e in 0..d {
                    let want: f64 = (0..t_len).map(|j| (sc[j] - mx).exp() / z * vv[j * c + h * d + e]).sum();
                    let have = got.data()[(s * t_len + i) * c + h * d + e];
                    assert!((want - have).abs() <= 1e-10, "{want} vs {have}");
                }
            }
        }
    }
}

#[test]
fn single_token_attention_is_the_value_path() {
    let c = 4;
    let (blk, mut p) = block_f64(BlockKind::Global, c, 2, 13);
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    p.set_value("b.v.w", eye).unwrap();
    p.set_value("b.v.b", Tensor::zeros(&[c])).unwrap();
    p.set_value("b.v.lora_b", Tensor::zeros(&[c, 2])).unwrap();
    p.set_value("b.mlp2.w", Tensor::zeros(&[c, 2 * c])).unwrap();
    p.set_value("b.mlp2.b", Tensor::zeros(&[c])).unwrap();
    let x = rand_tensor(&[3, 1, c], &mut rng(14));
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let v = g.constant(x.clone());
    let a = blk.attend(&mut g, v).unwrap();
    assert_eq!(g.value(a), &x);

    // whole block: x + proj(layer_norm(x)), the MLP branch being zero
    let y = blk.forward(&mut g, v, 1, 1).unwrap();
    let val = |n: &str| p.value(&format!("b.{n}")).unwrap().data().to_vec();
    for s in 0..3 {
        let xs = &x.data()[s * c..][..c];
        let mean = xs.iter().sum::<f64>() / c as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let (gm, bt) = (val("ln1.g"), val("ln1.b"));
        let ln: Vec<f64> = (0..c).map(|i| (xs[i] - mean) / (var + 1e-6).sqrt() * gm[i] + bt[i]).collect();
        let pr = linear(&ln, &val("proj.w"), &val("proj.b"));
        for i in 0..c {
            assert!((g.value(y).data()[s * c + i] - (xs[i] + pr[i])).abs() <= 1e-12);
        }
    }
}

#[test]
fn global_attention_is_permutation_equivariant() {
    let (t_len, c) = (6, 8);
    let (blk, p) = block_f64(BlockKind::Global, c, 2, 15);
    let x = rand_tensor(&[1, t_len, c], &mut rng(16));
    let perm = [3, 0, 5, 1, 4, 2];
    let xp = Tensor::from_fn(&[1, t_len, c], |i| x.data()[perm[i / c] * c + i % c]);
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let (a, b) = (g.constant(x), g.constant(xp));
    let y = blk.forward(&mut g, a, 2, 3).unwrap();
    let yp = blk.forward(&mut g, b, 2, 3).unwrap();
    let (y, yp) = (g.value(y), g.value(yp));
    for (row, &src) in perm.iter().enumerate() {
        let d = max_abs_diff(&yp.data()[row * c..][..c], &y.data()[src * c..][..c]);
        assert!(d <= 1e-12);
    }
}

#[test]
fn local_attention_keeps_windows_independent() {
    // Changing a token only affects tokens in its own 2x2 window.
    let c = 4;
    let (blk, p) = block_f64(BlockKind::Local, c, 2, 17);
    let x = rand_tensor(&[1, 16, c], &mut rng(18));
    let mut x2 = x.clone();
    x2.data_mut()[0] += 1.0; // token (0, 0)
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, &p);
    let (a, b) = (g.constant(x), g.constant(x2));
    let y = blk.forward(&mut g, a, 4, 4).unwrap();
    let y2 = blk.forward(&mut g, b, 4, 4).unwrap();
    for tok in 0..16 {
        let same = g.value(y).data()[tok * c..][..c] == g.value(y2).data()[tok * c..][..c];
        let in_window = tok / 4 < 2 && tok % 4 < 2;
        assert_eq!(same, !in_window, "token {tok}");
    }
}

fn ttag_run(t: &Ttag, p: &LayerParams<f64>, f0: &Tensor<f64>, f1: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, p);
    let (a, b) = (g.constant(f0.clone()), g.constant(f1.clone()));
    let (x, y) = t.forward(&mut g, a, b).unwrap();
    (g.value(x).clone(), g.value(y).clone())
}

#[test]
fn ttag_gate_cases() {
    let tt = Ttag { prefix: "t".into(), channels: 4 };
    let mut p = LayerParams::new();
    tt.register(&mut p, &mut rng(19)).unwrap();
    assert!(p.value("t.b").unwrap().data().iter().all(|&b| b == Ttag::BIAS_INIT));
    let mut r = rng(20);
    let f0 = rand_tensor(&[2, 4, 3, 3], &mut r);
    let f1 = rand_tensor(&[2, 4, 3, 3], &mut r);

    let (a, b) = ttag_run(&tt, &p, &f0, &f0);
    assert_eq!(a, b);

    p.set_value("t.w", Tensor::zeros(&[4, 8, 1, 1])).unwrap();
    let (a, b) = ttag_run(&tt, &p, &f0, &f1);
    let gate = sigmoid(-4.0);
    assert!((gate - 0.018).abs() < 1e-3);
    for i in 0..f0.numel() {
        assert!((a.data()[i] - (f0.data()[i] + gate * f1.data()[i])).abs() <= 1e-15);
        assert!((b.data()[i] - (f1.data()[i] + gate * f0.data()[i])).abs() <= 1e-15);
    }
    let (a, _) = ttag_run(&tt, &p, &f0, &Tensor::zeros(f0.shape()));
    assert_eq!(a, f0);

    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &p);
    let (x, y) = (g.constant(f0), g.constant(Tensor::zeros(&[2, 4, 3, 2])));
    assert!(matches!(tt.forward(&mut g, x, y), Err(Error::Dimension(_))));
}
