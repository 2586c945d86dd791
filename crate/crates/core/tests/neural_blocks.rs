mod common;

use common::*;
use faewnet::nn::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Graph, Init, LayerParams, LowRankDelta};
use faewnet::{Error, Tape, Tensor};

fn lowrank_params(i: usize, o: usize, r: usize, seed: u64) -> (LowRankDelta, LayerParams<f64>) {
    let d = LowRankDelta::new("q", r, 0.75).unwrap();
    let mut p = LayerParams::new();
    d.register(&mut p, i, o, &mut rng(seed)).unwrap();
    (d, p)
}

fn apply(d: &LowRankDelta, p: &LayerParams<f64>, x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let mut g = Graph::new(&mut t, p);
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = d.apply(&mut g, xv, wv, Some(bv)).unwrap();
    g.value(y).clone()
}

#[test]
fn lowrank_equals_dense_layer_with_summed_weight() {
    let (i, o, r) = (6, 5, 3);
    let (d, mut p) = lowrank_params(i, o, r, 1);
    randomize(&mut p, 1.0, &mut rng(2));
    let mut g = rng(3);
    let x = rand_tensor(&[2, 4, i], &mut g);
    let w = rand_tensor(&[o, i], &mut g);
    let b = rand_tensor(&[o], &mut g);
    let got = apply(&d, &p, &x, &w, &b);
    assert_eq!(got.shape(), &[2, 4, o]);
    let (pa, pb) = (p.value("q.lora_a").unwrap().data(), p.value("q.lora_b").unwrap().data());
    let dense: Vec<f64> = (0..o * i)
        .map(|k| w.data()[k] + 0.75 * (0..r).map(|j| pb[(k / i) * r + j] * pa[j * i + k % i]).sum::<f64>())
        .collect();
    for row in 0..8 {
        let want = linear(&x.data()[row * i..][..i], &dense, b.data());
        assert!(max_abs_diff(&got.data()[row * o..][..o], &want) <= 1e-12);
    }
}

#[test]
fn zero_b_is_bit_identical_to_the_frozen_layer() {
    let (d, p) = lowrank_params(64, 64, 4, 4);
    assert!(p.value("q.lora_b").unwrap().data().iter().all(|&v| v == 0.0));
    let mut g = rng(5);
    let x = rand_tensor(&[1, 16, 64], &mut g);
    let w = rand_tensor(&[64, 64], &mut g);
    let b = rand_tensor(&[64], &mut g);
    let got = apply(&d, &p, &x, &w, &b);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
    let base = t.linear(xv, wv, Some(bv)).unwrap();
    assert_eq!(got.shape(), &[1, 16, 64]);
    assert_eq!(&got, t.value(base));
}

#[test]
fn zero_rank_is_rejected() {
    assert!(matches!(LowRankDelta::new("q", 0, 1.0), Err(Error::Config(_))));
}

#[test]
fn two_layer_toy_loss_decreases_for_twenty_steps() {
    let mut p = LayerParams::<f64>::new();
    let mut r = rng(6);
    p.add("l1.w", &[8, 3], Init::KaimingUniform { fan_in: 3 }, true, &mut r).unwrap();
    p.add("l1.b", &[8], Init::Zeros, true, &mut r).unwrap();
    p.add("l2.w", &[1, 8], Init::KaimingUniform { fan_in: 8 }, true, &mut r).unwrap();
    p.add("l2.b", &[1], Init::Zeros, true, &mut r).unwrap();
    let x = rand_tensor(&[16, 3], &mut r);
    let target = Tensor::from_fn(&[16, 1], |i| x.data()[i * 3] - 0.5 * x.data()[i * 3 + 2]);
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, ..Default::default() });
    let mut last = f64::INFINITY;
    for step in 0..20 {
        let mut t = Tape::new();
        let (loss, grads) = {
            let mut g = Graph::new(&mut t, &p);
            let xv = g.constant(x.clone());
            let h = g.dense("l1", xv).unwrap();
            let h = g.gelu(h);
            let y = g.dense("l2", h).unwrap();
            let tv = g.constant(target.clone());
            let e = g.sub(y, tv).unwrap();
            let e2 = g.mul(e, e).unwrap();
            let s = g.sum(e2);
            let loss = g.scale(s, 1.0 / 16.0);
            g.backward(loss).unwrap();
            (g.value(loss).data()[0], g.param_grads())
        };
        assert!(loss < last, "step {step}: {loss} >= {last}");
        last = loss;
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(opt.step_count(), step as u64 + 1);
    }
}

#[test]
fn checkpoint_file_round_trip_keeps_names_and_bits() {
    let mut p = LayerParams::<f32>::new();
    let mut r = rng(7);
    p.add("enc.patch.w", &[4, 3, 2, 2], Init::Normal(1.0), true, &mut r).unwrap();
    p.add("enc.block0.q.w", &[4, 4], Init::KaimingUniform { fan_in: 4 }, false, &mut r).unwrap();
    p.add("z", &[1], Init::Constant(-0.0), true, &mut r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&p, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.names().collect::<Vec<_>>(), p.names().collect::<Vec<_>>());
    for (n, q) in p.iter() {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&q.value), bits(loaded.value(n).unwrap()), "{n}");
    }
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io(_))));
}
