//! Acceptance run: one PASS/FAIL line per criterion and a closing tally.
//! Extra arguments select criteria by substring.
//!
//! The run is a report, so a FAIL line alone does not fail `cargo test`.
//! Set `FAEWNET_ACCEPTANCE_STRICT=1` to exit with status 1 on any failure.

use std::collections::BTreeMap;
use std::time::Instant;

use faewnet::dafa::{Dafa, DafaConfig};
use faewnet::data::{benchmark_split, generate_set, read_dataset, write_dataset, ChangeSample, GenSpec};
use faewnet::metrics::{counts_for, derive_metrics};
use faewnet::model::{Model, ModelConfig};
use faewnet::msafa::{Msafa, MsafaConfig};
use faewnet::nn::{read_checkpoint, write_checkpoint, Graph, LayerParams};
use faewnet::ops::SpectralMode;
use faewnet::selftest::{gradient_cases, run_gradient_suite, run_suites, warp_benefit};
use faewnet::train::{ablate, module_ablation_configs, spectral_configs, train, TrainRunConfig};
use faewnet::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let results = run_gradient_suite(None, 1e-4).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let mut shapes: BTreeMap<String, usize> = BTreeMap::new();
    for c in gradient_cases() {
        *shapes.entry(c.name.split('/').next().unwrap_or("").to_string()).or_default() += 1;
    }
    let thin: Vec<&String> = shapes.iter().filter(|(_, &n)| n < 3).map(|(k, _)| k).collect();
    let failed: Vec<&str> = results.iter().filter(|r| !r.report.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.report.max_rel_err()).fold(0.0, f64::max);
    check(
        failed.is_empty() && thin.is_empty() && secs < 300.0,
        format!(
            "{} cases over {} ops, worst rel err {worst:.2e}, {secs:.1}s; failing {failed:?}; under three shapes {thin:?}",
            results.len(),
            shapes.len()
        ),
    )
}

fn dft(x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.dft_real_2axes(v).expect("rank-3 input");
    t.value(y).clone()
}

fn dft_oracle() -> Outcome {
    let suite = run_suites(Some("dft")).map_err(|e| e.to_string())?.remove(0);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let shape = [2, rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let x = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
        let y = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix = Tensor::from_fn(&shape, |i| a * x.data()[i] + b * y.data()[i]);
        let (dx, dy, dm) = (dft(&x), dft(&y), dft(&mix));
        for i in 0..dm.numel() {
            worst = worst.max((dm.data()[i] - (a * dx.data()[i] + b * dy.data()[i])).abs());
        }
    }
    check(suite.passed && worst <= 1e-12, format!("{}; linearity max error {worst:.2e}", suite.detail))
}

fn warp_identities() -> Outcome {
    let r = run_suites(Some("warp")).map_err(|e| e.to_string())?.remove(0);
    check(r.passed, r.detail)
}

fn metric_rows() -> Outcome {
    let rows = [(93.56, 91.29, 92.41, 85.89), (73.08, 64.68, 68.63, 52.24), (95.79, 94.20, 94.99, 90.45)];
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (pr, rc, f1, iou) in rows {
        let r = derive_metrics(counts_for(pr, rc, 1_000_000, 100_000_000));
        for (got, want) in [(r.pr, pr), (r.rc, rc), (r.f1, f1), (r.iou, iou)] {
            worst = worst.max((got - want).abs());
        }
        lines.push(r.row().replace('\t', " "));
    }
    check(worst <= 0.01, format!("rows [{}], max deviation {worst:.4}", lines.join(" | ")))
}

fn identity_at_init() -> Outcome {
    let dafa = Dafa::new("a", DafaConfig::new(64)).map_err(|e| e.to_string())?;
    let mut p = LayerParams::<f32>::new();
    dafa.register(&mut p, &mut Xoshiro256PlusPlus::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let mut dafa_ok = true;
    for _ in 0..10 {
        let x: Tensor<f32> = Tensor::from_fn(&[2, 64, 64], |_| rng.gen_range(-3.0..3.0));
        let mut t = Tape::new();
        let mut g = Graph::new(&mut t, &p);
        let v = g.constant(x.clone());
        let y = dafa.forward(&mut g, v, 8, 8).map_err(|e| e.to_string())?;
        dafa_ok &= g.value(y) == &x;
    }
    let m = Msafa::new("m", MsafaConfig::new(64)).map_err(|e| e.to_string())?;
    let mut p = LayerParams::<f64>::new();
    m.register(&mut p, &mut Xoshiro256PlusPlus::seed_from_u64(3)).map_err(|e| e.to_string())?;
    let mut msafa_ok = true;
    for _ in 0..3 {
        let f = Tensor::from_fn(&[1, 64, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let mut t = Tape::new();
        let mut g = Graph::new(&mut t, &p);
        let (a, b) = (g.constant(f.clone()), g.constant(f));
        let tr = m.trace(&mut g, a, b, None).map_err(|e| e.to_string())?;
        msafa_ok &= g.value(tr.out).data().iter().chain(g.value(tr.out_prime).data()).all(|&v| v == 0.0);
    }
    check(
        dafa_ok && msafa_ok,
        format!(
            "DAFA bit-exact identity on 10 inputs: {dafa_ok}; MSAFA differences exactly zero on 3 inputs: {msafa_ok}"
        ),
    )
}

fn warp_benefit_oracle() -> Outcome {
    let r = warp_benefit(100, 2, 0).map_err(|e| e.to_string())?;
    let wins = r.iter().filter(|e| e.warped < e.unwarped).count();
    let worst = r.iter().map(|e| e.warped / e.unwarped).fold(0.0, f64::max);
    check(wins == 100, format!("{wins}/100 pairs lower after warping, worst energy ratio {worst:.3}"))
}

fn round_trips() -> Outcome {
    let model = Model::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let params = model.init_params::<f32>(5).map_err(|e| e.to_string())?;
    let bytes = write_checkpoint(&params).map_err(|e| e.to_string())?;
    let again = write_checkpoint(&read_checkpoint(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let ckpt_exact = bytes == again;
    let fmt_at = |b: &[u8]| match read_checkpoint(b) {
        Err(Error::Format { offset, .. }) => Some(offset),
        _ => None,
    };
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    let corrupt = [fmt_at(&bad_magic), fmt_at(&flipped), fmt_at(&bytes[..bytes.len() - 7])];
    let corrupt_ok = corrupt[0] == Some(0) && corrupt.iter().all(Option::is_some);
    let offsets: Vec<String> = corrupt.iter().map(|o| o.map_or("none".into(), |v| v.to_string())).collect();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let samples = generate_set(&GenSpec::default(), 40, 10).map_err(|e| e.to_string())?;
    write_dataset(&samples, &a).map_err(|e| e.to_string())?;
    let back = read_dataset(&a).map_err(|e| e.to_string())?;
    write_dataset(&back, &b).map_err(|e| e.to_string())?;
    let pixels_exact = samples.iter().zip(&back).all(|(x, y)| x.t1 == y.t1 && x.t2 == y.t2 && x.mask == y.mask);
    let mut files_exact = true;
    for sub in ["A", "B", "label"] {
        for i in 0..10 {
            let name = format!("{sub}/{i:05}.png");
            files_exact &= std::fs::read(a.join(&name)).ok() == std::fs::read(b.join(&name)).ok();
        }
    }
    image::GrayImage::from_pixel(64, 64, image::Luma([128]))
        .save(b.join("label/00003.png"))
        .map_err(|e| e.to_string())?;
    let label_err = matches!(read_dataset(&b), Err(Error::Dataset { path, .. }) if path.ends_with("label/00003.png"));
    check(
        ckpt_exact && corrupt_ok && pixels_exact && files_exact && label_err,
        format!(
            "checkpoint {} bytes re-encoded identically: {ckpt_exact}; corruption rejected at bytes [{}]; \
             dataset pixels exact: {pixels_exact}, files byte-identical: {files_exact}; bad label rejected: {label_err}",
            bytes.len(),
            offsets.join(", ")
        ),
    )
}

struct Bench {
    train: Vec<ChangeSample>,
    val: Vec<ChangeSample>,
    base: TrainRunConfig,
}

fn bench() -> Bench {
    let (train, val) = benchmark_split(&GenSpec::default(), 7, 200, 50).expect("benchmark");
    let base = TrainRunConfig { steps: 2000, lr: 1e-3, seed: 7, eval_every: 250, ..TrainRunConfig::default() };
    Bench { train, val, base }
}

fn toy_training(b: &Bench, full_seed7: &mut Option<faewnet::metrics::MetricReport>) -> Outcome {
    let t0 = Instant::now();
    let out = train(&b.base, &b.train, &b.val, |r| {
        if let Some(m) = &r.report {
            println!("      step {:>4}  loss {:.4}  F1 {:.2}", r.step, r.loss, m.f1);
        }
    })
    .map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let best = out.best_f1().unwrap_or(0.0);
    let reached = out.trace.iter().find(|r| r.report.is_some_and(|m| m.f1 >= 85.0)).map(|r| r.step);
    let reached_at = reached.map_or("never".to_string(), |s| format!("step {s}"));
    *full_seed7 = out.final_report;

    let short = TrainRunConfig { steps: 20, eval_every: 0, ..b.base.clone() };
    let x = train(&short, &b.train, &b.val, |_| {}).map_err(|e| e.to_string())?;
    let y = train(&short, &b.train, &b.val, |_| {}).map_err(|e| e.to_string())?;
    let bits = |p: &LayerParams<f32>| {
        p.iter().flat_map(|(_, q)| q.value.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    };
    let deterministic = bits(&x.params) == bits(&y.params) && x.trace == y.trace;
    check(
        reached.is_some() && secs < 1800.0 && deterministic,
        format!(
            "best F1 {best:.2}, first >= 85 at {reached_at}, final {:.2}, {secs:.0}s; repeat run bit-identical: {deterministic}",
            out.final_report.map_or(0.0, |m| m.f1)
        ),
    )
}

fn ablation(b: &Bench, full_seed7: Option<faewnet::metrics::MetricReport>) -> Outcome {
    let t0 = Instant::now();
    let base = TrainRunConfig { eval_every: 0, ..b.base.clone() };
    let configs = module_ablation_configs(&base);
    let mut reproduced = None;
    let table = ablate(&configs, &[7, 8, 9], &b.train, &b.val, |name, seed, r| {
        println!("      {name:<16} seed {seed}  F1 {:.2}", r.f1);
        if name == "+ DAFA + MSAFA" && seed == 7 {
            reproduced = Some(full_seed7.map_or(true, |m| m == *r));
        }
    })
    .map_err(|e| e.to_string())?;
    for line in table.to_string().lines() {
        println!("      {line}");
    }
    let f1 = |n: &str| table.row(n).map_or(f64::NAN, |r| r.mean_f1());
    let (base_f1, dafa, msafa, full) = (f1("Baseline"), f1("+ DAFA"), f1("+ MSAFA"), f1("+ DAFA + MSAFA"));
    let finer = full >= dafa && dafa >= msafa && msafa >= base_f1;
    check(
        full >= base_f1,
        format!(
            "mean F1 full {full:.2} vs baseline {base_f1:.2} (+DAFA {dafa:.2}, +MSAFA {msafa:.2}; finer ordering holds: {finer}); \
             seed-7 full run matches toy run: {}; {:.0}s",
            reproduced.map_or("n/a".to_string(), |b| b.to_string()),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn spectral_harness(b: &Bench) -> Outcome {
    let base = TrainRunConfig { steps: 250, eval_every: 0, ..b.base.clone() };
    let configs = spectral_configs(&base);
    let names: Vec<&str> = configs.iter().map(|(n, _)| n.as_str()).collect();
    let expected: Vec<&str> = SpectralMode::ALL.iter().map(|m| m.name()).collect();
    let table = ablate(&configs, &[7], &b.train, &b.val, |_, _, _| {}).map_err(|e| e.to_string())?;
    let per_mode: Vec<String> = table.rows.iter().map(|r| format!("{} {:.2}", r.name, r.mean_f1())).collect();
    let finite = table.rows.iter().all(|r| r.mean_f1().is_finite());
    check(names == expected && finite, format!("F1 after 250 steps: {}", per_mode.join(", ")))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));
    let (mut failures, mut total) = (0, 0);
    let mut report = |key: &str, title: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(key) {
            return;
        }
        total += 1;
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag}  {title}: {detail}");
    };
    report("gradients", "gradient suite", &mut gradient_suite);
    report("dft", "DFT oracle", &mut dft_oracle);
    report("warp-identities", "warp identities", &mut warp_identities);
    report("metrics", "metric identities for the reference rows", &mut metric_rows);
    report("identity", "identity at init", &mut identity_at_init);
    report("warp-benefit", "warp benefit with ground-truth flow", &mut warp_benefit_oracle);
    report("round-trips", "checkpoint and dataset round-trips", &mut round_trips);
    if ["toy", "ablation", "spectral"].iter().any(|k| wanted(k)) {
        let b = bench();
        let mut full_seed7 = None;
        report("toy", "toy training", &mut || toy_training(&b, &mut full_seed7));
        report("ablation", "module ablation over 3 seeds", &mut || ablation(&b, full_seed7));
        report("spectral", "spectral variants", &mut || spectral_harness(&b));
    }
    println!("{} of {total} criteria passed", total - failures);
    let strict = std::env::var("FAEWNET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
