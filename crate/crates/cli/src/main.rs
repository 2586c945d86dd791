//! `faewnet` command line.
//!
//! Exit status: 0 on success, 1 when a check fails or a run errors out,
//! 2 on usage and configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faewnet::config::KvConfig;
use faewnet::data::{benchmark_split, generate_set, masks_to_vec, read_dataset, write_dataset, ChangeSample, GenSpec};
use faewnet::metrics::{confusion_counts, derive_metrics, render_confusion, ConfusionCounts, MetricReport};
use faewnet::model::Model;
use faewnet::nn::{load_checkpoint, save_checkpoint, LayerParams};
use faewnet::selftest::{run_gradient_suite, run_suites, Mutation, MutationGuard};
use faewnet::train::{ablate, evaluate, module_ablation_configs, spectral_configs, train, TrainRunConfig};
use faewnet::{Error, Result};

/// A checkpoint holding a tensor under this name predicts the ground truth
/// verbatim. It exists to test the evaluation plumbing end to end.
const ORACLE_MARKER: &str = "oracle.ground_truth";

#[derive(Parser)]
#[command(name = "faewnet", version, about = "Siamese building change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for machine-readable output
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and module
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Only cases whose name contains this
        #[arg(long)]
        only: Option<String>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Oracle suites: DFT, convolution, unfold, warp and metric identities
    Selftest {
        /// Only suites whose name contains this
        #[arg(long)]
        only: Option<String>,
        #[arg(long, hide = true)]
        mutate: Option<Mutation>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Write synthetic image pairs as root/{A,B,label}/NNNNN.png
    GenData {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        shared: Shared,
    },
    /// Train from scratch and save a checkpoint
    Train {
        /// Training tiles; the built-in 200/50 benchmark when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation tiles
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Score a checkpoint on a tile directory
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Write four-colour confusion maps of a checkpoint's predictions
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Module or spectral-mode ablation over several seeds
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "7,8,9")]
        seeds: Vec<u64>,
        /// Compare the four spectral reductions instead of module toggles
        #[arg(long)]
        spectral: bool,
        #[command(flatten)]
        shared: Shared,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}

fn load_kv(path: &Option<PathBuf>, known: &[&str]) -> Result<KvConfig> {
    let kv = match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    kv.check_known(known)?;
    Ok(kv)
}

fn train_config(shared: &Shared) -> Result<TrainRunConfig> {
    let mut cfg = TrainRunConfig::from_kv(&load_kv(&shared.config, TrainRunConfig::KEYS)?)?;
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(shared: &Shared) -> Result<Option<&Path>> {
    if let Some(d) = &shared.out {
        fs::create_dir_all(d)?;
    }
    Ok(shared.out.as_deref())
}

fn datasets(data: &Option<PathBuf>, val: &Option<PathBuf>) -> Result<(Vec<ChangeSample>, Vec<ChangeSample>)> {
    match data {
        Some(d) => Ok((read_dataset(d)?, val.as_ref().map(read_dataset).transpose()?.unwrap_or_default())),
        None => benchmark_split(&GenSpec::default(), 7, 200, 50),
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Gradcheck { tol, only, shared } => {
            let results = run_gradient_suite(only.as_deref(), tol)?;
            let mut tsv = String::from("case\tmax_rel_err\tpassed\n");
            println!("{:<28} {:>12}  result", "case", "max rel err");
            for r in &results {
                let ok = r.report.passed();
                println!("{:<28} {:>12.3e}  {}", r.name, r.report.max_rel_err(), if ok { "ok" } else { "FAIL" });
                tsv.push_str(&format!("{}\t{:e}\t{ok}\n", r.name, r.report.max_rel_err()));
            }
            let failed = results.iter().filter(|r| !r.report.passed()).count();
            println!("{} cases, {failed} failed (tol {tol:e})", results.len());
            if let Some(d) = out_dir(&shared)? {
                fs::write(d.join("gradcheck.tsv"), tsv)?;
            }
            Ok(failed == 0)
        }
        Command::Selftest { only, mutate, shared } => {
            let _guard = mutate.map(MutationGuard::new);
            let results = run_suites(only.as_deref())?;
            let mut tsv = String::from("suite\tpassed\tdetail\n");
            for r in &results {
                println!("{:<8} {}  {}", r.name, if r.passed { "pass" } else { "FAIL" }, r.detail);
                tsv.push_str(&format!("{}\t{}\t{}\n", r.name, r.passed, r.detail));
            }
            if let Some(d) = out_dir(&shared)? {
                fs::write(d.join("selftest.tsv"), tsv)?;
            }
            Ok(results.iter().all(|r| r.passed))
        }
        Command::GenData { count, shared } => {
            let spec = GenSpec::from_kv(&load_kv(&shared.config, GenSpec::KEYS)?)?;
            let root = shared.out.as_deref().ok_or_else(|| Error::Usage("gen-data needs --out DIR".into()))?;
            let samples = generate_set(&spec, shared.seed.unwrap_or(0), count)?;
            write_dataset(&samples, root)?;
            let changed: usize = samples.iter().map(|s| s.mask.as_raw().iter().filter(|&&v| v == 1).count()).sum();
            println!("wrote {count} pairs to {} ({changed} changed pixels)", root.display());
            Ok(true)
        }
        Command::Train { data, val, shared } => {
            let cfg = train_config(&shared)?;
            let (train_set, val_set) = datasets(&data, &val)?;
            let out = out_dir(&shared)?;
            let mut trace = String::from("step\tloss\tPr\tRc\tF1\tIoU\n");
            let outcome = train(&cfg, &train_set, &val_set, |r| {
                if r.report.is_some() {
                    println!("{r}");
                }
                trace.push_str(&format!("{r}\n"));
            })?;
            if let Some(d) = out {
                fs::write(d.join("trace.tsv"), trace)?;
                save_checkpoint(&outcome.params, d.join("model.faew"))?;
            }
            match outcome.final_report {
                Some(r) => println!("final {r}"),
                None => println!("trained {} steps (no validation set)", cfg.steps),
            }
            Ok(true)
        }
        Command::Eval { data, ckpt, shared } => {
            let samples = read_dataset(&data)?;
            let report = score(&shared, &samples, &ckpt)?;
            println!("Pr\tRc\tF1\tIoU\n{}", report.row());
            if let Some(d) = out_dir(&shared)? {
                fs::write(d.join("metrics.tsv"), format!("Pr\tRc\tF1\tIoU\n{}\n", report.row()))?;
            }
            Ok(true)
        }
        Command::Render { data, ckpt, shared } => {
            let samples = read_dataset(&data)?;
            let root = shared.out.as_deref().ok_or_else(|| Error::Usage("render needs --out DIR".into()))?;
            fs::create_dir_all(root)?;
            let preds = predictions(&shared, &samples, &ckpt)?;
            for (i, (s, pred)) in samples.iter().zip(&preds).enumerate() {
                let (w, h) = s.size();
                let path = root.join(format!("{i:05}.png"));
                render_confusion(pred, s.mask.as_raw(), w, h)?
                    .save(&path)
                    .map_err(|e| Error::Dataset { path: path.clone(), msg: e.to_string() })?;
            }
            println!("rendered {} confusion maps to {}", samples.len(), root.display());
            Ok(true)
        }
        Command::Ablate { data, val, seeds, spectral, shared } => {
            let base = train_config(&shared)?;
            let (train_set, val_set) = datasets(&data, &val)?;
            let configs = if spectral { spectral_configs(&base) } else { module_ablation_configs(&base) };
            let table = ablate(&configs, &seeds, &train_set, &val_set, |name, seed, r| {
                println!("{name}\tseed {seed}\t{}", r.row());
            })?;
            print!("{table}");
            if let Some(d) = out_dir(&shared)? {
                fs::write(d.join("ablation.tsv"), table.to_string())?;
            }
            Ok(true)
        }
    }
}

/// Loads `ckpt` into the configured model, or recognises the oracle stub.
fn load_model(shared: &Shared, ckpt: &Path) -> Result<Option<(Model, LayerParams<f32>)>> {
    let loaded = load_checkpoint(ckpt)?;
    if loaded.contains(ORACLE_MARKER) {
        return Ok(None);
    }
    let model = Model::new(train_config(shared)?.model)?;
    let mut params = model.init_params::<f32>(0)?;
    params.load_values(&loaded).map_err(|e| Error::Data(format!("{}: {e}", ckpt.display())))?;
    Ok(Some((model, params)))
}

fn predictions(shared: &Shared, samples: &[ChangeSample], ckpt: &Path) -> Result<Vec<Vec<u8>>> {
    match load_model(shared, ckpt)? {
        None => Ok(samples.iter().map(|s| s.mask.as_raw().clone()).collect()),
        Some((model, params)) => samples
            .iter()
            .map(|s| {
                let a = faewnet::data::images_to_tensor([&s.t1])?;
                let b = faewnet::data::images_to_tensor([&s.t2])?;
                model.predict(&params, &a, &b)
            })
            .collect(),
    }
}

fn score(shared: &Shared, samples: &[ChangeSample], ckpt: &Path) -> Result<MetricReport> {
    match load_model(shared, ckpt)? {
        Some((model, params)) => evaluate(&model, &params, samples, 8),
        None => {
            let mut counts = ConfusionCounts::default();
            for s in samples {
                let truth = masks_to_vec([&s.mask]);
                counts += confusion_counts(&truth, &truth)?;
            }
            Ok(derive_metrics(counts))
        }
    }
}
