//! Command-line front end: `segment`, `evaluate` and `sweep`.
//!
//! Exit codes: 0 when every item succeeded, 1 when at least one image or
//! prediction failed (the rest are still processed), 2 for usage and
//! configuration errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{load_image, load_label_map, load_manifest, save_label_map, DatasetManifest, LabelOutput};
use crate::error::{contract, Error, Result};
use crate::labels::LabelMap;
use crate::loss::{ScheduleKind, WeightSchedule};
use crate::metrics::{aggregate, bsd_variants, Aggregate, BsdScores, GroundTruthSet};
use crate::model::ModelConfig;
use crate::trainer::{train_image, IterationRecord, SegmentationResult, StopReason, TrainConfig};

/// Environment variable consulted when `--jobs` is not given.
pub const THREADS_ENV: &str = "DYNASEG_THREADS";

const EXIT_OK: i32 = 0;
const EXIT_FAILURES: i32 = 1;
const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "dynaseg",
    version,
    about = "Unsupervised image segmentation with dynamically weighted loss"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment one image or every image in a manifest.
    Segment(SegmentArgs),
    /// Score predicted label maps against the ground truth listed in a manifest.
    Evaluate(EvaluateArgs),
    /// Segment one image once per base weight in a list.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    /// Weight schedule: fixed, fsf or scf.
    #[arg(long, default_value = "fsf")]
    schedule: ScheduleKind,
    /// Base weight; defaults to 5 (fixed), 15 (fsf) or 50 (scf).
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum number of iterations.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Stop once the number of clusters drops to this value.
    #[arg(long, default_value_t = 3)]
    min_labels: usize,
    /// Number of conv/ReLU/BN components.
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value_t = 100)]
    feature_dim: usize,
    /// Number of response channels, an upper bound on the cluster count.
    #[arg(long, default_value_t = 100)]
    cluster_dim: usize,
    /// Images processed concurrently; falls back to DYNASEG_THREADS, then 1.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    image: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write per-iteration statistics as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<stem>_labels.png` (or `<stem>.png`) label maps.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated base weights.
    #[arg(long, value_delimiter = ',', required = true)]
    mu_list: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

/// Fully resolved settings, echoed at startup.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub jobs: usize,
    pub out: PathBuf,
    pub inputs: Vec<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self, mu: Option<f64>) -> Result<(ModelConfig, TrainConfig, usize)> {
        let model = ModelConfig {
            m_components: self.components,
            feature_dim: self.feature_dim,
            cluster_dim: self.cluster_dim,
            input_channels: 3,
        };
        model.validate()?;
        let schedule = match mu {
            Some(mu) => WeightSchedule::new(self.schedule, mu)?,
            None => WeightSchedule::with_default_mu(self.schedule),
        };
        let train = TrainConfig {
            max_iters: self.iters,
            learning_rate: self.lr,
            momentum: self.momentum,
            min_labels: self.min_labels,
            seed: self.seed,
            schedule,
        };
        train.validate()?;
        Ok((model, train, resolve_jobs(self.jobs)?))
    }
}

fn resolve_jobs(flag: Option<usize>) -> Result<usize> {
    let jobs = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| contract(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if jobs == 0 {
        return Err(contract("--jobs must be at least 1"));
    }
    Ok(jobs)
}

fn run_pool<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| contract(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(work))
}

fn echo_config(cfg: &RunConfig) {
    let json = serde_json::to_string(cfg).expect("config serializes");
    println!("config {json}");
}

/// Entry point for the binary.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Manifest { diagnostics, .. } = &e {
                for d in diagnostics {
                    eprintln!("  {d}");
                }
            }
            EXIT_USAGE
        }
    }
}

fn summary_line(name: &str, res: &SegmentationResult) -> String {
    let last = res.final_record();
    let stop = match res.stop_reason {
        StopReason::MaxIters => "max_iters",
        StopReason::MinLabels => "min_labels",
    };
    format!(
        "{name}: q'={} L={:.6} L_sim={:.6} L_con={:.6} iters={} stop={stop}",
        last.q_prime, last.total, last.similarity, last.continuity, res.iterations_run
    )
}

fn segment_one(image: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<SegmentationResult> {
    let img = load_image(image)?;
    train_image(img.tensor(), model, train)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    image: &'a str,
    #[serde(flatten)]
    record: &'a IterationRecord,
}

fn write_trace<'a>(path: &Path, runs: impl Iterator<Item = (&'a str, &'a [IterationRecord])>) -> Result<()> {
    let write_err = |e: std::io::Error| Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(write_err)?);
    for (image, history) in runs {
        for record in history {
            let line = serde_json::to_string(&TraceLine { image, record }).expect("trace serializes");
            writeln!(w, "{line}").map_err(write_err)?;
        }
    }
    w.flush().map_err(write_err)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Write {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })
}

fn cmd_segment(args: &SegmentArgs) -> Result<i32> {
    let (model, train, jobs) = args.train.resolve(args.train.mu)?;
    let manifest = match (&args.image, &args.manifest) {
        (Some(image), None) => {
            if !image.is_file() {
                return Err(contract(format!("{} does not exist", image.display())));
            }
            DatasetManifest::single(image.clone())
        }
        (None, Some(path)) => load_manifest(path)?,
        _ => return Err(contract("exactly one of --image or --manifest is required")),
    };
    let cfg = RunConfig {
        model,
        train,
        jobs,
        out: args.out.clone(),
        inputs: manifest.entries().iter().map(|e| e.image.clone()).collect(),
    };
    echo_config(&cfg);
    create_out_dir(&args.out)?;

    let results: Vec<(String, Result<SegmentationResult>)> = run_pool(jobs, || {
        manifest
            .entries()
            .par_iter()
            .enumerate()
            .map(|(idx, entry)| {
                let stem = entry.stem();
                let per_image = TrainConfig {
                    seed: train.seed.wrapping_add(idx as u64),
                    ..train
                };
                let res = segment_one(&entry.image, &model, &per_image).and_then(|res| {
                    save_label_map(
                        &res.labels,
                        args.out.join(format!("{stem}_labels.png")),
                        LabelOutput::Raw,
                    )?;
                    save_label_map(
                        &res.labels,
                        args.out.join(format!("{stem}_seg.png")),
                        LabelOutput::Colorized,
                    )?;
                    Ok(res)
                });
                (stem, res)
            })
            .collect()
    })?;

    let mut failures = 0;
    for (stem, res) in &results {
        match res {
            Ok(r) => println!("{}", summary_line(stem, r)),
            Err(e) => {
                failures += 1;
                eprintln!("{stem}: failed: {e}");
            }
        }
    }
    if let Some(path) = &args.trace {
        let runs = results
            .iter()
            .filter_map(|(s, r)| r.as_ref().ok().map(|r| (s.as_str(), r.history.as_slice())));
        write_trace(path, runs)?;
    }
    println!("segmented {} of {} images", results.len() - failures, results.len());
    Ok(if failures == 0 { EXIT_OK } else { EXIT_FAILURES })
}

/// Per-image row of an evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct ImageReport {
    pub stem: String,
    pub prediction: PathBuf,
    pub all: f64,
    pub fine: f64,
    pub coarse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailedImage {
    pub stem: String,
    pub error: String,
}

/// JSON written by `evaluate`.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub images: Vec<ImageReport>,
    pub missing: Vec<String>,
    pub failed: Vec<FailedImage>,
    pub aggregate: Option<Aggregate>,
}

fn find_prediction(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}_labels.png"), format!("{stem}.png")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

fn score_entry(pred: &Path, ground_truth: &[PathBuf]) -> Result<BsdScores> {
    if ground_truth.is_empty() {
        return Err(contract("manifest lists no ground truth for this image"));
    }
    let pred = load_label_map(pred)?;
    let gts = ground_truth
        .iter()
        .map(load_label_map)
        .collect::<Result<Vec<LabelMap>>>()?;
    bsd_variants(&pred, &GroundTruthSet::new(gts)?)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<i32> {
    let manifest = load_manifest(&args.manifest)?;
    if !args.pred.is_dir() {
        return Err(contract(format!(
            "prediction directory {} does not exist",
            args.pred.display()
        )));
    }
    let mut report = EvaluationReport {
        images: Vec::new(),
        missing: Vec::new(),
        failed: Vec::new(),
        aggregate: None,
    };
    let mut scores = Vec::new();
    for entry in manifest.entries() {
        let stem = entry.stem();
        let Some(pred) = find_prediction(&args.pred, &stem) else {
            eprintln!("{stem}: no prediction in {}", args.pred.display());
            report.missing.push(stem);
            continue;
        };
        match score_entry(&pred, &entry.ground_truth) {
            Ok(s) => {
                println!("{stem}: all={:.4} fine={:.4} coarse={:.4}", s.all, s.fine, s.coarse);
                scores.push(s);
                report.images.push(ImageReport {
                    stem,
                    prediction: pred,
                    all: s.all,
                    fine: s.fine,
                    coarse: s.coarse,
                });
            }
            Err(e) => {
                eprintln!("{stem}: failed: {e}");
                report.failed.push(FailedImage {
                    stem,
                    error: e.to_string(),
                });
            }
        }
    }
    report.aggregate = aggregate(&scores);
    if let Some(a) = &report.aggregate {
        println!(
            "All={:.4} Fine={:.4} Coarse={:.4} Mean={:.4} over {} images",
            a.all, a.fine, a.coarse, a.mean, a.images
        );
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&args.report, json + "\n").map_err(|e| Error::Write {
        path: args.report.clone(),
        reason: e.to_string(),
    })?;
    let clean = report.missing.is_empty() && report.failed.is_empty();
    Ok(if clean { EXIT_OK } else { EXIT_FAILURES })
}

/// Output name for the `index`-th sweep run.
pub fn sweep_file_name(stem: &str, index: usize, mu: f64) -> String {
    format!("{stem}_sweep{index:02}_mu{mu}_seg.png")
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    if args.train.mu.is_some() {
        return Err(contract("sweep takes --mu-list, not --mu"));
    }
    if !args.image.is_file() {
        return Err(contract(format!("{} does not exist", args.image.display())));
    }
    let mut configs = Vec::with_capacity(args.mu_list.len());
    for &mu in &args.mu_list {
        configs.push(args.train.resolve(Some(mu))?);
    }
    let (model, _, jobs) = configs[0];
    for (_, train, _) in &configs {
        let cfg = RunConfig {
            model,
            train: *train,
            jobs,
            out: args.out.clone(),
            inputs: vec![args.image.clone()],
        };
        echo_config(&cfg);
    }
    create_out_dir(&args.out)?;
    let img = load_image(&args.image)?;
    let stem = crate::dataio::image_stem(&args.image);

    let results: Vec<Result<SegmentationResult>> = run_pool(jobs, || {
        configs
            .par_iter()
            .enumerate()
            .map(|(idx, (model, train, _))| {
                let res = train_image(img.tensor(), model, train)?;
                let name = sweep_file_name(&stem, idx, train.schedule.mu());
                save_label_map(&res.labels, args.out.join(name), LabelOutput::Colorized)?;
                Ok(res)
            })
            .collect()
    })?;

    let mut table = String::from("mu\tq_prime\tL\tL_sim\tL_con\n");
    let mut failures = 0;
    for (mu, res) in args.mu_list.iter().zip(&results) {
        match res {
            Ok(r) => {
                let last = r.final_record();
                println!("{}", summary_line(&format!("{stem} mu={mu}"), r));
                table.push_str(&format!(
                    "{mu}\t{}\t{}\t{}\t{}\n",
                    last.q_prime, last.total, last.similarity, last.continuity
                ));
            }
            Err(e) => {
                failures += 1;
                eprintln!("{stem} mu={mu}: failed: {e}");
                table.push_str(&format!("{mu}\tfailed\t\t\t\n"));
            }
        }
    }
    let tsv = args.out.join("sweep.tsv");
    fs::write(&tsv, table).map_err(|e| Error::Write {
        path: tsv.clone(),
        reason: e.to_string(),
    })?;
    Ok(if failures == 0 { EXIT_OK } else { EXIT_FAILURES })
}
