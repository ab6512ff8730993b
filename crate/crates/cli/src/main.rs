//! `nmsfuse` command-line interface.
//!
//! Exit codes: 0 success, 2 input or configuration error, 1 internal failure.
//! Results go to stdout; the resolved configuration and diagnostics go to
//! stderr.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use nmsfuse::dataset::{self, DEFAULT_AUDIT_IOU};
use nmsfuse::detio::{self, Detection};
use nmsfuse::eval::{self, ApMode, EvalOptions, IouSpec};
use nmsfuse::nms::{ensemble_fuse, FusionConfig};
use nmsfuse::simulate::{self, ExperimentConfig};
use rayon::prelude::*;
use serde::Serialize;

/// Environment variable that sets the worker thread count.
const THREADS_ENV: &str = "NMSFUSE_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "nmsfuse",
    version,
    about = "NMS ensembling and mAP evaluation for object detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-class label counts for a dataset manifest.
    Stats {
        manifest: PathBuf,
        /// Also write the counts as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Grouped k-fold split; writes foldN_train.txt / foldN_val.txt.
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse per-image prediction files from several models with NMS.
    Fuse {
        /// One prediction directory per model; model id = position.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = FusionConfig::DEFAULT_IOU_THRESHOLD)]
        iou: f64,
        #[arg(long, default_value_t = FusionConfig::DEFAULT_CONFIDENCE_THRESHOLD)]
        conf: f64,
        /// Suppress across classes too.
        #[arg(long)]
        class_agnostic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction directory against a manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, conflicts_with = "iou_range")]
        iou: Option<f64>,
        /// Threshold sweep as lo:hi:step, e.g. 0.5:0.95:0.05.
        #[arg(long, value_parser = parse_range)]
        iou_range: Option<(f64, f64, f64)>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write per-class precision/recall CSVs into this directory.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Row label for the report.
        #[arg(long, default_value = "model")]
        name: String,
        /// Ignore predictions below this confidence.
        #[arg(long, default_value_t = 0.0)]
        conf: f64,
        /// Use 101-point interpolated AP instead of the rectangle sum.
        #[arg(long)]
        interpolated: bool,
        /// Record the current time in the report.
        #[arg(long)]
        timestamp: bool,
    },
    /// Write a synthetic dataset and raw detector outputs.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare single simulated detectors against their NMS ensemble.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Flag duplicate, conflicting and degenerate ground-truth boxes.
    Audit {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_AUDIT_IOU)]
        iou: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Text,
    Json,
}

fn parse_range(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("expected lo:hi:step, got {s:?}"));
    };
    let p = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| format!("{t:?} is not a number"))
    };
    Ok((p(lo)?, p(hi)?, p(step)?))
}

/// An error paired with the exit code it maps to.
struct CliError {
    code: u8,
    err: anyhow::Error,
}

impl fmt::Debug for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.err)
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError {
        code: 2,
        err: e.into(),
    }
}

fn internal<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError {
        code: 1,
        err: e.into(),
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn show_config<T: Serialize>(command: &str, cfg: &T) {
    let json = serde_json::to_string(cfg).unwrap_or_else(|_| "{}".into());
    eprintln!("nmsfuse {command}: {json}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("{THREADS_ENV}={n} ignored: {e}");
        }
    }

    let res = match cli.command {
        Command::Stats { manifest, csv } => cmd_stats(&manifest, csv.as_deref()),
        Command::Split {
            manifest,
            folds,
            seed,
            out,
        } => cmd_split(&manifest, folds, seed, &out),
        Command::Fuse {
            inputs,
            iou,
            conf,
            class_agnostic,
            out,
        } => cmd_fuse(&inputs, iou, conf, class_agnostic, &out),
        Command::Eval {
            pred,
            gt,
            iou,
            iou_range,
            format,
            curves,
            name,
            conf,
            interpolated,
            timestamp,
        } => {
            let spec = match (iou, iou_range) {
                (_, Some((lo, hi, step))) => IouSpec::Range { lo, hi, step },
                (Some(t), None) => IouSpec::Single(t),
                (None, None) => IouSpec::Single(0.5),
            };
            let opts = EvalOptions {
                model_name: name,
                confidence_threshold: conf,
                ap_mode: if interpolated {
                    ApMode::Interpolated101
                } else {
                    ApMode::Literal
                },
                timestamp_unix: timestamp.then(|| {
                    SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0)
                }),
            };
            cmd_eval(&pred, &gt, spec, &opts, format, curves.as_deref())
        }
        Command::Simulate { config, out } => cmd_simulate(config.as_deref(), &out),
        Command::Experiment { config, format } => cmd_experiment(config.as_deref(), format),
        Command::Audit { gt, iou, format } => cmd_audit(&gt, iou, format),
    };

    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.err);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_stats(manifest_path: &Path, csv: Option<&Path>) -> CliResult {
    #[derive(Serialize)]
    struct Resolved<'a> {
        manifest: &'a Path,
        csv: Option<&'a Path>,
    }
    show_config(
        "stats",
        &Resolved {
            manifest: manifest_path,
            csv,
        },
    );
    let manifest = detio::load_manifest(manifest_path).map_err(input)?;
    let stats = dataset::class_stats(&manifest).map_err(input)?;
    print!("{}", stats.to_table());
    if let Some(p) = csv {
        fs::write(p, stats.to_csv())
            .with_context(|| format!("writing {}", p.display()))
            .map_err(internal)?;
    }
    Ok(())
}

fn cmd_split(manifest_path: &Path, k: usize, seed: u64, out: &Path) -> CliResult {
    #[derive(Serialize)]
    struct Resolved<'a> {
        manifest: &'a Path,
        folds: usize,
        seed: u64,
        out: &'a Path,
    }
    show_config(
        "split",
        &Resolved {
            manifest: manifest_path,
            folds: k,
            seed,
            out,
        },
    );
    let manifest = detio::load_manifest(manifest_path).map_err(input)?;
    let folds = dataset::split_folds(&manifest, k, seed).map_err(input)?;
    dataset::write_folds(&folds, out).map_err(internal)?;
    for f in &folds {
        println!(
            "fold {}: train {} images, val {} images",
            f.fold_index + 1,
            f.train_image_ids.len(),
            f.val_image_ids.len()
        );
    }
    Ok(())
}

/// File stems of the `.txt` files in `dir`.
fn prediction_stems(dir: &Path) -> anyhow::Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in
        fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?
    {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

fn cmd_fuse(
    inputs: &[PathBuf],
    iou: f64,
    conf: f64,
    class_agnostic: bool,
    out: &Path,
) -> CliResult {
    let cfg = FusionConfig::new(iou, conf, !class_agnostic).map_err(input)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        inputs: &'a [PathBuf],
        fusion: FusionConfig,
        out: &'a Path,
    }
    show_config(
        "fuse",
        &Resolved {
            inputs,
            fusion: cfg,
            out,
        },
    );

    let stems: Vec<BTreeSet<String>> = inputs
        .iter()
        .map(|d| prediction_stems(d))
        .collect::<anyhow::Result<_>>()
        .map_err(input)?;
    let all: BTreeSet<&String> = stems.iter().flatten().collect();
    let mut missing = Vec::new();
    for (dir, have) in inputs.iter().zip(&stems) {
        for s in all.iter().filter(|s| !have.contains(**s)) {
            missing.push(dir.join(format!("{s}.txt")).display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(input(anyhow!(
            "prediction sets differ across input directories; missing: {}",
            missing.join(", ")
        )));
    }

    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(internal)?;
    let stems: Vec<&String> = all.into_iter().collect();
    let counts = stems
        .par_iter()
        .map(|stem| -> CliResult<usize> {
            let per_model = inputs
                .iter()
                .enumerate()
                .map(|(m, dir)| {
                    detio::read_prediction_file(&dir.join(format!("{stem}.txt")), m as u32, None)
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(input)?;
            let fused = ensemble_fuse(&per_model, &cfg);
            detio::write_prediction_file(&out.join(format!("{stem}.txt")), &fused)
                .map_err(internal)?;
            Ok(fused.len())
        })
        .collect::<CliResult<Vec<usize>>>()?;
    println!(
        "fused {} images from {} models: {} boxes written to {}",
        stems.len(),
        inputs.len(),
        counts.iter().sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    spec: IouSpec,
    opts: &EvalOptions,
    format: Format,
    curves: Option<&Path>,
) -> CliResult {
    #[derive(Serialize)]
    struct Resolved<'a> {
        pred: &'a Path,
        gt: &'a Path,
        iou: IouSpec,
        options: &'a EvalOptions,
        format: Format,
        curves: Option<&'a Path>,
    }
    show_config(
        "eval",
        &Resolved {
            pred,
            gt,
            iou: spec,
            options: opts,
            format,
            curves,
        },
    );
    if !(0.0..=1.0).contains(&opts.confidence_threshold) {
        return Err(input(anyhow!(
            "--conf {} outside [0, 1]",
            opts.confidence_threshold
        )));
    }
    let manifest = detio::load_manifest(gt).map_err(input)?;
    let mut predictions: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for stem in prediction_stems(pred).map_err(input)? {
        let dets = detio::read_prediction_file(&pred.join(format!("{stem}.txt")), 0, None)
            .map_err(input)?;
        predictions.insert(stem, dets);
    }
    let report = eval::evaluate_dataset(&manifest, &predictions, &spec, opts).map_err(input)?;
    match format {
        Format::Text => print!("{}", report.to_table()),
        Format::Json => print!("{}", report.to_json()),
    }
    if let Some(dir) = curves {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(internal)?;
        for (class_id, curve) in report.curves.iter().enumerate() {
            let Some(curve) = curve else { continue };
            let name: String = manifest
                .classes
                .name(class_id)
                .unwrap_or("class")
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect();
            let path = dir.join(format!("{class_id:02}_{name}.csv"));
            fs::write(&path, curve.to_csv())
                .with_context(|| format!("writing {}", path.display()))
                .map_err(internal)?;
        }
    }
    Ok(())
}

fn load_experiment(config: Option<&Path>) -> CliResult<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p).map_err(input),
        None => Ok(ExperimentConfig::default()),
    }
}

fn cmd_simulate(config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_experiment(config)?;
    show_config("simulate", &cfg);
    let m = simulate::materialize(&cfg, out).map_err(|e| match e {
        simulate::SimError::Write { .. } | simulate::SimError::Io(_) => internal(e),
        other => input(other),
    })?;
    println!("manifest: {}", m.manifest_path.display());
    for d in &m.prediction_dirs {
        println!("predictions: {}", d.display());
    }
    Ok(())
}

fn cmd_experiment(config: Option<&Path>, format: Format) -> CliResult {
    let cfg = load_experiment(config)?;
    show_config("experiment", &cfg);
    let report = simulate::run_ensemble_experiment(&cfg).map_err(input)?;
    match format {
        Format::Text => print!("{}", report.to_table()),
        Format::Json => print!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_audit(gt: &Path, iou: f64, format: Format) -> CliResult {
    #[derive(Serialize)]
    struct Resolved<'a> {
        gt: &'a Path,
        iou: f64,
        format: Format,
    }
    show_config("audit", &Resolved { gt, iou, format });
    if !(0.0..=1.0).contains(&iou) {
        return Err(input(anyhow!("--iou {iou} outside [0, 1]")));
    }
    let manifest = detio::load_manifest(gt).map_err(input)?;
    let anomalies = dataset::audit_labels(&manifest, iou).map_err(input)?;
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&anomalies).map_err(internal)?;
            s.push('\n');
            print!("{s}");
        }
        Format::Text => {
            for a in &anomalies {
                let boxes = match a.kind {
                    dataset::AnomalyKind::DoubleLabel { first, second, iou }
                    | dataset::AnomalyKind::ConflictingLabel { first, second, iou } => {
                        format!("boxes {first},{second} iou={iou:.4}")
                    }
                    dataset::AnomalyKind::Degenerate { index } => format!("box {index}"),
                };
                println!(
                    "{}\t{}\t{}\t{}",
                    a.image_id,
                    a.kind.category(),
                    boxes,
                    a.classes.join(" / ")
                );
            }
            println!("{} anomalies", anomalies.len());
        }
    }
    Ok(())
}
