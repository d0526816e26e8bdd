//! `fewsed` — few-shot bioacoustic sound event detection.
//!
//! Subcommands: `synth` (generate a benchmark dataset), `train`, `detect`,
//! `mine`, `score` and `features`. All of them read one flat `key = value`
//! config file with `--set key=value` overrides, and write a manifest
//! (config hash, seed, versions, wall time) alongside their outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use fewsed_core::config::RunConfig;
use fewsed_core::dataio::{parse_annotation_table, write_predictions, Polarity};
use fewsed_core::dataset;
use fewsed_core::detect::{detect_file, DetectionEvent};
use fewsed_core::features::{extractor, FeatureParams};
use fewsed_core::negmine;
use fewsed_core::nn::load_checkpoint;
use fewsed_core::protolearn;
use fewsed_core::score::{match_events, report, summary_lines, MatchReport};
use fewsed_core::synth::{make_synthetic_dataset, SynthSpec};

#[derive(Parser)]
#[command(name = "fewsed", version, about = "Few-shot bioacoustic sound event detection")]
struct Cli {
    /// Config file with `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Master seed; every random draw derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-file parallelism (1 keeps byte reproducibility
    /// trivially; higher counts stay deterministic per file).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Root for all outputs; each subcommand writes under `<out_dir>/<name>/`.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tone-over-noise dataset with exact ground truth.
    Synth {
        /// Recipe CSV (name,f0_hz,dur_min,dur_max,events,snr_db,pulses,split);
        /// omitted = the built-in 12-train / 4-eval benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Destination directory (default `<out_dir>/synth`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the embedding network with episodic metric learning.
    Train,
    /// Detect events in evaluation files given their first K labeled events.
    Detect {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation CSV or directory of CSVs (default `data.eval_root`);
        /// WAVs are resolved next to each CSV via its Audiofilename column.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Also write one probability-track CSV per file.
        #[arg(long)]
        dump_probs: bool,
    },
    /// Run negative-sample mining on one file and dump its artifacts.
    Mine {
        /// Audio file.
        #[arg(long)]
        audio: PathBuf,
        /// Annotation CSV holding the labeled positive events.
        #[arg(long)]
        labels: PathBuf,
    },
    /// Score predictions against references (event-based f-measure).
    Score {
        /// Prediction CSV.
        #[arg(long)]
        pred: PathBuf,
        /// Reference CSV, or a directory where each CSV is one subset.
        #[arg(long, value_name = "CSV_OR_DIR")]
        r#ref: PathBuf,
        /// Labeled prefix length: reference events up to the offset of the
        /// K-th positive are excluded (as are predictions before it).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Compute a feature matrix and dump it as CSV.
    Features {
        /// Audio file.
        #[arg(long)]
        audio: PathBuf,
        /// One of: mel, logmel, pcen, mfcc, delta_mfcc, stacked.
        #[arg(long)]
        kind: String,
    },
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv:?} is not KEY=VALUE"))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(out) = &cli.out_dir {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let started = Instant::now();
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(&cfg, spec.as_deref(), out.as_deref(), started),
        Command::Train => cmd_train(&cfg, started),
        Command::Detect { checkpoint, labels, dump_probs } => {
            cmd_detect(&cfg, checkpoint, labels.as_deref(), *dump_probs, started)
        }
        Command::Mine { audio, labels } => cmd_mine(&cfg, audio, labels, started),
        Command::Score { pred, r#ref, k } => cmd_score(&cfg, pred, r#ref, *k, started),
        Command::Features { audio, kind } => cmd_features(&cfg, audio, kind, started),
    }
}

fn out_subdir(cfg: &RunConfig, name: &str) -> anyhow::Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_manifest(
    dir: &Path,
    subcommand: &str,
    cfg: &RunConfig,
    started: Instant,
    extra: &[(&str, String)],
) -> anyhow::Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "subcommand = {subcommand}");
    let _ = writeln!(text, "config_hash = {:016x}", cfg.hash());
    let _ = writeln!(text, "seed = {}", cfg.seed);
    let _ = writeln!(text, "workers = {}", cfg.workers);
    let _ = writeln!(text, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(text, "checkpoint_format = 1");
    for (k, v) in extra {
        let _ = writeln!(text, "{k} = {v}");
    }
    let _ = writeln!(text, "wall_time_s = {:.3}", started.elapsed().as_secs_f64());
    std::fs::write(dir.join("manifest.txt"), text)
        .with_context(|| format!("writing manifest under {}", dir.display()))?;
    Ok(())
}

fn feature_params(cfg: &RunConfig) -> FeatureParams {
    FeatureParams {
        stft: cfg.stft(),
        pcen: cfg.pcen(),
        mfcc_coeffs: cfg.mfcc_coeffs,
        delta_width: cfg.delta_width,
    }
}

fn cmd_synth(
    cfg: &RunConfig,
    spec_path: Option<&Path>,
    out: Option<&Path>,
    started: Instant,
) -> anyhow::Result<()> {
    let spec = match spec_path {
        Some(p) => SynthSpec::from_csv(p)?,
        None => SynthSpec::default_benchmark(),
    };
    let dir = match out {
        Some(p) => {
            std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
            p.to_path_buf()
        }
        None => out_subdir(cfg, "synth")?,
    };
    let paths = make_synthetic_dataset(&spec, cfg.seed, &dir)?;
    println!(
        "synth: {} train files under {}, {} eval files under {}",
        paths.train_files.len(),
        paths.train_dir.display(),
        paths.eval_files.len(),
        paths.eval_dir.display()
    );
    write_manifest(
        &dir,
        "synth",
        cfg,
        started,
        &[
            ("train_files", paths.train_files.len().to_string()),
            ("eval_files", paths.eval_files.len().to_string()),
        ],
    )
}

fn cmd_train(cfg: &RunConfig, started: Instant) -> anyhow::Result<()> {
    let dir = out_subdir(cfg, "train")?;
    let params = feature_params(cfg);
    let train_sources = dataset::load_train_classes(&cfg.train_root, &params, cfg.sample_rate)
        .with_context(|| format!("loading training data from {}", cfg.train_root.display()))?;
    let eval_sources = if cfg.transductive && cfg.eval_root.is_dir() {
        let files = dataset::load_eval_files(&cfg.eval_root, &params, cfg.sample_rate, cfg.detect_k)?;
        dataset::transduction_sources(&files)
    } else {
        Vec::new()
    };
    eprintln!(
        "training on {} dev classes + {} transductive eval classes",
        train_sources.len(),
        eval_sources.len()
    );
    let outcome = protolearn::train(cfg, &train_sources, &eval_sources, &dir)?;
    println!(
        "train: best validation accuracy {:.4} after {} epochs{}; checkpoint {}",
        outcome.best_val_acc,
        outcome.epochs_run,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.checkpoint.display()
    );
    write_manifest(
        &dir,
        "train",
        cfg,
        started,
        &[
            ("best_val_accuracy", format!("{:.6}", outcome.best_val_acc)),
            ("epochs_run", outcome.epochs_run.to_string()),
            ("stopped_early", outcome.stopped_early.to_string()),
            ("checkpoint", outcome.checkpoint.display().to_string()),
        ],
    )
}

fn cmd_detect(
    cfg: &RunConfig,
    checkpoint: &Path,
    labels: Option<&Path>,
    dump_probs: bool,
    started: Instant,
) -> anyhow::Result<()> {
    let dir = out_subdir(cfg, "detect")?;
    let params = feature_params(cfg);
    let (embedder, _) = load_checkpoint::<f32>(checkpoint, Some(&cfg.embedder()))
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;

    let label_root = labels.unwrap_or(&cfg.eval_root);
    let files = if label_root.is_file() {
        dataset::load_eval_csvs(&[label_root.to_path_buf()], &params, cfg.sample_rate, cfg.detect_k)?
    } else {
        dataset::load_eval_files(label_root, &params, cfg.sample_rate, cfg.detect_k)?
    };
    if files.is_empty() {
        bail!("no evaluation files under {}", label_root.display());
    }

    let outputs: Vec<_> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .context("building worker pool")?;
        pool.install(|| {
            use rayon::prelude::*;
            files
                .par_iter()
                .map(|f| detect_file(&embedder, f, cfg).map(|o| (f.file_id.clone(), o)))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        files
            .iter()
            .map(|f| detect_file(&embedder, f, cfg).map(|o| (f.file_id.clone(), o)))
            .collect::<Result<Vec<_>, _>>()?
    };

    let mut events: Vec<DetectionEvent> = Vec::new();
    let mut mined_files = 0usize;
    let mut fallback_files = 0usize;
    for (file_id, out) in &outputs {
        if out.prototypes_mined {
            mined_files += 1;
        }
        if out.fallback_unlabeled {
            fallback_files += 1;
            eprintln!("warning: {file_id}: negative pool fell back to unlabeled audio");
        }
        events.extend(out.events.iter().cloned());
        if dump_probs {
            let mut text = String::from("start_s,end_s,probability\n");
            for (p, s) in out.track.probs.iter().zip(out.track.starts.iter()) {
                let _ = writeln!(text, "{s:.4},{:.4},{p:.6}", s + out.track.window_s);
            }
            let stem = Path::new(file_id)
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| file_id.clone());
            std::fs::write(dir.join(format!("{stem}.probs.csv")), text)?;
        }
    }
    events.sort_by(|a, b| a.file_id.cmp(&b.file_id).then(a.onset_s.total_cmp(&b.onset_s)));
    let pred_path = dir.join("predictions.csv");
    write_predictions(&events, &pred_path)?;
    println!(
        "detect: {} events over {} files -> {}",
        events.len(),
        outputs.len(),
        pred_path.display()
    );
    write_manifest(
        &dir,
        "detect",
        cfg,
        started,
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("files", outputs.len().to_string()),
            ("events", events.len().to_string()),
            ("mined_files", mined_files.to_string()),
            ("fallback_files", fallback_files.to_string()),
        ],
    )
}

fn cmd_mine(cfg: &RunConfig, audio: &Path, labels: &Path, started: Instant) -> anyhow::Result<()> {
    let dir = out_subdir(cfg, "mine")?;
    let params = feature_params(cfg);
    let clip = fewsed_core::dataio::load_audio(audio, cfg.sample_rate)?;
    let mel = fewsed_core::features::linear_mel(&clip, &params)?;

    let table = parse_annotation_table(labels)?;
    let mut pos: Vec<(f64, f64)> = table
        .flattened()
        .into_iter()
        .filter(|e| e.polarity == Polarity::Pos)
        .map(|e| (e.onset_s, e.offset_s))
        .collect();
    pos.sort_by(|a, b| a.0.total_cmp(&b.0));
    pos.truncate(cfg.detect_k);
    if pos.is_empty() {
        bail!("{}: no labeled positive events", labels.display());
    }

    let weights = negmine::frequency_bin_weights(&mel, &pos, f64::INFINITY)?;
    let track = negmine::match_score_track(&mel, &pos, &weights, cfg.mine_margin_db)?;
    let ranges =
        negmine::search_negative_segments(&mel, &pos, &weights, cfg.mine_margin_db, cfg.mine_min_run)?;

    let mut wtext = String::from("bin,weight\n");
    for (b, w) in weights.w.iter().enumerate() {
        let _ = writeln!(wtext, "{b},{w:.6}");
    }
    std::fs::write(dir.join("weights.csv"), wtext)?;

    let mut stext = String::from("frame,time_s,sisnr_db\n");
    for (t, s) in track.scores.iter().enumerate() {
        let _ = writeln!(stext, "{t},{:.4},{s:.4}", t as f64 * mel.hop_s);
    }
    std::fs::write(dir.join("scores.csv"), stext)?;

    let mut rtext = String::from("start_frame,end_frame,start_s,end_s\n");
    for &(a, b) in &ranges {
        let _ = writeln!(rtext, "{a},{b},{:.4},{:.4}", a as f64 * mel.hop_s, b as f64 * mel.hop_s);
    }
    std::fs::write(dir.join("ranges.csv"), rtext)?;

    let covered: usize = ranges.iter().map(|(a, b)| b - a).sum();
    println!(
        "mine: threshold {:.2} dB, {} negative ranges covering {} of {} frames",
        track.threshold_db,
        ranges.len(),
        covered,
        mel.frames()
    );
    write_manifest(
        &dir,
        "mine",
        cfg,
        started,
        &[
            ("audio", audio.display().to_string()),
            ("threshold_db", format!("{:.4}", track.threshold_db)),
            ("ranges", ranges.len().to_string()),
        ],
    )
}

/// Reference events with the labeled prefix removed, plus the per-file
/// scoring boundary (the offset of the K-th positive event).
struct Reference {
    events: Vec<DetectionEvent>,
    boundaries: std::collections::BTreeMap<String, f64>,
}

fn truncate_reference(events: Vec<DetectionEvent>, k: usize) -> Reference {
    use std::collections::BTreeMap;
    let mut by_file: BTreeMap<String, Vec<DetectionEvent>> = BTreeMap::new();
    for ev in events {
        by_file.entry(ev.file_id.clone()).or_default().push(ev);
    }
    let mut out = Vec::new();
    let mut boundaries = BTreeMap::new();
    for (file, mut evs) in by_file {
        evs.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        let boundary = if evs.len() >= k { evs[k - 1].offset_s } else { 0.0 };
        boundaries.insert(file, boundary);
        out.extend(evs.into_iter().filter(|e| e.onset_s >= boundary - 1e-9));
    }
    Reference { events: out, boundaries }
}

fn load_reference_csv(path: &Path, k: usize) -> anyhow::Result<Reference> {
    let table = parse_annotation_table(path)?;
    let events: Vec<DetectionEvent> = table
        .flattened()
        .into_iter()
        .filter(|e| e.polarity == Polarity::Pos)
        .map(|e| DetectionEvent {
            file_id: e.file_id,
            onset_s: e.onset_s,
            offset_s: e.offset_s,
            score: 1.0,
        })
        .collect();
    Ok(truncate_reference(events, k))
}

fn cmd_score(
    cfg: &RunConfig,
    pred: &Path,
    reference: &Path,
    k: Option<usize>,
    started: Instant,
) -> anyhow::Result<()> {
    let dir = out_subdir(cfg, "score")?;
    let k = k.unwrap_or(cfg.detect_k);

    let pred_events: Vec<DetectionEvent> = parse_annotation_table(pred)?
        .flattened()
        .into_iter()
        .map(|e| DetectionEvent {
            file_id: e.file_id,
            onset_s: e.onset_s,
            offset_s: e.offset_s,
            score: 1.0,
        })
        .collect();

    let mut subsets: Vec<(String, MatchReport)> = Vec::new();
    if reference.is_dir() {
        let mut csvs: Vec<PathBuf> = std::fs::read_dir(reference)
            .with_context(|| format!("reading {}", reference.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("csv"))
            .collect();
        csvs.sort();
        if csvs.is_empty() {
            bail!("no reference CSVs under {}", reference.display());
        }
        for csv in csvs {
            let reference = load_reference_csv(&csv, k)?;
            let preds: Vec<DetectionEvent> = pred_events
                .iter()
                .filter(|e| reference.boundaries.contains_key(e.file_id.as_str()))
                .cloned()
                .collect();
            let preds = truncate_predictions(preds, &reference);
            let name = csv.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            subsets.push((name, match_events(&preds, &reference.events, cfg.min_iou)?));
        }
    } else {
        let reference = load_reference_csv(reference, k)?;
        let preds = truncate_predictions(pred_events, &reference);
        subsets.push(("all".to_string(), match_events(&preds, &reference.events, cfg.min_iou)?));
    }

    let (overall, table) = report(&subsets);
    print!("{table}");
    println!("F-measure = {:.2}", overall.f_measure());
    let summary = summary_lines(&subsets, &overall);
    std::fs::write(dir.join("summary.txt"), &summary)?;
    write_manifest(
        &dir,
        "score",
        cfg,
        started,
        &[
            ("pred", pred.display().to_string()),
            ("reference", reference.display().to_string()),
            ("k", k.to_string()),
            ("overall_f", format!("{:.4}", overall.f_measure())),
        ],
    )
}

/// Drop predictions inside the labeled prefix; events past the boundary are
/// scored, including false positives between the boundary and the first
/// reference event. Predictions for files absent from the reference are kept
/// (they count as false positives).
fn truncate_predictions(preds: Vec<DetectionEvent>, reference: &Reference) -> Vec<DetectionEvent> {
    preds
        .into_iter()
        .filter(|p| match reference.boundaries.get(p.file_id.as_str()) {
            Some(&b) => p.onset_s >= b - 1e-9,
            None => true,
        })
        .collect()
}

fn cmd_features(cfg: &RunConfig, audio: &Path, kind: &str, started: Instant) -> anyhow::Result<()> {
    let dir = out_subdir(cfg, "features")?;
    let params = feature_params(cfg);
    let clip = fewsed_core::dataio::load_audio(audio, cfg.sample_rate)?;
    let ex = extractor(kind)?;
    let feat = ex.extract(&clip, &params)?;

    let stem = audio
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "audio".into());
    let out_path = dir.join(format!("{stem}.{kind}.csv"));
    let mut text = String::with_capacity(feat.frames() * feat.bins() * 14);
    for row in feat.data.rows() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                text.push(',');
            }
            let _ = write!(text, "{v:.6e}");
            first = false;
        }
        text.push('\n');
    }
    std::fs::write(&out_path, text)?;
    println!(
        "features: {} frames x {} bins ({}) -> {}",
        feat.frames(),
        feat.bins(),
        kind,
        out_path.display()
    );
    write_manifest(
        &dir,
        "features",
        cfg,
        started,
        &[
            ("audio", audio.display().to_string()),
            ("kind", kind.to_string()),
            ("frames", feat.frames().to_string()),
            ("bins", feat.bins().to_string()),
        ],
    )
}
