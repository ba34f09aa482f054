//! `tagstrain`: batch pipeline driver. Subcommands generate synthetic
//! tagged-cine datasets, train the localizer and tracker networks, run
//! inference and strain export, track with the classical block-matching
//! baseline, and assemble evaluation reports.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::RunConfig;
use tagstrain_core::baseline::track_ssd;
use tagstrain_core::geometry::BoundingBox;
use tagstrain_core::io::{
    self, read_cine, read_landmarks, read_manifest, write_cine, write_landmarks, write_manifest,
    LandmarkDoc, Provenance,
};
use tagstrain_core::models::{
    full_pipeline, load_localizer_dataset, load_tracker_dataset, train_localizer, train_tracker,
    Checkpoint, CropSource, Localizer, Tracker, TrainRun,
};
use tagstrain_core::phantom::{generate_dataset, ManifestEntry};
use tagstrain_core::stats::{bland_altman_csv, evaluate_run, BoxPairInput, EvalCaseInput};
use tagstrain_core::strain::{strain_csv, strain_curve};
use tagstrain_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tagstrain",
    version,
    about = "Myocardial strain from tagged cine images: phantoms, training, tracking, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; omitted sections use built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset operations.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Train a network on a generated dataset.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Localize, track, and export strain for one cine.
    Infer {
        /// Localizer checkpoint.
        #[arg(long, value_name = "CKPT")]
        localizer: PathBuf,
        /// Tracker checkpoint.
        #[arg(long, value_name = "CKPT")]
        tracker: PathBuf,
        /// Input cine file.
        #[arg(long, value_name = "FILE")]
        cine: PathBuf,
        /// Output landmark JSON (original-image coordinates).
        #[arg(long, value_name = "LANDMARKS")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Compute a strain table from a landmark file.
    Strain {
        /// Input landmark JSON.
        #[arg(long, value_name = "FILE")]
        landmarks: PathBuf,
        /// Output CSV path.
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Compare two landmark sets and write the evaluation report.
    Eval {
        /// Directory of predicted landmark JSON files (one per case).
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of reference landmark JSON files.
        #[arg(long, value_name = "DIR")]
        truth: PathBuf,
        /// Optional directory of box-pair JSON files for IoU summaries.
        #[arg(long, value_name = "DIR")]
        boxes: Option<PathBuf>,
        /// Output report JSON; Bland-Altman CSVs are written alongside.
        #[arg(long, value_name = "REPORT")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Track landmarks by block matching (classical comparator).
    Baseline {
        /// Input cine file.
        #[arg(long, value_name = "FILE")]
        cine: PathBuf,
        /// Landmark JSON providing the frame-0 grid.
        #[arg(long, value_name = "LANDMARKS")]
        init: PathBuf,
        /// Output landmark JSON with per-landmark status mask.
        #[arg(long, value_name = "LANDMARKS")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a dataset of synthetic tagged cines with ground truth.
    Gen {
        /// Output dataset directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of cases.
        #[arg(long, value_name = "N")]
        n: usize,
        /// Dataset seed; defaults to the config's seed.
        #[arg(long, value_name = "S")]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (as written by `phantom gen`).
    #[arg(long, value_name = "MANIFEST")]
    data: PathBuf,
    /// Output checkpoint path; a metrics JSONL file is written alongside.
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    /// Number of training epochs.
    #[arg(long, value_name = "E")]
    epochs: usize,
    /// Training seed; defaults to the config's seed.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the annulus box localizer.
    Localizer(TrainArgs),
    /// Train the landmark tracker.
    Tracker(TrainArgs),
}

fn main() {
    if let Ok(v) = std::env::var("TAGSTRAIN_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: TAGSTRAIN_THREADS must be a positive integer, got {v:?}");
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom { cmd: PhantomCmd::Gen { out, n, seed, config } } => {
            cmd_phantom_gen(&out, n, seed, config.config.as_deref())
        }
        Command::Train { cmd } => match cmd {
            TrainCmd::Localizer(args) => cmd_train(Network::Localizer, &args),
            TrainCmd::Tracker(args) => cmd_train(Network::Tracker, &args),
        },
        Command::Infer { localizer, tracker, cine, out, config } => {
            cmd_infer(&localizer, &tracker, &cine, &out, config.config.as_deref())
        }
        Command::Strain { landmarks, out, config } => {
            cmd_strain(&landmarks, &out, config.config.as_deref())
        }
        Command::Eval { pred, truth, boxes, out, config } => {
            cmd_eval(&pred, &truth, boxes.as_deref(), &out, config.config.as_deref())
        }
        Command::Baseline { cine, init, out, config } => {
            cmd_baseline(&cine, &init, &out, config.config.as_deref())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Provenance stamp embedded in every output: tool version plus the
/// effective configuration (config file merged with CLI overrides).
fn make_provenance(command: &str, cfg: &RunConfig) -> Result<Provenance> {
    let value = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Provenance::new(json!({ "command": command, "run_config": value })))
}

enum Network {
    Localizer,
    Tracker,
}

fn cmd_phantom_gen(out: &Path, n: usize, seed: Option<u64>, config: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let prov = make_provenance("phantom gen", &cfg)?;
    let dataset = generate_dataset(&cfg.phantom, n, cfg.seed)?;

    io::ensure_dir(out)?;
    io::ensure_dir(&out.join("cines"))?;
    io::ensure_dir(&out.join("landmarks"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    let mut counts = [0usize; 3];
    for (case, split) in dataset {
        let id = case.cine.id.clone();
        let cine_rel = format!("cines/{id}.bin");
        let lm_rel = format!("landmarks/{id}.json");
        write_cine(&out.join(&cine_rel), &case.cine)?;
        let mut doc = LandmarkDoc::new(case.truth, case.spec.pixel_spacing_mm);
        doc.provenance = Some(prov.clone());
        write_landmarks(&out.join(&lm_rel), &doc)?;
        counts[split as usize] += 1;
        entries.push(ManifestEntry {
            case_id: id,
            cine_path: cine_rel,
            landmarks_path: lm_rel,
            bbox: case.truth_bbox,
            split,
            spec: case.spec,
            region: None,
        });
    }
    write_manifest(&out.join("manifest.json"), &entries)?;
    io::save_json(&out.join("config.json"), &prov, true)?;
    println!(
        "{}",
        json!({"cases": entries.len(), "train": counts[0], "val": counts[1], "test": counts[2]})
    );
    Ok(())
}

fn cmd_train(which: Network, args: &TrainArgs) -> Result<()> {
    if args.out.exists() && !args.force {
        return Err(Error::Config(format!(
            "checkpoint {} already exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let mut cfg = load_config(args.config.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let entries = read_manifest(&args.data)?;
    let root = args.data.parent().unwrap_or(Path::new("."));
    let (run, command) = match which {
        Network::Localizer => {
            let data = load_localizer_dataset(root, &entries, cfg.localizer.model.input_size)?;
            let run = train_localizer(
                &data,
                &cfg.localizer.model,
                args.epochs,
                cfg.seed,
                &cfg.localizer_train_options(),
            )?;
            (run, "train localizer")
        }
        Network::Tracker => {
            let data =
                load_tracker_dataset(root, &entries, &cfg.preprocess, CropSource::TruthBox)?;
            let run = train_tracker(
                &data,
                &cfg.tracker.model,
                args.epochs,
                cfg.seed,
                &cfg.tracker_train_options(),
            )?;
            (run, "train tracker")
        }
    };
    finish_train(run, &args.out, &cfg, command)
}

fn finish_train(mut run: TrainRun, out: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let prov = make_provenance(command, cfg)?;
    run.checkpoint.provenance = Some(prov.clone());
    run.checkpoint.save(out)?;

    let metrics_path = out.with_extension("metrics.jsonl");
    let mut f = io::create_file(&metrics_path)?;
    let head = serde_json::to_string(&json!({ "provenance": prov }))
        .map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{head}").map_err(|e| Error::io(&metrics_path, e))?;
    for m in &run.metrics {
        let line = serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
    }

    // Final validation metrics (falling back to the last train record when
    // the dataset has no validation split), as one JSON line.
    let last = run
        .metrics
        .iter()
        .rev()
        .find(|m| m["split"] == "val")
        .or_else(|| run.metrics.last())
        .cloned()
        .unwrap_or_else(|| json!({}));
    println!("{last}");
    Ok(())
}

fn cmd_infer(
    localizer: &Path,
    tracker: &Path,
    cine_path: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let mut loc = Localizer::from_checkpoint(&Checkpoint::load(localizer)?)?;
    let mut trk = Tracker::from_checkpoint(&Checkpoint::load(tracker)?)?;
    let cine = read_cine(cine_path)?;
    let output = full_pipeline(&mut loc, &mut trk, &cine, &cfg.preprocess)?;

    let mut doc = LandmarkDoc::new(output.landmarks, cine.pixel_spacing_mm);
    doc.transform = Some(output.record);
    doc.provenance = Some(make_provenance("infer", &cfg)?);
    write_landmarks(out, &doc)?;
    println!(
        "{}",
        json!({
            "frames_per_sec": output.frames_per_sec,
            "network_seconds": output.network_seconds,
            "used_fallback_box": output.used_fallback_box,
            "es_frame": output.strain.es_frame,
        })
    );
    Ok(())
}

fn cmd_strain(landmarks: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let prov = make_provenance("strain", &cfg)?;
    let doc = read_landmarks(landmarks)?;
    let curve = strain_curve(&doc.sequence)?;
    let mut csv = strain_csv(&curve);
    csv.push_str(&provenance_comments(&prov)?);
    let mut f = io::create_file(out)?;
    f.write_all(csv.as_bytes()).map_err(|e| Error::io(out, e))?;
    let es = &curve.per_frame[curve.es_frame];
    println!(
        "{}",
        json!({
            "frames": curve.per_frame.len(),
            "es_frame": curve.es_frame,
            "es_eps_c_midwall": es.eps_c_midwall,
            "es_eps_r": es.eps_r,
        })
    );
    Ok(())
}

/// Trailing comment lines appending provenance to a CSV artifact.
fn provenance_comments(prov: &Provenance) -> Result<String> {
    let cfg = serde_json::to_string(&prov.config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!("# tool_version={}\n# config={cfg}\n", prov.tool_version))
}

/// Box-pair file consumed by `eval --boxes`: one JSON object per case.
#[derive(serde::Serialize, serde::Deserialize)]
struct BoxPairDoc {
    pred: BoundingBox,
    truth: BoundingBox,
}

fn read_landmark_dir(dir: &Path) -> Result<Vec<EvalCaseInput>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no landmark JSON files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad file name: {}", p.display())))?;
            let doc = read_landmarks(p)?;
            Ok(EvalCaseInput {
                case_id: stem.to_string(),
                region: None,
                sequence: doc.sequence,
                pixel_spacing_mm: doc.pixel_spacing_mm,
            })
        })
        .collect()
}

fn read_box_dir(dir: &Path) -> Result<Vec<BoxPairInput>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad file name: {}", p.display())))?;
            let doc: BoxPairDoc = io::load_json(p)?;
            Ok(BoxPairInput { case_id: stem.to_string(), pred: doc.pred, truth: doc.truth })
        })
        .collect()
}

fn cmd_eval(
    pred: &Path,
    truth: &Path,
    boxes: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let prov = make_provenance("eval", &cfg)?;
    let pred_cases = read_landmark_dir(pred).map_err(Error::stage("pred"))?;
    let truth_cases = read_landmark_dir(truth).map_err(Error::stage("truth"))?;
    let box_pairs = match boxes {
        Some(dir) => read_box_dir(dir).map_err(Error::stage("boxes"))?,
        None => Vec::new(),
    };
    let report = evaluate_run(&pred_cases, &truth_cases, &box_pairs, &cfg.eval.labels(), None)?;

    io::save_json(out, &json!({ "provenance": prov, "report": report }), true)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let dir = out.parent().unwrap_or(Path::new("."));
    let comments = provenance_comments(&prov)?;
    for (measure, panel) in &report.bland_altman {
        let csv_path = dir.join(format!("{stem}_ba_{measure}.csv"));
        let mut csv = bland_altman_csv(panel);
        csv.push_str(&comments);
        let mut f = io::create_file(&csv_path)?;
        f.write_all(csv.as_bytes()).map_err(|e| Error::io(&csv_path, e))?;
    }
    let all = &report.strain["all"];
    println!(
        "{}",
        json!({
            "cases": report.n_cases,
            "eps_c_midwall_bias": all["eps_c_midwall"].bias,
            "eps_c_midwall_sd": all["eps_c_midwall"].sd,
            "eps_r_bias": all["eps_r"].bias,
            "rms_ed_mm": report.position_rms_mm["ed"].mean,
            "rms_es_mm": report.position_rms_mm["es"].mean,
            "iou_mean": report.iou.as_ref().map(|i| i.mean),
        })
    );
    Ok(())
}

fn cmd_baseline(cine_path: &Path, init: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let cine = read_cine(cine_path)?;
    let init_doc = read_landmarks(init)?;
    let outcome = track_ssd(&cine, init_doc.sequence.frame(0), &cfg.baseline)?;
    let clean = outcome.status.iter().filter(|&&s| s).count();
    let total = outcome.status.len();
    let mut doc = LandmarkDoc::new(outcome.sequence, init_doc.pixel_spacing_mm);
    doc.status_mask = Some(outcome.status);
    doc.provenance = Some(make_provenance("baseline", &cfg)?);
    write_landmarks(out, &doc)?;
    println!("{}", json!({"frames": cine.frame_count(), "clean_landmarks": clean, "total_landmarks": total}));
    Ok(())
}
