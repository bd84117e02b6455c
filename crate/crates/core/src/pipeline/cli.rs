//! `spl3d` subcommands. [`run_command`] parses `argv` (program name first)
//! and returns the process exit code: 0 on success, 1 when validation or
//! processing fails, 2 on usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use super::io::{
    align_to_frames, read_detections, read_predictions, write_detections, write_predictions, write_text,
    CategoryEntry,
};
use super::report::{evaluate, read_summary, render_report, write_eval_outputs};
use super::{read_dataset, write_dataset, DatasetManifest, PipelineConfig, PipelineError};
use crate::augment::{augment_frame, draw_params};
use crate::datagen::{
    apply_annotation_cutoff, derive_seed, frame_name, generate_dataset, generate_rear_scene, noisy_predictor_3d,
    oracle_detector_2d, ErrorModel,
};
use crate::loss::run_checks;
use crate::spl::{fuse_dataset, ClassMap, Frame};

const STREAM_AUGMENT: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "spl3d", version, about = "Semi-pseudo-label dataset tooling for monocular 3D detection")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with detector and predictor outputs.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Zero all detector and predictor noise.
        #[arg(long)]
        noiseless: bool,
        /// Render flat-shaded rasters for every frame.
        #[arg(long)]
        rasters: bool,
    },
    /// Add non-duplicate 2D detections to a dataset as pseudo annotations.
    Fuse {
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        #[arg(long, value_name = "FILE")]
        detections: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Apply a random zoom/shift with a consistent virtual camera per frame.
    Augment {
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against ground truth in 2D, BEV and heatmap form.
    Eval {
        /// Ground-truth dataset.
        #[arg(long, value_name = "FILE")]
        gt: PathBuf,
        /// Predictions JSONL, one record per frame id.
        #[arg(long, value_name = "FILE")]
        predictions: PathBuf,
        /// Directory for CSVs, heatmap images and summary.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the loss invariant and gradient checks.
    Losscheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Random trials per check.
        #[arg(long)]
        trials: Option<usize>,
        /// Write the check lines here as well as to stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Summarize a previous `eval` run.
    Report {
        /// Output directory of `eval`.
        #[arg(long, value_name = "DIR")]
        eval_dir: PathBuf,
        /// Write the report here as well as to stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(PipelineError::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut overrides = cli.set.clone();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push(format!("{k}={v}"));
        }
    };
    match &cli.command {
        Command::Synth { frames, seed, noiseless, rasters, .. } => {
            flag("frames", frames.map(|v| v.to_string()));
            flag("seed", seed.map(|v| v.to_string()));
            flag("noiseless", noiseless.then(|| "true".into()));
            flag("rasters", rasters.then(|| "true".into()));
        }
        Command::Augment { seed, .. } | Command::Losscheck { seed, .. } => flag("seed", seed.map(|v| v.to_string())),
        _ => {}
    }
    if let Command::Losscheck { trials: Some(t), .. } = &cli.command {
        overrides.push(format!("losscheck_trials={t}"));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PipelineError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| PipelineError::Invalid(e.to_string()))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(cmd: &Command, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    match cmd {
        Command::Synth { out, .. } => synth(out, cfg),
        Command::Fuse { dataset, detections, out } => fuse(dataset, detections, out, cfg),
        Command::Augment { dataset, out, .. } => augment(dataset, out, cfg),
        Command::Eval { gt, predictions, out } => eval(gt, predictions, out, cfg),
        Command::Losscheck { out, .. } => losscheck(out.as_deref(), cfg),
        Command::Report { eval_dir, out } => report(eval_dir, out.as_deref()),
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn categories(cfg: &PipelineConfig) -> Vec<CategoryEntry> {
    cfg.scene()
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| CategoryEntry { id: i as u32, name: c.name.clone(), prior: c.prior })
        .collect()
}

fn error_model_json(m: &ErrorModel) -> Value {
    serde_json::to_value(m).expect("error models serialize")
}

fn synth(out: &Path, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let scene = cfg.scene();
    let mut frames = generate_dataset(&scene, cfg.seed, cfg.frames)?;
    if cfg.rear_frames {
        let rear: Vec<Frame> = (0..cfg.frames)
            .into_par_iter()
            .map(|i| generate_rear_scene(&scene, cfg.rear_range, cfg.seed, &format!("{}-rear", frame_name(i))))
            .collect::<Result<_, _>>()?;
        frames.extend(rear);
    }
    let (det_model, pred_model) = (cfg.detector_model(), cfg.predictor_model());
    let n_classes = scene.categories.len();
    let detections: Vec<(String, Vec<_>)> = frames
        .par_iter()
        .map(|f| Ok((f.id.clone(), oracle_detector_2d(f, &det_model, n_classes, cfg.seed)?)))
        .collect::<Result<_, PipelineError>>()?;
    let predictions: Vec<(String, Vec<_>)> = frames
        .par_iter()
        .map(|f| Ok((f.id.clone(), noisy_predictor_3d(f, &pred_model, cfg.seed)?)))
        .collect::<Result<_, PipelineError>>()?;

    let mut manifest = DatasetManifest::new(categories(cfg));
    manifest.push_provenance(
        "synth",
        json!({
            "frames": cfg.frames,
            "rear_frames": cfg.rear_frames,
            "rear_range": cfg.rear_range,
            "object_count": [cfg.objects_min, cfg.objects_max],
            "longitudinal_range": [cfg.min_range, cfg.max_range],
            "lateral_range": cfg.lateral_range,
            "camera": cfg.camera(),
            "rasters": cfg.rasters,
        }),
        Some(cfg.seed),
    );
    write_dataset(&frames, &manifest, &out.join("full.jsonl"))?;

    let annotated: Vec<Frame> = frames.par_iter().map(|f| apply_annotation_cutoff(f, cfg.annotation_cutoff)).collect();
    let mut cut_manifest = manifest.clone();
    cut_manifest.push_provenance("annotation_cutoff", json!({ "max_range": cfg.annotation_cutoff }), None);
    write_dataset(&annotated, &cut_manifest, &out.join("annotated.jsonl"))?;

    write_detections(&out.join("detections.jsonl"), &detections)?;
    write_predictions(&out.join("predictions.jsonl"), &predictions)?;
    write_text(
        &out.join("synth_models.json"),
        &(super::io::canonical_line(&json!({
            "detector": error_model_json(&det_model),
            "predictor": error_model_json(&pred_model),
            "seed": cfg.seed,
        }))? + "\n"),
    )?;
    let objects: usize = frames.iter().map(|f| f.annotations.len()).sum();
    let kept: usize = annotated.iter().map(|f| f.annotations.len()).sum();
    println!(
        "synth: {} frames, {objects} objects ({kept} within {} m) written to {}",
        frames.len(),
        cfg.annotation_cutoff,
        out.display()
    );
    Ok(())
}

fn fuse(dataset: &Path, detections: &Path, out: &Path, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    if !detections.is_file() {
        return Err(PipelineError::Usage(format!("detections file {} does not exist", detections.display())));
    }
    let (frames, mut manifest) = read_dataset(dataset)?;
    let dets = align_to_frames(&frames, read_detections(detections)?, detections)?;
    let class_map = ClassMap::identity(manifest.categories.len());
    let (fused, counts) = fuse_dataset(&frames, &dets, cfg.dedup_iou, &class_map)?;
    manifest.push_provenance(
        "fuse",
        json!({
            "iou_threshold": cfg.dedup_iou,
            "detections": file_name(detections),
            "added": counts.added,
            "filtered": counts.filtered,
        }),
        None,
    );
    write_dataset(&fused, &manifest, out)?;
    println!("fuse: {} detections, {} added as pseudo labels, {} filtered as duplicates", counts.total(), counts.added, counts.filtered);
    Ok(())
}

fn augment(dataset: &Path, out: &Path, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let (frames, mut manifest) = read_dataset(dataset)?;
    let bounds = cfg.scale_bounds();
    let augmented: Vec<(Frame, crate::augment::ZoomShiftParams)> = frames
        .par_iter()
        .map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &f.id, STREAM_AUGMENT));
            let params = draw_params(&bounds, cfg.shift_fraction, &f.intrinsics, &mut rng);
            (augment_frame(f, &params, cfg.visibility_threshold), params)
        })
        .collect();
    let per_frame: Map<String, Value> = augmented
        .iter()
        .map(|(f, p)| (f.id.clone(), json!({ "scale": p.scale, "shift_u": p.shift_u, "shift_v": p.shift_v })))
        .collect();
    let before: usize = frames.iter().map(|f| f.annotations.len()).sum();
    let after: usize = augmented.iter().map(|(f, _)| f.annotations.len()).sum();
    manifest.push_provenance(
        "augment",
        json!({
            "scale_bounds": [bounds.lower, bounds.upper],
            "shift_fraction": cfg.shift_fraction,
            "visibility_threshold": cfg.visibility_threshold,
            "frames": per_frame,
        }),
        Some(cfg.seed),
    );
    let frames: Vec<Frame> = augmented.into_iter().map(|(f, _)| f).collect();
    write_dataset(&frames, &manifest, out)?;
    println!("augment: {} frames, {after} of {before} annotations kept", frames.len());
    Ok(())
}

fn eval(gt: &Path, predictions: &Path, out: &Path, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let (frames, manifest) = read_dataset(gt)?;
    let preds = align_to_frames(&frames, read_predictions(predictions)?, predictions)?;
    let summary = evaluate(&frames, &preds, &manifest.categories, cfg)?;
    write_eval_outputs(out, &summary)?;
    let all = |space: &str| summary.metrics.iter().find(|m| m.space == space && m.category == "all");
    if let (Some(m2), Some(mb)) = (all("2d"), all("bev")) {
        println!("eval: 2D AUC {:.4}, BEV AUC {:.4}; outputs in {}", m2.auc, mb.auc, out.display());
    }
    Ok(())
}

fn losscheck(out: Option<&Path>, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let outcomes = run_checks(cfg.seed, cfg.losscheck_trials)?;
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!("{} {}: {}\n", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail));
    }
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    if outcomes.iter().all(|o| o.passed) {
        Ok(())
    } else {
        Err(PipelineError::Invalid("loss checks failed".into()))
    }
}

fn report(dir: &Path, out: Option<&Path>) -> Result<(), PipelineError> {
    let text = render_report(&read_summary(dir)?);
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    Ok(())
}
