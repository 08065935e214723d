//! Batch CLI wiring the library into reproducible runs. Every command
//! with identical flags, seeds and inputs produces byte-identical
//! outputs; failures exit nonzero with one `ERROR <code>: <msg>` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gtnet_core::anatomy::{anatomy_forward, AnatomyWeights, WindowContext};
use gtnet_core::config::{default_thresholds, RunConfig};
use gtnet_core::datasynth::{
    oracle_probabilities, read_dataset, read_meta, synth_ground_truth, synth_video, window_plan,
    write_dataset, NUM_CLASSES,
};
use gtnet_core::error::{Error, Result};
use gtnet_core::evaluation::{
    aggregate, format_eval_table, frame_map, video_map, GroundTruthSegments, VideoEval,
};
use gtnet_core::gradcheck::{reports_to_result, run_gradcheck};
use gtnet_core::losses::sample_windows;
use gtnet_core::pathology::{fit_prototypes, pathology_forward, PathologyWeights};
use gtnet_core::postprocess::{
    merge_windows, read_segments_csv, run_pipeline_from_probs, write_segments_csv,
    CoOccurrenceTable, FrameProbabilities,
};
use gtnet_core::tensorio::{load_tensor, save_tensor, Matrix};
use gtnet_core::weights::{load_prototypes, save_prototypes};

#[derive(Parser)]
#[command(name = "gtnet", about = "Temporal capsule-endoscopy pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for the command's randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        video_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit healthy prototypes and the co-occurrence table from datasets.
    FitStats {
        #[command(flatten)]
        common: Common,
        /// Training dataset directory (repeatable).
        #[arg(long = "train", required = true)]
        train: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly initialized weight manifests for both branches.
    InitWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both branch forwards over the window plan and merge.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Post-process a merged probability track into segments.
    Postprocess {
        #[command(flatten)]
        common: Common,
        /// T x 17 probability tensor file.
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        video_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score segment predictions against dataset labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "aggregate_fixture")]
        segments: Option<PathBuf>,
        /// Dataset directory with labels (repeatable).
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        /// JSON list of per-video mAP pairs to aggregate instead of
        /// evaluating segments.
        #[arg(long)]
        aggregate_fixture: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic loss gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Measure post-processing and forward throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Frames for the post-processing benchmark.
        #[arg(long, default_value_t = 100_000)]
        frames: usize,
        /// Hidden width for the forward benchmark.
        #[arg(long, default_value_t = 128)]
        dim: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code(), e);
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            frames,
            video_id,
            out,
        } => cmd_synth(&common, frames, video_id, &out),
        Command::FitStats { common, train, out } => cmd_fit_stats(&common, &train, &out),
        Command::InitWeights { common, out } => cmd_init_weights(&common, &out),
        Command::Infer {
            common,
            data,
            weights,
            stats,
            out,
        } => cmd_infer(&common, &data, &weights, &stats, &out),
        Command::Postprocess {
            common,
            probs,
            stats,
            video_id,
            out,
        } => cmd_postprocess(&common, &probs, &stats, video_id, &out),
        Command::Eval {
            common,
            segments,
            data,
            aggregate_fixture,
            out,
        } => cmd_eval(
            &common,
            segments.as_deref(),
            &data,
            aggregate_fixture.as_deref(),
            out.as_deref(),
        ),
        Command::Gradcheck { common, cases } => cmd_gradcheck(&common, cases),
        Command::Bench { common, frames, dim } => cmd_bench(&common, frames, dim),
    }
}

fn cmd_synth(
    common: &Common,
    frames: Option<usize>,
    video_id: Option<String>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(frames) = frames {
        cfg.synth.frames = frames;
    }
    if let Some(id) = video_id {
        cfg.synth.video_id = id;
    }
    cfg.synth.cls_dim = cfg.model.cls_dim;
    cfg.synth.patch_dim = cfg.model.patch_dim;
    let video = synth_video(&cfg.synth)?;
    write_dataset(out, &video.features, &video.gt, cfg.synth.seed)?;
    cfg.write_resolved(out)?;
    let anatomy_segments = video.gt.anatomy_segments().len();
    let pathology_segments: usize = (0..gtnet_core::datasynth::PATHOLOGY_CLASSES)
        .map(|p| video.gt.pathology_segments(p).len())
        .sum();
    println!(
        "synth: {} frames, {} anatomy segments, {} pathology segments -> {}",
        video.gt.frames(),
        anatomy_segments,
        pathology_segments,
        out.display()
    );
    Ok(())
}

fn cmd_fit_stats(common: &Common, train: &[PathBuf], out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut datasets = Vec::new();
    for dir in train {
        datasets.push(read_dataset(dir)?);
    }
    let pairs: Vec<(&Matrix<f32>, &gtnet_core::datasynth::GroundTruthTrack)> = datasets
        .iter()
        .map(|(seq, gt)| (&seq.patch, gt))
        .collect();
    let protos = fit_prototypes(&pairs)?;
    let tracks: Vec<&gtnet_core::datasynth::GroundTruthTrack> =
        datasets.iter().map(|(_, gt)| gt).collect();
    let table = CoOccurrenceTable::fit(&tracks);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_prototypes(out, &protos)?;
    table.save_csv(&out.join("cooccur.csv"))?;
    cfg.write_resolved(out)?;
    println!(
        "fit-stats: {} videos, prototype support {:?} -> {}",
        datasets.len(),
        protos.support,
        out.display()
    );
    Ok(())
}

fn cmd_init_weights(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.model.validate()?;
    let seed = cfg.seed;
    let anatomy = AnatomyWeights::init(&cfg.model, seed);
    let pathology = PathologyWeights::init(&cfg.model, seed);
    anatomy.save(out)?;
    pathology.save(out)?;
    cfg.write_resolved(out)?;
    println!("init-weights: seed {seed} -> {}", out.display());
    Ok(())
}

fn cmd_infer(
    common: &Common,
    data: &Path,
    weights_dir: &Path,
    stats: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.model.validate()?;
    let (seq, _gt) = read_dataset(data)?;
    let anatomy_weights = AnatomyWeights::load(weights_dir, &cfg.model)?;
    let pathology_weights = PathologyWeights::load(weights_dir, &cfg.model)?;
    let protos = load_prototypes(stats)?;
    let frames = seq.frames();
    let plan = window_plan(frames, cfg.model.window, cfg.model.stride)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = Instant::now();
    let mut window_logits = Vec::with_capacity(plan.len());
    for (index, &(start, end)) in plan.iter().enumerate() {
        let ctx = WindowContext::new(start, frames)?;
        let cls = seq.cls.slice_rows(start, end);
        let patch = seq.patch.slice_rows(start, end);
        let a_logits = anatomy_forward(&cls, &ctx, &anatomy_weights, &cfg.model)?;
        let p_logits =
            pathology_forward(&patch, &a_logits, &protos, &pathology_weights, &cfg.model)?;
        let combined = a_logits.concat_cols(&p_logits)?;
        save_tensor(&out.join(format!("window_{index:04}.logits.ten")), &combined)?;
        window_logits.push(combined);
    }
    let merged = merge_windows(&window_logits, &plan, frames)?;
    save_tensor(&out.join("probs.ten"), merged.matrix())?;
    let meta_src = data.join("meta.json");
    let meta_dst = out.join("meta.json");
    fs::copy(&meta_src, &meta_dst).map_err(|e| Error::io(&meta_src, e))?;
    cfg.write_resolved(out)?;
    let elapsed = started.elapsed().as_secs_f64();
    let window_frames: usize = plan.iter().map(|&(s, e)| e - s).sum();
    println!(
        "infer: {} windows over {} frames in {:.2}s ({:.0} frames/s) -> {}",
        plan.len(),
        frames,
        elapsed,
        window_frames as f64 / elapsed,
        out.display()
    );
    Ok(())
}

fn cmd_postprocess(
    common: &Common,
    probs_path: &Path,
    stats: &Path,
    video_id: Option<String>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let matrix: Matrix<f32> = load_tensor(probs_path)?;
    let probs = FrameProbabilities::new(matrix)?;
    let table = CoOccurrenceTable::load_csv(&stats.join("cooccur.csv"))?;
    let video_id = match video_id {
        Some(id) => id,
        None => match probs_path.parent().map(read_meta) {
            Some(Ok(meta)) => meta.video_id,
            _ => "video".to_string(),
        },
    };
    let (track, segments) = run_pipeline_from_probs(&probs, &table, &cfg.post)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_tensor(&out.join("probs_post.ten"), track.matrix())?;
    write_segments_csv(&out.join("segments.csv"), &video_id, &segments)?;
    cfg.write_resolved(out)?;
    println!(
        "postprocess: {} frames -> {} segments -> {}",
        probs.frames(),
        segments.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct FixtureVideo {
    video_id: String,
    map50: f64,
    map95: f64,
}

fn cmd_eval(
    common: &Common,
    segments: Option<&Path>,
    data: &[PathBuf],
    fixture: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let thresholds = if cfg.eval_thresholds.is_empty() {
        default_thresholds()
    } else {
        cfg.eval_thresholds.clone()
    };

    let report = if let Some(fixture_path) = fixture {
        let text = fs::read_to_string(fixture_path).map_err(|e| Error::io(fixture_path, e))?;
        let videos: Vec<FixtureVideo> = serde_json::from_str(&text)?;
        let evals: Vec<VideoEval> = videos
            .into_iter()
            .map(|v| VideoEval {
                video_id: v.video_id,
                thresholds: vec![0.5, 0.95],
                map_per_threshold: vec![v.map50, v.map95],
                ap_per_class: BTreeMap::new(),
            })
            .collect();
        aggregate(evals)?
    } else {
        let segments_path = segments.expect("clap enforces --segments without fixture");
        if data.is_empty() {
            return Err(Error::InvalidInput(
                "eval needs at least one --data directory".into(),
            ));
        }
        let rows = read_segments_csv(segments_path)?;
        let mut by_video: BTreeMap<String, Vec<gtnet_core::postprocess::SegmentPrediction>> =
            BTreeMap::new();
        for (video, seg) in rows {
            by_video.entry(video).or_default().push(seg);
        }
        let mut evals = Vec::new();
        for dir in data {
            let meta = read_meta(dir)?;
            let gt = gtnet_core::datasynth::parse_labels_csv(&dir.join("labels.csv"))?;
            let gt_segments = GroundTruthSegments::from_track(&gt);
            let preds = by_video.remove(&meta.video_id).unwrap_or_default();
            let mut eval = video_map(&preds, &gt_segments, &thresholds)?;
            eval.video_id = meta.video_id;
            evals.push(eval);
        }
        if let Some(stale) = by_video.keys().next() {
            return Err(Error::DataMismatch(format!(
                "segments reference video '{stale}' with no --data directory"
            )));
        }
        aggregate(evals)?
    };

    let table = format_eval_table(&report);
    print!("{table}");
    if let Some(out_dir) = out {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let json_path = out_dir.join("eval.json");
        fs::write(&json_path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(&json_path, e))?;
        let table_path = out_dir.join("eval.txt");
        fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
        cfg.write_resolved(out_dir)?;
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, cases: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let reports = run_gradcheck(cfg.seed, cases, None)?;
    for r in &reports {
        println!(
            "gradcheck {}: {}/{} cases passed, max rel err {:.3e}",
            r.term,
            r.cases - r.failures,
            r.cases,
            r.max_rel_err
        );
    }
    reports_to_result(&reports)
}

fn cmd_bench(common: &Common, frames: usize, dim: usize) -> Result<()> {
    let mut cfg = load_config(common)?;

    // post-processing + evaluation over an oracle probability track
    cfg.synth.frames = frames;
    cfg.synth.cls_dim = 4;
    cfg.synth.patch_dim = 4;
    let gt = synth_ground_truth(&cfg.synth)?;
    let probs = FrameProbabilities::new(oracle_probabilities(&gt, 0.9, 0.1))?;
    let table = CoOccurrenceTable::fit(&[&gt]);
    let started = Instant::now();
    let (track, segments) = run_pipeline_from_probs(&probs, &table, &cfg.post)?;
    let gt_segments = GroundTruthSegments::from_track(&gt);
    let eval = video_map(&segments, &gt_segments, &cfg.eval_thresholds)?;
    let _ = frame_map(&track, &gt)?;
    let post_elapsed = started.elapsed().as_secs_f64();
    println!(
        "bench postprocess+eval: {} frames x {} classes in {:.2}s ({:.0} frames/s), mAP {:?}",
        frames,
        NUM_CLASSES,
        post_elapsed,
        frames as f64 / post_elapsed,
        eval.map_per_threshold
    );

    // branch forwards at the requested width
    let mut model = cfg.model.clone();
    model.hidden = dim;
    model.validate()?;
    let mut synth = cfg.synth.clone();
    synth.frames = 2048;
    synth.cls_dim = model.cls_dim;
    synth.patch_dim = model.patch_dim;
    let video = synth_video(&synth)?;
    let anatomy_weights = AnatomyWeights::init(&model, cfg.seed);
    let pathology_weights = PathologyWeights::init(&model, cfg.seed + 1);
    let pairs = [(&video.features.patch, &video.gt)];
    let protos = fit_prototypes(&pairs)?;
    let plan = window_plan(synth.frames, model.window, model.stride)?;
    let mut timings = Vec::new();
    for _ in 0..3 {
        let started = Instant::now();
        for &(start, end) in &plan {
            let ctx = WindowContext::new(start, synth.frames)?;
            let cls = video.features.cls.slice_rows(start, end);
            let patch = video.features.patch.slice_rows(start, end);
            let a = anatomy_forward(&cls, &ctx, &anatomy_weights, &model)?;
            let _ = pathology_forward(&patch, &a, &protos, &pathology_weights, &model)?;
        }
        timings.push(started.elapsed().as_secs_f64());
    }
    let window_frames: usize = plan.iter().map(|&(s, e)| e - s).sum();
    let rates: Vec<f64> = timings.iter().map(|t| window_frames as f64 / t).collect();
    let best = rates.iter().cloned().fold(0.0, f64::max);
    let worst = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "bench forward d={dim}: {window_frames} window-frames/run, {worst:.0}-{best:.0} frames/s over {} runs (spread {:.0}%)",
        timings.len(),
        100.0 * (best - worst) / best
    );

    // window sampler throughput sanity
    let sampler_plan = window_plan(gt.frames(), cfg.model.window, cfg.model.stride)?;
    let picks = sample_windows(&gt, &sampler_plan, &cfg.sampler, cfg.seed, 10_000)?;
    println!(
        "bench sampler: {} draws over {} windows",
        picks.len(),
        sampler_plan.len()
    );
    Ok(())
}
