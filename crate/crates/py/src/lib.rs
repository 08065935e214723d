//! Python bindings: the main pipeline operations over plain lists and
//! tuples, so the stages can be driven or inspected from Python without
//! the CLI.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gtnet_core::datasynth::{self, SynthConfig, ANATOMY_CLASSES, PATHOLOGY_CLASSES};
use gtnet_core::evaluation::{self, GroundTruthSegments, VideoEval};
use gtnet_core::gradcheck::run_gradcheck;
use gtnet_core::postprocess::{
    run_pipeline_from_probs, CoOccurrenceTable, FrameProbabilities, PostConfig, SegmentPrediction,
    ViterbiConfig,
};
use gtnet_core::tensorio::Matrix;

fn to_py_err(e: gtnet_core::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {}", e.code(), e))
}

fn matrix_from_rows(rows: Vec<Vec<f32>>) -> PyResult<Matrix<f32>> {
    Matrix::from_rows(&rows).map_err(to_py_err)
}

fn matrix_to_rows(m: &Matrix<f32>) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Anatomy and pathology class names, in label order.
#[pyfunction]
fn label_names() -> (Vec<String>, Vec<String>) {
    (
        datasynth::ANATOMY_NAMES.iter().map(|s| s.to_string()).collect(),
        datasynth::PATHOLOGY_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Generate a synthetic dataset directory; returns
/// (frames, anatomy segments, pathology segments).
#[pyfunction]
#[pyo3(signature = (path, frames, seed, cls_dim=64, patch_dim=64))]
fn synth_dataset(
    path: PathBuf,
    frames: usize,
    seed: u64,
    cls_dim: usize,
    patch_dim: usize,
) -> PyResult<(usize, usize, usize)> {
    let cfg = SynthConfig {
        frames,
        seed,
        cls_dim,
        patch_dim,
        video_id: format!("synth-{seed}"),
        ..SynthConfig::default()
    };
    let video = datasynth::synth_video(&cfg).map_err(to_py_err)?;
    datasynth::write_dataset(&path, &video.features, &video.gt, seed).map_err(to_py_err)?;
    let anatomy = video.gt.anatomy_segments().len();
    let pathology: usize = (0..PATHOLOGY_CLASSES)
        .map(|p| video.gt.pathology_segments(p).len())
        .sum();
    Ok((video.gt.frames(), anatomy, pathology))
}

/// Read the labels of a dataset directory as
/// (anatomy indices, pathology flag rows).
#[pyfunction]
fn read_labels(path: PathBuf) -> PyResult<(Vec<usize>, Vec<Vec<usize>>)> {
    let gt = datasynth::parse_labels_csv(&path.join("labels.csv")).map_err(to_py_err)?;
    let anatomy = gt.anatomy().iter().map(|&a| a as usize).collect();
    let flags = gt
        .pathology()
        .iter()
        .map(|row| row.iter().map(|&b| b as usize).collect())
        .collect();
    Ok((anatomy, flags))
}

/// Sliding windows [start, end) covering `frames`.
#[pyfunction]
fn window_plan(frames: usize, window: usize, stride: usize) -> PyResult<Vec<(usize, usize)>> {
    datasynth::window_plan(frames, window, stride).map_err(to_py_err)
}

/// Per-class median filter over a T x 17 probability track.
#[pyfunction]
#[pyo3(signature = (track, k=5))]
fn median_filter(track: Vec<Vec<f32>>, k: usize) -> PyResult<Vec<Vec<f32>>> {
    let probs = FrameProbabilities::new(matrix_from_rows(track)?).map_err(to_py_err)?;
    let out = gtnet_core::postprocess::median_filter(&probs, k).map_err(to_py_err)?;
    Ok(matrix_to_rows(out.matrix()))
}

/// Monotone decode of T x 8 anatomy probabilities.
#[pyfunction]
#[pyo3(signature = (anatomy_probs, skip_penalty=5.0, emission_floor=1e-6))]
fn viterbi(
    anatomy_probs: Vec<Vec<f32>>,
    skip_penalty: f64,
    emission_floor: f64,
) -> PyResult<Vec<usize>> {
    let probs = matrix_from_rows(anatomy_probs)?;
    let cfg = ViterbiConfig {
        skip_penalty,
        emission_floor,
    };
    let path = gtnet_core::postprocess::viterbi_anatomy(&probs, &cfg).map_err(to_py_err)?;
    Ok(path.into_iter().map(usize::from).collect())
}

/// Full post-processing of a T x 17 probability track. `cooccur` is the
/// 8 x 9 training count table. Returns segments as
/// (class id, start, end inclusive, confidence).
#[pyfunction]
#[pyo3(signature = (track, cooccur, median_k=5, skip_penalty=5.0, gate_min_count=1,
                    segment_threshold=0.5, min_segment_len=20, max_gap=20))]
#[allow(clippy::too_many_arguments)]
fn postprocess(
    track: Vec<Vec<f32>>,
    cooccur: Vec<Vec<u32>>,
    median_k: usize,
    skip_penalty: f64,
    gate_min_count: u32,
    segment_threshold: f32,
    min_segment_len: usize,
    max_gap: usize,
) -> PyResult<Vec<(usize, usize, usize, f32)>> {
    let probs = FrameProbabilities::new(matrix_from_rows(track)?).map_err(to_py_err)?;
    if cooccur.len() != ANATOMY_CLASSES || cooccur.iter().any(|r| r.len() != PATHOLOGY_CLASSES) {
        return Err(PyValueError::new_err("cooccur must be 8 x 9 counts"));
    }
    let mut counts = [[0u32; PATHOLOGY_CLASSES]; ANATOMY_CLASSES];
    for (a, row) in cooccur.iter().enumerate() {
        counts[a].copy_from_slice(row);
    }
    let cfg = PostConfig {
        median_k,
        viterbi: ViterbiConfig {
            skip_penalty,
            ..ViterbiConfig::default()
        },
        gate_min_count,
        segment_threshold,
        min_segment_len,
        max_gap,
    };
    let (_, segments) =
        run_pipeline_from_probs(&probs, &CoOccurrenceTable::from_counts(counts), &cfg)
            .map_err(to_py_err)?;
    Ok(segments
        .into_iter()
        .map(|s| (s.class_id, s.start, s.end, s.confidence))
        .collect())
}

/// Temporal mAP of segment predictions against ground-truth segments.
/// Predictions are (class id, start, end, confidence); ground truth is
/// (class id, start, end). Returns one mAP per threshold.
#[pyfunction]
#[pyo3(signature = (predictions, ground_truth, thresholds=vec![0.5, 0.95]))]
fn temporal_map(
    predictions: Vec<(usize, usize, usize, f32)>,
    ground_truth: Vec<(usize, usize, usize)>,
    thresholds: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let preds: Vec<SegmentPrediction> = predictions
        .into_iter()
        .map(|(class_id, start, end, confidence)| SegmentPrediction {
            class_id,
            start,
            end,
            confidence,
        })
        .collect();
    let mut per_class = vec![Vec::new(); datasynth::NUM_CLASSES];
    for (class_id, start, end) in ground_truth {
        if class_id >= datasynth::NUM_CLASSES {
            return Err(PyValueError::new_err("ground-truth class id out of range"));
        }
        per_class[class_id].push((start, end));
    }
    let gt = GroundTruthSegments::from_lists(per_class).map_err(to_py_err)?;
    let eval = evaluation::video_map(&preds, &gt, &thresholds).map_err(to_py_err)?;
    Ok(eval.map_per_threshold)
}

/// Aggregate per-video (mAP@0.5, mAP@0.95) pairs into
/// (mean mAP@0.5, mean mAP@0.95, overall score).
#[pyfunction]
fn aggregate_scores(videos: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let evals: Vec<VideoEval> = videos
        .into_iter()
        .map(|(map50, map95)| VideoEval {
            video_id: String::new(),
            thresholds: vec![0.5, 0.95],
            map_per_threshold: vec![map50, map95],
            ap_per_class: Default::default(),
        })
        .collect();
    let report = evaluation::aggregate(evals).map_err(to_py_err)?;
    Ok((report.dataset_map[0], report.dataset_map[1], report.overall))
}

/// Verify the analytic loss gradients against finite differences.
/// Returns (term, cases, failures, max relative error) per term.
#[pyfunction]
#[pyo3(signature = (seed=0, cases=100))]
fn gradcheck(seed: u64, cases: usize) -> PyResult<Vec<(String, usize, usize, f64)>> {
    let reports = run_gradcheck(seed, cases, None).map_err(to_py_err)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.term.to_string(), r.cases, r.failures, r.max_rel_err))
        .collect())
}

/// Load a 2-D f32 tensor file as a list of rows.
#[pyfunction]
fn load_tensor(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    let m: Matrix<f32> = gtnet_core::tensorio::load_tensor(&path).map_err(to_py_err)?;
    Ok(matrix_to_rows(&m))
}

/// Save a list of rows as a 2-D f32 tensor file.
#[pyfunction]
fn save_tensor(path: PathBuf, rows: Vec<Vec<f32>>) -> PyResult<()> {
    let m = matrix_from_rows(rows)?;
    gtnet_core::tensorio::save_tensor(&path, &m).map_err(to_py_err)
}

#[pymodule]
fn gtnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ANATOMY_CLASSES", ANATOMY_CLASSES)?;
    m.add("PATHOLOGY_CLASSES", PATHOLOGY_CLASSES)?;
    m.add("NUM_CLASSES", datasynth::NUM_CLASSES)?;
    m.add_function(wrap_pyfunction!(label_names, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_labels, m)?)?;
    m.add_function(wrap_pyfunction!(window_plan, m)?)?;
    m.add_function(wrap_pyfunction!(median_filter, m)?)?;
    m.add_function(wrap_pyfunction!(viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_map, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(load_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(save_tensor, m)?)?;
    Ok(())
}
