//! Temporal detection metrics: per-class average precision at temporal
//! IoU thresholds, per-video and dataset mAP, the overall score, and a
//! frame-ranking mAP kept for comparison.
//!
//! Matching is greedy highest-IoU with one-to-one ground-truth
//! assignment; AP uses the all-point interpolation (right-to-left
//! precision envelope over recall steps).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasynth::{GroundTruthTrack, ANATOMY_CLASSES, NUM_CLASSES, PATHOLOGY_CLASSES};
use crate::error::{Error, Result};
use crate::postprocess::{FrameProbabilities, SegmentPrediction};

/// IoU of two inclusive frame intervals, counted in frames.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter_lo = a.0.max(b.0);
    let inter_hi = a.1.min(b.1);
    if inter_hi < inter_lo {
        return 0.0;
    }
    let inter = (inter_hi - inter_lo + 1) as f64;
    let len_a = (a.1 - a.0 + 1) as f64;
    let len_b = (b.1 - b.0 + 1) as f64;
    inter / (len_a + len_b - inter)
}

/// Ground truth as per-class sorted disjoint intervals.
#[derive(Debug, Clone)]
pub struct GroundTruthSegments {
    per_class: Vec<Vec<(usize, usize)>>,
}

impl GroundTruthSegments {
    pub fn from_track(gt: &GroundTruthTrack) -> Self {
        let mut per_class = vec![Vec::new(); NUM_CLASSES];
        for (class, start, end) in gt.anatomy_segments() {
            per_class[class as usize].push((start, end));
        }
        for p in 0..PATHOLOGY_CLASSES {
            per_class[ANATOMY_CLASSES + p] = gt.pathology_segments(p);
        }
        GroundTruthSegments { per_class }
    }

    pub fn from_lists(per_class: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        if per_class.len() != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "{} class lists, expected {NUM_CLASSES}",
                per_class.len()
            )));
        }
        Ok(GroundTruthSegments { per_class })
    }

    pub fn class(&self, class_id: usize) -> &[(usize, usize)] {
        &self.per_class[class_id]
    }

    pub fn classes_present(&self) -> Vec<usize> {
        (0..NUM_CLASSES)
            .filter(|&c| !self.per_class[c].is_empty())
            .collect()
    }
}

/// Average precision of one class at one IoU threshold.
///
/// Predictions sort by confidence (descending, ties by start frame);
/// each greedily matches the unmatched ground-truth interval of highest
/// IoU >= threshold (ties to the earliest interval). Returns None when
/// both sides are empty (class excluded from the mean).
pub fn average_precision(
    preds: &[SegmentPrediction],
    gt: &[(usize, usize)],
    iou_threshold: f64,
) -> Result<Option<f64>> {
    if preds.is_empty() && gt.is_empty() {
        return Ok(None);
    }
    if gt.is_empty() {
        return Ok(Some(0.0));
    }
    if preds.is_empty() {
        return Ok(Some(0.0));
    }
    let class_id = preds[0].class_id;
    if preds.iter().any(|p| p.class_id != class_id) {
        return Err(Error::InvalidInput("mixed classes in one AP pass".into()));
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(preds[a].start.cmp(&preds[b].start))
    });

    let mut matched = vec![false; gt.len()];
    let mut is_tp = Vec::with_capacity(preds.len());
    for &pi in &order {
        let interval = (preds[pi].start, preds[pi].end);
        let mut best: Option<(usize, f64)> = None;
        for (gi, &g) in gt.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = temporal_iou(interval, g);
            if iou >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, b)) => iou > b,
                };
                if better {
                    best = Some((gi, iou));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }

    // precision-recall points in rank order
    let mut tp = 0usize;
    let mut fp = 0usize;
    let n_gt = gt.len() as f64;
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    for &hit in &is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt);
    }
    // right-to-left running max makes precision monotone
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precision.len() {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    Ok(Some(ap))
}

/// Mean AP over classes present in the ground truth, one value per
/// threshold, plus the per-class APs.
pub fn video_map(
    preds: &[SegmentPrediction],
    gt: &GroundTruthSegments,
    thresholds: &[f64],
) -> Result<VideoEval> {
    if preds.iter().any(|p| p.class_id >= NUM_CLASSES) {
        return Err(Error::InvalidInput("prediction class id out of range".into()));
    }
    let mut by_class: Vec<Vec<SegmentPrediction>> = vec![Vec::new(); NUM_CLASSES];
    for p in preds {
        by_class[p.class_id].push(p.clone());
    }
    let present = gt.classes_present();
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut maps = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut sum = 0.0;
        for &class in &present {
            let ap = average_precision(&by_class[class], gt.class(class), thr)?
                .expect("class present in GT always yields an AP");
            per_class.entry(class).or_default().push(ap);
            sum += ap;
        }
        maps.push(if present.is_empty() {
            0.0
        } else {
            sum / present.len() as f64
        });
    }
    Ok(VideoEval {
        video_id: String::new(),
        thresholds: thresholds.to_vec(),
        map_per_threshold: maps,
        ap_per_class: per_class,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEval {
    pub video_id: String,
    pub thresholds: Vec<f64>,
    pub map_per_threshold: Vec<f64>,
    /// class id -> AP per threshold (classes present in GT only).
    pub ap_per_class: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub videos: Vec<VideoEval>,
    /// Unweighted mean over videos, per threshold.
    pub dataset_map: Vec<f64>,
    /// Mean of the per-threshold dataset mAPs.
    pub overall: f64,
}

/// Dataset aggregation: unweighted per-threshold means over videos and
/// their mean as the overall score.
pub fn aggregate(videos: Vec<VideoEval>) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::InvalidInput("aggregate needs at least one video".into()));
    }
    let thresholds = videos[0].thresholds.clone();
    if videos
        .iter()
        .any(|v| v.thresholds != thresholds || v.map_per_threshold.len() != thresholds.len())
    {
        return Err(Error::DataMismatch("videos evaluated at different thresholds".into()));
    }
    let n = videos.len() as f64;
    let dataset_map: Vec<f64> = (0..thresholds.len())
        .map(|i| videos.iter().map(|v| v.map_per_threshold[i]).sum::<f64>() / n)
        .collect();
    let overall = dataset_map.iter().sum::<f64>() / dataset_map.len() as f64;
    Ok(EvalReport {
        thresholds,
        videos,
        dataset_map,
        overall,
    })
}

/// Frame-ranking mAP: per class, frames sorted by probability and scored
/// against the binary label track; mean over classes with at least one
/// positive frame.
pub fn frame_map(probs: &FrameProbabilities, gt: &GroundTruthTrack) -> Result<f64> {
    if probs.frames() != gt.frames() {
        return Err(Error::ShapeMismatch(format!(
            "probs {} frames vs labels {}",
            probs.frames(),
            gt.frames()
        )));
    }
    let t = gt.frames();
    let mut aps = Vec::new();
    for class in 0..NUM_CLASSES {
        let labels: Vec<bool> = (0..t)
            .map(|frame| {
                if class < ANATOMY_CLASSES {
                    gt.anatomy()[frame] as usize == class
                } else {
                    gt.pathology_bit(frame, class - ANATOMY_CLASSES)
                }
            })
            .collect();
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 {
            continue;
        }
        let column = probs.column(class);
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| {
            column[b]
                .partial_cmp(&column[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut tp = 0usize;
        let mut precision = Vec::with_capacity(t);
        let mut recall = Vec::with_capacity(t);
        for (rank, &frame) in order.iter().enumerate() {
            if labels[frame] {
                tp += 1;
            }
            precision.push(tp as f64 / (rank + 1) as f64);
            recall.push(tp as f64 / positives as f64);
        }
        for i in (0..precision.len() - 1).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..precision.len() {
            ap += (recall[i] - prev) * precision[i];
            prev = recall[i];
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        return Err(Error::InvalidInput("no class has positive frames".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Truncate to 4 decimals, the convention of the reported score tables;
/// a tiny epsilon absorbs representation error on exact boundaries.
pub fn trunc4(x: f64) -> f64 {
    ((x * 10_000.0) + 1e-9).floor() / 10_000.0
}

/// Plain-text score table: one row per video, an average row and the
/// overall score, values truncated to 4 decimals.
pub fn format_eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let thr_names: Vec<String> = report
        .thresholds
        .iter()
        .map(|t| format!("mAP@{t}"))
        .collect();
    out.push_str(&format!("{:<24}", "Video"));
    for name in &thr_names {
        out.push_str(&format!(" {name:>10}"));
    }
    out.push('\n');
    let width = 24 + 11 * thr_names.len();
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for video in &report.videos {
        out.push_str(&format!("{:<24}", video.video_id));
        for &m in &video.map_per_threshold {
            out.push_str(&format!(" {:>10.4}", trunc4(m)));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<24}", format!("Average ({} videos)", report.videos.len())));
    for &m in &report.dataset_map {
        out.push_str(&format!(" {:>10.4}", trunc4(m)));
    }
    out.push('\n');
    out.push_str(&format!("{:<24} {:>10.4}\n", "Overall score", trunc4(report.overall)));
    out
}
