//! Deterministic inference post-processing: overlap averaging, median
//! filtering, Viterbi decoding of the anatomy track, co-occurrence
//! gating, segment extraction, the minimum-segment filter, and anatomy
//! gap filling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasynth::{class_name, GroundTruthTrack, ANATOMY_CLASSES, NUM_CLASSES, PATHOLOGY_CLASSES};
use crate::error::{Error, Result};
use crate::tensorio::{sigmoid, Matrix};

/// T x 17 per-frame scores in [0,1]; columns 0-7 anatomy, 8-16 pathology.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameProbabilities(Matrix<f32>);

impl FrameProbabilities {
    pub fn new(m: Matrix<f32>) -> Result<Self> {
        if m.cols() != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "probability track has {} columns, expected {NUM_CLASSES}",
                m.cols()
            )));
        }
        if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "probabilities must lie in [0,1]".into(),
            ));
        }
        Ok(FrameProbabilities(m))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix<f32> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<f32> {
        self.0
    }

    /// Anatomy columns as a T x 8 matrix.
    pub fn anatomy(&self) -> Matrix<f32> {
        self.0.slice_cols(0, ANATOMY_CLASSES)
    }

    pub fn column(&self, class: usize) -> Vec<f32> {
        self.0.column(class)
    }
}

/// Temporal detection unit: inclusive frame interval plus the mean
/// per-frame probability over it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPrediction {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    pub confidence: f32,
}

impl SegmentPrediction {
    /// Inclusive span in frames; never zero.
    pub fn frames(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Training-set counts of (anatomy class, pathology class) co-occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoOccurrenceTable {
    counts: [[u32; PATHOLOGY_CLASSES]; ANATOMY_CLASSES],
}

impl CoOccurrenceTable {
    pub fn fit(tracks: &[&GroundTruthTrack]) -> Self {
        let mut counts = [[0u32; PATHOLOGY_CLASSES]; ANATOMY_CLASSES];
        for gt in tracks {
            for t in 0..gt.frames() {
                let a = gt.anatomy()[t] as usize;
                for (p, &bit) in gt.pathology()[t].iter().enumerate() {
                    counts[a][p] += bit as u32;
                }
            }
        }
        CoOccurrenceTable { counts }
    }

    pub fn from_counts(counts: [[u32; PATHOLOGY_CLASSES]; ANATOMY_CLASSES]) -> Self {
        CoOccurrenceTable { counts }
    }

    pub fn count(&self, anatomy: usize, pathology: usize) -> u32 {
        self.counts[anatomy][pathology]
    }

    /// 8 rows x 9 comma-separated counts, no header.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut counts = [[0u32; PATHOLOGY_CLASSES]; ANATOMY_CLASSES];
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != ANATOMY_CLASSES {
            return Err(Error::parse(
                path,
                format!("expected {ANATOMY_CLASSES} rows, got {}", rows.len()),
            ));
        }
        for (a, line) in rows.iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != PATHOLOGY_CLASSES {
                return Err(Error::parse(
                    path,
                    format!("row {a}: expected {PATHOLOGY_CLASSES} counts"),
                ));
            }
            for (p, cell) in cells.iter().enumerate() {
                counts[a][p] = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, format!("row {a}: bad count '{cell}'")))?;
            }
        }
        Ok(CoOccurrenceTable { counts })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ViterbiConfig {
    /// Log-domain penalty per organ index advanced in one step.
    pub skip_penalty: f64,
    /// Emission floor before the log.
    pub emission_floor: f64,
}

impl Default for ViterbiConfig {
    fn default() -> Self {
        ViterbiConfig {
            skip_penalty: 5.0,
            emission_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PostConfig {
    pub median_k: usize,
    pub viterbi: ViterbiConfig,
    /// Minimum training count for a pathology to survive in an organ.
    pub gate_min_count: u32,
    pub segment_threshold: f32,
    pub min_segment_len: usize,
    pub max_gap: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            median_k: 5,
            viterbi: ViterbiConfig::default(),
            gate_min_count: 1,
            segment_threshold: 0.5,
            min_segment_len: 20,
            max_gap: 20,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_k.is_multiple_of(2) || self.median_k == 0 {
            return Err(Error::InvalidConfig("median kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.segment_threshold) || self.segment_threshold <= 0.0 {
            return Err(Error::InvalidConfig("segment threshold must be in (0,1)".into()));
        }
        if self.min_segment_len == 0 {
            return Err(Error::InvalidConfig("min segment length must be >= 1".into()));
        }
        if self.viterbi.skip_penalty < 0.0 || self.viterbi.emission_floor <= 0.0 {
            return Err(Error::InvalidConfig("viterbi parameters out of range".into()));
        }
        Ok(())
    }
}

/// Average of sigmoid(logit) over every window covering each frame.
pub fn merge_windows(
    window_logits: &[Matrix<f32>],
    plan: &[(usize, usize)],
    frames: usize,
) -> Result<FrameProbabilities> {
    if window_logits.len() != plan.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit blocks vs {} planned windows",
            window_logits.len(),
            plan.len()
        )));
    }
    let mut sums = Matrix::<f64>::zeros(frames, NUM_CLASSES);
    let mut coverage = vec![0u32; frames];
    for (logits, &(start, end)) in window_logits.iter().zip(plan) {
        if end > frames || start >= end {
            return Err(Error::InvalidInput(format!("window [{start},{end}) out of range")));
        }
        if logits.rows() != end - start || logits.cols() != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "window [{start},{end}) logits are {}x{}",
                logits.rows(),
                logits.cols()
            )));
        }
        for (row, frame) in (start..end).enumerate() {
            coverage[frame] += 1;
            for c in 0..NUM_CLASSES {
                let v = sums.get(frame, c) + sigmoid(logits.get(row, c) as f64);
                sums.set(frame, c, v);
            }
        }
    }
    if let Some(frame) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!("frame {frame} covered by no window")));
    }
    let mut probs = Matrix::zeros(frames, NUM_CLASSES);
    for frame in 0..frames {
        for c in 0..NUM_CLASSES {
            probs.set(frame, c, (sums.get(frame, c) / coverage[frame] as f64) as f32);
        }
    }
    FrameProbabilities::new(probs)
}

fn median_of(window: &mut [f32]) -> f32 {
    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = window.len();
    if n % 2 == 1 {
        window[n / 2]
    } else {
        0.5 * (window[n / 2 - 1] + window[n / 2])
    }
}

/// Per-class median filter with shrinking windows at the edges; the
/// median of an even count is the mean of the middle two.
pub fn median_filter(probs: &FrameProbabilities, k: usize) -> Result<FrameProbabilities> {
    if k.is_multiple_of(2) || k == 0 {
        return Err(Error::InvalidConfig(format!("median kernel {k} must be odd")));
    }
    let t = probs.frames();
    let half = k / 2;
    let m = probs.matrix();
    let mut out = Matrix::zeros(t, NUM_CLASSES);
    let mut window = Vec::with_capacity(k);
    for c in 0..NUM_CLASSES {
        for frame in 0..t {
            let lo = frame.saturating_sub(half);
            let hi = (frame + half).min(t - 1);
            window.clear();
            for row in lo..=hi {
                window.push(m.get(row, c));
            }
            out.set(frame, c, median_of(&mut window));
        }
    }
    FrameProbabilities::new(out)
}

/// Maximum-score monotone state path over the 8 anatomy columns.
///
/// Score: sum_t log(max(p[t][s_t], floor)) + sum_t trans(s_{t-1}, s_t)
/// with trans(i,j) = 0 for j == i, -penalty*(j-i) for j > i, and -inf
/// for j < i. Ties break toward the smaller state index.
pub fn viterbi_anatomy(anatomy_probs: &Matrix<f32>, cfg: &ViterbiConfig) -> Result<Vec<u8>> {
    let t = anatomy_probs.rows();
    if t == 0 {
        return Err(Error::InvalidInput("viterbi over 0 frames".into()));
    }
    let states = anatomy_probs.cols();
    if states != ANATOMY_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "anatomy probs have {states} columns"
        )));
    }
    let emission = |frame: usize, s: usize| -> f64 {
        (anatomy_probs.get(frame, s) as f64).max(cfg.emission_floor).ln()
    };
    let mut score = vec![0.0f64; states];
    for (s, v) in score.iter_mut().enumerate() {
        *v = emission(0, s);
    }
    let mut parents = vec![[0u8; ANATOMY_CLASSES]; t];
    for frame in 1..t {
        let mut next = vec![f64::NEG_INFINITY; states];
        for (j, slot) in next.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for i in 0..=j {
                let trans = -cfg.skip_penalty * ((j - i) as f64);
                let cand = score[i] + trans;
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            *slot = best + emission(frame, j);
            parents[frame][j] = best_i as u8;
        }
        score = next;
    }
    let mut last = 0usize;
    for (s, &v) in score.iter().enumerate() {
        if v > score[last] {
            last = s;
        }
    }
    let mut path = vec![0u8; t];
    path[t - 1] = last as u8;
    for frame in (1..t).rev() {
        path[frame - 1] = parents[frame][path[frame] as usize];
    }
    Ok(path)
}

/// Zero pathology scores wherever the (decoded anatomy, pathology) pair
/// was seen fewer than `min_count` times in training; anatomy columns
/// are replaced by the decoded one-hot track.
pub fn cooccurrence_gate(
    probs: &FrameProbabilities,
    decoded: &[u8],
    table: &CoOccurrenceTable,
    min_count: u32,
) -> Result<FrameProbabilities> {
    let t = probs.frames();
    if decoded.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "decoded track has {} frames, probs {t}",
            decoded.len()
        )));
    }
    let mut out = probs.matrix().clone();
    for frame in 0..t {
        let a = decoded[frame] as usize;
        if a >= ANATOMY_CLASSES {
            return Err(Error::InvalidInput(format!(
                "decoded state {a} out of range at frame {frame}"
            )));
        }
        for s in 0..ANATOMY_CLASSES {
            out.set(frame, s, if s == a { 1.0 } else { 0.0 });
        }
        for p in 0..PATHOLOGY_CLASSES {
            if table.count(a, p) < min_count {
                out.set(frame, ANATOMY_CLASSES + p, 0.0);
            }
        }
    }
    FrameProbabilities::new(out)
}

/// Maximal runs of frames at or above the threshold; confidence is the
/// mean probability over the run.
pub fn extract_segments(column: &[f32], class_id: usize, threshold: f32) -> Vec<SegmentPrediction> {
    let mut segments = Vec::new();
    let mut start: Option<usize> = None;
    let mut sum = 0.0f64;
    for (t, &p) in column.iter().enumerate() {
        if p >= threshold {
            if start.is_none() {
                start = Some(t);
                sum = 0.0;
            }
            sum += p as f64;
        } else if let Some(s) = start.take() {
            segments.push(SegmentPrediction {
                class_id,
                start: s,
                end: t - 1,
                confidence: (sum / (t - s) as f64) as f32,
            });
        }
    }
    if let Some(s) = start {
        segments.push(SegmentPrediction {
            class_id,
            start: s,
            end: column.len() - 1,
            confidence: (sum / (column.len() - s) as f64) as f32,
        });
    }
    segments
}

/// Keep segments spanning at least `min_len` frames.
pub fn min_segment_filter(segments: Vec<SegmentPrediction>, min_len: usize) -> Vec<SegmentPrediction> {
    segments.into_iter().filter(|s| s.frames() >= min_len).collect()
}

/// Merge consecutive same-class segments separated by at most `max_gap`
/// frames; gap frames join the segment and the confidence becomes the
/// length-weighted mean of the merged parts. Applied per class; input
/// must be sorted by start and non-overlapping.
pub fn anatomy_gap_fill(
    segments: &[SegmentPrediction],
    max_gap: usize,
) -> Result<Vec<SegmentPrediction>> {
    for pair in segments.windows(2) {
        if pair[1].start <= pair[0].end {
            return Err(Error::InvalidInput(format!(
                "segments overlap: [{}..{}] then [{}..{}]",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<SegmentPrediction>> =
        std::collections::BTreeMap::new();
    for seg in segments {
        by_class.entry(seg.class_id).or_default().push(seg.clone());
    }
    let mut merged = Vec::new();
    for (_, class_segments) in by_class {
        let mut iter = class_segments.into_iter();
        let mut current = match iter.next() {
            Some(s) => s,
            None => continue,
        };
        for seg in iter {
            let gap = seg.start - current.end - 1;
            if gap <= max_gap {
                let w_cur = current.frames() as f64;
                let w_new = seg.frames() as f64;
                current.confidence = ((current.confidence as f64 * w_cur
                    + seg.confidence as f64 * w_new)
                    / (w_cur + w_new)) as f32;
                current.end = seg.end;
            } else {
                merged.push(current);
                current = seg;
            }
        }
        merged.push(current);
    }
    merged.sort_by_key(|s| (s.start, s.class_id));
    Ok(merged)
}

/// Pipeline stages past window merging, for callers that already hold a
/// probability track: median -> viterbi -> gate -> extract -> filter ->
/// gap fill. Anatomy confidences come from the pre-decode (post-median)
/// probabilities.
pub fn run_pipeline_from_probs(
    probs: &FrameProbabilities,
    table: &CoOccurrenceTable,
    cfg: &PostConfig,
) -> Result<(FrameProbabilities, Vec<SegmentPrediction>)> {
    cfg.validate()?;
    let filtered = median_filter(probs, cfg.median_k)?;
    let decoded = viterbi_anatomy(&filtered.anatomy(), &cfg.viterbi)?;
    let gated = cooccurrence_gate(&filtered, &decoded, table, cfg.gate_min_count)?;

    let mut anatomy_segments = Vec::new();
    let mut start = 0usize;
    for t in 1..=decoded.len() {
        if t == decoded.len() || decoded[t] != decoded[start] {
            let class = decoded[start] as usize;
            let mut sum = 0.0f64;
            for frame in start..t {
                sum += filtered.matrix().get(frame, class) as f64;
            }
            anatomy_segments.push(SegmentPrediction {
                class_id: class,
                start,
                end: t - 1,
                confidence: (sum / (t - start) as f64) as f32,
            });
            start = t;
        }
    }
    let anatomy_segments = min_segment_filter(anatomy_segments, cfg.min_segment_len);
    let anatomy_segments = anatomy_gap_fill(&anatomy_segments, cfg.max_gap)?;

    let mut segments = anatomy_segments;
    for p in 0..PATHOLOGY_CLASSES {
        let column = gated.column(ANATOMY_CLASSES + p);
        let found = extract_segments(&column, ANATOMY_CLASSES + p, cfg.segment_threshold);
        segments.extend(min_segment_filter(found, cfg.min_segment_len));
    }
    segments.sort_by_key(|s| (s.class_id, s.start));
    Ok((gated, segments))
}

/// Full pipeline from per-window logits.
pub fn run_pipeline(
    window_logits: &[Matrix<f32>],
    plan: &[(usize, usize)],
    frames: usize,
    table: &CoOccurrenceTable,
    cfg: &PostConfig,
) -> Result<(FrameProbabilities, Vec<SegmentPrediction>)> {
    let merged = merge_windows(window_logits, plan, frames)?;
    run_pipeline_from_probs(&merged, table, cfg)
}

/// Segments CSV: `video_id,class_id,class_name,start,end,confidence`.
pub fn write_segments_csv(
    path: &Path,
    video_id: &str,
    segments: &[SegmentPrediction],
) -> Result<()> {
    let mut text = String::from("video_id,class_id,class_name,start,end,confidence\n");
    for seg in segments {
        text.push_str(&format!(
            "{video_id},{},{},{},{},{:.6}\n",
            seg.class_id,
            class_name(seg.class_id),
            seg.start,
            seg.end,
            seg.confidence
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse a segments CSV back into per-video lists.
pub fn read_segments_csv(path: &Path) -> Result<Vec<(String, SegmentPrediction)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::parse(path, format!("line {}: expected 6 fields", lineno + 1)));
        }
        let class_id: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad class id", lineno + 1)))?;
        if class_id >= NUM_CLASSES {
            return Err(Error::parse(path, format!("line {}: class id out of range", lineno + 1)));
        }
        let start: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad start", lineno + 1)))?;
        let end: usize = fields[4]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad end", lineno + 1)))?;
        if end < start {
            return Err(Error::parse(path, format!("line {}: end before start", lineno + 1)));
        }
        let confidence: f32 = fields[5]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad confidence", lineno + 1)))?;
        out.push((
            fields[0].to_string(),
            SegmentPrediction {
                class_id,
                start,
                end,
                confidence,
            },
        ));
    }
    Ok(out)
}
