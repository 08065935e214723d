//! Synthetic video generator and dataset directory I/O.
//!
//! Generated videos follow the label structure of a capsule traversal:
//! a monotone anatomy track covering all eight organs, sparse pathology
//! bursts, and features built from planted per-organ prototypes so that
//! the pathology branch's deviation signal has ground truth to recover.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensorio::{load_tensor, save_tensor, Matrix};

pub const ANATOMY_CLASSES: usize = 8;
pub const PATHOLOGY_CLASSES: usize = 9;
pub const NUM_CLASSES: usize = ANATOMY_CLASSES + PATHOLOGY_CLASSES;

/// Anatomy classes in proximal-to-distal traversal order.
pub const ANATOMY_NAMES: [&str; ANATOMY_CLASSES] = [
    "mouth",
    "esophagus",
    "z-line",
    "stomach",
    "pylorus",
    "small intestine",
    "ileocecal valve",
    "colon",
];

pub const PATHOLOGY_NAMES: [&str; PATHOLOGY_CLASSES] = [
    "active bleeding",
    "angiectasia",
    "blood",
    "erosion",
    "erythema",
    "hematin",
    "lymphangioectasis",
    "polyp",
    "ulcer",
];

/// Name of a combined class id: 0-7 anatomy, 8-16 pathology.
pub fn class_name(id: usize) -> &'static str {
    if id < ANATOMY_CLASSES {
        ANATOMY_NAMES[id]
    } else {
        PATHOLOGY_NAMES[id - ANATOMY_CLASSES]
    }
}

pub fn anatomy_index(name: &str) -> Option<usize> {
    ANATOMY_NAMES.iter().position(|n| *n == name)
}

pub fn pathology_index(name: &str) -> Option<usize> {
    PATHOLOGY_NAMES.iter().position(|n| *n == name)
}

/// Per-frame CLS and patch-mean feature tracks for one video.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub video_id: String,
    pub cls: Matrix<f32>,
    pub patch: Matrix<f32>,
}

impl FeatureSequence {
    pub fn new(video_id: String, cls: Matrix<f32>, patch: Matrix<f32>) -> Result<Self> {
        if cls.rows() != patch.rows() {
            return Err(Error::DataMismatch(format!(
                "cls has {} frames, patch has {}",
                cls.rows(),
                patch.rows()
            )));
        }
        Ok(FeatureSequence {
            video_id,
            cls,
            patch,
        })
    }

    pub fn frames(&self) -> usize {
        self.cls.rows()
    }
}

/// Per-frame labels: one anatomy index (non-decreasing over time) and
/// nine pathology flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthTrack {
    anatomy: Vec<u8>,
    pathology: Vec<[u8; PATHOLOGY_CLASSES]>,
}

impl GroundTruthTrack {
    pub fn new(anatomy: Vec<u8>, pathology: Vec<[u8; PATHOLOGY_CLASSES]>) -> Result<Self> {
        if anatomy.len() != pathology.len() {
            return Err(Error::DataMismatch(format!(
                "anatomy track has {} frames, pathology has {}",
                anatomy.len(),
                pathology.len()
            )));
        }
        for (t, &a) in anatomy.iter().enumerate() {
            if a as usize >= ANATOMY_CLASSES {
                return Err(Error::InvalidInput(format!(
                    "anatomy index {a} out of range at frame {t}"
                )));
            }
            if t > 0 && a < anatomy[t - 1] {
                return Err(Error::InvalidInput(format!(
                    "anatomy track decreases at frame {t}: {} -> {a}",
                    anatomy[t - 1]
                )));
            }
        }
        if pathology.iter().flatten().any(|&b| b > 1) {
            return Err(Error::InvalidInput("pathology flags must be 0/1".into()));
        }
        Ok(GroundTruthTrack { anatomy, pathology })
    }

    pub fn frames(&self) -> usize {
        self.anatomy.len()
    }

    pub fn anatomy(&self) -> &[u8] {
        &self.anatomy
    }

    pub fn pathology(&self) -> &[[u8; PATHOLOGY_CLASSES]] {
        &self.pathology
    }

    pub fn pathology_bit(&self, t: usize, p: usize) -> bool {
        self.pathology[t][p] == 1
    }

    /// True when frame `t` carries no pathology label.
    pub fn is_healthy(&self, t: usize) -> bool {
        self.pathology[t].iter().all(|&b| b == 0)
    }

    /// Maximal runs of the anatomy track as (class, start, end inclusive).
    pub fn anatomy_segments(&self) -> Vec<(u8, usize, usize)> {
        runs(&self.anatomy)
    }

    /// Maximal runs of one pathology bit as (start, end inclusive).
    pub fn pathology_segments(&self, p: usize) -> Vec<(usize, usize)> {
        let bits: Vec<u8> = self.pathology.iter().map(|row| row[p]).collect();
        runs(&bits)
            .into_iter()
            .filter(|&(v, _, _)| v == 1)
            .map(|(_, s, e)| (s, e))
            .collect()
    }
}

fn runs<T: Copy + PartialEq>(track: &[T]) -> Vec<(T, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=track.len() {
        if t == track.len() || track[t] != track[start] {
            out.push((track[start], start, t - 1));
            start = t;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    pub seed: u64,
    /// Concentration of the Dirichlet draw for organ durations; larger
    /// means more even durations.
    pub organ_concentration: f64,
    /// Expected pathology bursts per 1000 frames.
    pub burst_rate_per_1k: f64,
    pub burst_len_min: usize,
    pub burst_len_max: usize,
    pub noise_sigma: f32,
    /// Per-entry scale of the planted lesion offsets.
    pub lesion_magnitude: f32,
    pub cls_dim: usize,
    pub patch_dim: usize,
    pub video_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 5000,
            seed: 0,
            organ_concentration: 8.0,
            burst_rate_per_1k: 2.0,
            burst_len_min: 20,
            burst_len_max: 200,
            noise_sigma: 0.05,
            lesion_magnitude: 5.0,
            cls_dim: 1024,
            patch_dim: 1024,
            video_id: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < ANATOMY_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "{} frames cannot give each of {ANATOMY_CLASSES} organs at least one frame",
                self.frames
            )));
        }
        if self.burst_len_min > self.burst_len_max || self.burst_len_min == 0 {
            return Err(Error::InvalidConfig(format!(
                "burst length range [{}, {}] invalid",
                self.burst_len_min, self.burst_len_max
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if self.organ_concentration <= 0.0 {
            return Err(Error::InvalidConfig("concentration must be > 0".into()));
        }
        if self.burst_rate_per_1k < 0.0 {
            return Err(Error::InvalidConfig("burst rate must be >= 0".into()));
        }
        if self.cls_dim == 0 || self.patch_dim == 0 {
            return Err(Error::InvalidConfig("feature dims must be >= 1".into()));
        }
        Ok(())
    }
}

// Stream tags; draw sequences per purpose never interleave.
pub mod stream {
    pub const DURATIONS: u64 = 1;
    pub const BURSTS: u64 = 2;
    pub const PROTOTYPES: u64 = 3;
    pub const LESIONS: u64 = 4;
    pub const CLS_MAP: u64 = 5;
    pub const PATCH_NOISE: u64 = 6;
    pub const CLS_NOISE: u64 = 7;
    pub const CLS_BIAS: u64 = 8;
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub features: FeatureSequence,
    pub gt: GroundTruthTrack,
    /// Planted healthy-appearance prototypes, 8 x patch_dim.
    pub anatomy_prototypes: Matrix<f32>,
    /// Planted lesion offsets, 9 x patch_dim.
    pub lesion_offsets: Matrix<f32>,
}

/// Organ durations: normalized Gamma(concentration) draws scaled to the
/// frame budget with one frame reserved per organ, largest remainders
/// breaking ties by organ index.
pub fn organ_durations(cfg: &SynthConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut rng = SplitMix64::stream(cfg.seed, stream::DURATIONS);
    let draws: Vec<f64> = (0..ANATOMY_CLASSES)
        .map(|_| rng.next_gamma(cfg.organ_concentration))
        .collect();
    let total: f64 = draws.iter().sum();
    let budget = cfg.frames - ANATOMY_CLASSES;
    let ideals: Vec<f64> = draws.iter().map(|d| d / total * budget as f64).collect();
    let mut durations: Vec<usize> = ideals.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = durations.iter().sum();
    let mut order: Vec<usize> = (0..ANATOMY_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = ideals[a] - ideals[a].floor();
        let rb = ideals[b] - ideals[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(budget - assigned) {
        durations[order[i % ANATOMY_CLASSES]] += 1;
    }
    for d in durations.iter_mut() {
        *d += 1;
    }
    debug_assert_eq!(durations.iter().sum::<usize>(), cfg.frames);
    Ok(durations)
}

/// Labels only; the feature tracks of `synth_video` are layered on top
/// of exactly this track for the same config.
pub fn synth_ground_truth(cfg: &SynthConfig) -> Result<GroundTruthTrack> {
    let durations = organ_durations(cfg)?;
    let mut anatomy = Vec::with_capacity(cfg.frames);
    for (organ, &d) in durations.iter().enumerate() {
        anatomy.extend(std::iter::repeat_n(organ as u8, d));
    }

    let mut pathology = vec![[0u8; PATHOLOGY_CLASSES]; cfg.frames];
    let mouth_end = durations[0];
    let mut rng = SplitMix64::stream(cfg.seed, stream::BURSTS);
    let lambda = cfg.burst_rate_per_1k * cfg.frames as f64 / 1000.0;
    let n_bursts = sample_poisson(&mut rng, lambda);
    for _ in 0..n_bursts {
        let class = rng.next_below(PATHOLOGY_CLASSES as u64) as usize;
        let span = (cfg.burst_len_max - cfg.burst_len_min + 1) as u64;
        let len = cfg.burst_len_min + rng.next_below(span) as usize;
        // Bursts may cross organ boundaries but never cover the mouth.
        if mouth_end + len > cfg.frames {
            continue;
        }
        let start = mouth_end + rng.next_below((cfg.frames - len - mouth_end + 1) as u64) as usize;
        for row in pathology.iter_mut().skip(start).take(len) {
            row[class] = 1;
        }
    }
    GroundTruthTrack::new(anatomy, pathology)
}

/// Knuth's product-of-uniforms Poisson sampler; fine for desk-scale lambda.
pub fn sample_poisson(rng: &mut SplitMix64, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.next_f64_open();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

fn normal_matrix(rows: usize, cols: usize, scale: f32, rng: &mut SplitMix64) -> Matrix<f32> {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = scale * rng.next_normal() as f32;
    }
    m
}

/// Full synthetic video: monotone anatomy, sparse bursts, and features
/// planted so that healthy patch rows equal their organ prototype up to
/// noise and lesion rows additionally carry the class offset.
pub fn synth_video(cfg: &SynthConfig) -> Result<SynthVideo> {
    let gt = synth_ground_truth(cfg)?;
    let t = cfg.frames;

    let mut proto_rng = SplitMix64::stream(cfg.seed, stream::PROTOTYPES);
    let prototypes = normal_matrix(ANATOMY_CLASSES, cfg.patch_dim, 1.0, &mut proto_rng);
    let mut lesion_rng = SplitMix64::stream(cfg.seed, stream::LESIONS);
    let lesions = normal_matrix(
        PATHOLOGY_CLASSES,
        cfg.patch_dim,
        cfg.lesion_magnitude,
        &mut lesion_rng,
    );

    let mut patch = Matrix::zeros(t, cfg.patch_dim);
    let mut noise_rng = SplitMix64::stream(cfg.seed, stream::PATCH_NOISE);
    for frame in 0..t {
        let organ = gt.anatomy()[frame] as usize;
        let row = patch.row_mut(frame);
        row.copy_from_slice(prototypes.row(organ));
        for (p, &bit) in gt.pathology()[frame].iter().enumerate() {
            if bit == 1 {
                for (v, o) in row.iter_mut().zip(lesions.row(p)) {
                    *v += o;
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                *v += cfg.noise_sigma * noise_rng.next_normal() as f32;
            }
        }
    }

    // CLS track: a fixed random linear map of the patch feature (scaled
    // gather, cheap and full rank in expectation) plus an organ bias.
    let mut map_rng = SplitMix64::stream(cfg.seed, stream::CLS_MAP);
    let gather: Vec<usize> = (0..cfg.cls_dim)
        .map(|_| map_rng.next_below(cfg.patch_dim as u64) as usize)
        .collect();
    let scales: Vec<f32> = (0..cfg.cls_dim)
        .map(|_| map_rng.next_normal() as f32)
        .collect();
    let mut bias_rng = SplitMix64::stream(cfg.seed, stream::CLS_BIAS);
    let organ_bias = normal_matrix(ANATOMY_CLASSES, cfg.cls_dim, 1.0, &mut bias_rng);

    let mut cls = Matrix::zeros(t, cfg.cls_dim);
    let mut cls_noise = SplitMix64::stream(cfg.seed, stream::CLS_NOISE);
    for frame in 0..t {
        let organ = gt.anatomy()[frame] as usize;
        for i in 0..cfg.cls_dim {
            let mut v = scales[i] * patch.get(frame, gather[i]) + organ_bias.get(organ, i);
            if cfg.noise_sigma > 0.0 {
                v += cfg.noise_sigma * cls_noise.next_normal() as f32;
            }
            cls.set(frame, i, v);
        }
    }

    Ok(SynthVideo {
        features: FeatureSequence::new(cfg.video_id.clone(), cls, patch)?,
        gt,
        anatomy_prototypes: prototypes,
        lesion_offsets: lesions,
    })
}

/// Per-frame probabilities that encode the ground truth with a fixed
/// margin: `hi` where the label is set, `lo` elsewhere. Anatomy columns
/// are one-hot at `hi`.
pub fn oracle_probabilities(gt: &GroundTruthTrack, hi: f32, lo: f32) -> Matrix<f32> {
    let t = gt.frames();
    let mut probs = Matrix::full(t, NUM_CLASSES, lo);
    for frame in 0..t {
        probs.set(frame, gt.anatomy()[frame] as usize, hi);
        for (p, &bit) in gt.pathology()[frame].iter().enumerate() {
            if bit == 1 {
                probs.set(frame, ANATOMY_CLASSES + p, hi);
            }
        }
    }
    probs
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub video_id: String,
    pub frames: usize,
    pub seed: u64,
    pub format_version: u32,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Layout: `<dir>/cls.ten`, `<dir>/patch.ten`, `<dir>/labels.csv`,
/// `<dir>/meta.json`.
pub fn write_dataset(
    dir: &Path,
    seq: &FeatureSequence,
    gt: &GroundTruthTrack,
    seed: u64,
) -> Result<()> {
    if seq.frames() != gt.frames() {
        return Err(Error::DataMismatch(format!(
            "features have {} frames, labels {}",
            seq.frames(),
            gt.frames()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tensor(&dir.join("cls.ten"), &seq.cls)?;
    save_tensor(&dir.join("patch.ten"), &seq.patch)?;

    let mut csv = String::new();
    for t in 0..gt.frames() {
        csv.push_str(&t.to_string());
        csv.push(',');
        csv.push_str(&gt.anatomy()[t].to_string());
        for bit in gt.pathology()[t] {
            csv.push(',');
            csv.push_str(if bit == 1 { "1" } else { "0" });
        }
        csv.push('\n');
    }
    let labels_path = dir.join("labels.csv");
    fs::write(&labels_path, csv).map_err(|e| Error::io(&labels_path, e))?;

    let meta = DatasetMeta {
        video_id: seq.video_id.clone(),
        frames: seq.frames(),
        seed,
        format_version: DATASET_FORMAT_VERSION,
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Parse `frame,anatomy_index,p0..p8` rows (no header).
pub fn parse_labels_csv(path: &Path) -> Result<GroundTruthTrack> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut anatomy = Vec::new();
    let mut pathology = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + PATHOLOGY_CLASSES {
            return Err(Error::parse(
                path,
                format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    2 + PATHOLOGY_CLASSES,
                    fields.len()
                ),
            ));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad frame index", lineno + 1)))?;
        if frame != anatomy.len() {
            return Err(Error::parse(
                path,
                format!("line {}: frame index {frame} out of order", lineno + 1),
            ));
        }
        let a: u8 = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad anatomy index", lineno + 1)))?;
        let mut bits = [0u8; PATHOLOGY_CLASSES];
        for (i, field) in fields[2..].iter().enumerate() {
            bits[i] = match *field {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::parse(
                        path,
                        format!("line {}: pathology flag '{other}' not 0/1", lineno + 1),
                    ))
                }
            };
        }
        anatomy.push(a);
        pathology.push(bits);
    }
    GroundTruthTrack::new(anatomy, pathology)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(dir: &Path) -> Result<(FeatureSequence, GroundTruthTrack)> {
    let meta = read_meta(dir)?;
    let cls: Matrix<f32> = load_tensor(&dir.join("cls.ten"))?;
    let patch: Matrix<f32> = load_tensor(&dir.join("patch.ten"))?;
    let gt = parse_labels_csv(&dir.join("labels.csv"))?;
    if cls.rows() != gt.frames() || patch.rows() != gt.frames() {
        return Err(Error::DataMismatch(format!(
            "features have {}/{} frames, labels {}",
            cls.rows(),
            patch.rows(),
            gt.frames()
        )));
    }
    let seq = FeatureSequence::new(meta.video_id, cls, patch)?;
    Ok((seq, gt))
}

/// Sliding windows [s, min(s+window, T)) for s = 0, stride, 2*stride, ...
/// plus a tail window ending at T when the last stride window stops short;
/// every frame is covered at least once.
pub fn window_plan(frames: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if frames == 0 {
        return Err(Error::InvalidInput("window plan over 0 frames".into()));
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig("window and stride must be >= 1".into()));
    }
    if stride > window {
        return Err(Error::InvalidConfig(format!(
            "stride {stride} > window {window} would leave frames uncovered"
        )));
    }
    let mut plan = Vec::new();
    let mut start = 0;
    while start + window <= frames {
        plan.push((start, start + window));
        start += stride;
    }
    let covered_to = plan.last().map_or(0, |&(_, e)| e);
    if covered_to < frames {
        plan.push((frames.saturating_sub(window), frames));
    }
    Ok(plan)
}
