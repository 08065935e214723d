//! Pathology-branch forward pass.
//!
//! Three signals built from raw patch features: the deviation from the
//! anatomy-weighted healthy prototype (straight to fusion), the
//! frame-to-frame motion signal, and a content signal pushed through a
//! dual-graph GCN, depthwise-separable Conv1d and a forward selective
//! scan joined by a triple residual. Fusion is a linear projection of
//! the concatenated signals plus an additive prior computed from the
//! (detached) anatomy logits.

use crate::anatomy::{selective_scan, DualGraphGcn, ScanDirection, SsmBlock};
use crate::config::ModelConfig;
use crate::datasynth::{GroundTruthTrack, ANATOMY_CLASSES};
use crate::error::{Error, Result};
use crate::tensorio::{frame_diff, mlp_forward, Activation, Layer, Matrix};

pub const CONV_KERNEL: usize = 5;

/// Healthy-appearance prototypes in raw patch space plus per-class
/// support counts; classes with no healthy frames fall back to the
/// global healthy mean with support 0.
#[derive(Debug, Clone)]
pub struct AnatomyPrototypes {
    pub means: Matrix<f32>,
    pub support: [u64; ANATOMY_CLASSES],
}

/// Mean patch vector per anatomy class over frames carrying no pathology
/// label, accumulated in f64 so that constant inputs are recovered
/// exactly.
pub fn fit_prototypes(videos: &[(&Matrix<f32>, &GroundTruthTrack)]) -> Result<AnatomyPrototypes> {
    let dim = videos
        .first()
        .map(|(patch, _)| patch.cols())
        .ok_or_else(|| Error::InvalidInput("no training videos".into()))?;
    let mut sums = vec![vec![0.0f64; dim]; ANATOMY_CLASSES];
    let mut counts = [0u64; ANATOMY_CLASSES];
    let mut global = vec![0.0f64; dim];
    let mut global_count = 0u64;
    for (patch, gt) in videos {
        if patch.cols() != dim {
            return Err(Error::ShapeMismatch(format!(
                "patch dim {} vs {}",
                patch.cols(),
                dim
            )));
        }
        if patch.rows() != gt.frames() {
            return Err(Error::DataMismatch(format!(
                "patch has {} frames, labels {}",
                patch.rows(),
                gt.frames()
            )));
        }
        for t in 0..gt.frames() {
            if !gt.is_healthy(t) {
                continue;
            }
            let a = gt.anatomy()[t] as usize;
            counts[a] += 1;
            global_count += 1;
            for (i, &v) in patch.row(t).iter().enumerate() {
                sums[a][i] += v as f64;
                global[i] += v as f64;
            }
        }
    }
    if global_count == 0 {
        return Err(Error::NoHealthyFrames);
    }
    let global_mean: Vec<f32> = global
        .iter()
        .map(|&s| (s / global_count as f64) as f32)
        .collect();
    let mut means = Matrix::zeros(ANATOMY_CLASSES, dim);
    for a in 0..ANATOMY_CLASSES {
        let row = means.row_mut(a);
        if counts[a] == 0 {
            row.copy_from_slice(&global_mean);
        } else {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (sums[a][i] / counts[a] as f64) as f32;
            }
        }
    }
    Ok(AnatomyPrototypes {
        means,
        support: counts,
    })
}

/// Residual of the patch feature against the probability-weighted healthy
/// prototype mixture. The anatomy probabilities are constants here: no
/// gradient path back into the anatomy branch exists by construction.
pub fn deviation_signal(
    patch: &Matrix<f32>,
    anatomy_probs: &Matrix<f32>,
    protos: &AnatomyPrototypes,
) -> Result<Matrix<f32>> {
    if anatomy_probs.rows() != patch.rows() || anatomy_probs.cols() != ANATOMY_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "anatomy probs {}x{}",
            anatomy_probs.rows(),
            anatomy_probs.cols()
        )));
    }
    for t in 0..anatomy_probs.rows() {
        let sum: f32 = anatomy_probs.row(t).iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidInput(format!(
                "anatomy probability row {t} sums to {sum}"
            )));
        }
    }
    let expected = anatomy_probs.matmul(&protos.means)?;
    patch.sub(&expected)
}

/// Frame-to-frame difference of patch features; row 0 is zero.
pub fn patch_motion(patch: &Matrix<f32>) -> Matrix<f32> {
    frame_diff(patch)
}

/// Depthwise convolution (kernel 5, zero padding, +-2 frame receptive
/// field) followed by a pointwise projection.
pub fn ds_conv1d(h: &Matrix<f32>, depthwise: &Matrix<f32>, pointwise: &Layer<f32>) -> Result<Matrix<f32>> {
    if depthwise.cols() != CONV_KERNEL {
        return Err(Error::ShapeMismatch(format!(
            "depthwise kernel length {}, expected {CONV_KERNEL}",
            depthwise.cols()
        )));
    }
    if depthwise.rows() != h.cols() {
        return Err(Error::ShapeMismatch(format!(
            "depthwise kernel rows {} vs channels {}",
            depthwise.rows(),
            h.cols()
        )));
    }
    let (t, d) = (h.rows(), h.cols());
    let half = CONV_KERNEL / 2;
    let mut mixed = Matrix::zeros(t, d);
    for frame in 0..t {
        let out = mixed.row_mut(frame);
        for (j, off) in (-(half as i64)..=half as i64).enumerate() {
            let src = frame as i64 + off;
            if src < 0 || src >= t as i64 {
                continue;
            }
            let row = h.row(src as usize);
            for ch in 0..d {
                out[ch] += depthwise.get(ch, j) * row[ch];
            }
        }
    }
    pointwise.apply(&mixed)
}

/// Temporal stack of the content signal: GCN (with its own residual),
/// conv, scan, summed as conv + scan + pre-conv GCN output.
pub fn pathology_temporal(
    h: &Matrix<f32>,
    gcn: &DualGraphGcn,
    depthwise: &Matrix<f32>,
    pointwise: &Layer<f32>,
    ssm: &SsmBlock,
    cfg: &ModelConfig,
) -> Result<Matrix<f32>> {
    let g = gcn.apply(h, cfg.sim_k, cfg.dist_radius)?;
    let c = ds_conv1d(&g, depthwise, pointwise)?;
    let m = selective_scan(&c, ssm, ScanDirection::Forward)?;
    c.add(&m)?.add(&g)
}

/// Every learnable tensor of the pathology branch.
#[derive(Debug, Clone)]
pub struct PathologyWeights {
    pub dev_proj: Layer<f32>,
    pub motion_proj: Layer<f32>,
    pub content_proj: Layer<f32>,
    pub gcn: DualGraphGcn,
    pub conv_depthwise: Matrix<f32>,
    pub conv_pointwise: Layer<f32>,
    pub ssm: SsmBlock,
    /// Fusion projection 3d -> d over [deviation || motion || content].
    pub fusion: Layer<f32>,
    /// Conditioning MLP 8 -> cond_hidden -> d over raw anatomy logits.
    pub cond: Vec<Layer<f32>>,
    pub head: Layer<f32>,
}

/// Full pathology forward pass over one window of patch features; the
/// anatomy logits come from the anatomy branch on the same window and
/// are treated as constants.
pub fn pathology_forward(
    patch_window: &Matrix<f32>,
    anatomy_logits: &Matrix<f32>,
    protos: &AnatomyPrototypes,
    w: &PathologyWeights,
    cfg: &ModelConfig,
) -> Result<Matrix<f32>> {
    if anatomy_logits.rows() != patch_window.rows() {
        return Err(Error::ShapeMismatch(format!(
            "anatomy logits {} frames vs patch {}",
            anatomy_logits.rows(),
            patch_window.rows()
        )));
    }
    let probs = anatomy_logits.row_softmax()?;
    let s_dev = w.dev_proj.apply(&deviation_signal(patch_window, &probs, protos)?)?;
    let s_motion = w.motion_proj.apply(&patch_motion(patch_window))?;
    let content = w.content_proj.apply(patch_window)?.add(&s_motion)?;
    let s_content = pathology_temporal(
        &content,
        &w.gcn,
        &w.conv_depthwise,
        &w.conv_pointwise,
        &w.ssm,
        cfg,
    )?;
    let stacked = s_dev.concat_cols(&s_motion)?.concat_cols(&s_content)?;
    let conditioning = mlp_forward(anatomy_logits, &w.cond, Activation::Gelu)?;
    let fused = w.fusion.apply(&stacked)?.add(&conditioning)?;
    w.head.apply(&fused)
}
