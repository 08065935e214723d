//! Training-objective terms with closed-form gradients.
//!
//! Asymmetric sigmoid loss with per-class positive boosting, extra weight
//! on frames near label-change boundaries, a hinge on decreases of the
//! expected organ index, and the rare-pathology window sampler. All in
//! f64 so the finite-difference verifier in [`crate::gradcheck`] can hold
//! the analytic forms to a tight tolerance. No optimizer lives here; the
//! gradients exist to be checked and to let an external trainer plug in.

use serde::{Deserialize, Serialize};

use crate::datasynth::{GroundTruthTrack, ANATOMY_CLASSES, PATHOLOGY_CLASSES};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensorio::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focusing exponent on positives.
    pub gamma_pos: f64,
    /// Focusing exponent on negatives.
    pub gamma_neg: f64,
    /// Probability clip margin on negatives.
    pub clip_margin: f64,
    /// Positive-term boost per anatomy class.
    pub anatomy_pos_boost: Vec<f64>,
    /// Whole-term weight per pathology class.
    pub pathology_class_weight: Vec<f64>,
    /// Extra weight on frames near a label change.
    pub boundary_boost: f64,
    /// Frames on each side of a change that receive the boost.
    pub boundary_radius: usize,
    /// Weight of the monotonicity term in the total loss.
    pub mono_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let mut anatomy_pos_boost = vec![1.0; ANATOMY_CLASSES];
        // short transitional organs: esophagus, z-line, pylorus, ileocecal valve
        for idx in [1, 2, 4, 6] {
            anatomy_pos_boost[idx] = 4.0;
        }
        let mut pathology_class_weight = vec![1.0; PATHOLOGY_CLASSES];
        // angiectasia, blood, erosion
        for idx in [1, 2, 3] {
            pathology_class_weight[idx] = 3.0;
        }
        LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip_margin: 0.05,
            anatomy_pos_boost,
            pathology_class_weight,
            boundary_boost: 1.0,
            boundary_radius: 3,
            mono_weight: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::InvalidConfig("focusing exponents must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.clip_margin) {
            return Err(Error::InvalidConfig("clip margin must be in [0,1)".into()));
        }
        if self.anatomy_pos_boost.len() != ANATOMY_CLASSES
            || self.pathology_class_weight.len() != PATHOLOGY_CLASSES
        {
            return Err(Error::InvalidConfig("class weight list lengths".into()));
        }
        if self
            .anatomy_pos_boost
            .iter()
            .chain(&self.pathology_class_weight)
            .any(|&w| w <= 0.0)
        {
            return Err(Error::InvalidConfig("class weights must be > 0".into()));
        }
        if self.boundary_boost < 0.0 || self.mono_weight < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn anatomy_asl(&self) -> AslParams {
        AslParams {
            gamma_pos: self.gamma_pos,
            gamma_neg: self.gamma_neg,
            clip_margin: self.clip_margin,
            pos_boost: self.anatomy_pos_boost.clone(),
        }
    }

    pub fn pathology_asl(&self) -> AslParams {
        AslParams {
            gamma_pos: self.gamma_pos,
            gamma_neg: self.gamma_neg,
            clip_margin: self.clip_margin,
            pos_boost: vec![1.0; PATHOLOGY_CLASSES],
        }
    }
}

/// Asymmetric-loss parameters for one head.
#[derive(Debug, Clone)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip_margin: f64,
    /// Multiplies the positive term of each class.
    pub pos_boost: Vec<f64>,
}

/// Asymmetric sigmoid loss, mean over T x C terms, with the exact
/// analytic gradient.
///
/// Per element with p = sigmoid(z):
///   positive: boost_c * (1-p)^g+ * (-ln p)
///   negative: pm^g- * (-ln(1-pm)),  pm = max(p - margin, 0)
/// Each term is scaled by frame_weight[t] * class_weight[c]. The
/// gradient of the clipped zone (p <= margin on negatives) is zero.
pub fn asl_loss(
    logits: &Matrix<f64>,
    targets: &Matrix<f64>,
    params: &AslParams,
    frame_weights: &[f64],
    class_weights: &[f64],
) -> Result<(f64, Matrix<f64>)> {
    let (t, c) = (logits.rows(), logits.cols());
    if targets.rows() != t || targets.cols() != c {
        return Err(Error::ShapeMismatch(format!(
            "targets {}x{} vs logits {t}x{c}",
            targets.rows(),
            targets.cols()
        )));
    }
    if frame_weights.len() != t || class_weights.len() != c || params.pos_boost.len() != c {
        return Err(Error::ShapeMismatch("weight vector lengths".into()));
    }
    if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput("targets must be binary".into()));
    }
    if frame_weights.iter().chain(class_weights).any(|&w| w <= 0.0) {
        return Err(Error::InvalidInput("weights must be > 0".into()));
    }
    let n = (t * c) as f64;
    let (gp, gn, m) = (params.gamma_pos, params.gamma_neg, params.clip_margin);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(t, c);
    for ti in 0..t {
        for ci in 0..c {
            let z = logits.get(ti, ci);
            let y = targets.get(ti, ci);
            let w = frame_weights[ti] * class_weights[ci];
            let p = 1.0 / (1.0 + (-z).exp());
            let dp_dz = p * (1.0 - p);
            let (term, dterm_dp) = if y == 1.0 {
                let boost = params.pos_boost[ci];
                let one_m_p = 1.0 - p;
                let term = boost * one_m_p.powf(gp) * (-p.ln());
                // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
                let focus = if gp > 0.0 {
                    gp * one_m_p.powf(gp - 1.0) * p.ln()
                } else {
                    0.0
                };
                (term, boost * (focus - one_m_p.powf(gp) / p))
            } else {
                let pm = (p - m).max(0.0);
                if pm == 0.0 {
                    (0.0, 0.0)
                } else {
                    let one_m_pm = 1.0 - pm;
                    let term = pm.powf(gn) * (-one_m_pm.ln());
                    // d/dpm [-pm^g ln(1-pm)] = -g pm^(g-1) ln(1-pm) + pm^g/(1-pm)
                    let focus = if gn > 0.0 {
                        -gn * pm.powf(gn - 1.0) * one_m_pm.ln()
                    } else {
                        0.0
                    };
                    (term, focus + pm.powf(gn) / one_m_pm)
                }
            };
            loss += w * term;
            grad.set(ti, ci, w * dterm_dp * dp_dz / n);
        }
    }
    Ok((loss / n, grad))
}

/// Weight 1 + boost on frames within `radius` of any label change
/// (anatomy index change or any pathology bit flip), else 1.
pub fn boundary_weights(gt: &GroundTruthTrack, boost: f64, radius: usize) -> Vec<f64> {
    let t = gt.frames();
    let mut near_change = vec![false; t];
    for tc in 1..t {
        let changed = gt.anatomy()[tc] != gt.anatomy()[tc - 1]
            || gt.pathology()[tc] != gt.pathology()[tc - 1];
        if changed {
            let lo = tc.saturating_sub(radius);
            let hi = (tc + radius).min(t - 1);
            for flag in near_change.iter_mut().take(hi + 1).skip(lo) {
                *flag = true;
            }
        }
    }
    near_change
        .into_iter()
        .map(|near| if near { 1.0 + boost } else { 1.0 })
        .collect()
}

/// Hinge on decreases of the expected organ index
/// E_t = sum_a a * softmax(logits[t])[a]:
///   loss = mean over steps of max(0, E_t - E_{t+1})
/// with the analytic softmax-expectation gradient; non-violating steps
/// contribute nothing (subgradient 0 at equality).
pub fn monotonicity_loss(logits: &Matrix<f64>) -> Result<(f64, Matrix<f64>)> {
    let t = logits.rows();
    if t < 2 {
        return Err(Error::InvalidInput(
            "monotonicity loss needs at least 2 frames".into(),
        ));
    }
    let c = logits.cols();
    let q = logits.row_softmax()?;
    let expected: Vec<f64> = (0..t)
        .map(|ti| q.row(ti).iter().enumerate().map(|(a, &p)| a as f64 * p).sum())
        .collect();
    let steps = (t - 1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(t, c);
    for ti in 0..t - 1 {
        let gap = expected[ti] - expected[ti + 1];
        if gap <= 0.0 {
            continue;
        }
        loss += gap;
        // dE/dz_a = q_a (a - E)
        for a in 0..c {
            let d_cur = q.get(ti, a) * (a as f64 - expected[ti]);
            let d_next = q.get(ti + 1, a) * (a as f64 - expected[ti + 1]);
            grad.set(ti, a, grad.get(ti, a) + d_cur / steps);
            grad.set(ti + 1, a, grad.get(ti + 1, a) - d_next / steps);
        }
    }
    Ok((loss / steps, grad))
}

/// Combined objective: boundary-weighted ASL on both heads (anatomy
/// supervised as 8 one-hot sigmoids) plus the weighted monotonicity term.
/// Returns (total, d/d anatomy logits, d/d pathology logits).
pub fn total_loss(
    anatomy_logits: &Matrix<f64>,
    pathology_logits: &Matrix<f64>,
    gt: &GroundTruthTrack,
    cfg: &LossConfig,
) -> Result<(f64, Matrix<f64>, Matrix<f64>)> {
    let t = gt.frames();
    if anatomy_logits.rows() != t || pathology_logits.rows() != t {
        return Err(Error::ShapeMismatch(format!(
            "logits {} / {} frames vs labels {t}",
            anatomy_logits.rows(),
            pathology_logits.rows()
        )));
    }
    let mut anatomy_targets = Matrix::zeros(t, ANATOMY_CLASSES);
    let mut pathology_targets = Matrix::zeros(t, PATHOLOGY_CLASSES);
    for ti in 0..t {
        anatomy_targets.set(ti, gt.anatomy()[ti] as usize, 1.0);
        for (p, &bit) in gt.pathology()[ti].iter().enumerate() {
            pathology_targets.set(ti, p, bit as f64);
        }
    }
    let frame_w = boundary_weights(gt, cfg.boundary_boost, cfg.boundary_radius);
    let (a_loss, a_grad) = asl_loss(
        anatomy_logits,
        &anatomy_targets,
        &cfg.anatomy_asl(),
        &frame_w,
        &[1.0; ANATOMY_CLASSES],
    )?;
    let (p_loss, p_grad) = asl_loss(
        pathology_logits,
        &pathology_targets,
        &cfg.pathology_asl(),
        &frame_w,
        &cfg.pathology_class_weight,
    )?;
    let (m_loss, m_grad) = monotonicity_loss(anatomy_logits)?;
    let total = a_loss + p_loss + cfg.mono_weight * m_loss;
    let a_total = a_grad.add(&m_grad.scale(cfg.mono_weight))?;
    Ok((total, a_total, p_grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Pathology indices counted as rare.
    pub rare_classes: Vec<usize>,
    /// Weight multiplier for windows containing a rare frame.
    pub oversample: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            // angiectasia, blood, erosion: the upweighted rare findings
            rare_classes: vec![1, 2, 3],
            oversample: 4.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.oversample < 1.0 {
            return Err(Error::InvalidConfig("oversample factor must be >= 1".into()));
        }
        if self.rare_classes.iter().any(|&c| c >= PATHOLOGY_CLASSES) {
            return Err(Error::InvalidConfig("rare class index out of range".into()));
        }
        Ok(())
    }
}

/// Weight per window: `oversample` if the window contains at least one
/// frame with a rare pathology bit set, else 1.
pub fn window_weights(
    gt: &GroundTruthTrack,
    plan: &[(usize, usize)],
    cfg: &SamplerConfig,
) -> Vec<f64> {
    plan.iter()
        .map(|&(start, end)| {
            let rare = (start..end.min(gt.frames()))
                .any(|t| cfg.rare_classes.iter().any(|&p| gt.pathology_bit(t, p)));
            if rare {
                cfg.oversample
            } else {
                1.0
            }
        })
        .collect()
}

/// `n` seeded categorical draws (with replacement) over the window plan,
/// weighted by `window_weights`.
pub fn sample_windows(
    gt: &GroundTruthTrack,
    plan: &[(usize, usize)],
    cfg: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<usize>> {
    if plan.is_empty() {
        return Err(Error::InvalidInput("empty window plan".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    cfg.validate()?;
    let weights = window_weights(gt, plan, cfg);
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut total = 0.0;
    for w in &weights {
        total += w;
        cumulative.push(total);
    }
    let mut rng = SplitMix64::new(seed);
    let picks = (0..n)
        .map(|_| {
            let u = rng.next_f64() * total;
            cumulative.partition_point(|&c| c <= u).min(weights.len() - 1)
        })
        .collect();
    Ok(picks)
}
