//! Finite-difference verification of every analytic gradient in
//! [`crate::losses`]. Runs seeded random cases per term, compares against
//! 64-bit central differences, and reports the worst relative error.
//! A fault hook lets tests confirm the harness actually catches a broken
//! gradient and names the term.

use crate::datasynth::{GroundTruthTrack, ANATOMY_CLASSES, PATHOLOGY_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{asl_loss, monotonicity_loss, total_loss, AslParams, LossConfig};
use crate::rng::SplitMix64;
use crate::tensorio::Matrix;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

/// Central-difference gradient of a scalar function.
pub fn numerical_gradient(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst pairwise relative error. Central differences at step 1e-6
/// resolve a gradient only down to roughly eps*|loss|/step (~1e-9);
/// differences inside the absolute floor count as zero so that noise on
/// near-zero entries cannot mask as relative error.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(1e-12)
            }
        })
        .fold(0.0, f64::max)
}

/// Sign-flip fault injected into one term's analytic gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    AslSignFlip,
    MonotonicitySignFlip,
    TotalSignFlip,
}

#[derive(Debug, Clone)]
pub struct TermReport {
    pub term: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn rand_logits(t: usize, c: usize, rng: &mut SplitMix64) -> Matrix<f64> {
    let mut m = Matrix::zeros(t, c);
    for v in m.data_mut() {
        *v = rng.next_normal() * 2.0;
    }
    m
}

fn rand_targets(t: usize, c: usize, rng: &mut SplitMix64) -> Matrix<f64> {
    let mut m = Matrix::zeros(t, c);
    for v in m.data_mut() {
        *v = if rng.next_f64() < 0.35 { 1.0 } else { 0.0 };
    }
    m
}

/// The two losses have kinks (the negative clip margin and the hinge at
/// equal expectations); central differences are meaningless within a
/// step of them, so sampled cases keep a safety margin.
fn clear_of_asl_kink(logits: &Matrix<f64>, targets: &Matrix<f64>, margin: f64) -> bool {
    logits.data().iter().zip(targets.data()).all(|(&z, &y)| {
        let p = 1.0 / (1.0 + (-z).exp());
        y == 1.0 || (p - margin).abs() > 1e-3
    })
}

fn clear_of_mono_kink(logits: &Matrix<f64>) -> bool {
    let q = logits.row_softmax().unwrap();
    let e: Vec<f64> = (0..q.rows())
        .map(|t| q.row(t).iter().enumerate().map(|(a, &p)| a as f64 * p).sum())
        .collect();
    e.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-3)
}

fn check_case(analytic: &[f64], numeric: &[f64]) -> (bool, f64) {
    let err = max_rel_error(analytic, numeric);
    (err <= REL_TOL, err)
}

fn asl_case(rng: &mut SplitMix64, fault: Option<GradFault>) -> (bool, f64) {
    let t = 2 + rng.next_below(4) as usize;
    let c = 2 + rng.next_below(4) as usize;
    let params = AslParams {
        gamma_pos: [0.0, 1.0, 2.0][rng.next_below(3) as usize],
        gamma_neg: [2.0, 4.0][rng.next_below(2) as usize],
        clip_margin: 0.05,
        pos_boost: (0..c).map(|_| 0.5 + rng.next_f64() * 3.5).collect(),
    };
    let (logits, targets) = loop {
        let logits = rand_logits(t, c, rng);
        let targets = rand_targets(t, c, rng);
        if clear_of_asl_kink(&logits, &targets, params.clip_margin) {
            break (logits, targets);
        }
    };
    let frame_w: Vec<f64> = (0..t).map(|_| 0.5 + rng.next_f64() * 1.5).collect();
    let class_w: Vec<f64> = (0..c).map(|_| 0.5 + rng.next_f64() * 1.5).collect();
    let (_, mut grad) = asl_loss(&logits, &targets, &params, &frame_w, &class_w).unwrap();
    if fault == Some(GradFault::AslSignFlip) {
        grad = grad.scale(-1.0);
    }
    let numeric = numerical_gradient(logits.data(), FD_STEP, |x| {
        let m = Matrix::from_vec(t, c, x.to_vec()).unwrap();
        asl_loss(&m, &targets, &params, &frame_w, &class_w).unwrap().0
    });
    check_case(grad.data(), &numeric)
}

fn mono_case(rng: &mut SplitMix64, fault: Option<GradFault>) -> (bool, f64) {
    let t = 2 + rng.next_below(5) as usize;
    let logits = loop {
        let logits = rand_logits(t, ANATOMY_CLASSES, rng);
        if clear_of_mono_kink(&logits) {
            break logits;
        }
    };
    let (_, mut grad) = monotonicity_loss(&logits).unwrap();
    if fault == Some(GradFault::MonotonicitySignFlip) {
        grad = grad.scale(-1.0);
    }
    let numeric = numerical_gradient(logits.data(), FD_STEP, |x| {
        let m = Matrix::from_vec(t, ANATOMY_CLASSES, x.to_vec()).unwrap();
        monotonicity_loss(&m).unwrap().0
    });
    check_case(grad.data(), &numeric)
}

fn total_case(rng: &mut SplitMix64, fault: Option<GradFault>) -> (bool, f64) {
    let t = 3 + rng.next_below(3) as usize;
    let mut anatomy_track = Vec::with_capacity(t);
    let mut organ = 0u8;
    for _ in 0..t {
        if rng.next_f64() < 0.4 && organ < (ANATOMY_CLASSES - 1) as u8 {
            organ += 1;
        }
        anatomy_track.push(organ);
    }
    let bits: Vec<[u8; PATHOLOGY_CLASSES]> = (0..t)
        .map(|_| {
            let mut row = [0u8; PATHOLOGY_CLASSES];
            for b in row.iter_mut() {
                *b = (rng.next_f64() < 0.2) as u8;
            }
            row
        })
        .collect();
    let gt = GroundTruthTrack::new(anatomy_track, bits).unwrap();
    let cfg = LossConfig::default();
    let (anatomy, pathology) = loop {
        let a = rand_logits(t, ANATOMY_CLASSES, rng);
        let p = rand_logits(t, PATHOLOGY_CLASSES, rng);
        let mut a_targets = Matrix::zeros(t, ANATOMY_CLASSES);
        for (ti, &organ) in gt.anatomy().iter().enumerate() {
            a_targets.set(ti, organ as usize, 1.0);
        }
        let mut p_targets = Matrix::zeros(t, PATHOLOGY_CLASSES);
        for (ti, row) in gt.pathology().iter().enumerate() {
            for (ci, &bit) in row.iter().enumerate() {
                p_targets.set(ti, ci, bit as f64);
            }
        }
        if clear_of_asl_kink(&a, &a_targets, cfg.clip_margin)
            && clear_of_asl_kink(&p, &p_targets, cfg.clip_margin)
            && clear_of_mono_kink(&a)
        {
            break (a, p);
        }
    };
    let (_, mut ga, mut gp) = total_loss(&anatomy, &pathology, &gt, &cfg).unwrap();
    if fault == Some(GradFault::TotalSignFlip) {
        ga = ga.scale(-1.0);
        gp = gp.scale(-1.0);
    }
    let na = numerical_gradient(anatomy.data(), FD_STEP, |x| {
        let m = Matrix::from_vec(t, ANATOMY_CLASSES, x.to_vec()).unwrap();
        total_loss(&m, &pathology, &gt, &cfg).unwrap().0
    });
    let np = numerical_gradient(pathology.data(), FD_STEP, |x| {
        let m = Matrix::from_vec(t, PATHOLOGY_CLASSES, x.to_vec()).unwrap();
        total_loss(&anatomy, &m, &gt, &cfg).unwrap().0
    });
    let combined_a: Vec<f64> = ga.data().to_vec();
    let combined_n: Vec<f64> = na;
    let (ok_a, err_a) = check_case(&combined_a, &combined_n);
    let (ok_p, err_p) = check_case(gp.data(), &np);
    (ok_a && ok_p, err_a.max(err_p))
}

/// Run `cases` seeded checks per term; a fault makes the named term fail.
pub fn run_gradcheck(
    seed: u64,
    cases: usize,
    fault: Option<GradFault>,
) -> Result<Vec<TermReport>> {
    if cases == 0 {
        return Err(Error::InvalidConfig("gradcheck needs at least one case".into()));
    }
    type CaseRunner = fn(&mut SplitMix64, Option<GradFault>) -> (bool, f64);
    let terms: [(&'static str, CaseRunner); 3] = [
        ("asl", asl_case),
        ("monotonicity", mono_case),
        ("total_loss", total_case),
    ];
    let mut reports = Vec::new();
    for (tag, (term, runner)) in terms.iter().enumerate() {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            let mut rng = SplitMix64::stream(seed, (tag as u64) << 32 | case as u64);
            let (ok, err) = runner(&mut rng, fault);
            if !ok {
                failures += 1;
            }
            worst = worst.max(err);
        }
        reports.push(TermReport {
            term,
            cases,
            failures,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

/// Error listing each failed term, for the CLI exit path.
pub fn reports_to_result(reports: &[TermReport]) -> Result<()> {
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.term)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheckFailed(failed.join(", ")))
    }
}
