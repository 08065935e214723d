//! Composition oracles: each full forward pass and the decoder against
//! independent straight-line 64-bit recomputations.

mod common;

use common::*;
use gtnet_core::anatomy::{
    anatomy_forward, selective_scan, selective_scan_raw, AnatomyWeights, ScanDirection,
    WindowContext,
};
use gtnet_core::config::ModelConfig;
use gtnet_core::pathology::{pathology_forward, AnatomyPrototypes, PathologyWeights};
use gtnet_core::postprocess::{viterbi_anatomy, ViterbiConfig};
use gtnet_core::rng::SplitMix64;
use gtnet_core::tensorio::Matrix;
use gtnet_core::weights::xavier_matrix;

#[test]
fn anatomy_forward_matches_straight_line_oracle() {
    let cfg = ModelConfig::toy(8);
    for seed in [1u64, 2, 3] {
        let w = AnatomyWeights::init(&cfg, seed);
        let mut rng = SplitMix64::new(100 + seed);
        let t = 4 + seed as usize;
        let cls = rand_matrix(t, cfg.cls_dim, 0.8, &mut rng);
        let ctx = WindowContext::new(3, 12).unwrap();
        let got = anatomy_forward(&cls, &ctx, &w, &cfg).unwrap();
        let want = anatomy_forward_oracle(&cls, 3.0 / 12.0, &w, &cfg);
        let err = grid_vs_matrix_error(&want, &got);
        assert!(err < 1e-5, "seed {seed}: scaled error {err}");
    }
}

#[test]
fn pathology_forward_matches_straight_line_oracle() {
    let cfg = ModelConfig::toy(8);
    for seed in [4u64, 5, 6] {
        let w = PathologyWeights::init(&cfg, seed);
        let mut rng = SplitMix64::new(200 + seed);
        let t = 4 + seed as usize;
        let patch = rand_matrix(t, cfg.patch_dim, 0.8, &mut rng);
        let logits = rand_matrix(t, 8, 1.0, &mut rng);
        let protos = AnatomyPrototypes {
            means: rand_matrix(8, cfg.patch_dim, 0.6, &mut rng),
            support: [1; 8],
        };
        let got = pathology_forward(&patch, &logits, &protos, &w, &cfg).unwrap();
        let want = pathology_forward_oracle(&patch, &to_grid(&logits), &protos, &w, &cfg);
        let err = grid_vs_matrix_error(&want, &got);
        assert!(err < 1e-5, "seed {seed}: scaled error {err}");
    }
}

#[test]
fn scan_sequential_matches_chunked_at_example_dims() {
    // T=9, S=4, chunk 3
    let mut rng = SplitMix64::new(300);
    let (t, d, s) = (9usize, 3usize, 4usize);
    let x = rand_matrix(t, d, 1.0, &mut rng);
    let delta = rand_matrix(t, d, 0.5, &mut rng).map(|v| v.abs() + 0.1);
    let b = rand_matrix(t, s, 1.0, &mut rng);
    let c = rand_matrix(t, s, 1.0, &mut rng);
    let a = xavier_matrix(d, s, &mut rng).map(|v| -v.abs() - 0.1);
    let d_skip: Vec<f32> = (0..d).map(|_| rng.next_normal() as f32).collect();

    let lib = selective_scan_raw(&x, &delta, &b, &c, &a, &d_skip).unwrap();
    let d_skip64: Vec<f64> = d_skip.iter().map(|&v| v as f64).collect();
    let seq = scan_sequential(
        &to_grid(&x),
        &to_grid(&delta),
        &to_grid(&b),
        &to_grid(&c),
        &to_grid(&a),
        &d_skip64,
    );
    let chunked = scan_chunked(
        &to_grid(&x),
        &to_grid(&delta),
        &to_grid(&b),
        &to_grid(&c),
        &to_grid(&a),
        &d_skip64,
        3,
    );
    assert!(max_scaled_error(&seq, &chunked) < 1e-5);
    assert!(grid_vs_matrix_error(&seq, &lib) < 1e-5);
}

#[test]
fn lib_scan_matches_f64_sequential_via_projections() {
    let cfg = ModelConfig::toy(6);
    for seed in [7u64, 8] {
        let w = AnatomyWeights::init(&cfg, seed);
        let mut rng = SplitMix64::new(400 + seed);
        let x = rand_matrix(12, cfg.hidden, 0.7, &mut rng);
        for (backward, dir) in [(false, ScanDirection::Forward), (true, ScanDirection::Backward)]
        {
            let got = selective_scan(&x, &w.ssm.fwd, dir).unwrap();
            let want = ssm_scan(&to_grid(&x), &w.ssm.fwd, backward);
            let err = grid_vs_matrix_error(&want, &got);
            assert!(err < 1e-5, "seed {seed} backward {backward}: {err}");
        }
    }
}

#[test]
fn windowed_inference_matches_composed_oracle_end_to_end() {
    // window plan + both forwards + sigmoid merge against the same
    // composition built purely from the f64 oracles
    let mut cfg = ModelConfig::toy(8);
    cfg.window = 48;
    cfg.stride = 24;
    let frames = 100usize;
    let synth_cfg = gtnet_core::datasynth::SynthConfig {
        frames,
        seed: 77,
        cls_dim: cfg.cls_dim,
        patch_dim: cfg.patch_dim,
        burst_len_min: 5,
        burst_len_max: 20,
        burst_rate_per_1k: 20.0,
        ..Default::default()
    };
    let video = gtnet_core::datasynth::synth_video(&synth_cfg).unwrap();
    let protos = gtnet_core::pathology::fit_prototypes(&[(&video.features.patch, &video.gt)])
        .unwrap();
    let anatomy_weights = AnatomyWeights::init(&cfg, 31);
    let pathology_weights = PathologyWeights::init(&cfg, 32);
    let plan = gtnet_core::datasynth::window_plan(frames, cfg.window, cfg.stride).unwrap();

    let mut window_logits = Vec::new();
    let mut oracle_sums = vec![vec![0.0f64; 17]; frames];
    let mut coverage = vec![0u32; frames];
    for &(start, end) in &plan {
        let ctx = WindowContext::new(start, frames).unwrap();
        let cls = video.features.cls.slice_rows(start, end);
        let patch = video.features.patch.slice_rows(start, end);
        let a = anatomy_forward(&cls, &ctx, &anatomy_weights, &cfg).unwrap();
        let p = pathology_forward(&patch, &a, &protos, &pathology_weights, &cfg).unwrap();
        window_logits.push(a.concat_cols(&p).unwrap());

        let a64 = anatomy_forward_oracle(&cls, start as f64 / frames as f64, &anatomy_weights, &cfg);
        let p64 = pathology_forward_oracle(&patch, &a64, &protos, &pathology_weights, &cfg);
        for (row, frame) in (start..end).enumerate() {
            coverage[frame] += 1;
            for c in 0..8 {
                oracle_sums[frame][c] += 1.0 / (1.0 + (-a64[row][c]).exp());
            }
            for c in 0..9 {
                oracle_sums[frame][8 + c] += 1.0 / (1.0 + (-p64[row][c]).exp());
            }
        }
    }
    let merged = gtnet_core::postprocess::merge_windows(&window_logits, &plan, frames).unwrap();
    let oracle: Grid = oracle_sums
        .iter()
        .zip(&coverage)
        .map(|(row, &n)| row.iter().map(|v| v / n as f64).collect())
        .collect();
    let err = grid_vs_matrix_error(&oracle, merged.matrix());
    assert!(err < 1e-5, "end-to-end scaled error {err}");
}

#[test]
fn viterbi_matches_enumeration_small_cases() {
    let cfg = ViterbiConfig::default();
    for case in 0..25u64 {
        let mut rng = SplitMix64::stream(42, case);
        let t = 1 + rng.next_below(6) as usize;
        let mut probs = Matrix::zeros(t, 8);
        for v in probs.data_mut() {
            *v = rng.next_f64() as f32;
        }
        let path = viterbi_anatomy(&probs, &cfg).unwrap();
        let (best_score, best_path) = viterbi_brute_force(&probs, &cfg);
        assert_eq!(path, best_path, "case {case}");
        assert_eq!(viterbi_path_score(&path, &probs, &cfg), best_score, "case {case}");
    }
}
