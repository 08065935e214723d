//! Shared 64-bit oracles for the integration suites. Everything here is
//! an independent reimplementation in plain loops; none of it calls the
//! forward-path code it checks.

#![allow(dead_code)]

use gtnet_core::anatomy::{AnatomyWeights, AttentionLayer, SsmBlock, LN_EPS};
use gtnet_core::config::ModelConfig;
use gtnet_core::pathology::{AnatomyPrototypes, PathologyWeights};
use gtnet_core::postprocess::ViterbiConfig;
use gtnet_core::rng::SplitMix64;
use gtnet_core::tensorio::{Layer, Matrix};

pub type Grid = Vec<Vec<f64>>;

pub fn to_grid(m: &Matrix<f32>) -> Grid {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn matmul(a: &Grid, b: &Grid) -> Grid {
    let (m, k) = (a.len(), b.len());
    let n = b[0].len();
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn add(a: &Grid, b: &Grid) -> Grid {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn add_bias(a: &Grid, bias: &[f32]) -> Grid {
    a.iter()
        .map(|row| row.iter().zip(bias).map(|(x, &b)| x + b as f64).collect())
        .collect()
}

pub fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softplus64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn apply_layer(x: &Grid, layer: &Layer<f32>) -> Grid {
    add_bias(&matmul(x, &to_grid(&layer.weight)), &layer.bias)
}

pub fn frame_diff(x: &Grid) -> Grid {
    let mut out = vec![vec![0.0; x[0].len()]; x.len()];
    for t in 1..x.len() {
        for c in 0..x[0].len() {
            out[t][c] = x[t][c] - x[t - 1][c];
        }
    }
    out
}

pub fn layer_norm(x: &Grid) -> Grid {
    let d = x[0].len() as f64;
    x.iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS as f64).sqrt();
            row.iter().map(|v| (v - mean) * inv).collect()
        })
        .collect()
}

pub fn band_attention(x: &Grid, layer: &AttentionLayer, radius: usize, heads: usize) -> Grid {
    let t = x.len();
    let d = x[0].len();
    let hd = d / heads;
    let q = matmul(x, &to_grid(&layer.wq));
    let k = matmul(x, &to_grid(&layer.wk));
    let v = matmul(x, &to_grid(&layer.wv));
    let mut ctx = vec![vec![0.0; d]; t];
    for i in 0..t {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(t - 1);
        for head in 0..heads {
            let mut scores: Vec<f64> = (lo..=hi)
                .map(|j| {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += q[i][head * hd + c] * k[j][head * hd + c];
                    }
                    dot / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for (idx, j) in (lo..=hi).enumerate() {
                let w = scores[idx] / sum;
                for c in 0..hd {
                    ctx[i][head * hd + c] += w * v[j][head * hd + c];
                }
            }
        }
    }
    layer_norm(&add(x, &matmul(&ctx, &to_grid(&layer.wo))))
}

pub fn similarity_adjacency(x: &Grid, k: usize) -> Grid {
    let t = x.len();
    let norms: Vec<f64> = x
        .iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut adj = vec![vec![0.0; t]; t];
    for i in 0..t {
        let mut sims: Vec<(usize, f64)> = (0..t)
            .filter(|&j| j != i)
            .map(|j| {
                let s = if norms[i] > 0.0 && norms[j] > 0.0 {
                    let dot: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).max(0.0)
                } else {
                    0.0
                };
                (j, s)
            })
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        sims.truncate(k);
        let total = 1.0 + sims.iter().map(|&(_, s)| s).sum::<f64>();
        adj[i][i] = 1.0 / total;
        for (j, s) in sims {
            adj[i][j] = s / total;
        }
    }
    adj
}

pub fn distance_adjacency(t: usize, radius: usize) -> Grid {
    let mut adj = vec![vec![0.0; t]; t];
    for (i, row) in adj.iter_mut().enumerate() {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(t - 1);
        for cell in row.iter_mut().take(hi + 1).skip(lo) {
            *cell = 1.0 / (hi - lo + 1) as f64;
        }
    }
    adj
}

pub fn dual_graph_gcn(
    x: &Grid,
    w_sim: &Matrix<f32>,
    w_dist: &Matrix<f32>,
    proj: &Layer<f32>,
    sim_k: usize,
    dist_radius: usize,
) -> Grid {
    let a_sim = similarity_adjacency(x, sim_k);
    let a_dist = distance_adjacency(x.len(), dist_radius);
    let g_sim: Grid = matmul(&matmul(&a_sim, x), &to_grid(w_sim))
        .iter()
        .map(|row| row.iter().map(|&v| gelu64(v)).collect())
        .collect();
    let g_dist: Grid = matmul(&matmul(&a_dist, x), &to_grid(w_dist))
        .iter()
        .map(|row| row.iter().map(|&v| gelu64(v)).collect())
        .collect();
    let stacked: Grid = g_sim
        .iter()
        .zip(&g_dist)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    add(x, &apply_layer(&stacked, proj))
}

/// Sequential f64 selective scan with explicit per-frame parameters.
pub fn scan_sequential(
    x: &Grid,
    delta: &Grid,
    b: &Grid,
    c: &Grid,
    a: &Grid,
    d_skip: &[f64],
) -> Grid {
    let t = x.len();
    let d = x[0].len();
    let s = a[0].len();
    let mut state = vec![vec![0.0; s]; d];
    let mut out = vec![vec![0.0; d]; t];
    for frame in 0..t {
        for ch in 0..d {
            let dt = delta[frame][ch];
            let dx = dt * x[frame][ch];
            let mut y = 0.0;
            for j in 0..s {
                state[ch][j] = (dt * a[ch][j]).exp() * state[ch][j] + dx * b[frame][j];
                y += c[frame][j] * state[ch][j];
            }
            out[frame][ch] = y + d_skip[ch] * x[frame][ch];
        }
    }
    out
}

/// Chunked prefix evaluation of the same recurrence: within each chunk
/// every state is written as (prod of decays) * h_in + a direct sum of
/// decay-weighted inputs, a genuinely different summation order.
pub fn scan_chunked(
    x: &Grid,
    delta: &Grid,
    b: &Grid,
    c: &Grid,
    a: &Grid,
    d_skip: &[f64],
    chunk: usize,
) -> Grid {
    let t = x.len();
    let d = x[0].len();
    let s = a[0].len();
    let mut out = vec![vec![0.0; d]; t];
    for ch in 0..d {
        for j in 0..s {
            let decay: Vec<f64> = (0..t).map(|f| (delta[f][ch] * a[ch][j]).exp()).collect();
            let input: Vec<f64> = (0..t).map(|f| delta[f][ch] * x[f][ch] * b[f][j]).collect();
            let mut h_in = 0.0;
            let mut start = 0;
            while start < t {
                let end = (start + chunk).min(t);
                for frame in start..end {
                    // prod of decays from chunk start through frame
                    let mut carry = h_in;
                    for &dec in &decay[start..=frame] {
                        carry *= dec;
                    }
                    // direct per-source sums instead of a running state
                    let mut pushed = 0.0;
                    for src in start..=frame {
                        let mut weight = input[src];
                        for &dec in &decay[src + 1..=frame] {
                            weight *= dec;
                        }
                        pushed += weight;
                    }
                    let h = carry + pushed;
                    out[frame][ch] += c[frame][j] * h;
                    if frame + 1 == end {
                        h_in = h;
                    }
                }
                start = end;
            }
        }
        for frame in 0..t {
            out[frame][ch] += d_skip[ch] * x[frame][ch];
        }
    }
    out
}

/// f64 projections of an SSM block: (delta, b, c) per frame.
pub fn ssm_project(x: &Grid, blk: &SsmBlock) -> (Grid, Grid, Grid) {
    let delta: Grid = apply_layer(x, &blk.w_delta)
        .iter()
        .map(|row| row.iter().map(|&v| softplus64(v)).collect())
        .collect();
    let b = matmul(x, &to_grid(&blk.w_b));
    let c = matmul(x, &to_grid(&blk.w_c));
    (delta, b, c)
}

pub fn ssm_scan(x: &Grid, blk: &SsmBlock, backward: bool) -> Grid {
    let run = |input: &Grid| {
        let (delta, b, c) = ssm_project(input, blk);
        let d_skip: Vec<f64> = blk.d_skip.iter().map(|&v| v as f64).collect();
        scan_sequential(input, &delta, &b, &c, &to_grid(&blk.a), &d_skip)
    };
    if backward {
        let reversed: Grid = x.iter().rev().cloned().collect();
        run(&reversed).into_iter().rev().collect()
    } else {
        run(x)
    }
}

/// Straight-line f64 recomputation of the anatomy forward pass.
pub fn anatomy_forward_oracle(
    cls: &Matrix<f32>,
    ratio: f64,
    w: &AnatomyWeights,
    cfg: &ModelConfig,
) -> Grid {
    let x = to_grid(cls);
    let mut h = apply_layer(&x, &w.input_proj);
    for (t, row) in h.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += w.pos_embedding.get(t, c) as f64;
        }
    }
    h = add(&h, &apply_layer(&frame_diff(&x), &w.motion_proj));
    for layer in &w.attn {
        h = band_attention(&h, layer, cfg.attn_radius, cfg.heads);
    }
    h = dual_graph_gcn(
        &h,
        &w.gcn.w_sim,
        &w.gcn.w_dist,
        &w.gcn.proj,
        cfg.sim_k,
        cfg.dist_radius,
    );
    // global position prior
    let mut gps_out = vec![vec![ratio]];
    for (i, layer) in w.gps.iter().enumerate() {
        gps_out = apply_layer(&gps_out, layer);
        if i + 1 < w.gps.len() {
            for v in gps_out[0].iter_mut() {
                *v = gelu64(*v);
            }
        }
    }
    for row in h.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += gps_out[0][c];
        }
    }
    // bidirectional scan with SiLU-gated merge
    let fwd = ssm_scan(&h, &w.ssm.fwd, false);
    let bwd = ssm_scan(&h, &w.ssm.bwd, true);
    let stacked: Grid = fwd
        .iter()
        .zip(&bwd)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    let merged = matmul(&stacked, &to_grid(&w.ssm.merge));
    let gate = matmul(&h, &to_grid(&w.ssm.gate));
    let mut mixed = h.clone();
    for t in 0..mixed.len() {
        for c in 0..mixed[0].len() {
            mixed[t][c] += silu64(gate[t][c]) * merged[t][c];
        }
    }
    apply_layer(&mixed, &w.head)
}

pub fn row_softmax(x: &Grid) -> Grid {
    x.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|v| v / sum).collect()
        })
        .collect()
}

/// Straight-line f64 recomputation of the pathology forward pass.
pub fn pathology_forward_oracle(
    patch: &Matrix<f32>,
    anatomy_logits: &Grid,
    protos: &AnatomyPrototypes,
    w: &PathologyWeights,
    cfg: &ModelConfig,
) -> Grid {
    let x = to_grid(patch);
    let probs = row_softmax(anatomy_logits);
    let expected = matmul(&probs, &to_grid(&protos.means));
    let deviation: Grid = x
        .iter()
        .zip(&expected)
        .map(|(p, e)| p.iter().zip(e).map(|(a, b)| a - b).collect())
        .collect();
    let s_dev = apply_layer(&deviation, &w.dev_proj);
    let s_motion = apply_layer(&frame_diff(&x), &w.motion_proj);
    let content = add(&apply_layer(&x, &w.content_proj), &s_motion);

    let g = dual_graph_gcn(
        &content,
        &w.gcn.w_sim,
        &w.gcn.w_dist,
        &w.gcn.proj,
        cfg.sim_k,
        cfg.dist_radius,
    );
    // depthwise kernel-5 conv then pointwise projection
    let t = g.len();
    let d = g[0].len();
    let mut mixed = vec![vec![0.0; d]; t];
    for frame in 0..t {
        for (j, off) in (-2i64..=2).enumerate() {
            let src = frame as i64 + off;
            if src < 0 || src >= t as i64 {
                continue;
            }
            for ch in 0..d {
                mixed[frame][ch] += w.conv_depthwise.get(ch, j) as f64 * g[src as usize][ch];
            }
        }
    }
    let conv = apply_layer(&mixed, &w.conv_pointwise);
    let scan = ssm_scan(&conv, &w.ssm, false);
    let mut s_content = conv.clone();
    for frame in 0..t {
        for ch in 0..d {
            s_content[frame][ch] += scan[frame][ch] + g[frame][ch];
        }
    }

    let stacked: Grid = s_dev
        .iter()
        .zip(&s_motion)
        .zip(&s_content)
        .map(|((a, b), c)| a.iter().chain(b).chain(c).copied().collect())
        .collect();
    let mut cond = anatomy_logits.clone();
    for (i, layer) in w.cond.iter().enumerate() {
        cond = apply_layer(&cond, layer);
        if i + 1 < w.cond.len() {
            for row in cond.iter_mut() {
                for v in row.iter_mut() {
                    *v = gelu64(*v);
                }
            }
        }
    }
    let fused = add(&apply_layer(&stacked, &w.fusion), &cond);
    apply_layer(&fused, &w.head)
}

/// Exhaustive enumeration over monotone non-decreasing state paths,
/// scored with the same fold order as the decoder.
pub fn viterbi_brute_force(probs: &Matrix<f32>, cfg: &ViterbiConfig) -> (f64, Vec<u8>) {
    let t = probs.rows();
    let states = probs.cols();
    let emission = |frame: usize, s: usize| -> f64 {
        (probs.get(frame, s) as f64).max(cfg.emission_floor).ln()
    };
    let mut best_score = f64::NEG_INFINITY;
    let mut best_path = Vec::new();
    let mut path = vec![0u8; t];
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        frame: usize,
        t: usize,
        states: usize,
        path: &mut Vec<u8>,
        score: f64,
        emission: &dyn Fn(usize, usize) -> f64,
        penalty: f64,
        best_score: &mut f64,
        best_path: &mut Vec<u8>,
    ) {
        if frame == t {
            if score > *best_score {
                *best_score = score;
                *best_path = path.clone();
            }
            return;
        }
        let lo = if frame == 0 { 0 } else { path[frame - 1] as usize };
        for s in lo..states {
            // fold order matches the DP: (score + trans) + emission
            let next_score = if frame == 0 {
                emission(0, s)
            } else {
                let trans = -penalty * ((s - lo) as f64);
                (score + trans) + emission(frame, s)
            };
            path[frame] = s as u8;
            recurse(
                frame + 1,
                t,
                states,
                path,
                next_score,
                emission,
                penalty,
                best_score,
                best_path,
            );
        }
    }
    recurse(
        0,
        t,
        states,
        &mut path,
        0.0,
        &emission,
        cfg.skip_penalty,
        &mut best_score,
        &mut best_path,
    );
    (best_score, best_path)
}

/// Score of a fixed path under the decoder's objective, same fold order
/// as the DP recursion.
pub fn viterbi_path_score(path: &[u8], probs: &Matrix<f32>, cfg: &ViterbiConfig) -> f64 {
    let emission = |frame: usize, s: usize| -> f64 {
        (probs.get(frame, s) as f64).max(cfg.emission_floor).ln()
    };
    let mut score = emission(0, path[0] as usize);
    for frame in 1..path.len() {
        let prev = path[frame - 1] as usize;
        let cur = path[frame] as usize;
        let trans = -cfg.skip_penalty * ((cur - prev) as f64);
        score = (score + trans) + emission(frame, cur);
    }
    score
}

pub fn rand_matrix(rows: usize, cols: usize, scale: f32, rng: &mut SplitMix64) -> Matrix<f32> {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = scale * rng.next_normal() as f32;
    }
    m
}

/// Scale-aware agreement check: worst |a-b| relative to the larger of
/// the pairwise magnitude and a tenth of the overall output scale. The
/// floor keeps sub-scale entries from demanding more relative precision
/// than f32 accumulation carries.
pub fn max_scaled_error(a: &Grid, b: &Grid) -> f64 {
    let scale = a
        .iter()
        .flatten()
        .chain(b.iter().flatten())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-12);
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(scale * 0.1));
        }
    }
    worst
}

pub fn grid_vs_matrix_error(grid: &Grid, m: &Matrix<f32>) -> f64 {
    let other: Grid = (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect();
    max_scaled_error(grid, &other)
}
