//! Anatomy-branch forward pass.
//!
//! Per window: CLS projection + positional embedding + CLS motion signal,
//! two layers of windowed self-attention, a dual-graph GCN with a saved
//! residual, a broadcast global-position prior, a bidirectional selective
//! scan, and the 8-way classification head. Everything is a pure function
//! of (inputs, weights); no dropout, no state.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensorio::{
    frame_diff, gelu, layer_norm_rows, mlp_forward, silu, softmax_in_place, softplus, Activation,
    Layer, Matrix,
};

pub const LN_EPS: f32 = 1e-5;

/// Position of a window inside its video; carries the scalar ratio that
/// the global-position MLP consumes.
#[derive(Debug, Clone, Copy)]
pub struct WindowContext {
    start: usize,
    total: usize,
}

impl WindowContext {
    pub fn new(start: usize, total: usize) -> Result<Self> {
        if total == 0 || start > total {
            return Err(Error::InvalidInput(format!(
                "window context start {start} / total {total}"
            )));
        }
        Ok(WindowContext { start, total })
    }

    pub fn ratio(&self) -> f32 {
        self.start as f32 / self.total as f32
    }
}

/// One attention layer: Q, K, V, output projections, all d->d, no bias.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub wq: Matrix<f32>,
    pub wk: Matrix<f32>,
    pub wv: Matrix<f32>,
    pub wo: Matrix<f32>,
}

impl AttentionLayer {
    pub fn project_qkv(&self, h: &Matrix<f32>) -> Result<(Matrix<f32>, Matrix<f32>, Matrix<f32>)> {
        Ok((h.matmul(&self.wq)?, h.matmul(&self.wk)?, h.matmul(&self.wv)?))
    }
}

/// Attention weights of one head for frame `t` over the band
/// [t-radius, t+radius] clipped to the sequence; returns (index, weight)
/// pairs that sum to 1.
pub fn band_attention_weights(
    q: &Matrix<f32>,
    k: &Matrix<f32>,
    t: usize,
    head: usize,
    heads: usize,
    radius: usize,
) -> Vec<(usize, f32)> {
    let head_dim = q.cols() / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let lo = t.saturating_sub(radius);
    let hi = (t + radius).min(q.rows() - 1);
    let q_row = &q.row(t)[head * head_dim..(head + 1) * head_dim];
    let mut scores: Vec<f32> = (lo..=hi)
        .map(|j| {
            let k_row = &k.row(j)[head * head_dim..(head + 1) * head_dim];
            let dot: f32 = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum();
            dot * scale
        })
        .collect();
    softmax_in_place(&mut scores);
    (lo..=hi).zip(scores).collect()
}

/// Scaled dot-product attention restricted to a +-radius band, multi-head,
/// with a post-norm residual: out = layernorm(h + Wo(attend(h))).
pub fn windowed_self_attention(
    h: &Matrix<f32>,
    layer: &AttentionLayer,
    radius: usize,
    heads: usize,
) -> Result<Matrix<f32>> {
    if radius == 0 {
        return Err(Error::InvalidConfig("attention radius must be >= 1".into()));
    }
    let d = h.cols();
    if !d.is_multiple_of(heads) {
        return Err(Error::ShapeMismatch(format!(
            "hidden {d} not divisible by heads {heads}"
        )));
    }
    let (q, k, v) = layer.project_qkv(h)?;
    let head_dim = d / heads;
    let mut ctx = Matrix::zeros(h.rows(), d);
    for t in 0..h.rows() {
        for head in 0..heads {
            let weights = band_attention_weights(&q, &k, t, head, heads, radius);
            let out = &mut ctx.row_mut(t)[head * head_dim..(head + 1) * head_dim];
            for (j, w) in weights {
                let v_row = &v.row(j)[head * head_dim..(head + 1) * head_dim];
                for (o, &x) in out.iter_mut().zip(v_row) {
                    *o += w * x;
                }
            }
        }
    }
    let attn = ctx.matmul(&layer.wo)?;
    let out = layer_norm_rows(&h.add(&attn)?, LN_EPS);
    if !out.is_finite() {
        return Err(Error::NonFinite("windowed_self_attention output".into()));
    }
    Ok(out)
}

/// Frame-to-frame difference of CLS tokens; row 0 is zero.
pub fn cls_motion(cls: &Matrix<f32>) -> Matrix<f32> {
    frame_diff(cls)
}

/// Row-stochastic similarity graph: per row, the top-k cosine neighbors
/// (self excluded, negative similarities clipped to zero) plus a unit
/// self-loop, normalized to sum 1. Zero rows keep only the self-loop.
pub fn similarity_adjacency(h: &Matrix<f32>, k: usize) -> Matrix<f32> {
    let t = h.rows();
    let norms: Vec<f32> = (0..t)
        .map(|r| h.row(r).iter().map(|v| v * v).sum::<f32>().sqrt())
        .collect();
    let mut adj = Matrix::zeros(t, t);
    for i in 0..t {
        let mut sims: Vec<(usize, f32)> = Vec::with_capacity(t.saturating_sub(1));
        for j in 0..t {
            if j == i {
                continue;
            }
            let s = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f32 = h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).max(0.0)
            } else {
                0.0
            };
            sims.push((j, s));
        }
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        sims.truncate(k);
        let total: f32 = 1.0 + sims.iter().map(|&(_, s)| s).sum::<f32>();
        adj.set(i, i, 1.0 / total);
        for (j, s) in sims {
            adj.set(i, j, s / total);
        }
    }
    adj
}

/// Row-stochastic band graph: ones within |i-j| <= radius, row-normalized.
pub fn distance_adjacency(t: usize, radius: usize) -> Matrix<f32> {
    let mut adj = Matrix::zeros(t, t);
    for i in 0..t {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(t - 1);
        let w = 1.0 / (hi - lo + 1) as f32;
        for j in lo..=hi {
            adj.set(i, j, w);
        }
    }
    adj
}

/// Weights of one dual-graph GCN block.
#[derive(Debug, Clone)]
pub struct DualGraphGcn {
    pub w_sim: Matrix<f32>,
    pub w_dist: Matrix<f32>,
    /// Post-concatenation projection 2d -> d.
    pub proj: Layer<f32>,
}

impl DualGraphGcn {
    /// out = h + proj([GELU(A_sim h W_sim) || GELU(A_dist h W_dist)]);
    /// the residual is the input saved before adjacency computation.
    pub fn apply(&self, h: &Matrix<f32>, sim_k: usize, dist_radius: usize) -> Result<Matrix<f32>> {
        let a_sim = similarity_adjacency(h, sim_k);
        let a_dist = distance_adjacency(h.rows(), dist_radius);
        let g_sim = a_sim.matmul(h)?.matmul(&self.w_sim)?.map(gelu);
        let g_dist = a_dist.matmul(h)?.matmul(&self.w_dist)?.map(gelu);
        let stacked = g_sim.concat_cols(&g_dist)?;
        h.add(&self.proj.apply(&stacked)?)
    }
}

/// Broadcast-add of the encoded window-position scalar to every frame.
pub fn gps_inject(h: &Matrix<f32>, ctx: &WindowContext, gps: &[Layer<f32>]) -> Result<Matrix<f32>> {
    let r = Matrix::from_vec(1, 1, vec![ctx.ratio()])?;
    let bias = mlp_forward(&r, gps, Activation::Gelu)?;
    if bias.cols() != h.cols() {
        return Err(Error::ShapeMismatch(format!(
            "gps output {} vs hidden {}",
            bias.cols(),
            h.cols()
        )));
    }
    let mut out = h.clone();
    for t in 0..out.rows() {
        for (v, b) in out.row_mut(t).iter_mut().zip(bias.row(0)) {
            *v += *b;
        }
    }
    Ok(out)
}

/// Parameters of one diagonal selective-scan block.
#[derive(Debug, Clone)]
pub struct SsmBlock {
    /// Per-channel decay, d x S, strictly negative.
    pub a: Matrix<f32>,
    /// Delta projection d -> d; softplus applied to the output.
    pub w_delta: Layer<f32>,
    /// Input projection d -> S.
    pub w_b: Matrix<f32>,
    /// Output projection d -> S.
    pub w_c: Matrix<f32>,
    /// Per-channel skip coefficient.
    pub d_skip: Vec<f32>,
}

impl SsmBlock {
    pub fn validate(&self) -> Result<()> {
        if self.a.data().iter().any(|&v| v >= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "ssm decay parameters must be negative and finite".into(),
            ));
        }
        if self.d_skip.len() != self.a.rows() {
            return Err(Error::ShapeMismatch("d_skip length vs channels".into()));
        }
        Ok(())
    }

    /// Input-dependent Delta (T x d, positive), B (T x S), C (T x S).
    pub fn project(&self, x: &Matrix<f32>) -> Result<(Matrix<f32>, Matrix<f32>, Matrix<f32>)> {
        let delta = self.w_delta.apply(x)?.map(softplus);
        if !delta.is_finite() {
            return Err(Error::NonFinite("ssm delta".into()));
        }
        let b = x.matmul(&self.w_b)?;
        let c = x.matmul(&self.w_c)?;
        Ok((delta, b, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
}

/// Diagonal selective-scan recurrence with explicit per-frame parameters:
/// per channel d and state s,
///   h[d,s] <- exp(delta[d] * a[d,s]) * h[d,s] + delta[d] * b[s] * x[d]
///   y[d]    = sum_s c[s] * h[d,s] + d_skip[d] * x[d]
pub fn selective_scan_raw(
    x: &Matrix<f32>,
    delta: &Matrix<f32>,
    b: &Matrix<f32>,
    c: &Matrix<f32>,
    a: &Matrix<f32>,
    d_skip: &[f32],
) -> Result<Matrix<f32>> {
    let (t, d) = (x.rows(), x.cols());
    let s = a.cols();
    if delta.rows() != t || delta.cols() != d || b.rows() != t || b.cols() != s
        || c.rows() != t || c.cols() != s || a.rows() != d || d_skip.len() != d
    {
        return Err(Error::ShapeMismatch("selective_scan parameter shapes".into()));
    }
    if !delta.is_finite() {
        return Err(Error::NonFinite("selective_scan delta".into()));
    }
    let mut state = vec![0.0f32; d * s];
    let mut out = Matrix::zeros(t, d);
    for frame in 0..t {
        let x_row = x.row(frame);
        let dt_row = delta.row(frame);
        let b_row = b.row(frame);
        let c_row = c.row(frame);
        let y_row = out.row_mut(frame);
        for ch in 0..d {
            let dt = dt_row[ch];
            let dx = dt * x_row[ch];
            let a_row = a.row(ch);
            let h = &mut state[ch * s..(ch + 1) * s];
            let mut y = 0.0f32;
            for j in 0..s {
                h[j] = (dt * a_row[j]).exp() * h[j] + dx * b_row[j];
                y += c_row[j] * h[j];
            }
            y_row[ch] = y + d_skip[ch] * x_row[ch];
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("selective_scan output".into()));
    }
    Ok(out)
}

/// Selective scan with input-dependent parameters; the backward direction
/// is the forward scan applied to the reversed sequence, re-reversed.
pub fn selective_scan(
    x: &Matrix<f32>,
    blk: &SsmBlock,
    direction: ScanDirection,
) -> Result<Matrix<f32>> {
    match direction {
        ScanDirection::Forward => {
            let (delta, b, c) = blk.project(x)?;
            selective_scan_raw(x, &delta, &b, &c, &blk.a, &blk.d_skip)
        }
        ScanDirection::Backward => {
            let rev = x.reverse_rows();
            let out = selective_scan(&rev, blk, ScanDirection::Forward)?;
            Ok(out.reverse_rows())
        }
    }
}

/// Both scan directions merged back into the residual stream, gated by
/// SiLU of a gate projection of the input.
#[derive(Debug, Clone)]
pub struct BidirectionalSsm {
    pub fwd: SsmBlock,
    pub bwd: SsmBlock,
    /// Merge projection 2d -> d, no bias.
    pub merge: Matrix<f32>,
    /// Gate projection d -> d, no bias.
    pub gate: Matrix<f32>,
}

pub fn bidirectional_mamba(h: &Matrix<f32>, ssm: &BidirectionalSsm) -> Result<Matrix<f32>> {
    let fwd = selective_scan(h, &ssm.fwd, ScanDirection::Forward)?;
    let bwd = selective_scan(h, &ssm.bwd, ScanDirection::Backward)?;
    let merged = fwd.concat_cols(&bwd)?.matmul(&ssm.merge)?;
    let gate = h.matmul(&ssm.gate)?.map(silu);
    let mut out = h.clone();
    for i in 0..out.data().len() {
        out.data_mut()[i] += gate.data()[i] * merged.data()[i];
    }
    Ok(out)
}

/// Every learnable tensor of the anatomy branch.
#[derive(Debug, Clone)]
pub struct AnatomyWeights {
    pub input_proj: Layer<f32>,
    /// Per-window-offset positional embedding, window x d.
    pub pos_embedding: Matrix<f32>,
    pub motion_proj: Layer<f32>,
    pub attn: [AttentionLayer; 2],
    pub gcn: DualGraphGcn,
    /// Global-position MLP 1 -> gps_hidden -> d.
    pub gps: Vec<Layer<f32>>,
    pub ssm: BidirectionalSsm,
    pub head: Layer<f32>,
}

/// Full anatomy forward pass over one window of CLS features.
pub fn anatomy_forward(
    cls_window: &Matrix<f32>,
    ctx: &WindowContext,
    w: &AnatomyWeights,
    cfg: &ModelConfig,
) -> Result<Matrix<f32>> {
    let t = cls_window.rows();
    if t == 0 {
        return Err(Error::InvalidInput("empty window".into()));
    }
    if t > w.pos_embedding.rows() {
        return Err(Error::ShapeMismatch(format!(
            "window length {t} exceeds positional embedding {}",
            w.pos_embedding.rows()
        )));
    }
    let mut h = w.input_proj.apply(cls_window)?;
    for frame in 0..t {
        let pos = w.pos_embedding.row(frame);
        for (v, p) in h.row_mut(frame).iter_mut().zip(pos) {
            *v += *p;
        }
    }
    let motion = w.motion_proj.apply(&cls_motion(cls_window))?;
    h = h.add(&motion)?;
    for layer in &w.attn {
        h = windowed_self_attention(&h, layer, cfg.attn_radius, cfg.heads)?;
    }
    h = w.gcn.apply(&h, cfg.sim_k, cfg.dist_radius)?;
    h = gps_inject(&h, ctx, &w.gps)?;
    h = bidirectional_mamba(&h, &w.ssm)?;
    w.head.apply(&h)
}
