//! Weight construction, serialization and the JSON manifests.
//!
//! Each branch stores one tensor file per parameter plus a manifest
//! (`anatomy.json` / `pathology.json`) mapping tensor names to files and
//! shapes. `init` draws Xavier-uniform weights from per-tensor streams
//! keyed by (seed, tensor name), so adding a tensor never reshuffles the
//! others. Decay parameters, skip coefficients and the positional
//! embedding follow their own documented inits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anatomy::{AnatomyWeights, AttentionLayer, BidirectionalSsm, DualGraphGcn, SsmBlock};
use crate::config::ModelConfig;
use crate::datasynth::{ANATOMY_CLASSES, PATHOLOGY_CLASSES};
use crate::error::{Error, Result};
use crate::pathology::{PathologyWeights, CONV_KERNEL};
use crate::rng::{fnv1a, SplitMix64};
use crate::tensorio::{load_tensor, load_vector, save_tensor, save_vector, Layer, Matrix};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Xavier-uniform matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix<f32> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.next_range_f64(-bound, bound) as f32;
    }
    m
}

fn named_rng(seed: u64, name: &str) -> SplitMix64 {
    SplitMix64::stream(seed, fnv1a(name))
}

fn xavier_named(seed: u64, name: &str, rows: usize, cols: usize) -> Matrix<f32> {
    xavier_matrix(rows, cols, &mut named_rng(seed, name))
}

fn xavier_layer(seed: u64, name: &str, rows: usize, cols: usize) -> Layer<f32> {
    Layer::new(xavier_named(seed, name, rows, cols), vec![0.0; cols]).unwrap()
}

fn zero_layer(rows: usize, cols: usize) -> Layer<f32> {
    Layer::new(Matrix::zeros(rows, cols), vec![0.0; cols]).unwrap()
}

/// Decay init: a[d][s] = -(s+1); strictly negative so the discretized
/// factor exp(delta * a) stays in (0,1).
fn decay_init(d: usize, s: usize) -> Matrix<f32> {
    let mut a = Matrix::zeros(d, s);
    for ch in 0..d {
        for j in 0..s {
            a.set(ch, j, -((j + 1) as f32));
        }
    }
    a
}

fn ssm_init(seed: u64, prefix: &str, d: usize, s: usize) -> SsmBlock {
    SsmBlock {
        a: decay_init(d, s),
        w_delta: xavier_layer(seed, &format!("{prefix}.w_delta.weight"), d, d),
        w_b: xavier_named(seed, &format!("{prefix}.w_b"), d, s),
        w_c: xavier_named(seed, &format!("{prefix}.w_c"), d, s),
        d_skip: vec![1.0; d],
    }
}

/// Multiplicative paths zeroed; decay stays at -1 so the block remains
/// a valid selective scan with zero output.
fn ssm_zeros(d: usize, s: usize) -> SsmBlock {
    SsmBlock {
        a: Matrix::full(d, s, -1.0),
        w_delta: zero_layer(d, d),
        w_b: Matrix::zeros(d, s),
        w_c: Matrix::zeros(d, s),
        d_skip: vec![0.0; d],
    }
}

impl AnatomyWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.hidden;
        let s = cfg.ssm_state;
        let mut pos = Matrix::zeros(cfg.window, d);
        let mut pos_rng = named_rng(seed, "anatomy.pos_embedding");
        for v in pos.data_mut() {
            *v = pos_rng.next_range_f64(-0.02, 0.02) as f32;
        }
        let attn = |i: usize, which: &str| {
            xavier_named(seed, &format!("anatomy.attn{i}.{which}"), d, d)
        };
        AnatomyWeights {
            input_proj: xavier_layer(seed, "anatomy.input_proj.weight", cfg.cls_dim, d),
            pos_embedding: pos,
            motion_proj: xavier_layer(seed, "anatomy.motion_proj.weight", cfg.cls_dim, d),
            attn: [
                AttentionLayer {
                    wq: attn(0, "wq"),
                    wk: attn(0, "wk"),
                    wv: attn(0, "wv"),
                    wo: attn(0, "wo"),
                },
                AttentionLayer {
                    wq: attn(1, "wq"),
                    wk: attn(1, "wk"),
                    wv: attn(1, "wv"),
                    wo: attn(1, "wo"),
                },
            ],
            gcn: DualGraphGcn {
                w_sim: xavier_named(seed, "anatomy.gcn.w_sim", d, d),
                w_dist: xavier_named(seed, "anatomy.gcn.w_dist", d, d),
                proj: xavier_layer(seed, "anatomy.gcn.proj.weight", 2 * d, d),
            },
            gps: vec![
                xavier_layer(seed, "anatomy.gps.0.weight", 1, cfg.gps_hidden),
                xavier_layer(seed, "anatomy.gps.1.weight", cfg.gps_hidden, d),
            ],
            ssm: BidirectionalSsm {
                fwd: ssm_init(seed, "anatomy.ssm.fwd", d, s),
                bwd: ssm_init(seed, "anatomy.ssm.bwd", d, s),
                merge: xavier_named(seed, "anatomy.ssm.merge", 2 * d, d),
                gate: xavier_named(seed, "anatomy.ssm.gate", d, d),
            },
            head: xavier_layer(seed, "anatomy.head.weight", d, ANATOMY_CLASSES),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let s = cfg.ssm_state;
        let zero_attn = || AttentionLayer {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        };
        AnatomyWeights {
            input_proj: zero_layer(cfg.cls_dim, d),
            pos_embedding: Matrix::zeros(cfg.window, d),
            motion_proj: zero_layer(cfg.cls_dim, d),
            attn: [zero_attn(), zero_attn()],
            gcn: DualGraphGcn {
                w_sim: Matrix::zeros(d, d),
                w_dist: Matrix::zeros(d, d),
                proj: zero_layer(2 * d, d),
            },
            gps: vec![zero_layer(1, cfg.gps_hidden), zero_layer(cfg.gps_hidden, d)],
            ssm: BidirectionalSsm {
                fwd: ssm_zeros(d, s),
                bwd: ssm_zeros(d, s),
                merge: Matrix::zeros(2 * d, d),
                gate: Matrix::zeros(d, d),
            },
            head: zero_layer(d, ANATOMY_CLASSES),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = Store::new(dir, "anatomy")?;
        store.layer("input_proj", &self.input_proj)?;
        store.matrix("pos_embedding", &self.pos_embedding)?;
        store.layer("motion_proj", &self.motion_proj)?;
        for (i, layer) in self.attn.iter().enumerate() {
            store.matrix(&format!("attn{i}.wq"), &layer.wq)?;
            store.matrix(&format!("attn{i}.wk"), &layer.wk)?;
            store.matrix(&format!("attn{i}.wv"), &layer.wv)?;
            store.matrix(&format!("attn{i}.wo"), &layer.wo)?;
        }
        store.gcn(&self.gcn)?;
        store.layer("gps.0", &self.gps[0])?;
        store.layer("gps.1", &self.gps[1])?;
        store.ssm("ssm.fwd", &self.ssm.fwd)?;
        store.ssm("ssm.bwd", &self.ssm.bwd)?;
        store.matrix("ssm.merge", &self.ssm.merge)?;
        store.matrix("ssm.gate", &self.ssm.gate)?;
        store.layer("head", &self.head)?;
        store.finish()
    }

    pub fn load(dir: &Path, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden;
        let s = cfg.ssm_state;
        let store = Loader::new(dir, "anatomy")?;
        let weights = AnatomyWeights {
            input_proj: store.layer("input_proj", cfg.cls_dim, d)?,
            pos_embedding: store.matrix("pos_embedding", cfg.window, d)?,
            motion_proj: store.layer("motion_proj", cfg.cls_dim, d)?,
            attn: [
                AttentionLayer {
                    wq: store.matrix("attn0.wq", d, d)?,
                    wk: store.matrix("attn0.wk", d, d)?,
                    wv: store.matrix("attn0.wv", d, d)?,
                    wo: store.matrix("attn0.wo", d, d)?,
                },
                AttentionLayer {
                    wq: store.matrix("attn1.wq", d, d)?,
                    wk: store.matrix("attn1.wk", d, d)?,
                    wv: store.matrix("attn1.wv", d, d)?,
                    wo: store.matrix("attn1.wo", d, d)?,
                },
            ],
            gcn: store.gcn(d)?,
            gps: vec![
                store.layer("gps.0", 1, cfg.gps_hidden)?,
                store.layer("gps.1", cfg.gps_hidden, d)?,
            ],
            ssm: BidirectionalSsm {
                fwd: store.ssm("ssm.fwd", d, s)?,
                bwd: store.ssm("ssm.bwd", d, s)?,
                merge: store.matrix("ssm.merge", 2 * d, d)?,
                gate: store.matrix("ssm.gate", d, d)?,
            },
            head: store.layer("head", d, ANATOMY_CLASSES)?,
        };
        weights.ssm.fwd.validate()?;
        weights.ssm.bwd.validate()?;
        Ok(weights)
    }
}

impl PathologyWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.hidden;
        let s = cfg.ssm_state;
        PathologyWeights {
            dev_proj: xavier_layer(seed, "pathology.dev_proj.weight", cfg.patch_dim, d),
            motion_proj: xavier_layer(seed, "pathology.motion_proj.weight", cfg.patch_dim, d),
            content_proj: xavier_layer(seed, "pathology.content_proj.weight", cfg.patch_dim, d),
            gcn: DualGraphGcn {
                w_sim: xavier_named(seed, "pathology.gcn.w_sim", d, d),
                w_dist: xavier_named(seed, "pathology.gcn.w_dist", d, d),
                proj: xavier_layer(seed, "pathology.gcn.proj.weight", 2 * d, d),
            },
            conv_depthwise: xavier_named(seed, "pathology.conv.depthwise", d, CONV_KERNEL),
            conv_pointwise: xavier_layer(seed, "pathology.conv.pointwise.weight", d, d),
            ssm: ssm_init(seed, "pathology.ssm", d, s),
            fusion: xavier_layer(seed, "pathology.fusion.weight", 3 * d, d),
            cond: vec![
                xavier_layer(seed, "pathology.cond.0.weight", ANATOMY_CLASSES, cfg.cond_hidden),
                xavier_layer(seed, "pathology.cond.1.weight", cfg.cond_hidden, d),
            ],
            head: xavier_layer(seed, "pathology.head.weight", d, PATHOLOGY_CLASSES),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let s = cfg.ssm_state;
        PathologyWeights {
            dev_proj: zero_layer(cfg.patch_dim, d),
            motion_proj: zero_layer(cfg.patch_dim, d),
            content_proj: zero_layer(cfg.patch_dim, d),
            gcn: DualGraphGcn {
                w_sim: Matrix::zeros(d, d),
                w_dist: Matrix::zeros(d, d),
                proj: zero_layer(2 * d, d),
            },
            conv_depthwise: Matrix::zeros(d, CONV_KERNEL),
            conv_pointwise: zero_layer(d, d),
            ssm: ssm_zeros(d, s),
            fusion: zero_layer(3 * d, d),
            cond: vec![
                zero_layer(ANATOMY_CLASSES, cfg.cond_hidden),
                zero_layer(cfg.cond_hidden, d),
            ],
            head: zero_layer(d, PATHOLOGY_CLASSES),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = Store::new(dir, "pathology")?;
        store.layer("dev_proj", &self.dev_proj)?;
        store.layer("motion_proj", &self.motion_proj)?;
        store.layer("content_proj", &self.content_proj)?;
        store.gcn(&self.gcn)?;
        store.matrix("conv.depthwise", &self.conv_depthwise)?;
        store.layer("conv.pointwise", &self.conv_pointwise)?;
        store.ssm("ssm", &self.ssm)?;
        store.layer("fusion", &self.fusion)?;
        store.layer("cond.0", &self.cond[0])?;
        store.layer("cond.1", &self.cond[1])?;
        store.layer("head", &self.head)?;
        store.finish()
    }

    pub fn load(dir: &Path, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden;
        let s = cfg.ssm_state;
        let store = Loader::new(dir, "pathology")?;
        let weights = PathologyWeights {
            dev_proj: store.layer("dev_proj", cfg.patch_dim, d)?,
            motion_proj: store.layer("motion_proj", cfg.patch_dim, d)?,
            content_proj: store.layer("content_proj", cfg.patch_dim, d)?,
            gcn: store.gcn(d)?,
            conv_depthwise: store.matrix("conv.depthwise", d, CONV_KERNEL)?,
            conv_pointwise: store.layer("conv.pointwise", d, d)?,
            ssm: store.ssm("ssm", d, s)?,
            fusion: store.layer("fusion", 3 * d, d)?,
            cond: vec![
                store.layer("cond.0", ANATOMY_CLASSES, cfg.cond_hidden)?,
                store.layer("cond.1", cfg.cond_hidden, d)?,
            ],
            head: store.layer("head", d, PATHOLOGY_CLASSES)?,
        };
        weights.ssm.validate()?;
        Ok(weights)
    }
}

struct Store<'a> {
    dir: &'a Path,
    branch: &'static str,
    manifest: Manifest,
}

impl<'a> Store<'a> {
    fn new(dir: &'a Path, branch: &'static str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Store {
            dir,
            branch,
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                tensors: BTreeMap::new(),
            },
        })
    }

    fn matrix(&mut self, name: &str, m: &Matrix<f32>) -> Result<()> {
        let file = format!("{}.{}.ten", self.branch, name);
        save_tensor(&self.dir.join(&file), m)?;
        self.manifest.tensors.insert(
            name.to_string(),
            TensorEntry {
                file,
                shape: vec![m.rows() as u64, m.cols() as u64],
            },
        );
        Ok(())
    }

    fn vector(&mut self, name: &str, v: &[f32]) -> Result<()> {
        let file = format!("{}.{}.ten", self.branch, name);
        save_vector(&self.dir.join(&file), v)?;
        self.manifest.tensors.insert(
            name.to_string(),
            TensorEntry {
                file,
                shape: vec![v.len() as u64],
            },
        );
        Ok(())
    }

    fn layer(&mut self, name: &str, layer: &Layer<f32>) -> Result<()> {
        self.matrix(&format!("{name}.weight"), &layer.weight)?;
        self.vector(&format!("{name}.bias"), &layer.bias)
    }

    fn gcn(&mut self, gcn: &DualGraphGcn) -> Result<()> {
        self.matrix("gcn.w_sim", &gcn.w_sim)?;
        self.matrix("gcn.w_dist", &gcn.w_dist)?;
        self.layer("gcn.proj", &gcn.proj)
    }

    fn ssm(&mut self, prefix: &str, blk: &SsmBlock) -> Result<()> {
        self.matrix(&format!("{prefix}.a"), &blk.a)?;
        self.layer(&format!("{prefix}.w_delta"), &blk.w_delta)?;
        self.matrix(&format!("{prefix}.w_b"), &blk.w_b)?;
        self.matrix(&format!("{prefix}.w_c"), &blk.w_c)?;
        self.vector(&format!("{prefix}.d_skip"), &blk.d_skip)
    }

    fn finish(self) -> Result<()> {
        let path = self.dir.join(format!("{}.json", self.branch));
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

struct Loader {
    dir: PathBuf,
    manifest: Manifest,
}

impl Loader {
    fn new(dir: &Path, branch: &str) -> Result<Self> {
        let path = dir.join(format!("{branch}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "manifest format {} unsupported",
                manifest.format
            )));
        }
        Ok(Loader {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn entry(&self, name: &str, shape: &[u64]) -> Result<PathBuf> {
        let entry = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::DataMismatch(format!("manifest missing tensor '{name}'")))?;
        if entry.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{name}' manifest shape {:?}, expected {:?}",
                entry.shape, shape
            )));
        }
        Ok(self.dir.join(&entry.file))
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let path = self.entry(name, &[rows as u64, cols as u64])?;
        let m: Matrix<f32> = load_tensor(&path)?;
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{name}' file shape {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("tensor '{name}'")));
        }
        Ok(m)
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let path = self.entry(name, &[len as u64])?;
        let v = load_vector(&path)?;
        if v.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "vector '{name}' length {}, expected {len}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("vector '{name}'")));
        }
        Ok(v)
    }

    fn layer(&self, name: &str, rows: usize, cols: usize) -> Result<Layer<f32>> {
        Layer::new(
            self.matrix(&format!("{name}.weight"), rows, cols)?,
            self.vector(&format!("{name}.bias"), cols)?,
        )
    }

    fn gcn(&self, d: usize) -> Result<DualGraphGcn> {
        Ok(DualGraphGcn {
            w_sim: self.matrix("gcn.w_sim", d, d)?,
            w_dist: self.matrix("gcn.w_dist", d, d)?,
            proj: self.layer("gcn.proj", 2 * d, d)?,
        })
    }

    fn ssm(&self, prefix: &str, d: usize, s: usize) -> Result<SsmBlock> {
        Ok(SsmBlock {
            a: self.matrix(&format!("{prefix}.a"), d, s)?,
            w_delta: self.layer(&format!("{prefix}.w_delta"), d, d)?,
            w_b: self.matrix(&format!("{prefix}.w_b"), d, s)?,
            w_c: self.matrix(&format!("{prefix}.w_c"), d, s)?,
            d_skip: self.vector(&format!("{prefix}.d_skip"), d)?,
        })
    }
}

/// Prototype files: `prototypes.ten` (means) + `prototypes.json` (support).
#[derive(Debug, Serialize, Deserialize)]
pub struct PrototypeMeta {
    pub support: Vec<u64>,
    pub patch_dim: usize,
}

pub fn save_prototypes(dir: &Path, protos: &crate::pathology::AnatomyPrototypes) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tensor(&dir.join("prototypes.ten"), &protos.means)?;
    let meta = PrototypeMeta {
        support: protos.support.to_vec(),
        patch_dim: protos.means.cols(),
    };
    let path = dir.join("prototypes.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_prototypes(dir: &Path) -> Result<crate::pathology::AnatomyPrototypes> {
    let means: Matrix<f32> = load_tensor(&dir.join("prototypes.ten"))?;
    let path = dir.join("prototypes.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: PrototypeMeta = serde_json::from_str(&text)?;
    if means.rows() != ANATOMY_CLASSES || meta.support.len() != ANATOMY_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "prototypes {}x{}, support {}",
            means.rows(),
            means.cols(),
            meta.support.len()
        )));
    }
    let mut support = [0u64; ANATOMY_CLASSES];
    support.copy_from_slice(&meta.support);
    Ok(crate::pathology::AnatomyPrototypes { means, support })
}
