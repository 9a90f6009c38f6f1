//! Teacher-to-student distillation: cached teacher row embeddings, an
//! up-projection of the student representation and cosine alignment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{truncated_normal, INIT_STD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{functional, Graph, ParamStore, Tensor, Var, COSINE_NORM_FLOOR};

pub const P_ALIGN_W: &str = "align.w";
pub const P_ALIGN_B: &str = "align.b";

const MANIFEST: &str = "manifest.json";
const EMBEDDINGS: &str = "embeddings.f32";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 0.2,
            lambda2: 0.4,
            lambda3: 0.4,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda3];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::protocol(format!("distillation weights must be >= 0, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::protocol(format!("distillation weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// `lambda1 * l_mlm + lambda2 * l_ce + lambda3 * l_align`.
pub fn distill_loss(l_mlm: f64, l_ce: f64, l_align: f64, cfg: &DistillConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.lambda1 * l_mlm + cfg.lambda2 * l_ce + cfg.lambda3 * l_align)
}

pub fn init_align_params(store: &mut ParamStore, d_s: usize, d_t: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert(P_ALIGN_W, Tensor::matrix(d_s, d_t, truncated_normal(d_s * d_t, INIT_STD, rng))?)?;
    store.insert(P_ALIGN_B, Tensor::zeros(vec![d_t]))?;
    Ok(())
}

/// `1 - cos(W_a z + b_a, e_t)` for one row; 1 when either side is degenerate.
pub fn align_loss(z_cls: &[f64], w: &Tensor, b: &Tensor, e_t: &[f64]) -> Result<f64> {
    let (d_s, d_t) = (w.rows(), w.cols());
    if z_cls.len() != d_s || e_t.len() != d_t || b.len() != d_t {
        return Err(Error::dimension(format!(
            "align_loss: z {} / W {d_s}x{d_t} / b {} / e_t {}",
            z_cls.len(),
            b.len(),
            e_t.len()
        )));
    }
    let z_a: Vec<f64> = (0..d_t)
        .map(|c| b.data()[c] + (0..d_s).map(|r| z_cls[r] * w.data()[r * d_t + c]).sum::<f64>())
        .collect();
    let (na, nt) = (functional::norm(&z_a), functional::norm(e_t));
    if na < COSINE_NORM_FLOOR || nt < COSINE_NORM_FLOOR {
        return Ok(1.0);
    }
    Ok(1.0 - functional::dot(&z_a, e_t) / (na * nt))
}

/// Batch-mean alignment loss on pooled student rows `[B, d_s]`.
pub fn align_loss_graph(g: &mut Graph, params: &ParamStore, pooled: Var, targets: Tensor) -> Result<Var> {
    let w = g.param(params, P_ALIGN_W)?;
    let b = g.param(params, P_ALIGN_B)?;
    let za = g.matmul(pooled, w)?;
    let za = g.add_row(za, b)?;
    let et = g.constant(targets);
    let cos = g.cosine_rows(za, et)?;
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    Ok(g.add_const(neg, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub teacher_digest: String,
    pub d_t: usize,
    pub row_count: usize,
    /// Row ids in file order (ascending).
    pub row_ids: Vec<u64>,
    pub preset: Option<String>,
    pub features: Vec<String>,
}

/// Teacher row embeddings keyed by row id, stored on the f32 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    pub manifest: CacheManifest,
    pub vectors: BTreeMap<u64, Vec<f64>>,
}

impl TeacherCache {
    pub fn d_t(&self) -> usize {
        self.manifest.d_t
    }

    pub fn get(&self, row_id: u64) -> Result<&[f64]> {
        self.vectors
            .get(&row_id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::protocol(format!("teacher cache has no row id {row_id}")))
    }

    /// Alignment targets of a batch as a `[B, d_t]` matrix.
    pub fn targets(&self, row_ids: &[u64]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(row_ids.len() * self.d_t());
        for &id in row_ids {
            data.extend_from_slice(self.get(id)?);
        }
        Tensor::matrix(row_ids.len(), self.d_t(), data)
    }

    /// Errors unless the cache was built from the teacher with this digest.
    pub fn verify(&self, teacher_digest: &str) -> Result<()> {
        if self.manifest.teacher_digest != teacher_digest {
            return Err(Error::protocol(format!(
                "stale teacher cache: built from {}, teacher is {}",
                self.manifest.teacher_digest, teacher_digest
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest_path = dir.join(MANIFEST);
        if manifest_path.exists() {
            let prior: CacheManifest = serde_json::from_slice(&fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?)?;
            if prior.d_t != self.d_t() {
                return Err(Error::protocol(format!(
                    "teacher cache width {} differs from existing cache width {} in {}",
                    self.d_t(),
                    prior.d_t,
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.vectors.len() * self.d_t() * 4);
        for v in self.vectors.values() {
            for &x in v {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let path = dir.join(EMBEDDINGS);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: CacheManifest =
            serde_json::from_slice(&fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?)?;
        let path = dir.join(EMBEDDINGS);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let d_t = manifest.d_t;
        if manifest.row_ids.len() != manifest.row_count || bytes.len() != manifest.row_count * d_t * 4 {
            return Err(Error::protocol(format!(
                "teacher cache {} is inconsistent: {} bytes for {} rows of width {d_t}",
                dir.display(),
                bytes.len(),
                manifest.row_count
            )));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let vectors = manifest
            .row_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, floats[i * d_t..(i + 1) * d_t].to_vec()))
            .collect();
        Ok(TeacherCache { manifest, vectors })
    }
}

/// Natural-path pooled teacher representation of every row.
pub fn cache_teacher(teacher: &Model, teacher_digest: &str, ds: &Dataset) -> Result<TeacherCache> {
    let rows = teacher.embed_rows(ds)?;
    let d_t = teacher.config.h();
    let mut vectors = BTreeMap::new();
    for (&id, v) in ds.row_ids.iter().zip(rows) {
        let v: Vec<f64> = v.into_iter().map(|x| x as f32 as f64).collect();
        if vectors.insert(id, v).is_some() {
            return Err(Error::protocol(format!("duplicate row id {id} in teacher data")));
        }
    }
    Ok(TeacherCache {
        manifest: CacheManifest {
            teacher_digest: teacher_digest.to_string(),
            d_t,
            row_count: vectors.len(),
            row_ids: vectors.keys().copied().collect(),
            preset: teacher.config.encoder.preset.map(|p| p.name().to_string()),
            features: teacher.layout.names(),
        },
        vectors,
    })
}
