//! Checkpoint directory: `manifest.json`, `params.f32` (parameters in name
//! order, little-endian f32) and `opt_state.f32` (first then second moment
//! of each parameter, same order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::FeatureLayout;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::train::AdamState;

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.f32";
const OPT_STATE: &str = "opt_state.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config_digest: String,
    pub digest: String,
    pub eta_max: f64,
    pub model: ModelConfig,
    pub layout: FeatureLayout,
    pub params: Vec<ParamEntry>,
    pub opt_step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: AdamState,
    pub step: u64,
    pub config_digest: String,
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn f32_bytes<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::protocol(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Identity of a model: its parameters, configuration and feature layout.
pub fn model_digest(model: &Model) -> Result<String> {
    let params = f32_bytes(model.params.iter().map(|(_, t)| t));
    let cfg = serde_json::to_vec(&model.config)?;
    let layout = serde_json::to_vec(&model.layout)?;
    Ok(sha256_hex(&[&params, &cfg, &layout]))
}

impl Checkpoint {
    pub fn digest(&self) -> Result<String> {
        model_digest(&self.model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = &self.model.params;
        let manifest = CheckpointManifest {
            step: self.step,
            config_digest: self.config_digest.clone(),
            digest: self.digest()?,
            eta_max: self.model.eta_max,
            model: self.model.config.clone(),
            layout: self.model.layout.clone(),
            params: params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            opt_step: self.opt.step,
        };
        let mut opt = Vec::new();
        for (name, t) in params.iter() {
            let zeros = Tensor::zeros(t.shape().to_vec());
            let m = self.opt.m.get(name).unwrap_or(&zeros);
            let v = self.opt.v.get(name).unwrap_or(&zeros);
            opt.extend(f32_bytes([m, v].into_iter()));
        }
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(PARAMS, &f32_bytes(params.iter().map(|(_, t)| t)))?;
        write(OPT_STATE, &opt)?;
        write(MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found"),
            ));
        }
        let mp = dir.join(MANIFEST);
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&mp).map_err(|e| Error::io(&mp, e))?)?;
        let values = read_f32(&dir.join(PARAMS))?;
        let opt_values = read_f32(&dir.join(OPT_STATE))?;
        let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if values.len() != total || opt_values.len() != 2 * total {
            return Err(Error::protocol(format!(
                "checkpoint {} payload sizes do not match its manifest",
                dir.display()
            )));
        }
        let mut params = ParamStore::new();
        let mut opt = AdamState {
            step: manifest.opt_step,
            ..AdamState::default()
        };
        let (mut off, mut ooff) = (0, 0);
        for p in &manifest.params {
            let n: usize = p.shape.iter().product();
            params.insert(p.name.clone(), Tensor::new(p.shape.clone(), values[off..off + n].to_vec())?)?;
            opt.m.insert(p.name.clone(), Tensor::new(p.shape.clone(), opt_values[ooff..ooff + n].to_vec())?);
            opt.v.insert(p.name.clone(), Tensor::new(p.shape.clone(), opt_values[ooff + n..ooff + 2 * n].to_vec())?);
            off += n;
            ooff += 2 * n;
        }
        let model = Model::from_parts(manifest.model, manifest.layout, params, manifest.eta_max);
        let ckpt = Checkpoint {
            model,
            opt,
            step: manifest.step,
            config_digest: manifest.config_digest,
        };
        if ckpt.digest()? != manifest.digest {
            return Err(Error::protocol(format!("checkpoint {} failed its digest check", dir.display())));
        }
        Ok(ckpt)
    }
}
