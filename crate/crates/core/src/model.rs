//! A full model: feature layout, embeddings, encoder, task head and the
//! reconstruction head, all parameters in one named store.

use serde::{Deserialize, Serialize};

use crate::data::{Cell, Dataset, FeatureSchema, LabelKind};
use crate::embed::{self, FeatureLayout, Imputation, MaskMode, NameEmbeddingTable};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::moe::{self, MoeConfig};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::objectives;
use crate::rng::stream;

const INIT_TAG: u64 = 0x1417;
/// Rows per frozen forward pass during inference.
const INFER_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub task: LabelKind,
    pub n_out: usize,
    pub mask_mode: MaskMode,
    pub imputation: Imputation,
    pub moe: Option<MoeConfig>,
    /// Seed of the frozen name embeddings.
    pub name_seed: u64,
}

impl ModelConfig {
    pub fn h(&self) -> usize {
        self.encoder.d_model
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: FeatureLayout,
    pub names: NameEmbeddingTable,
    pub params: ParamStore,
    /// Largest instance missing ratio on the training rows, for adaptive masking.
    pub eta_max: f64,
}

impl Model {
    pub fn init(config: ModelConfig, layout: FeatureLayout, eta_max: f64, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if config.n_out == 0 {
            return Err(Error::protocol("model needs at least one output"));
        }
        let h = config.h();
        let mut params = ParamStore::new();
        embed::init_embedding_params(&mut params, &layout, h, config.mask_mode, &mut stream(seed, &[INIT_TAG, 1]))?;
        encoder::init_encoder_params(&mut params, &config.encoder, &mut stream(seed, &[INIT_TAG, 2]))?;
        encoder::init_head_params(&mut params, h, config.n_out, &mut stream(seed, &[INIT_TAG, 3]))?;
        objectives::init_decoder_params(&mut params, h, config.moe.is_none(), &mut stream(seed, &[INIT_TAG, 4]))?;
        if let Some(m) = &config.moe {
            moe::init_moe_params(&mut params, h, m, &mut stream(seed, &[INIT_TAG, 5]))?;
        }
        // parameters live on the f32 grid so checkpoints round-trip exactly
        params.round_to_f32();
        Ok(Self::from_parts(config, layout, params, eta_max))
    }

    pub fn from_parts(config: ModelConfig, layout: FeatureLayout, params: ParamStore, eta_max: f64) -> Self {
        let names = NameEmbeddingTable::new(&layout.names(), config.h(), config.name_seed);
        Model {
            config,
            layout,
            names,
            params,
            eta_max,
        }
    }

    pub fn d(&self) -> usize {
        self.layout.d()
    }

    /// Checks that `schema` lists this model's features in order.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        let names: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
        let ours: Vec<&str> = self.layout.features.iter().map(|f| f.name.as_str()).collect();
        if names != ours {
            return Err(Error::protocol(format!(
                "dataset features {names:?} do not match model features {ours:?}"
            )));
        }
        Ok(())
    }

    /// Applies the configured imputation; identity for the `[MISS]` token.
    pub fn prepare(&self, rows: &[&[Cell]]) -> Vec<Vec<Cell>> {
        rows.iter()
            .map(|r| match self.config.imputation {
                Imputation::MissToken => r.to_vec(),
                imp => self.layout.impute(r, imp),
            })
            .collect()
    }

    /// Token matrix `[B * d, h]` for already prepared rows.
    pub fn embed(&self, g: &mut Graph, rows: &[Vec<Cell>], masks: &[&[usize]]) -> Result<Var> {
        let refs: Vec<&[Cell]> = rows.iter().map(|r| r.as_slice()).collect();
        embed::embed_batch(g, &self.layout, &self.names, &self.params, self.config.mask_mode, &refs, masks)
    }

    /// Encoded tokens `Z: [B * d, h]` for prepared rows.
    pub fn encode(&self, g: &mut Graph, rows: &[Vec<Cell>], masks: &[&[usize]]) -> Result<Var> {
        let h = self.embed(g, rows, masks)?;
        encoder::encoder_forward(g, &self.params, &self.config.encoder, h, self.d())
    }

    /// Natural-path pooled representation `[B, h]` of raw rows.
    pub fn natural_pooled(&self, g: &mut Graph, rows: &[&[Cell]]) -> Result<Var> {
        let prepared = self.prepare(rows);
        let none: Vec<&[usize]> = vec![&[]; rows.len()];
        let z = self.encode(g, &prepared, &none)?;
        encoder::pool(g, z, self.d())
    }

    fn infer<F>(&self, ds: &Dataset, mut f: F) -> Result<Vec<Vec<f64>>>
    where
        F: FnMut(&mut Graph, Var) -> Result<Var>,
    {
        self.check_schema(&ds.schema)?;
        let mut out = Vec::with_capacity(ds.len());
        for chunk in ds.rows.chunks(INFER_CHUNK) {
            let mut g = Graph::frozen();
            let refs: Vec<&[Cell]> = chunk.iter().map(|r| r.as_slice()).collect();
            let pooled = self.natural_pooled(&mut g, &refs)?;
            let y = f(&mut g, pooled)?;
            let t = g.value(y);
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Natural-path head outputs per row (logits, or the regression value).
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.infer(ds, |g, pooled| encoder::classify(g, &self.params, pooled))
    }

    /// One ranking score per row: the logit for binary tasks, the
    /// prediction for regression.
    pub fn scores(&self, ds: &Dataset) -> Result<Vec<f64>> {
        if self.config.n_out != 1 {
            return Err(Error::protocol("scores need a single-output head"));
        }
        Ok(self.predict(ds)?.into_iter().map(|v| v[0]).collect())
    }

    /// Natural-path pooled representation per row.
    pub fn embed_rows(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.infer(ds, |_, pooled| Ok(pooled))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }
}
