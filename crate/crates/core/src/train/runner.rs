//! The training loop for the three stages: hybrid pretraining, supervised
//! finetuning and distillation into a smaller student.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{missing_rates, Cell, Dataset};
use crate::distill::{self, align_loss_graph, DistillConfig, TeacherCache};
use crate::embed::{FeatureLayout, Imputation, MaskMode};
use crate::encoder::{EncoderConfig, Preset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::moe::MoeConfig;
use crate::numerics::Graph;
use crate::objectives::{sample_masks, twin_batch, unlabeled_mlm, HybridConfig};
use crate::rng::stream;
use crate::train::checkpoint::{sha256_hex, Checkpoint};
use crate::train::{clip_global_norm, lr_at_step, optimizer_step, AdamState, AdamWConfig};

const BATCH_TAG: u64 = 0xba7c;
const ALIGN_INIT_TAG: u64 = 0xa11;
const NAME_SEED: u64 = 0x6e61_6d65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    HybridPretrain,
    Finetune,
    Distill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stage: Stage,
    pub preset: Preset,
    /// Overrides the preset shape when set.
    pub encoder: Option<EncoderConfig>,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Constant rate of the finetune stage.
    pub finetune_lr: f64,
    pub seed: u64,
    pub hybrid: HybridConfig,
    pub moe: Option<MoeConfig>,
    pub distill: DistillConfig,
    pub mask_mode: MaskMode,
    pub imputation: Imputation,
    /// Keep the reconstruction term while finetuning.
    pub finetune_mlm: bool,
    pub adamw: AdamWConfig,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::HybridPretrain,
            preset: Preset::Base,
            encoder: None,
            batch_size: 64,
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-4,
            final_lr: 1e-5,
            finetune_lr: 1e-5,
            seed: 0,
            hybrid: HybridConfig::default(),
            moe: Some(MoeConfig::default()),
            distill: DistillConfig::default(),
            mask_mode: MaskMode::Shared,
            imputation: Imputation::MissToken,
            finetune_mlm: false,
            adamw: AdamWConfig::default(),
            clip_norm: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::protocol("batch_size must be positive"));
        }
        // the finetune stage runs at a constant rate, so warmup does not apply
        if self.stage != Stage::Finetune && self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::protocol(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return Err(Error::protocol(format!(
                "need 0 <= final_lr ({}) <= peak_lr ({})",
                self.final_lr, self.peak_lr
            )));
        }
        if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::protocol("finetune_lr must be >= 0"));
        }
        self.hybrid.validate()?;
        if let Some(m) = &self.moe {
            m.validate()?;
        }
        if self.stage == Stage::Distill {
            self.distill.validate()?;
        }
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.encoder.clone().unwrap_or_else(|| self.preset.config())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&[&serde_json::to_vec(self)?]))
    }

    /// Learning rate of optimizer step `step` (0-based).
    pub fn lr(&self, step: u64) -> f64 {
        match self.stage {
            Stage::Finetune => self.finetune_lr,
            _ => lr_at_step(step + 1, self.total_steps, self.warmup_steps, self.peak_lr, self.final_lr),
        }
    }
}

/// One row of the metrics log. `l_mlm` is the labeled-batch reconstruction
/// loss; `combined` is the full objective that was optimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub l_mlm: f64,
    pub l_ce_recon: f64,
    pub l_ce_cls: f64,
    pub l_align: Option<f64>,
    pub combined: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// How many rows each data source handed to the optimizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DataAudit {
    pub labeled_rows: u64,
    pub unlabeled_rows: u64,
}

pub struct RunInputs<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: Option<&'a Dataset>,
    /// Starting model; required for finetuning.
    pub init: Option<Model>,
    /// Teacher embeddings; required for distillation.
    pub teacher: Option<&'a TeacherCache>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub audit: DataAudit,
}

/// Epoch-wise shuffled mini-batches. The trailing partial batch of an epoch
/// is dropped.
struct Batcher {
    n: usize,
    batch: usize,
    seed: u64,
    which: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64, which: u64) -> Self {
        Batcher {
            n,
            batch: batch.min(n),
            seed,
            which,
            epoch: 0,
            perm: Vec::new(),
            pos: n,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut stream(self.seed, &[BATCH_TAG, self.which, self.epoch]));
            self.epoch += 1;
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Fresh model for `labeled`: the layout and the adaptive-masking ceiling are
/// both fitted on these rows.
pub fn init_model(cfg: &RunConfig, labeled: &Dataset) -> Result<Model> {
    let label = labeled
        .schema
        .label
        .as_ref()
        .ok_or_else(|| Error::protocol("training data has no label column"))?;
    let layout = FeatureLayout::fit(&labeled.schema, labeled)?;
    let eta_max = missing_rates(labeled)?.eta_max;
    let config = ModelConfig {
        encoder: cfg.encoder_config(),
        task: label.kind,
        n_out: label.outputs(),
        mask_mode: cfg.mask_mode,
        imputation: cfg.imputation,
        moe: cfg.moe,
        name_seed: NAME_SEED,
    };
    Model::init(config, layout, eta_max, cfg.seed)
}

fn batch_of<'a>(ds: &'a Dataset, idx: &[usize]) -> (Vec<&'a [Cell]>, Vec<u64>) {
    (
        idx.iter().map(|&i| ds.rows[i].as_slice()).collect(),
        idx.iter().map(|&i| ds.row_ids[i]).collect(),
    )
}

pub fn run_stage(cfg: &RunConfig, inputs: RunInputs<'_>) -> Result<RunOutput> {
    cfg.validate()?;
    let labeled = inputs.labeled;
    let labels = labeled.labels()?;
    if labeled.is_empty() {
        return Err(Error::protocol("no labeled rows to train on"));
    }
    let mut model = match (cfg.stage, inputs.init) {
        (_, Some(m)) => m,
        (Stage::Finetune, None) => return Err(Error::protocol("finetune needs an input checkpoint")),
        (_, None) => init_model(cfg, labeled)?,
    };
    model.check_schema(&labeled.schema)?;

    let teacher = match cfg.stage {
        Stage::Distill => {
            let t = inputs
                .teacher
                .ok_or_else(|| Error::protocol("distill stage needs a teacher cache"))?;
            if !model.params.contains(distill::P_ALIGN_W) {
                distill::init_align_params(
                    &mut model.params,
                    model.config.h(),
                    t.d_t(),
                    &mut stream(cfg.seed, &[ALIGN_INIT_TAG]),
                )?;
                model.params.round_to_f32();
            }
            Some(t)
        }
        _ => None,
    };

    // the finetune stage never reads unlabeled rows
    let unlabeled = match cfg.stage {
        Stage::HybridPretrain => inputs.unlabeled.filter(|u| !u.is_empty()),
        _ => None,
    };
    if let Some(u) = unlabeled {
        model.check_schema(&u.schema)?;
    }

    let hybrid = match cfg.stage {
        Stage::Finetune if !cfg.finetune_mlm => HybridConfig {
            lambda: 0.0,
            recon_path_ce_weight: 0.0,
            ..cfg.hybrid
        },
        // distillation mixes the terms itself; lambda only switches paths on
        Stage::Distill => HybridConfig {
            lambda: if cfg.distill.lambda1 > 0.0 { 0.5 } else { 0.0 },
            ..cfg.hybrid
        },
        _ => cfg.hybrid,
    };

    let mut opt = AdamState::new(&model.params);
    let mut lab = Batcher::new(labeled.len(), cfg.batch_size, cfg.seed, 0);
    let mut unl = unlabeled.map(|u| Batcher::new(u.len(), cfg.batch_size, cfg.seed, 1));
    let mut audit = DataAudit::default();
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);

    for step in 0..cfg.total_steps {
        let lr = cfg.lr(step);
        let idx = lab.next();
        audit.labeled_rows += idx.len() as u64;
        let (rows, ids) = batch_of(labeled, &idx);
        let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let masks = if hybrid.uses_masked_path() {
            sample_masks(&rows, &ids, model.eta_max, &hybrid, cfg.seed, step)?
        } else {
            vec![Vec::new(); rows.len()]
        };

        let mut g = Graph::new();
        let tv = twin_batch(&mut g, &model, &rows, &y, &masks, &hybrid)?;
        let mut l_align = None;
        let objective = match cfg.stage {
            Stage::HybridPretrain => match (unlabeled, unl.as_mut()) {
                (Some(u), Some(b)) => {
                    let uidx = b.next();
                    audit.unlabeled_rows += uidx.len() as u64;
                    let (urows, uids) = batch_of(u, &uidx);
                    let umasks = sample_masks(&urows, &uids, model.eta_max, &hybrid, cfg.seed, step)?;
                    let um = unlabeled_mlm(&mut g, &model, &urows, &umasks)?;
                    g.add(tv.combined, um.total)?
                }
                _ => tv.combined,
            },
            Stage::Finetune => tv.combined,
            Stage::Distill => {
                let t = teacher.expect("checked above");
                let pooled = match tv.pooled_natural {
                    Some(p) => p,
                    None => model.natural_pooled(&mut g, &rows)?,
                };
                let align = align_loss_graph(&mut g, &model.params, pooled, t.targets(&ids)?)?;
                l_align = Some(align);
                let (d, w) = (&cfg.distill, cfg.hybrid.recon_path_ce_weight);
                g.linear_combination(&[
                    (tv.mlm.total, d.lambda1),
                    (tv.ce_recon, d.lambda2 * w),
                    (tv.ce_cls, d.lambda2 * (1.0 - w)),
                    (align, d.lambda3),
                ])?
            }
        };

        let total = g.value(objective).item();
        if !total.is_finite() {
            return Err(Error::numeric(format!("loss became {total} at step {step}")));
        }
        metrics.push(MetricsRow {
            step,
            lr,
            l_mlm: g.value(tv.mlm.total).item(),
            l_ce_recon: g.value(tv.ce_recon).item(),
            l_ce_cls: g.value(tv.ce_cls).item(),
            l_align: l_align.map(|a| g.value(a).item()),
            combined: total,
        });

        let mut grads = g.backward(objective)?;
        clip_global_norm(&mut grads, cfg.clip_norm);
        optimizer_step(&mut model.params, &grads, &mut opt, lr, &cfg.adamw)?;
        // keep everything on the f32 grid so checkpoints reload exactly
        model.params.round_to_f32();
        opt.m.values_mut().chain(opt.v.values_mut()).for_each(|t| t.round_to_f32());
    }

    Ok(RunOutput {
        checkpoint: Checkpoint {
            model,
            opt,
            step: cfg.total_steps,
            config_digest: cfg.digest()?,
        },
        metrics,
        audit,
    })
}
