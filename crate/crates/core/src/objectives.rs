//! Loss algebra: type-aware masked reconstruction, the task loss, twin-path
//! orchestration and the hybrid labeled/unlabeled combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{instance_missing_ratio, Cell, FeatureKind, LabelKind};
use crate::embed::{adaptive_mask_rate, sample_mask, DEFAULT_ALPHA_MASK, DEFAULT_R_MAX, P_CAT};
use crate::encoder::{self, linear, truncated_normal, INIT_STD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::moe;
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::rng::stream;

pub const P_MLM_W: &str = "mlm.w";
pub const P_MLM_B: &str = "mlm.b";
pub const P_NUM_OUT_W: &str = "mlm.num_out.w";
pub const P_NUM_OUT_B: &str = "mlm.num_out.b";

const MASK_TAG: u64 = 0x3a5c;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    /// Weight of the reconstruction loss in the supervised mix.
    pub lambda: f64,
    /// Share of the task loss taken from the masked path.
    pub recon_path_ce_weight: f64,
    pub r_max: f64,
    pub alpha_mask: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            lambda: 0.5,
            recon_path_ce_weight: 0.5,
            r_max: DEFAULT_R_MAX,
            alpha_mask: DEFAULT_ALPHA_MASK,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("recon_path_ce_weight", self.recon_path_ce_weight),
            ("r_max", self.r_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::protocol(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.alpha_mask > 0.0 && self.alpha_mask.is_finite()) {
            return Err(Error::protocol("alpha_mask must be positive"));
        }
        Ok(())
    }

    /// Whether the masked path contributes anything to the loss.
    pub fn uses_masked_path(&self) -> bool {
        self.lambda > 0.0 || self.recon_path_ce_weight > 0.0
    }

    /// Whether the natural path contributes anything to the loss.
    pub fn uses_natural_path(&self) -> bool {
        self.lambda < 1.0 && self.recon_path_ce_weight < 1.0
    }
}

/// Per-term losses of one batch and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mlm: f64,
    pub l_ce_recon: f64,
    pub l_ce_cls: f64,
    pub l_align: Option<f64>,
    pub combined: f64,
}

/// Reconstruction head (plain affine map) and the shared numerical readout.
pub fn init_decoder_params(store: &mut ParamStore, h: usize, plain_head: bool, rng: &mut impl Rng) -> Result<()> {
    if plain_head {
        store.insert(P_MLM_W, Tensor::matrix(h, h, truncated_normal(h * h, INIT_STD, rng))?)?;
        store.insert(P_MLM_B, Tensor::zeros(vec![h]))?;
    }
    store.insert(P_NUM_OUT_W, Tensor::matrix(h, 1, truncated_normal(h, INIT_STD, rng))?)?;
    store.insert(P_NUM_OUT_B, Tensor::zeros(vec![1]))?;
    Ok(())
}

/// The masked cells of a batch, flattened in (row, feature) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskedTargets {
    /// Row of `Z` holding each masked token.
    pub token_rows: Vec<usize>,
    pub features: Vec<usize>,
    pub cells: Vec<Cell>,
    /// `1 / (|M_row| * B)`: a per-row mean, averaged over the batch.
    pub weights: Vec<f64>,
}

impl MaskedTargets {
    pub fn new(rows: &[Vec<Cell>], masks: &[&[usize]], d: usize) -> Self {
        let b = rows.len() as f64;
        let mut t = MaskedTargets::default();
        for (i, (row, mask)) in rows.iter().zip(masks).enumerate() {
            for &k in mask.iter() {
                t.token_rows.push(i * d + k);
                t.features.push(k);
                t.cells.push(row[k]);
                t.weights.push(1.0 / (mask.len() as f64 * b));
            }
        }
        t
    }

    pub fn is_empty(&self) -> bool {
        self.token_rows.is_empty()
    }
}

/// Type-aware decoding of `pred: [n, h]` against the masked targets:
/// squared error of a shared scalar readout for numerical cells and
/// cross-entropy over dot-product scores with the feature's category
/// embeddings for categorical cells. Returns the weighted sum.
pub fn decode_loss(g: &mut Graph, model: &Model, pred: Var, t: &MaskedTargets) -> Result<Var> {
    let layout = &model.layout;
    let (mut num_idx, mut num_tgt, mut num_w) = (Vec::new(), Vec::new(), Vec::new());
    let (mut cat_idx, mut spans, mut cat_tgt, mut cat_w) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (j, (&k, cell)) in t.features.iter().zip(&t.cells).enumerate() {
        let f = &layout.features[k];
        match (*cell, f.kind) {
            (Cell::Num(v), FeatureKind::Numerical) => {
                num_idx.push(j);
                num_tgt.push(layout.standardize(k, v));
                num_w.push(t.weights[j]);
            }
            (Cell::Cat(c), FeatureKind::Categorical) if (c as usize) < f.vocab_len => {
                cat_idx.push(j);
                spans.push((f.slot, f.vocab_len));
                cat_tgt.push(c as usize);
                cat_w.push(t.weights[j]);
            }
            _ => {
                return Err(Error::Encoding(format!(
                    "feature `{}`: masked target {cell:?} cannot be decoded",
                    f.name
                )))
            }
        }
    }
    let mut terms = Vec::new();
    if !num_idx.is_empty() {
        let p = g.gather_rows(pred, num_idx)?;
        let y = linear(g, &model.params, p, P_NUM_OUT_W, P_NUM_OUT_B)?;
        terms.push((g.weighted_sq_err(y, num_tgt, num_w)?, 1.0));
    }
    if !cat_idx.is_empty() {
        let p = g.gather_rows(pred, cat_idx)?;
        let bank = g.param(&model.params, P_CAT)?;
        terms.push((g.dot_score_ce(p, bank, spans, cat_tgt, cat_w)?, 1.0));
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.linear_combination(&terms)
}

/// Reconstruction losses of one batch; `shared`/`routed` are set with MoE.
#[derive(Debug, Clone, Copy)]
pub struct MlmVars {
    pub total: Var,
    pub shared: Option<Var>,
    pub routed: Option<Var>,
}

/// Masked reconstruction loss on encoded tokens `z: [B * d, h]`; zero when
/// nothing is masked.
pub fn mlm_loss(g: &mut Graph, model: &Model, z: Var, t: &MaskedTargets) -> Result<MlmVars> {
    if t.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(MlmVars {
            total: zero,
            shared: None,
            routed: None,
        });
    }
    let zm = g.gather_rows(z, t.token_rows.clone())?;
    match &model.config.moe {
        Some(cfg) => moe::moe_mlm_loss(g, model, cfg, zm, t),
        None => {
            let pred = linear(g, &model.params, zm, P_MLM_W, P_MLM_B)?;
            Ok(MlmVars {
                total: decode_loss(g, model, pred, t)?,
                shared: None,
                routed: None,
            })
        }
    }
}

/// Batch-mean task loss: sigmoid BCE, softmax CE or squared error.
pub fn ce_loss(g: &mut Graph, out: Var, labels: &[f64], task: LabelKind) -> Result<Var> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::protocol("task loss of an empty batch"));
    }
    let w = vec![1.0 / b as f64; b];
    match task {
        LabelKind::Binary => g.bce_logits(out, labels.to_vec(), w),
        LabelKind::Regression => g.weighted_sq_err(out, labels.to_vec(), w),
        LabelKind::MultiClass => {
            let n = g.value(out).cols();
            let idx = labels
                .iter()
                .map(|&y| {
                    if y >= 0.0 && y.fract() == 0.0 && (y as usize) < n {
                        Ok(y as usize)
                    } else {
                        Err(Error::protocol(format!("class label {y} outside 0..{n}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            g.softmax_ce(out, idx, w)
        }
    }
}

/// Adaptive per-row masks, each drawn from a stream keyed by
/// `(seed, step, row id)` so batch order never changes them.
pub fn sample_masks(
    rows: &[&[Cell]],
    row_ids: &[u64],
    eta_max: f64,
    cfg: &HybridConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<Vec<usize>>> {
    rows.iter()
        .zip(row_ids)
        .map(|(row, &id)| {
            // rows outside the fitted data may exceed eta_max
            let eta = instance_missing_ratio(row).min(eta_max);
            let rate = adaptive_mask_rate(eta, eta_max, cfg.r_max, cfg.alpha_mask)?;
            Ok(sample_mask(row, rate, &mut stream(seed, &[MASK_TAG, step, id])))
        })
        .collect()
}

/// Graph nodes of one twin-path evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TwinVars {
    pub mlm: MlmVars,
    pub ce_recon: Var,
    pub ce_cls: Var,
    pub combined: Var,
    /// Natural-path pooled representation, when that path ran.
    pub pooled_natural: Option<Var>,
}

/// Masked path for reconstruction (and optionally the task loss) plus the
/// natural path for the task loss, through the same parameters.
///
/// `combined = lambda * l_mlm + (1 - lambda) * (w * ce_recon + (1 - w) * ce_cls)`.
/// A path whose every coefficient is zero is skipped and reports 0.
pub fn twin_batch(
    g: &mut Graph,
    model: &Model,
    rows: &[&[Cell]],
    labels: &[f64],
    masks: &[Vec<usize>],
    cfg: &HybridConfig,
) -> Result<TwinVars> {
    if rows.len() != labels.len() || rows.len() != masks.len() {
        return Err(Error::dimension("twin_batch: rows, labels and masks differ in length"));
    }
    let d = model.d();
    let prepared = model.prepare(rows);
    let task = model.config.task;
    let zero = g.constant(Tensor::scalar(0.0));

    let (mlm, ce_recon) = if cfg.uses_masked_path() {
        let mrefs: Vec<&[usize]> = masks.iter().map(|m| m.as_slice()).collect();
        let z = model.encode(g, &prepared, &mrefs)?;
        let t = MaskedTargets::new(&prepared, &mrefs, d);
        let mlm = mlm_loss(g, model, z, &t)?;
        let pooled = encoder::pool(g, z, d)?;
        let out = encoder::classify(g, &model.params, pooled)?;
        (mlm, ce_loss(g, out, labels, task)?)
    } else {
        let none = MlmVars {
            total: zero,
            shared: None,
            routed: None,
        };
        (none, zero)
    };

    let (ce_cls, pooled_natural) = if cfg.uses_natural_path() {
        let none: Vec<&[usize]> = vec![&[]; rows.len()];
        let z = model.encode(g, &prepared, &none)?;
        let pooled = encoder::pool(g, z, d)?;
        let out = encoder::classify(g, &model.params, pooled)?;
        (ce_loss(g, out, labels, task)?, Some(pooled))
    } else {
        (zero, None)
    };

    let (l, w) = (cfg.lambda, cfg.recon_path_ce_weight);
    let combined = g.linear_combination(&[
        (mlm.total, l),
        (ce_recon, (1.0 - l) * w),
        (ce_cls, (1.0 - l) * (1.0 - w)),
    ])?;
    Ok(TwinVars {
        mlm,
        ce_recon,
        ce_cls,
        combined,
        pooled_natural,
    })
}

/// Batch-mean reconstruction loss of unlabeled rows.
pub fn unlabeled_mlm(g: &mut Graph, model: &Model, rows: &[&[Cell]], masks: &[Vec<usize>]) -> Result<MlmVars> {
    let prepared = model.prepare(rows);
    let mrefs: Vec<&[usize]> = masks.iter().map(|m| m.as_slice()).collect();
    let z = model.encode(g, &prepared, &mrefs)?;
    let t = MaskedTargets::new(&prepared, &mrefs, model.d());
    mlm_loss(g, model, z, &t)
}

impl LossBreakdown {
    pub fn from_twin(g: &Graph, v: &TwinVars) -> Self {
        LossBreakdown {
            l_mlm: g.value(v.mlm.total).item(),
            l_ce_recon: g.value(v.ce_recon).item(),
            l_ce_cls: g.value(v.ce_cls).item(),
            l_align: None,
            combined: g.value(v.combined).item(),
        }
    }
}

/// Twin-path losses of a single labeled row, masking with `rng`.
pub fn twin_forward(model: &Model, row: &[Cell], y: f64, cfg: &HybridConfig, rng: &mut impl Rng) -> Result<LossBreakdown> {
    cfg.validate()?;
    let eta = instance_missing_ratio(row).min(model.eta_max);
    let rate = adaptive_mask_rate(eta, model.eta_max, cfg.r_max, cfg.alpha_mask)?;
    let mask = sample_mask(row, rate, rng);
    let mut g = Graph::frozen();
    let v = twin_batch(&mut g, model, &[row], &[y], &[mask], cfg)?;
    Ok(LossBreakdown::from_twin(&g, &v))
}

/// Mean supervised combined loss plus mean unlabeled reconstruction loss.
pub fn hybrid_batch_loss(sup: &[f64], unsup: &[f64]) -> Result<f64> {
    if sup.is_empty() && unsup.is_empty() {
        return Err(Error::protocol("hybrid loss needs a labeled or an unlabeled batch"));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(mean(sup) + mean(unsup))
}
