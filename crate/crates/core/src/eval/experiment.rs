//! Train-then-score harnesses: the ablation ladder, the scaling sweep and
//! the teacher-student pipeline.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{feature_groups, rank_features, temporal_split, Dataset, Month};
use crate::distill::{self, cache_teacher, TeacherCache};
use crate::embed::{Imputation, MaskMode};
use crate::encoder::{param_count, Preset};
use crate::error::{Error, Result};
use crate::eval::report::monthly_oot_report;
use crate::model::Model;
use crate::moe::MoeConfig;
use crate::numerics::Graph;
use crate::train::{model_digest, run_stage, scale_lr, RunConfig, RunInputs, Stage};

/// Runs `f` over `items` on up to `threads` workers; results keep input order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Labeled training rows, the unlabeled pool and the monthly out-of-time
/// buckets.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub unlabeled: Dataset,
    pub oot: Vec<(Month, Dataset)>,
}

impl ExperimentData {
    /// Rows before `boundaries[0]` train; rows from `boundaries[1]` on form
    /// the monthly test buckets. The span in between is left out.
    pub fn split(labeled: &Dataset, unlabeled: &Dataset, boundaries: &[NaiveDate]) -> Result<Self> {
        let s = temporal_split(labeled, boundaries)?;
        if s.train.is_empty() || s.monthly.is_empty() {
            return Err(Error::protocol("temporal split left no training or out-of-time rows"));
        }
        Ok(ExperimentData {
            train: s.train,
            unlabeled: unlabeled.clone(),
            oot: s.monthly,
        })
    }

    pub fn select_features(&self, names: &[String]) -> Result<Self> {
        Ok(ExperimentData {
            train: self.train.select_features(names)?,
            unlabeled: self.unlabeled.select_features(names)?,
            oot: self
                .oot
                .iter()
                .map(|(m, d)| Ok((*m, d.select_features(names)?)))
                .collect::<Result<_>>()?,
        })
    }

    /// The first `n` unlabeled rows.
    pub fn with_unlabeled(&self, n: usize) -> Self {
        let n = n.min(self.unlabeled.len());
        ExperimentData {
            unlabeled: self.unlabeled.select_rows(&(0..n).collect::<Vec<_>>()),
            ..self.clone()
        }
    }
}

/// Pretraining run optionally followed by a finetuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub pretrain: RunConfig,
    pub finetune_steps: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            pretrain: RunConfig::default(),
            finetune_steps: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()
    }

    fn finetune_config(&self) -> RunConfig {
        RunConfig {
            stage: Stage::Finetune,
            total_steps: self.finetune_steps,
            warmup_steps: 0,
            ..self.pretrain.clone()
        }
    }
}

pub fn train_model(plan: &TrainPlan, data: &ExperimentData, use_unlabeled: bool) -> Result<Model> {
    let out = run_stage(
        &plan.pretrain,
        RunInputs {
            labeled: &data.train,
            unlabeled: use_unlabeled.then_some(&data.unlabeled),
            init: None,
            teacher: None,
        },
    )?;
    let mut model = out.checkpoint.model;
    if plan.finetune_steps > 0 {
        let ft = run_stage(
            &plan.finetune_config(),
            RunInputs {
                labeled: &data.train,
                unlabeled: None,
                init: Some(model),
                teacher: None,
            },
        )?;
        model = ft.checkpoint.model;
    }
    Ok(model)
}

/// Out-of-time metrics: pooled over all months and averaged per month.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OotScore {
    pub auc: f64,
    pub ks: f64,
    pub auc_monthly_mean: f64,
    pub ks_monthly_mean: f64,
}

pub fn oot_score(model: &Model, data: &ExperimentData) -> Result<OotScore> {
    let r = monthly_oot_report(model, &data.train, &data.oot)?;
    let get = |v: Option<f64>| v.ok_or_else(|| Error::UndefinedMetric("out-of-time metric undefined".into()));
    Ok(OotScore {
        auc: get(r.pooled.auc)?,
        ks: get(r.pooled.ks)?,
        auc_monthly_mean: get(r.monthly_mean.auc)?,
        ks_monthly_mean: get(r.monthly_mean.ks)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Zero imputation, task loss only, labeled rows only.
    Vanilla,
    /// `[MISS]` tokens plus masked reconstruction, one masked path.
    MaskEmbedding,
    /// Adds the natural path next to the masked one.
    Twin,
    /// Adds the mixture-of-experts reconstruction head.
    Moe,
    ImputationZero,
    ImputationMode,
    FeatureSpecificMask,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [Variant::Vanilla, Variant::MaskEmbedding, Variant::Twin, Variant::Moe];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::MaskEmbedding => "+mask-embedding",
            Variant::Twin => "+twin",
            Variant::Moe => "+moe",
            Variant::ImputationZero => "imputation-zero",
            Variant::ImputationMode => "imputation-mode",
            Variant::FeatureSpecificMask => "feature-specific-mask",
        }
    }

    /// Run configuration of this rung and whether it sees unlabeled rows.
    /// The last three variants change one thing in the full model.
    pub fn configure(self, base: &RunConfig) -> (RunConfig, bool) {
        let mut c = base.clone();
        let moe = base.moe.or(Some(MoeConfig::default()));
        let lambda = if base.hybrid.lambda > 0.0 { base.hybrid.lambda } else { 0.5 };
        let w = base.hybrid.recon_path_ce_weight;
        let w = if w > 0.0 && w < 1.0 { w } else { 0.5 };
        c.hybrid.lambda = lambda;
        c.hybrid.recon_path_ce_weight = w;
        c.imputation = Imputation::MissToken;
        c.mask_mode = MaskMode::Shared;
        c.moe = moe;
        match self {
            Variant::Vanilla => {
                c.imputation = Imputation::Zero;
                c.hybrid.lambda = 0.0;
                c.hybrid.recon_path_ce_weight = 0.0;
                c.moe = None;
                return (c, false);
            }
            Variant::MaskEmbedding => {
                c.hybrid.recon_path_ce_weight = 1.0;
                c.moe = None;
            }
            Variant::Twin => c.moe = None,
            Variant::Moe => {}
            Variant::ImputationZero => c.imputation = Imputation::Zero,
            Variant::ImputationMode => c.imputation = Imputation::Mode,
            Variant::FeatureSpecificMask => c.mask_mode = MaskMode::FeatureSpecific,
        }
        (c, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub auc: f64,
    pub ks: f64,
    pub auc_monthly_mean: f64,
    pub ks_monthly_mean: f64,
}

impl AblationRow {
    fn new(variant: &str, s: OotScore) -> Self {
        AblationRow {
            variant: variant.to_string(),
            auc: s.auc,
            ks: s.ks,
            auc_monthly_mean: s.auc_monthly_mean,
            ks_monthly_mean: s.ks_monthly_mean,
        }
    }
}

/// Trains every variant with the same seed and schedule; rows follow `ladder`.
pub fn ablation_run(plan: &TrainPlan, ladder: &[Variant], data: &ExperimentData, threads: usize) -> Result<Vec<AblationRow>> {
    plan.validate()?;
    par_map(ladder, threads, |&v| {
        let (cfg, unl) = v.configure(&plan.pretrain);
        let p = TrainPlan {
            pretrain: cfg,
            ..plan.clone()
        };
        let model = train_model(&p, data, unl)?;
        log::info!("ablation rung {} done", v.label());
        Ok(AblationRow::new(v.label(), oot_score(&model, data)?))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    UnlabeledRatio,
    FeatureCount,
    ModelSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Grid points; the axis default when absent. Unlabeled ratios are
    /// multiples of the labeled count, feature counts are IV group counts,
    /// model sizes are preset names.
    pub grid: Option<Vec<String>>,
    pub group_size: usize,
    pub iv_bins: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            axis: SweepAxis::UnlabeledRatio,
            grid: None,
            group_size: 4,
            iv_bins: 10,
        }
    }
}

impl SweepSpec {
    pub fn grid(&self, d: usize) -> Vec<String> {
        if let Some(g) = &self.grid {
            return g.clone();
        }
        match self.axis {
            SweepAxis::UnlabeledRatio => ["0", "5", "10", "20", "40"].map(String::from).to_vec(),
            SweepAxis::FeatureCount => (1..=d.div_ceil(self.group_size.max(1))).map(|m| m.to_string()).collect(),
            SweepAxis::ModelSize => ["base", "s", "m", "l", "xl"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: String,
    pub features: usize,
    pub unlabeled_rows: usize,
    pub params: usize,
    pub peak_lr: f64,
    pub auc: f64,
    pub ks: f64,
    pub auc_monthly_mean: f64,
    pub ks_monthly_mean: f64,
}

fn parse_preset(s: &str) -> Result<Preset> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| Error::protocol(format!("unknown preset `{s}`")))
}

/// Configuration and data of one sweep point.
pub fn sweep_point(spec: &SweepSpec, point: &str, plan: &TrainPlan, data: &ExperimentData) -> Result<(TrainPlan, ExperimentData)> {
    let mut plan = plan.clone();
    let bad = || Error::protocol(format!("bad {:?} grid point `{point}`", spec.axis));
    let data = match spec.axis {
        SweepAxis::UnlabeledRatio => {
            let r: f64 = point.parse().map_err(|_| bad())?;
            if !(r >= 0.0 && r.is_finite()) {
                return Err(bad());
            }
            let want = (r * data.train.len() as f64).round() as usize;
            if want > data.unlabeled.len() {
                log::warn!("ratio {point} wants {want} unlabeled rows, only {} available", data.unlabeled.len());
            }
            data.with_unlabeled(want)
        }
        SweepAxis::FeatureCount => {
            let m: usize = point.parse().map_err(|_| bad())?;
            let ranking = rank_features(&data.train, spec.iv_bins)?;
            data.select_features(&feature_groups(&ranking, spec.group_size, m)?)?
        }
        SweepAxis::ModelSize => {
            let preset = parse_preset(point)?;
            let n_out = data.train.schema.label.as_ref().map_or(1, |l| l.outputs());
            let base = param_count(&Preset::Base.config(), n_out);
            let n = param_count(&preset.config(), n_out);
            let c = &mut plan.pretrain;
            let factor = scale_lr(n, base, 1.0)?;
            c.preset = preset;
            c.encoder = None;
            c.peak_lr *= factor;
            c.final_lr *= factor;
            c.finetune_lr *= factor;
            data.clone()
        }
    };
    Ok((plan, data))
}

pub fn scaling_sweep(spec: &SweepSpec, grid: &[String], plan: &TrainPlan, data: &ExperimentData, threads: usize) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    if grid.is_empty() {
        return Err(Error::protocol("sweep grid is empty"));
    }
    par_map(grid, threads, |point| {
        let (p, d) = sweep_point(spec, point, plan, data)?;
        let model = train_model(&p, &d, true)?;
        let s = oot_score(&model, &d)?;
        Ok(SweepRow {
            point: point.clone(),
            features: d.train.d(),
            unlabeled_rows: d.unlabeled.len(),
            params: model.params.numel(),
            peak_lr: p.pretrain.peak_lr,
            auc: s.auc,
            ks: s.ks,
            auc_monthly_mean: s.auc_monthly_mean,
            ks_monthly_mean: s.ks_monthly_mean,
        })
    })
}

pub fn write_table<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean `1 - cos` alignment loss of `student` over `ds` against the cache.
pub fn mean_align_loss(student: &Model, ds: &Dataset, cache: &TeacherCache) -> Result<f64> {
    let mut total = 0.0;
    for (rows, ids) in ds.rows.chunks(512).zip(ds.row_ids.chunks(512)) {
        let mut g = Graph::frozen();
        let refs: Vec<&[crate::data::Cell]> = rows.iter().map(|r| r.as_slice()).collect();
        let pooled = student.natural_pooled(&mut g, &refs)?;
        let l = distill::align_loss_graph(&mut g, &student.params, pooled, cache.targets(ids)?)?;
        total += g.value(l).item() * rows.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

/// Student run on top of a teacher cache.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub model: Model,
    pub align_init: f64,
    pub align_final: f64,
}

/// Trains a student with the distill stage. `cfg.stage` is forced to distill.
pub fn train_student(cfg: &RunConfig, data: &ExperimentData, cache: &TeacherCache) -> Result<StudentRun> {
    let cfg = RunConfig {
        stage: Stage::Distill,
        ..cfg.clone()
    };
    let init = run_stage(
        &RunConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..cfg.clone()
        },
        RunInputs {
            labeled: &data.train,
            unlabeled: None,
            init: None,
            teacher: Some(cache),
        },
    )?;
    let align_init = mean_align_loss(&init.checkpoint.model, &data.train, cache)?;
    let out = run_stage(
        &cfg,
        RunInputs {
            labeled: &data.train,
            unlabeled: None,
            init: None,
            teacher: Some(cache),
        },
    )?;
    let align_final = mean_align_loss(&out.checkpoint.model, &data.train, cache)?;
    Ok(StudentRun {
        model: out.checkpoint.model,
        align_init,
        align_final,
    })
}

/// Teacher embeddings of the training rows, tagged with the teacher digest.
pub fn teacher_cache(teacher: &Model, data: &ExperimentData) -> Result<TeacherCache> {
    cache_teacher(teacher, &model_digest(teacher)?, &data.train)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny() -> (TrainPlan, ExperimentData) {
        let cfg = SynthConfig {
            d_num: 3,
            d_cat: 2,
            n_labeled: 300,
            n_unlabeled: 300,
            months: 4,
            unlabeled_months: 2,
            ..SynthConfig::default()
        };
        let (lab, unl) = synth_generate(&cfg, 1).unwrap();
        let b = [NaiveDate::from_ymd_opt(2024, 3, 1).unwrap(), NaiveDate::from_ymd_opt(2024, 3, 1).unwrap().succ_opt().unwrap()];
        let data = ExperimentData::split(&lab, &unl, &b).unwrap();
        let mut enc = crate::model::tests::toy_config(1, None).encoder;
        enc.d_model = 8;
        let plan = TrainPlan {
            pretrain: RunConfig {
                encoder: Some(enc),
                batch_size: 16,
                total_steps: 4,
                warmup_steps: 1,
                peak_lr: 1e-3,
                final_lr: 1e-4,
                moe: Some(MoeConfig {
                    k_r: 2,
                    k_a: 1,
                    ..MoeConfig::default()
                }),
                ..RunConfig::default()
            },
            finetune_steps: 2,
        };
        (plan, data)
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..50).collect();
        let out = par_map(&v, 4, |&x| Ok(x * 2)).unwrap();
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn ladder_configs() {
        let base = RunConfig::default();
        let (v, unl) = Variant::Vanilla.configure(&base);
        assert!(!unl && v.imputation == Imputation::Zero && v.hybrid.lambda == 0.0 && v.moe.is_none());
        let (m, _) = Variant::MaskEmbedding.configure(&base);
        assert!(m.hybrid.recon_path_ce_weight == 1.0 && !m.hybrid.uses_natural_path());
        let (t, _) = Variant::Twin.configure(&base);
        assert!(t.hybrid.uses_natural_path() && t.hybrid.uses_masked_path() && t.moe.is_none());
        assert!(Variant::Moe.configure(&base).0.moe.is_some());
    }

    #[test]
    fn single_rung_and_duplicate_rungs() {
        let (plan, data) = tiny();
        let one = ablation_run(&plan, &[Variant::Vanilla], &data, 1).unwrap();
        assert_eq!(one.len(), 1);
        let two = ablation_run(&plan, &[Variant::Twin, Variant::Twin], &data, 2).unwrap();
        assert_eq!(two[0], two[1]);
        assert!((0.0..=1.0).contains(&two[0].auc));
    }

    #[test]
    fn sweep_points() {
        let (plan, data) = tiny();
        let spec = SweepSpec {
            axis: SweepAxis::ModelSize,
            ..SweepSpec::default()
        };
        let (p, _) = sweep_point(&spec, "base", &plan, &data).unwrap();
        assert_eq!(p.pretrain.peak_lr, plan.pretrain.peak_lr);
        let spec = SweepSpec {
            axis: SweepAxis::FeatureCount,
            group_size: 2,
            ..SweepSpec::default()
        };
        let (_, d) = sweep_point(&spec, "1", &plan, &data).unwrap();
        let ranking = rank_features(&data.train, 10).unwrap();
        assert_eq!(d.train.schema.features.iter().map(|f| f.name.clone()).collect::<Vec<_>>(), ranking.names()[..2].to_vec());
        let spec = SweepSpec::default();
        let (_, d) = sweep_point(&spec, "0.5", &plan, &data).unwrap();
        assert_eq!(d.unlabeled.len(), (data.train.len() as f64 * 0.5).round() as usize);
        let rows = scaling_sweep(&spec, &["0".into()], &plan, &data, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].unlabeled_rows, 0);
    }
}
