//! The `masktab` command line: one subcommand per pipeline step, each driven
//! by a JSON config file and a seed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    feature_groups, instance_ratio_histogram, load_csv, missing_rates, parse_date, rank_features, synth_generate,
    write_csv, FeatureSchema, SynthConfig,
};
use crate::distill::TeacherCache;
use crate::encoder::Preset;
use crate::error::{Error, Result};
use crate::eval::experiment::{teacher_cache, write_table};
use crate::eval::{ablation_run, monthly_oot_report, scaling_sweep, ExperimentData, SweepSpec, TrainPlan, Variant};
use crate::train::{model_digest, run_stage, write_metrics_csv, Checkpoint, RunConfig, RunInputs, RunOutput, Stage};

pub const THREADS_ENV: &str = "MASKTAB_THREADS";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "masktab", version, about = "Missingness-aware masked pretraining for tabular data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Input checkpoint directory (finetune, distill teacher, eval).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Teacher cache directory: reused when present, written otherwise.
    #[arg(long, global = true)]
    pub teacher_cache: Option<PathBuf>,
    /// Validate the config and print the resolved plan without reading data.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic labeled and unlabeled sets.
    Synth,
    /// Missingness statistics and the IV ranking of the training split.
    Stats,
    /// IV ranking of the training split.
    IvRank,
    /// Hybrid pretraining on labeled and unlabeled rows.
    Pretrain,
    /// Supervised finetuning of a checkpoint.
    Finetune,
    /// Cache teacher embeddings, then train a student on the top IV features.
    Distill,
    /// Monthly out-of-time report of a checkpoint.
    Eval,
    /// Train and score the ablation ladder.
    Ablate,
    /// Train and score one scaling axis.
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Labeled CSV; synthetic data is generated when absent.
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    /// Schema JSON, required with `labeled`.
    pub schema: Option<PathBuf>,
    /// Start of the validation span and of the out-of-time span.
    pub boundaries: Vec<String>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            labeled: None,
            unlabeled: None,
            schema: None,
            boundaries: vec!["2024-07-01".into(), "2024-10-01".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSpec {
    pub iv_bins: usize,
    pub histogram_bins: usize,
}

impl Default for StatsSpec {
    fn default() -> Self {
        StatsSpec {
            iv_bins: 10,
            histogram_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    pub student: RunConfig,
    /// Student features: the top this-many by IV on the training split.
    pub top_features: usize,
    pub iv_bins: usize,
}

impl Default for DistillSpec {
    fn default() -> Self {
        DistillSpec {
            student: RunConfig {
                stage: Stage::Distill,
                preset: Preset::Distill,
                ..RunConfig::default()
            },
            top_features: 10,
            iv_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSpec {
    pub ladder: Vec<Variant>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        AblateSpec {
            ladder: Variant::LADDER.to_vec(),
        }
    }
}

/// Every section of the config file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub data: DataSpec,
    pub stats: StatsSpec,
    /// Pretraining run, optionally followed by finetuning (used by
    /// `pretrain`, `ablate` and `sweep`).
    pub train: TrainPlan,
    pub finetune: RunConfig,
    pub distill: DistillSpec,
    pub ablate: AblateSpec,
    pub sweep: SweepSpec,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            out: None,
            synth: SynthConfig::default(),
            data: DataSpec::default(),
            stats: StatsSpec::default(),
            train: TrainPlan::default(),
            finetune: RunConfig {
                stage: Stage::Finetune,
                total_steps: 500,
                warmup_steps: 0,
                ..RunConfig::default()
            },
            distill: DistillSpec::default(),
            ablate: AblateSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::protocol(format!("{}: {e}", path.display())))
    }

    /// Applies the seed to every run and forces each stage field.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.pretrain.seed = self.seed;
        self.train.pretrain.stage = Stage::HybridPretrain;
        self.finetune.seed = self.seed;
        self.finetune.stage = Stage::Finetune;
        self.distill.student.seed = self.seed;
        self.distill.student.stage = Stage::Distill;
        self
    }

    pub fn validate(&self, cmd: Command) -> Result<()> {
        let boundaries: Vec<_> = self.data.boundaries.iter().map(|b| parse_date(b)).collect::<Result<_>>()?;
        if boundaries.len() != 2 || boundaries[0] >= boundaries[1] {
            return Err(Error::protocol("data.boundaries needs two increasing dates"));
        }
        if self.data.labeled.is_some() != self.data.schema.is_some() {
            return Err(Error::protocol("data.labeled and data.schema go together"));
        }
        match cmd {
            Command::Synth => self.synth.validate(),
            Command::Stats | Command::IvRank | Command::Eval => Ok(()),
            Command::Pretrain | Command::Ablate => self.train.validate(),
            Command::Sweep => {
                self.train.validate()?;
                if self.sweep.grid.as_ref().is_some_and(|g| g.is_empty()) {
                    return Err(Error::protocol("sweep.grid is empty"));
                }
                Ok(())
            }
            Command::Finetune => self.finetune.validate(),
            Command::Distill => {
                if self.distill.top_features == 0 {
                    return Err(Error::protocol("distill.top_features must be positive"));
                }
                self.distill.student.validate()
            }
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to standard error.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Plan<'a> {
    command: Command,
    out: &'a Path,
    checkpoint: Option<&'a Path>,
    teacher_cache: Option<&'a Path>,
    threads: usize,
    config: &'a CliConfig,
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    }
    .resolve(cli.seed);
    cfg.validate(cli.command)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("masktab-out"));
    if cli.dry_run {
        let plan = Plan {
            command: cli.command,
            out: &out,
            checkpoint: cli.checkpoint.as_deref(),
            teacher_cache: cli.teacher_cache.as_deref(),
            threads: threads(),
            config: &cfg,
        };
        eprintln!("{}", serde_json::to_string_pretty(&plan)?);
        return Ok(());
    }
    if matches!(cli.command, Command::Finetune | Command::Eval | Command::Distill) && cli.checkpoint.is_none() {
        return Err(Error::protocol("this command needs --checkpoint DIR"));
    }
    // fail on a bad checkpoint before any other work
    let ckpt = match &cli.checkpoint {
        Some(p) if cli.command != Command::Synth => Some(Checkpoint::load(p)?),
        _ => None,
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&cfg, &out.join(RESOLVED_CONFIG))?;

    match cli.command {
        Command::Synth => {
            let (lab, unl) = synth_generate(&cfg.synth, cfg.seed)?;
            write_csv(&lab, &out.join("labeled.csv"))?;
            write_csv(&unl, &out.join("unlabeled.csv"))?;
            lab.schema.save(&out.join("schema.json"))?;
            log::info!("wrote {} labeled and {} unlabeled rows to {}", lab.len(), unl.len(), out.display());
        }
        Command::Stats => {
            let data = load_data(&cfg)?;
            let stats = missing_rates(&data.train)?;
            #[derive(Serialize)]
            struct Stats<'a> {
                train_rows: usize,
                unlabeled_rows: usize,
                features: Vec<String>,
                feature_missing_rates: &'a [f64],
                eta_max: f64,
                instance_ratio_histogram: Vec<f64>,
            }
            write_json(
                &Stats {
                    train_rows: data.train.len(),
                    unlabeled_rows: data.unlabeled.len(),
                    features: data.train.schema.features.iter().map(|f| f.name.clone()).collect(),
                    feature_missing_rates: &stats.feature_rates,
                    eta_max: stats.eta_max,
                    instance_ratio_histogram: instance_ratio_histogram(&stats, cfg.stats.histogram_bins),
                },
                &out.join("stats.json"),
            )?;
            write_table(&rank_features(&data.train, cfg.stats.iv_bins)?.features, &out.join("iv.csv"))?;
        }
        Command::IvRank => {
            let data = load_data(&cfg)?;
            write_table(&rank_features(&data.train, cfg.stats.iv_bins)?.features, &out.join("iv.csv"))?;
        }
        Command::Pretrain => {
            let data = load_data(&cfg)?;
            let r = run_stage(
                &cfg.train.pretrain,
                RunInputs {
                    labeled: &data.train,
                    unlabeled: Some(&data.unlabeled),
                    init: None,
                    teacher: None,
                },
            )?;
            let r = if cfg.train.finetune_steps > 0 {
                let ft = RunConfig {
                    stage: Stage::Finetune,
                    total_steps: cfg.train.finetune_steps,
                    warmup_steps: 0,
                    ..cfg.train.pretrain.clone()
                };
                write_metrics_csv(&r.metrics, &out.join("pretrain_metrics.csv"))?;
                run_stage(
                    &ft,
                    RunInputs {
                        labeled: &data.train,
                        unlabeled: None,
                        init: Some(r.checkpoint.model),
                        teacher: None,
                    },
                )?
            } else {
                r
            };
            save_run(&r, &out)?;
        }
        Command::Finetune => {
            let data = load_data(&cfg)?;
            let model = ckpt.expect("checked above").model;
            let data = data.select_features(&model.layout.names())?;
            let r = run_stage(
                &cfg.finetune,
                RunInputs {
                    labeled: &data.train,
                    unlabeled: None,
                    init: Some(model),
                    teacher: None,
                },
            )?;
            save_run(&r, &out)?;
        }
        Command::Distill => {
            let data = load_data(&cfg)?;
            let teacher = ckpt.expect("checked above").model;
            let digest = model_digest(&teacher)?;
            let teacher_data = data.select_features(&teacher.layout.names())?;
            let cache_dir = cli.teacher_cache.clone().unwrap_or_else(|| out.join("teacher_cache"));
            let cache = if cache_dir.join("manifest.json").exists() {
                let c = TeacherCache::load(&cache_dir)?;
                c.verify(&digest)?;
                c
            } else {
                let c = teacher_cache(&teacher, &teacher_data)?;
                c.save(&cache_dir)?;
                c
            };
            let ranking = rank_features(&data.train, cfg.distill.iv_bins)?;
            let names = feature_groups(&ranking, cfg.distill.top_features, 1)?;
            let student_data = data.select_features(&names)?;
            let r = run_stage(
                &cfg.distill.student,
                RunInputs {
                    labeled: &student_data.train,
                    unlabeled: None,
                    init: None,
                    teacher: Some(&cache),
                },
            )?;
            save_run(&r, &out)?;
        }
        Command::Eval => {
            let data = load_data(&cfg)?;
            let model = ckpt.expect("checked above").model;
            let data = data.select_features(&model.layout.names())?;
            monthly_oot_report(&model, &data.train, &data.oot)?.write(&out)?;
        }
        Command::Ablate => {
            let data = load_data(&cfg)?;
            let rows = ablation_run(&cfg.train, &cfg.ablate.ladder, &data, threads())?;
            write_table(&rows, &out.join("ablation.csv"))?;
        }
        Command::Sweep => {
            let data = load_data(&cfg)?;
            let grid = cfg.sweep.grid(data.train.d());
            let rows = scaling_sweep(&cfg.sweep, &grid, &cfg.train, &data, threads())?;
            write_table(&rows, &out.join("sweep.csv"))?;
        }
    }
    Ok(())
}

fn save_run(r: &RunOutput, out: &Path) -> Result<()> {
    r.checkpoint.save(&out.join("checkpoint"))?;
    write_metrics_csv(&r.metrics, &out.join("metrics.csv"))?;
    write_json(&r.audit, &out.join("data_audit.json"))
}

/// The configured files, or the synthetic generator's output, split by date.
fn load_data(cfg: &CliConfig) -> Result<ExperimentData> {
    let (lab, unl) = match (&cfg.data.labeled, &cfg.data.schema) {
        (Some(path), Some(schema)) => {
            let schema = FeatureSchema::load(schema)?;
            let lab = load_csv(path, &schema)?;
            let unl = match &cfg.data.unlabeled {
                Some(p) => {
                    let mut u = load_csv(p, &schema)?;
                    // keep ids distinct from the labeled file
                    let n = lab.len() as u64;
                    u.row_ids.iter_mut().for_each(|id| *id += n);
                    u.without_labels()
                }
                None => lab.select_rows(&[]).without_labels(),
            };
            (lab, unl)
        }
        _ => synth_generate(&cfg.synth, cfg.seed)?,
    };
    let boundaries: Vec<_> = cfg.data.boundaries.iter().map(|b| parse_date(b)).collect::<Result<_>>()?;
    ExperimentData::split(&lab, &unl, &boundaries)
}

