//! Synthetic tabular generator with informative (MNAR) missingness.
//!
//! Each row draws latent factors `u ~ N(0, I)`. Feature `j` is a noisy view of
//! factor `j % latent_dim`; categorical features are equal-probability
//! buckets of such a view. The label is Bernoulli with a logit linear in `u`
//! plus a time drift. Features viewing the first `mnar_factors` factors are
//! masked with probability `sigmoid(kappa * mnar_slope * u_f + c)`, so at
//! `kappa > 0` their missing pattern carries label information, while at
//! `kappa = 0` every feature is missing completely at random.

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, Dataset, FeatureSchema, FeatureSpec, LabelKind, LabelSpec};
use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub d_num: usize,
    pub d_cat: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// MNAR strength in `[0, 1]`.
    pub kappa: f64,
    /// Strength of the month-dependent shift in the label model.
    pub drift: f64,
    /// Months covered by labeled rows, starting at `start_month`.
    pub months: usize,
    /// First month, `YYYY-MM`.
    pub start_month: String,
    /// Unlabeled rows are drawn from the first this-many months.
    pub unlabeled_months: usize,
    pub latent_dim: usize,
    /// Latent factors whose views are MNAR-masked.
    pub mnar_factors: usize,
    pub mnar_slope: f64,
    /// Missing rate of MNAR features when `kappa = 0`.
    pub mnar_base_rate: f64,
    /// Missing-completely-at-random rate for the remaining features.
    pub mcar_rate: f64,
    pub noise: f64,
    pub vocab_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_num: 12,
            d_cat: 8,
            n_labeled: 4000,
            n_unlabeled: 40_000,
            kappa: 1.0,
            drift: 0.5,
            months: 12,
            start_month: "2024-01".into(),
            unlabeled_months: 6,
            latent_dim: 4,
            mnar_factors: 2,
            mnar_slope: 3.0,
            mnar_base_rate: 0.35,
            mcar_rate: 0.1,
            noise: 1.0,
            vocab_size: 4,
        }
    }
}

/// Label weights per latent factor; the pattern repeats for wider latents.
const LABEL_WEIGHTS: [f64; 4] = [1.2, -1.0, 0.8, -0.6];
const LABEL_BIAS: f64 = -1.0;

/// Upper bucket edges of a standard normal into `v` equal-probability bins.
fn normal_quantile_edges(v: usize) -> Vec<f64> {
    (1..v).map(|i| inverse_normal_cdf(i as f64 / v as f64)).collect()
}

/// Inverse of the standard normal CDF by bisection on a high-accuracy CDF.
fn inverse_normal_cdf(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal CDF via the complementary error function
/// (Numerical Recipes `erfc`, relative error below 1.2e-7).
fn normal_cdf(x: f64) -> f64 {
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let erfc = t * poly.exp();
    if x >= 0.0 {
        1.0 - 0.5 * erfc
    } else {
        0.5 * erfc
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::protocol(format!("synth config: {m}")));
        if self.d_num + self.d_cat == 0 {
            return bad("need at least one feature");
        }
        if self.n_labeled == 0 {
            return bad("n_labeled must be positive");
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad("kappa must be in [0, 1]");
        }
        if self.months == 0 || self.unlabeled_months == 0 || self.unlabeled_months > self.months {
            return bad("need 1 <= unlabeled_months <= months");
        }
        if self.latent_dim == 0 || self.mnar_factors > self.latent_dim {
            return bad("need latent_dim >= 1 and mnar_factors <= latent_dim");
        }
        if self.d_cat > 0 && self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        for (name, p) in [("mnar_base_rate", self.mnar_base_rate), ("mcar_rate", self.mcar_rate)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::protocol(format!("synth config: {name} must be in [0, 1)")));
            }
        }
        if !self.noise.is_finite() || self.noise < 0.0 || !self.drift.is_finite() {
            return bad("noise and drift must be finite, noise >= 0");
        }
        self.start()?;
        Ok(())
    }

    fn start(&self) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(&format!("{}-01", self.start_month), "%Y-%m-%d")
            .map_err(|e| Error::protocol(format!("bad start_month `{}`: {e}", self.start_month)))
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut features: Vec<FeatureSpec> = (0..self.d_num)
            .map(|i| FeatureSpec::numerical(format!("num_{i:02}")))
            .collect();
        let vocab: Vec<String> = (0..self.vocab_size).map(|i| format!("c{i}")).collect();
        features.extend(
            (0..self.d_cat).map(|i| FeatureSpec::categorical(format!("cat_{i:02}"), vocab.clone())),
        );
        FeatureSchema {
            features,
            label: Some(LabelSpec {
                name: "y".into(),
                kind: LabelKind::Binary,
                classes: None,
            }),
            timestamp: Some("date".into()),
        }
    }

    fn factor_of(&self, j: usize) -> usize {
        j % self.latent_dim
    }

    fn loading(j: usize) -> f64 {
        // deterministic spread of loadings in [0.8, 1.2]
        0.8 + 0.4 * ((j * 7) % 11) as f64 / 10.0
    }
}

fn month_start(start: NaiveDate, offset: usize) -> NaiveDate {
    let total = start.year() * 12 + start.month0() as i32 + offset as i32;
    NaiveDate::from_ymd_opt(total.div_euclid(12), total.rem_euclid(12) as u32 + 1, 1)
        .expect("valid month")
}

struct Draw {
    cells: Vec<Cell>,
    label: f64,
    date: NaiveDate,
}

fn draw_row(cfg: &SynthConfig, rng: &mut ChaCha8Rng, month_span: usize, edges: &[f64]) -> Draw {
    let start = cfg.start().expect("validated");
    let u: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let month = rng.gen_range(0..month_span);
    let day = rng.gen_range(1..=28);
    let date = month_start(start, month)
        .with_day(day)
        .expect("day within month");
    let t = if cfg.months > 1 {
        month as f64 / (cfg.months - 1) as f64
    } else {
        0.0
    };

    let mut z = LABEL_BIAS + cfg.drift * (t - 0.5);
    for (l, &ul) in u.iter().enumerate() {
        let mut w = LABEL_WEIGHTS[l % LABEL_WEIGHTS.len()];
        if l + 1 == cfg.latent_dim && cfg.latent_dim > 1 {
            // the last factor's influence fades over time
            w *= 1.0 - cfg.drift * t;
        }
        z += w * ul;
    }
    let label = if rng.gen::<f64>() < sigmoid(z) { 1.0 } else { 0.0 };

    let d = cfg.d_num + cfg.d_cat;
    let mnar_offset = logit(cfg.mnar_base_rate.max(1e-9));
    let mut cells = Vec::with_capacity(d);
    for j in 0..d {
        let f = cfg.factor_of(j);
        let a = SynthConfig::loading(j);
        let eps: f64 = rng.sample(StandardNormal);
        let view = a * u[f] + cfg.noise * eps;
        let p_miss = if f < cfg.mnar_factors {
            sigmoid(cfg.kappa * cfg.mnar_slope * u[f] + mnar_offset)
        } else {
            cfg.mcar_rate
        };
        let missing = rng.gen::<f64>() < p_miss;
        let cell = if missing {
            Cell::Missing
        } else if j < cfg.d_num {
            Cell::Num((view * 1e4).round() / 1e4)
        } else {
            let scaled = view / (a * a + cfg.noise * cfg.noise).sqrt();
            let bucket = edges.iter().take_while(|&&e| scaled > e).count();
            Cell::Cat(bucket as u32)
        };
        cells.push(cell);
    }
    Draw { cells, label, date }
}

/// Returns `(labeled, unlabeled)` datasets, fully determined by `seed`.
/// Labeled row ids are `0..n_labeled`; unlabeled ids follow.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let schema = cfg.schema();
    let edges = normal_quantile_edges(cfg.vocab_size.max(2));

    let mut rng = stream(seed, &[0x5e17, 1]);
    let labeled: Vec<Draw> = (0..cfg.n_labeled)
        .map(|_| draw_row(cfg, &mut rng, cfg.months, &edges))
        .collect();
    let mut rng = stream(seed, &[0x5e17, 2]);
    let unlabeled: Vec<Draw> = (0..cfg.n_unlabeled)
        .map(|_| draw_row(cfg, &mut rng, cfg.unlabeled_months, &edges))
        .collect();

    let n_l = cfg.n_labeled as u64;
    let build = |draws: Vec<Draw>, first_id: u64, with_labels: bool| {
        let n = draws.len() as u64;
        let labels = with_labels.then(|| draws.iter().map(|d| d.label).collect());
        let dates = Some(draws.iter().map(|d| d.date).collect());
        Dataset::new(
            schema.clone(),
            draws.into_iter().map(|d| d.cells).collect(),
            labels,
            dates,
            (first_id..first_id + n).collect(),
        )
    };
    Ok((build(labeled, 0, true)?, build(unlabeled, n_l, false)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kappa: f64, n: usize) -> SynthConfig {
        SynthConfig {
            n_labeled: n,
            n_unlabeled: 100,
            kappa,
            ..SynthConfig::default()
        }
    }

    /// Plug-in mutual information (bits) between two binary variables.
    fn mutual_information(a: &[bool], b: &[bool]) -> f64 {
        let n = a.len() as f64;
        let mut joint = [[0.0f64; 2]; 2];
        for (&x, &y) in a.iter().zip(b) {
            joint[x as usize][y as usize] += 1.0 / n;
        }
        let pa = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
        let pb = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
        let mut mi = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                if joint[i][j] > 0.0 {
                    mi += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).log2();
                }
            }
        }
        mi
    }

    /// AUC of a binary score by direct pair counting over the 2x2 table.
    fn indicator_auc(score: &[bool], labels: &[f64]) -> f64 {
        let (mut pos1, mut pos0, mut neg1, mut neg0) = (0.0, 0.0, 0.0, 0.0);
        for (&s, &y) in score.iter().zip(labels) {
            match (y == 1.0, s) {
                (true, true) => pos1 += 1.0,
                (true, false) => pos0 += 1.0,
                (false, true) => neg1 += 1.0,
                (false, false) => neg0 += 1.0,
            }
        }
        let wins = pos1 * neg0 + 0.5 * (pos1 * neg1 + pos0 * neg0);
        wins / ((pos1 + pos0) * (neg1 + neg0))
    }

    fn indicators(ds: &Dataset, k: usize) -> Vec<bool> {
        ds.rows.iter().map(|r| r[k].is_missing()).collect()
    }

    #[test]
    fn kappa_zero_missingness_is_uninformative() {
        let (ds, _) = synth_generate(&small(0.0, 20_000), 3).unwrap();
        let y: Vec<bool> = ds.labels().unwrap().iter().map(|&v| v == 1.0).collect();
        for k in 0..ds.d() {
            let mi = mutual_information(&indicators(&ds, k), &y);
            assert!(mi < 0.005, "feature {k}: MI {mi}");
        }
    }

    #[test]
    fn kappa_one_missingness_predicts_label() {
        let (ds, _) = synth_generate(&small(1.0, 20_000), 3).unwrap();
        let labels = ds.labels().unwrap();
        let best = (0..ds.d())
            .map(|k| {
                let a = indicator_auc(&indicators(&ds, k), labels);
                a.max(1.0 - a)
            })
            .fold(0.0, f64::max);
        assert!(best >= 0.60, "best single-indicator AUC {best}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small(1.0, 300);
        let (a, ua) = synth_generate(&cfg, 9).unwrap();
        let (b, ub) = synth_generate(&cfg, 9).unwrap();
        let bytes = |d: &Dataset| {
            let mut v = Vec::new();
            crate::data::write_csv_to(d, &mut v).unwrap();
            v
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(bytes(&ua), bytes(&ub));
        let (c, _) = synth_generate(&cfg, 10).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn shapes_and_ids() {
        let cfg = small(0.5, 50);
        let (l, u) = synth_generate(&cfg, 1).unwrap();
        assert_eq!(l.len(), 50);
        assert_eq!(u.len(), 100);
        assert_eq!(l.d(), 20);
        assert!(u.labels.is_none());
        assert_eq!(u.row_ids[0], 50);
        let last = month_start(cfg.start().unwrap(), cfg.unlabeled_months);
        assert!(u.timestamps.as_ref().unwrap().iter().all(|&t| t < last));
    }

    #[test]
    fn invalid_sizes_rejected() {
        let mut cfg = small(1.0, 10);
        cfg.d_num = 0;
        cfg.d_cat = 0;
        assert!(matches!(synth_generate(&cfg, 0), Err(Error::Protocol(_))));
        let cfg = SynthConfig {
            kappa: 1.5,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn normal_cdf_quantiles() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        let e = normal_quantile_edges(4);
        assert!((e[1]).abs() < 1e-6);
        assert!((e[2] - 0.6744898).abs() < 1e-5);
    }
}
