//! Row tokenization: name embeddings, value encoders, the shared mask
//! embedding behind `[MASK]`/`[MISS]`, and adaptive mask sampling.
//!
//! Token `k` of a row is `layer_norm(e_name_k + phi(v_k))` where
//!
//! * `phi = e_mask` for synthetically masked cells,
//! * `phi = e_miss` for naturally missing cells,
//! * `phi = w_k * standardize(v) + b_k` for observed numerical cells,
//! * `phi = table_k[v]` for observed categorical cells.
//!
//! In the graph every `phi` is built as `scale * A[a_idx] + B[b_idx]` from two
//! row banks, so all four cases share one gather-and-scale path.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Cell, Dataset, FeatureKind, FeatureSchema};
use crate::error::{Error, Result};
use crate::numerics::{functional, Graph, ParamStore, Tensor, Var};

pub const P_NUM_W: &str = "embed.num_w";
pub const P_NUM_B: &str = "embed.num_b";
pub const P_CAT: &str = "embed.cat";
pub const P_MASK: &str = "embed.mask";
pub const P_LN_GAMMA: &str = "embed.ln.gamma";
pub const P_LN_BETA: &str = "embed.ln.beta";

pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_R_MAX: f64 = 0.3;
pub const DEFAULT_ALPHA_MASK: f64 = 1.0;

/// Deterministic unit-norm vector for a feature name.
pub fn name_embedding(name: &str, h: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = crate::rng::stream(key, &[]);
    let mut v: Vec<f64> = (0..h).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = functional::norm(&v);
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Frozen per-feature name vectors, `d x h`.
#[derive(Debug, Clone, PartialEq)]
pub struct NameEmbeddingTable {
    pub seed: u64,
    pub vectors: Tensor,
}

impl NameEmbeddingTable {
    pub fn new(names: &[String], h: usize, seed: u64) -> Self {
        let data = names.iter().flat_map(|n| name_embedding(n, h, seed)).collect();
        NameEmbeddingTable {
            seed,
            vectors: Tensor::matrix(names.len(), h, data).expect("d x h"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// One vector `m` behind both `[MASK]` and `[MISS]` for every feature.
    #[default]
    Shared,
    /// One vector per feature, each initialized to `m`.
    FeatureSpecific,
}

/// How naturally missing cells enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Imputation {
    /// `[MISS]` token.
    #[default]
    MissToken,
    /// Numerical 0, categorical first vocabulary entry.
    Zero,
    /// Numerical training mean, categorical training mode.
    Mode,
}

/// Per-feature encoding metadata fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub kind: FeatureKind,
    /// Row in the numerical banks, or offset of this feature's categories in
    /// the categorical table.
    pub slot: usize,
    pub vocab_len: usize,
    pub mean: f64,
    pub std: f64,
    pub mode: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub features: Vec<FeatureInfo>,
    pub n_num: usize,
    pub n_cat_rows: usize,
}

impl FeatureLayout {
    /// Standardization statistics come from `train` only.
    pub fn fit(schema: &FeatureSchema, train: &Dataset) -> Result<Self> {
        if train.schema.features != schema.features {
            return Err(Error::protocol("layout schema differs from training data schema"));
        }
        let (mut n_num, mut n_cat_rows) = (0, 0);
        let mut features = Vec::with_capacity(schema.d());
        for (k, spec) in schema.features.iter().enumerate() {
            let info = match spec.kind {
                FeatureKind::Numerical => {
                    let vals: Vec<f64> = train
                        .rows
                        .iter()
                        .filter_map(|r| match r[k] {
                            Cell::Num(v) => Some(v),
                            _ => None,
                        })
                        .collect();
                    let (mean, std) = if vals.is_empty() {
                        (0.0, 1.0)
                    } else {
                        let n = vals.len() as f64;
                        let mean = vals.iter().sum::<f64>() / n;
                        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        (mean, var.sqrt().max(STD_FLOOR))
                    };
                    n_num += 1;
                    FeatureInfo {
                        name: spec.name.clone(),
                        kind: FeatureKind::Numerical,
                        slot: n_num - 1,
                        vocab_len: 0,
                        mean,
                        std,
                        mode: 0,
                    }
                }
                FeatureKind::Categorical => {
                    let v = spec.vocab_len();
                    let mut counts = vec![0usize; v];
                    for r in &train.rows {
                        if let Cell::Cat(i) = r[k] {
                            counts[i as usize] += 1;
                        }
                    }
                    // first index wins ties
                    let mode = (0..v).fold(0, |best, i| if counts[i] > counts[best] { i } else { best });
                    let slot = n_cat_rows;
                    n_cat_rows += v;
                    FeatureInfo {
                        name: spec.name.clone(),
                        kind: FeatureKind::Categorical,
                        slot,
                        vocab_len: v,
                        mean: 0.0,
                        std: 1.0,
                        mode: mode as u32,
                    }
                }
            };
            features.push(info);
        }
        Ok(FeatureLayout {
            features,
            n_num,
            n_cat_rows,
        })
    }

    pub fn d(&self) -> usize {
        self.features.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn standardize(&self, k: usize, v: f64) -> f64 {
        let f = &self.features[k];
        (v - f.mean) / f.std
    }

    /// Replaces missing cells according to `imp`.
    pub fn impute(&self, row: &[Cell], imp: Imputation) -> Vec<Cell> {
        row.iter()
            .zip(&self.features)
            .map(|(c, f)| match (c, imp) {
                (Cell::Missing, Imputation::Zero) => match f.kind {
                    FeatureKind::Numerical => Cell::Num(0.0),
                    FeatureKind::Categorical => Cell::Cat(0),
                },
                (Cell::Missing, Imputation::Mode) => match f.kind {
                    FeatureKind::Numerical => Cell::Num(f.mean),
                    FeatureKind::Categorical => Cell::Cat(f.mode),
                },
                _ => *c,
            })
            .collect()
    }
}

/// Adds value-encoder, mask and token-norm parameters for `layout` to `store`.
pub fn init_embedding_params(
    store: &mut ParamStore,
    layout: &FeatureLayout,
    h: usize,
    mode: MaskMode,
    rng: &mut impl Rng,
) -> Result<()> {
    let scale = 1.0 / (h as f64).sqrt();
    let mut normal = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                scale * z
            })
            .collect()
    };
    store.insert(P_NUM_W, Tensor::matrix(layout.n_num, h, normal(layout.n_num * h))?)?;
    store.insert(P_NUM_B, Tensor::zeros(vec![layout.n_num, h]))?;
    store.insert(P_CAT, Tensor::matrix(layout.n_cat_rows, h, normal(layout.n_cat_rows * h))?)?;
    let m = normal(h);
    let mask = match mode {
        MaskMode::Shared => Tensor::matrix(1, h, m)?,
        MaskMode::FeatureSpecific => {
            let d = layout.d();
            Tensor::matrix(d, h, m.iter().copied().cycle().take(d * h).collect())?
        }
    };
    store.insert(P_MASK, mask)?;
    store.insert(P_LN_GAMMA, Tensor::full(vec![h], 1.0))?;
    store.insert(P_LN_BETA, Tensor::zeros(vec![h]))?;
    Ok(())
}

/// Row of the mask tensor used by feature `k`.
fn mask_row(mode: MaskMode, k: usize) -> usize {
    match mode {
        MaskMode::Shared => 0,
        MaskMode::FeatureSpecific => k,
    }
}

/// `phi(v_k)` for one cell, outside the graph.
pub fn encode_value(
    layout: &FeatureLayout,
    params: &ParamStore,
    mode: MaskMode,
    k: usize,
    cell: Cell,
    masked: bool,
) -> Result<Vec<f64>> {
    let f = &layout.features[k];
    if masked && cell.is_missing() {
        return Err(Error::protocol(format!(
            "feature `{}`: cannot mask a naturally missing cell",
            f.name
        )));
    }
    if masked || cell.is_missing() {
        return Ok(params.get(P_MASK)?.row(mask_row(mode, k)).to_vec());
    }
    match (cell, f.kind) {
        (Cell::Num(v), FeatureKind::Numerical) => {
            let s = layout.standardize(k, v);
            let w = params.get(P_NUM_W)?.row(f.slot);
            let b = params.get(P_NUM_B)?.row(f.slot);
            Ok(w.iter().zip(b).map(|(w, b)| w * s + b).collect())
        }
        (Cell::Cat(i), FeatureKind::Categorical) if (i as usize) < f.vocab_len => {
            Ok(params.get(P_CAT)?.row(f.slot + i as usize).to_vec())
        }
        _ => Err(Error::Encoding(format!(
            "feature `{}`: cell {cell:?} does not fit a {:?} encoder",
            f.name, f.kind
        ))),
    }
}

/// Tokens of one row plus which positions were masked or naturally missing.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
    pub masked: Vec<usize>,
    pub missing: Vec<usize>,
}

/// Reference (untaped) tokenization of a single row.
pub fn tokenize_row(
    layout: &FeatureLayout,
    names: &NameEmbeddingTable,
    params: &ParamStore,
    mode: MaskMode,
    row: &[Cell],
    mask: &[usize],
) -> Result<TokenMatrix> {
    let d = layout.d();
    if row.len() != d {
        return Err(Error::dimension(format!("row has {} cells, layout {}", row.len(), d)));
    }
    let h = names.vectors.cols();
    let gamma = params.get(P_LN_GAMMA)?.data();
    let beta = params.get(P_LN_BETA)?.data();
    let mut masked_flag = vec![false; d];
    for &k in mask {
        masked_flag[k] = true;
    }
    let mut data = Vec::with_capacity(d * h);
    for k in 0..d {
        let phi = encode_value(layout, params, mode, k, row[k], masked_flag[k])?;
        let x: Vec<f64> = names.vectors.row(k).iter().zip(&phi).map(|(a, b)| a + b).collect();
        data.extend(functional::layer_norm(&x, gamma, beta)?);
    }
    let mut masked = mask.to_vec();
    masked.sort_unstable();
    Ok(TokenMatrix {
        tokens: Tensor::matrix(d, h, data)?,
        masked,
        missing: (0..d).filter(|&k| row[k].is_missing()).collect(),
    })
}

/// Taped tokenization of a batch: returns `[rows.len() * d, h]`.
pub fn embed_batch(
    g: &mut Graph,
    layout: &FeatureLayout,
    names: &NameEmbeddingTable,
    params: &ParamStore,
    mode: MaskMode,
    rows: &[&[Cell]],
    masks: &[&[usize]],
) -> Result<Var> {
    let d = layout.d();
    let h = names.vectors.cols();
    let num_w = g.param(params, P_NUM_W)?;
    let cat = g.param(params, P_CAT)?;
    let mask = g.param(params, P_MASK)?;
    let num_b = g.param(params, P_NUM_B)?;
    let gamma = g.param(params, P_LN_GAMMA)?;
    let beta = g.param(params, P_LN_BETA)?;

    // A bank: [num_w; cat; mask], B bank: [num_b; 0]
    let cat_off = layout.n_num;
    let mask_off = cat_off + layout.n_cat_rows;
    let zero_row = g.constant(Tensor::zeros(vec![1, h]));
    let bank_a = g.concat_rows(&[num_w, cat, mask])?;
    let bank_b = g.concat_rows(&[num_b, zero_row])?;
    let zero_idx = layout.n_num;

    let n = rows.len() * d;
    let mut a_idx = Vec::with_capacity(n);
    let mut b_idx = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    let mut masked_flag = vec![false; d];
    for (row, mask_set) in rows.iter().zip(masks) {
        if row.len() != d {
            return Err(Error::dimension(format!("row has {} cells, layout {}", row.len(), d)));
        }
        masked_flag.iter_mut().for_each(|m| *m = false);
        for &k in mask_set.iter() {
            if row[k].is_missing() {
                return Err(Error::protocol("cannot mask a naturally missing cell"));
            }
            masked_flag[k] = true;
        }
        for (k, (cell, f)) in row.iter().zip(&layout.features).enumerate() {
            let (a, s, b) = if masked_flag[k] || cell.is_missing() {
                (mask_off + mask_row(mode, k), 1.0, zero_idx)
            } else {
                match (cell, f.kind) {
                    (Cell::Num(v), FeatureKind::Numerical) => {
                        (f.slot, layout.standardize(k, *v), f.slot)
                    }
                    (Cell::Cat(i), FeatureKind::Categorical) if (*i as usize) < f.vocab_len => {
                        (cat_off + f.slot + *i as usize, 1.0, zero_idx)
                    }
                    _ => {
                        return Err(Error::Encoding(format!(
                            "feature `{}`: cell {cell:?} does not fit a {:?} encoder",
                            f.name, f.kind
                        )))
                    }
                }
            };
            a_idx.push(a);
            scale.push(s);
            b_idx.push(b);
        }
    }
    let a_rows = g.gather_rows(bank_a, a_idx)?;
    let a_scaled = g.scale_rows(a_rows, scale)?;
    let b_rows = g.gather_rows(bank_b, b_idx)?;
    let phi = g.add(a_scaled, b_rows)?;

    let name_data: Vec<f64> = names.vectors.data().repeat(rows.len());
    let name_rows = g.constant(Tensor::matrix(n, h, name_data)?);
    let x = g.add(name_rows, phi)?;
    g.layer_norm(x, gamma, beta)
}

/// `r_max * (1 - eta / eta_max)^alpha`; `r_max` when `eta_max = 0`.
pub fn adaptive_mask_rate(eta: f64, eta_max: f64, r_max: f64, alpha_mask: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta_max) || eta < 0.0 {
        return Err(Error::protocol(format!(
            "adaptive_mask_rate: need 0 <= eta <= eta_max <= 1, got eta={eta}, eta_max={eta_max}"
        )));
    }
    if eta > eta_max {
        return Err(Error::protocol(format!(
            "adaptive_mask_rate: eta {eta} exceeds eta_max {eta_max}"
        )));
    }
    if !(0.0..=1.0).contains(&r_max) {
        return Err(Error::protocol(format!("r_max {r_max} outside [0, 1]")));
    }
    if !(alpha_mask > 0.0) {
        return Err(Error::protocol(format!("alpha_mask {alpha_mask} must be positive")));
    }
    if eta_max == 0.0 {
        return Ok(r_max);
    }
    Ok(r_max * (1.0 - eta / eta_max).powf(alpha_mask))
}

/// Uniform sample of `round(rate * observed)` observed positions, sorted.
pub fn sample_mask(row: &[Cell], rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let observed: Vec<usize> = (0..row.len()).filter(|&k| !row[k].is_missing()).collect();
    let count = (rate.clamp(0.0, 1.0) * observed.len() as f64).round() as usize;
    if count == 0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, observed.len(), count)
        .into_iter()
        .map(|i| observed[i])
        .collect();
    picked.sort_unstable();
    picked
}
