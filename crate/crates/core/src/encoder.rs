//! Pre-norm Transformer encoder over feature tokens, mean pooling and the
//! task head.
//!
//! Activations are batched as `[B * d, h]`: `B` rows of `d` tokens each.
//! Attention runs independently inside every block of `d` consecutive tokens.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const P_HEAD_W: &str = "head.cls.w";
pub const P_HEAD_B: &str = "head.cls.b";
pub const INIT_STD: f64 = 0.02;

/// Named model sizes. Shapes keep the ratios of the large-model ladder at a
/// width a laptop CPU trains in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Base,
    S,
    M,
    L,
    Xl,
    Distill,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Base,
        Preset::S,
        Preset::M,
        Preset::L,
        Preset::Xl,
        Preset::Distill,
    ];

    pub fn config(self) -> EncoderConfig {
        let (layers, heads, kv, d_model) = match self {
            Preset::Base | Preset::Distill => (2, 4, 8, 32),
            Preset::S => (2, 6, 8, 48),
            Preset::M => (3, 6, 8, 48),
            Preset::L => (3, 8, 8, 64),
            Preset::Xl => (4, 8, 8, 64),
        };
        EncoderConfig {
            layers,
            heads,
            kv,
            d_model,
            ffn_mult: 4,
            preset: Some(self),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Base => "base",
            Preset::S => "s",
            Preset::M => "m",
            Preset::L => "l",
            Preset::Xl => "xl",
            Preset::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Per-head key/value width.
    pub kv: usize,
    /// Token width `h`.
    pub d_model: usize,
    pub ffn_mult: usize,
    #[serde(default)]
    pub preset: Option<Preset>,
}

impl EncoderConfig {
    pub fn attn_width(&self) -> usize {
        self.heads * self.kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::protocol("encoder d_model must be positive"));
        }
        if self.layers > 0 && (self.heads == 0 || self.kv == 0 || self.ffn_mult == 0) {
            return Err(Error::protocol("encoder heads, kv and ffn_mult must be positive"));
        }
        Ok(())
    }
}

fn lp(l: usize, s: &str) -> String {
    format!("enc.{l}.{s}")
}

/// Normal draws with std `std`, redrawn outside two standard deviations.
pub fn truncated_normal(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// Shapes of every encoder-block parameter, in insertion order.
fn block_shapes(cfg: &EncoderConfig, l: usize) -> Vec<(String, Vec<usize>)> {
    let (h, a, f) = (cfg.d_model, cfg.attn_width(), cfg.ffn_mult * cfg.d_model);
    vec![
        (lp(l, "ln1.gamma"), vec![h]),
        (lp(l, "ln1.beta"), vec![h]),
        (lp(l, "attn.wq"), vec![h, a]),
        (lp(l, "attn.bq"), vec![a]),
        (lp(l, "attn.wk"), vec![h, a]),
        (lp(l, "attn.bk"), vec![a]),
        (lp(l, "attn.wv"), vec![h, a]),
        (lp(l, "attn.bv"), vec![a]),
        (lp(l, "attn.wo"), vec![a, h]),
        (lp(l, "attn.bo"), vec![h]),
        (lp(l, "ln2.gamma"), vec![h]),
        (lp(l, "ln2.beta"), vec![h]),
        (lp(l, "ffn.w1"), vec![h, f]),
        (lp(l, "ffn.b1"), vec![f]),
        (lp(l, "ffn.w2"), vec![f, h]),
        (lp(l, "ffn.b2"), vec![h]),
    ]
}

pub fn init_encoder_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    for l in 0..cfg.layers {
        for (name, shape) in block_shapes(cfg, l) {
            let n = shape.iter().product();
            let t = if name.ends_with("gamma") {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 2 {
                Tensor::new(shape, truncated_normal(n, INIT_STD, rng))?
            } else {
                Tensor::zeros(shape)
            };
            store.insert(name, t)?;
        }
    }
    Ok(())
}

pub fn init_head_params(store: &mut ParamStore, h: usize, n_out: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert(P_HEAD_W, Tensor::matrix(h, n_out, truncated_normal(h * n_out, INIT_STD, rng))?)?;
    store.insert(P_HEAD_B, Tensor::zeros(vec![n_out]))?;
    Ok(())
}

/// `x W + b` for `x: [n, i]`, `W: [i, o]`, `b: [o]`.
pub fn linear(g: &mut Graph, params: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = g.param(params, w)?;
    let b = g.param(params, b)?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Runs the block stack on `x: [B * d, h]`. Zero layers is the identity.
pub fn encoder_forward(g: &mut Graph, params: &ParamStore, cfg: &EncoderConfig, x: Var, d: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::dimension(format!(
            "encoder input {shape:?}, expected width {}",
            cfg.d_model
        )));
    }
    let mut x = x;
    for l in 0..cfg.layers {
        let (ga, be) = (g.param(params, &lp(l, "ln1.gamma"))?, g.param(params, &lp(l, "ln1.beta"))?);
        let n1 = g.layer_norm(x, ga, be)?;
        let q = linear(g, params, n1, &lp(l, "attn.wq"), &lp(l, "attn.bq"))?;
        let k = linear(g, params, n1, &lp(l, "attn.wk"), &lp(l, "attn.bk"))?;
        let v = linear(g, params, n1, &lp(l, "attn.wv"), &lp(l, "attn.bv"))?;
        let a = g.attention(q, k, v, d, cfg.heads, cfg.kv)?;
        let o = linear(g, params, a, &lp(l, "attn.wo"), &lp(l, "attn.bo"))?;
        x = g.add(x, o)?;

        let (ga, be) = (g.param(params, &lp(l, "ln2.gamma"))?, g.param(params, &lp(l, "ln2.beta"))?);
        let n2 = g.layer_norm(x, ga, be)?;
        let f = linear(g, params, n2, &lp(l, "ffn.w1"), &lp(l, "ffn.b1"))?;
        let f = g.gelu(f);
        let f = linear(g, params, f, &lp(l, "ffn.w2"), &lp(l, "ffn.b2"))?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// Mean over each row's `d` tokens: `[B * d, h] -> [B, h]`.
pub fn pool(g: &mut Graph, z: Var, d: usize) -> Result<Var> {
    g.mean_groups(z, d)
}

/// Linear task head: `[B, h] -> [B, n_out]`.
pub fn classify(g: &mut Graph, params: &ParamStore, z: Var) -> Result<Var> {
    linear(g, params, z, P_HEAD_W, P_HEAD_B)
}

/// Encoder-block plus task-head parameters; embedding tables are excluded.
pub fn param_count(cfg: &EncoderConfig, n_out: usize) -> usize {
    let blocks: usize = (0..cfg.layers)
        .flat_map(|l| block_shapes(cfg, l))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    blocks + cfg.d_model * n_out + n_out
}
