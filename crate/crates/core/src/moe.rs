//! Mixture-of-experts reconstruction head: one shared affine expert plus
//! `k_r` routed affine experts chosen per token by centroid matching.
//!
//! Gates are the softmax of `z . e_i`, truncated to the `k_a` largest
//! entries and not renormalized. Ties at the cut go to the lower index.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{linear, truncated_normal, INIT_STD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{functional, Graph, ParamStore, Tensor, Var};
use crate::objectives::{decode_loss, MaskedTargets, MlmVars};

pub const P_SHARED_W: &str = "moe.shared.w";
pub const P_SHARED_B: &str = "moe.shared.b";
pub const P_CENTROIDS: &str = "moe.centroids";

pub fn expert_w(i: usize) -> String {
    format!("moe.expert.{i}.w")
}

pub fn expert_b(i: usize) -> String {
    format!("moe.expert.{i}.b")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    /// Routed experts.
    pub k_r: usize,
    /// Active routed experts per token.
    pub k_a: usize,
    pub alpha_moe: f64,
    pub beta_moe: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            k_r: 4,
            k_a: 2,
            alpha_moe: 0.5,
            beta_moe: 0.5,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_a < 1 || self.k_a > self.k_r {
            return Err(Error::protocol(format!(
                "moe needs 1 <= k_a <= k_r, got k_a={} k_r={}",
                self.k_a, self.k_r
            )));
        }
        if !(self.alpha_moe >= 0.0 && self.beta_moe >= 0.0) {
            return Err(Error::protocol("moe loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Random unit-norm rows.
pub fn unit_rows(rows: usize, h: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * h);
    for _ in 0..rows {
        let v: Vec<f64> = (0..h).map(|_| StandardNormal.sample(rng)).collect();
        let n = functional::norm(&v);
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

pub fn init_moe_params(store: &mut ParamStore, h: usize, cfg: &MoeConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    store.insert(P_SHARED_W, Tensor::matrix(h, h, truncated_normal(h * h, INIT_STD, rng))?)?;
    store.insert(P_SHARED_B, Tensor::zeros(vec![h]))?;
    for i in 0..cfg.k_r {
        store.insert(expert_w(i), Tensor::matrix(h, h, truncated_normal(h * h, INIT_STD, rng))?)?;
        store.insert(expert_b(i), Tensor::zeros(vec![h]))?;
    }
    store.insert(P_CENTROIDS, Tensor::matrix(cfg.k_r, h, unit_rows(cfg.k_r, h, rng))?)?;
    Ok(())
}

/// Indices of the `k` largest scores; equal scores prefer the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Gate vector of one token: truncated softmax of centroid scores.
pub fn route(z: &[f64], centroids: &Tensor, k_a: usize) -> Result<Vec<f64>> {
    let k_r = centroids.rows();
    if k_a < 1 || k_a > k_r {
        return Err(Error::protocol(format!("route needs 1 <= k_a <= {k_r}, got {k_a}")));
    }
    if centroids.cols() != z.len() {
        return Err(Error::dimension(format!(
            "route: token width {} vs centroid width {}",
            z.len(),
            centroids.cols()
        )));
    }
    let scores: Vec<f64> = (0..k_r).map(|i| functional::dot(z, centroids.row(i))).collect();
    let s = functional::softmax(&scores)?;
    let keep = top_k(&s, k_a);
    Ok(s.iter().zip(keep).map(|(&v, k)| if k { v } else { 0.0 }).collect())
}

fn affine(z: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|c| b.data()[c] + (0..i).map(|r| z[r] * w.data()[r * o + c]).sum::<f64>())
        .collect()
}

/// Shared and routed predictions of one token, outside the graph. Experts
/// with a zero gate are not evaluated.
pub fn moe_predictions(z: &[f64], params: &ParamStore, cfg: &MoeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let shared = affine(z, params.get(P_SHARED_W)?, params.get(P_SHARED_B)?);
    let gates = route(z, params.get(P_CENTROIDS)?, cfg.k_a)?;
    let mut routed = vec![0.0; shared.len()];
    for (i, &gi) in gates.iter().enumerate() {
        if gi > 0.0 {
            let e = affine(z, params.get(&expert_w(i))?, params.get(&expert_b(i))?);
            for (r, v) in routed.iter_mut().zip(e) {
                *r += gi * v;
            }
        }
    }
    Ok((shared, routed))
}

/// Graph nodes of the head on masked tokens `zm: [n, h]`.
pub struct MoeVars {
    pub shared: Var,
    pub routed: Var,
    pub gates: Var,
}

pub fn moe_forward(g: &mut Graph, params: &ParamStore, cfg: &MoeConfig, zm: Var) -> Result<MoeVars> {
    cfg.validate()?;
    let shared = linear(g, params, zm, P_SHARED_W, P_SHARED_B)?;
    let c = g.param(params, P_CENTROIDS)?;
    let scores = g.matmul_nt(zm, c)?;
    let s = g.softmax_rows(scores)?;
    let (n, k_r) = (g.value(s).rows(), g.value(s).cols());
    if k_r != cfg.k_r {
        return Err(Error::dimension(format!("{k_r} centroids for k_r = {}", cfg.k_r)));
    }
    let mut keep = Vec::with_capacity(n * k_r);
    for i in 0..n {
        keep.extend(top_k(g.value(s).row(i), cfg.k_a).into_iter().map(|k| if k { 1.0 } else { 0.0 }));
    }
    let keep = g.constant(Tensor::matrix(n, k_r, keep)?);
    let gates = g.mul(s, keep)?;
    let mut routed: Option<Var> = None;
    for i in 0..cfg.k_r {
        let e = linear(g, params, zm, &expert_w(i), &expert_b(i))?;
        let term = g.scale_by_column(e, gates, i)?;
        routed = Some(match routed {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(MoeVars {
        shared,
        routed: routed.expect("k_r >= 1"),
        gates,
    })
}

/// `alpha_moe * L_shared + beta_moe * L_routed`, both through the
/// type-aware decoders and averaged like the plain reconstruction loss.
pub fn moe_mlm_loss(g: &mut Graph, model: &Model, cfg: &MoeConfig, zm: Var, t: &MaskedTargets) -> Result<MlmVars> {
    let v = moe_forward(g, &model.params, cfg, zm)?;
    let ls = decode_loss(g, model, v.shared, t)?;
    let lr = decode_loss(g, model, v.routed, t)?;
    let total = g.linear_combination(&[(ls, cfg.alpha_moe), (lr, cfg.beta_moe)])?;
    Ok(MlmVars {
        total,
        shared: Some(ls),
        routed: Some(lr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cell;
    use crate::model::tests::toy_model;
    use crate::objectives::{mlm_loss, P_MLM_B, P_MLM_W};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centroids(rows: Vec<Vec<f64>>) -> Tensor {
        let h = rows[0].len();
        Tensor::matrix(rows.len(), h, rows.concat()).unwrap()
    }

    #[test]
    fn route_examples() {
        let c = centroids(vec![vec![0.3, -0.2]]);
        assert_eq!(route(&[1.0, 2.0], &c, 1).unwrap(), vec![1.0]);

        let c = centroids(vec![vec![0.0], vec![0.0], vec![2f64.ln()]]);
        let g = route(&[1.0], &c, 1).unwrap();
        assert_eq!(g[..2], [0.0, 0.0]);
        assert!((g[2] - 0.5).abs() < 1e-15);
        let full = route(&[1.0], &c, 3).unwrap();
        for (a, b) in full.iter().zip([0.25, 0.25, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        // tie at the cut: lower index wins
        let g = route(&[1.0], &c, 2).unwrap();
        assert!(g[0] > 0.0 && g[1] == 0.0 && g[2] > 0.0);
    }

    #[test]
    fn gate_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..500 {
            let k_r = 1 + trial % 5;
            let k_a = 1 + rng.gen_range(0..k_r);
            let c = Tensor::matrix(k_r, 6, unit_rows(k_r, 6, &mut rng)).unwrap();
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = route(&z, &c, k_a).unwrap();
            assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), k_a);
            let sum: f64 = g.iter().sum();
            if k_a == k_r {
                assert!((sum - 1.0).abs() < 1e-12);
            } else {
                assert!(sum < 1.0);
                assert!(g.iter().all(|&v| v == 0.0 || (v > 0.0 && v < 1.0)));
            }
        }
    }

    fn moe_params(h: usize, cfg: &MoeConfig, seed: u64) -> ParamStore {
        let mut p = ParamStore::new();
        init_moe_params(&mut p, h, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn full_gating_matches_dense_mixture() {
        let cfg = MoeConfig {
            k_r: 3,
            k_a: 3,
            ..MoeConfig::default()
        };
        let p = moe_params(4, &cfg, 2);
        let z = [0.3, -1.0, 0.7, 0.2];
        let (_, routed) = moe_predictions(&z, &p, &cfg).unwrap();
        let c = p.get(P_CENTROIDS).unwrap();
        let s = functional::softmax(&(0..3).map(|i| functional::dot(&z, c.row(i))).collect::<Vec<_>>()).unwrap();
        let mut dense = [0.0; 4];
        for i in 0..3 {
            let e = affine(&z, p.get(&expert_w(i)).unwrap(), p.get(&expert_b(i)).unwrap());
            for (d, v) in dense.iter_mut().zip(e) {
                *d += s[i] * v;
            }
        }
        for (a, b) in routed.iter().zip(dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_experts_collapse() {
        let cfg = MoeConfig {
            k_r: 2,
            k_a: 2,
            ..MoeConfig::default()
        };
        let mut p = moe_params(3, &cfg, 4);
        let (w, b) = (p.get(&expert_w(0)).unwrap().clone(), p.get(&expert_b(0)).unwrap().clone());
        *p.get_mut(&expert_w(1)).unwrap() = w.clone();
        *p.get_mut(&expert_b(1)).unwrap() = b.clone();
        let z = [1.0, 0.5, -0.5];
        let (_, routed) = moe_predictions(&z, &p, &cfg).unwrap();
        for (a, e) in routed.iter().zip(affine(&z, &w, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_two_by_two() {
        let cfg = MoeConfig {
            k_r: 2,
            k_a: 1,
            ..MoeConfig::default()
        };
        let mut p = ParamStore::new();
        p.insert(P_SHARED_W, Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        p.insert(P_SHARED_B, Tensor::vector(vec![0.5, 0.5])).unwrap();
        p.insert(expert_w(0), Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        p.insert(expert_b(0), Tensor::vector(vec![0.0, 0.0])).unwrap();
        p.insert(expert_w(1), Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        p.insert(expert_b(1), Tensor::vector(vec![1.0, -1.0])).unwrap();
        // z . e = [0, ln 3]: s = [0.25, 0.75], expert 1 wins
        p.insert(P_CENTROIDS, Tensor::matrix(2, 2, vec![0.0, 0.0, 3f64.ln(), 0.0]).unwrap()).unwrap();
        let (shared, routed) = moe_predictions(&[1.0, 2.0], &p, &cfg).unwrap();
        assert_eq!(shared, vec![1.5, 2.5]);
        // 0.75 * ([2, 1] + [1, -1]) = [2.25, 0]
        assert!((routed[0] - 2.25).abs() < 1e-12 && routed[1].abs() < 1e-12);
    }

    #[test]
    fn graph_matches_reference() {
        let cfg = MoeConfig::default();
        let p = moe_params(5, &cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let zm = g.constant(Tensor::matrix(3, 5, zs.clone()).unwrap());
        let v = moe_forward(&mut g, &p, &cfg, zm).unwrap();
        for i in 0..3 {
            let (s, r) = moe_predictions(&zs[i * 5..(i + 1) * 5], &p, &cfg).unwrap();
            for (a, b) in g.value(v.shared).row(i).iter().zip(&s) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in g.value(v.routed).row(i).iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn moe_loss(model: &Model, rows: &[Vec<Cell>], masks: &[Vec<usize>]) -> (f64, f64, f64) {
        let mut g = Graph::new();
        let mrefs: Vec<&[usize]> = masks.iter().map(|m| m.as_slice()).collect();
        let z = model.encode(&mut g, rows, &mrefs).unwrap();
        let t = MaskedTargets::new(rows, &mrefs, model.d());
        let v = mlm_loss(&mut g, model, z, &t).unwrap();
        (
            g.value(v.total).item(),
            g.value(v.shared.unwrap()).item(),
            g.value(v.routed.unwrap()).item(),
        )
    }

    #[test]
    fn loss_weights() {
        let cfg = MoeConfig {
            k_r: 2,
            k_a: 1,
            alpha_moe: 0.7,
            beta_moe: 0.0,
        };
        let (model, ds) = toy_model(1, Some(cfg));
        let masks = vec![vec![0, 1], vec![2], vec![1], vec![0]];
        let (total, shared, _) = moe_loss(&model, &ds.rows, &masks);
        assert_eq!(total, 0.7 * shared);
    }

    #[test]
    fn equal_halves_reduce_to_plain_head() {
        let cfg = MoeConfig {
            k_r: 2,
            k_a: 2,
            alpha_moe: 0.5,
            beta_moe: 0.5,
        };
        let (mut model, ds) = toy_model(1, Some(cfg));
        // every expert equals the shared one, so routed == shared
        let (w, b) = (model.params.get(P_SHARED_W).unwrap().clone(), model.params.get(P_SHARED_B).unwrap().clone());
        for i in 0..2 {
            *model.params.get_mut(&expert_w(i)).unwrap() = w.clone();
            *model.params.get_mut(&expert_b(i)).unwrap() = b.clone();
        }
        let masks = vec![vec![0, 1], vec![2], vec![1], vec![0]];
        let (total, _, _) = moe_loss(&model, &ds.rows, &masks);

        let mut plain = model.clone();
        plain.config.moe = None;
        plain.params.insert(P_MLM_W, w).unwrap();
        plain.params.insert(P_MLM_B, b).unwrap();
        let mut g = Graph::new();
        let mrefs: Vec<&[usize]> = masks.iter().map(|m| m.as_slice()).collect();
        let z = plain.encode(&mut g, &ds.rows, &mrefs).unwrap();
        let t = MaskedTargets::new(&ds.rows, &mrefs, 4);
        let l = mlm_loss(&mut g, &plain, z, &t).unwrap();
        assert!((total - g.value(l.total).item()).abs() < 1e-12);
    }

    #[test]
    fn one_numerical_cell_by_hand() {
        let cfg = MoeConfig {
            k_r: 2,
            k_a: 1,
            alpha_moe: 0.25,
            beta_moe: 0.75,
        };
        let (model, ds) = toy_model(0, Some(cfg));
        let masks = vec![vec![0]];
        let rows = vec![ds.rows[0].clone()];
        let (total, _, _) = moe_loss(&model, &rows, &masks);
        // recompute from the token with plain loops
        let mut g = Graph::new();
        let z = model.encode(&mut g, &rows, &[&[0]]).unwrap();
        let z0 = g.value(z).row(0).to_vec();
        let (s, r) = moe_predictions(&z0, &model.params, &cfg).unwrap();
        let w = model.params.get(crate::objectives::P_NUM_OUT_W).unwrap().data();
        let b = model.params.get(crate::objectives::P_NUM_OUT_B).unwrap().data()[0];
        let target = model.layout.standardize(0, 1.0);
        let read = |p: &[f64]| functional::dot(p, w) + b;
        let expected = 0.25 * (read(&s) - target).powi(2) + 0.75 * (read(&r) - target).powi(2);
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn unselected_experts_have_no_influence() {
        let cfg = MoeConfig {
            k_r: 4,
            k_a: 1,
            ..MoeConfig::default()
        };
        let (model, ds) = toy_model(1, Some(cfg));
        let rows = vec![ds.rows[0].clone()];
        let masks = vec![vec![2]];
        let mut g = Graph::new();
        let z = model.encode(&mut g, &rows, &[&[2]]).unwrap();
        let z2 = g.value(z).row(2).to_vec();
        let gates = route(&z2, model.params.get(P_CENTROIDS).unwrap(), 1).unwrap();
        let chosen = gates.iter().position(|&v| v > 0.0).unwrap();
        let base = moe_loss(&model, &rows, &masks).0;
        for i in 0..4 {
            let mut m = model.clone();
            for v in m.params.get_mut(&expert_w(i)).unwrap().data_mut() {
                *v += 0.1;
            }
            let l = moe_loss(&m, &rows, &masks).0;
            if i == chosen {
                assert_ne!(l, base);
            } else {
                assert_eq!(l.to_bits(), base.to_bits());
            }
        }
    }

    #[test]
    fn utilization_is_roughly_balanced() {
        let cfg = MoeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 16;
        let c = Tensor::matrix(cfg.k_r, h, unit_rows(cfg.k_r, h, &mut rng)).unwrap();
        let mut counts = vec![0usize; cfg.k_r];
        let n = 10_000;
        for _ in 0..n {
            let z: Vec<f64> = (0..h).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (i, g) in route(&z, &c, cfg.k_a).unwrap().iter().enumerate() {
                if *g > 0.0 {
                    counts[i] += 1;
                }
            }
        }
        let uniform = (n * cfg.k_a) as f64 / cfg.k_r as f64;
        for &c in &counts {
            let r = c as f64 / uniform;
            assert!((0.5..=2.0).contains(&r), "{counts:?}");
        }
    }
}
