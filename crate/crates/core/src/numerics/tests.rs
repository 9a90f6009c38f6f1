use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const TRIALS: usize = 100;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces an arbitrary-shaped node to a scalar with fixed random weights so
/// that every output entry contributes a distinct gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

/// Runs `TRIALS` seeded grad checks of `build` over random parameters with the
/// given shapes, returning the worst relative error.
fn check_op(
    shapes: &[(&str, Vec<usize>)],
    build: impl Fn(&mut Graph, &ParamStore, &mut ChaCha8Rng) -> Result<Var>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            store.insert(*name, rand_tensor(&mut rng, shape)).unwrap();
        }
        let build_seed = rng.gen::<u64>();
        let err = grad_check(&mut store, None, DEFAULT_STEP, |p| {
            let mut g = Graph::new();
            let mut r = ChaCha8Rng::seed_from_u64(build_seed);
            let out = build(&mut g, p, &mut r)?;
            let loss = if g.value(out).len() == 1 {
                out
            } else {
                project(&mut g, out, trial)?
            };
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), grads))
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn polynomial_grad_check() {
    let mut store = ParamStore::new();
    store.insert("theta", Tensor::scalar(3.0)).unwrap();
    let err = grad_check(&mut store, None, DEFAULT_STEP, |p| {
        let mut g = Graph::new();
        let t = g.param(p, "theta")?;
        let sq = g.mul(t, t)?;
        let grads = g.backward(sq)?;
        Ok((g.value(sq).item(), grads))
    })
    .unwrap();
    assert!(err < 1e-8, "{err}");
    let mut g = Graph::new();
    let t = g.param(&store, "theta").unwrap();
    let sq = g.mul(t, t).unwrap();
    assert_eq!(g.backward(sq).unwrap()["theta"].item(), 6.0);
}

#[test]
fn matmul_grads() {
    let err = check_op(&[("a", vec![3, 4]), ("b", vec![4, 2])], |g, p, _| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        g.matmul(a, b)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn matmul_nt_grads() {
    let err = check_op(&[("a", vec![3, 4]), ("b", vec![5, 4])], |g, p, _| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        g.matmul_nt(a, b)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn elementwise_grads() {
    let err = check_op(&[("a", vec![2, 3]), ("b", vec![2, 3])], |g, p, _| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        let sc = g.scale(m, -0.7);
        Ok(g.add_const(sc, 0.3))
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn broadcast_and_row_scaling_grads() {
    let err = check_op(
        &[("x", vec![4, 3]), ("b", vec![3]), ("gates", vec![4, 2])],
        |g, p, rng| {
            let (x, b, gates) = (g.param(p, "x")?, g.param(p, "b")?, g.param(p, "gates")?);
            let y = g.add_row(x, b)?;
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = g.scale_rows(y, s)?;
            g.scale_by_column(y, gates, 1)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn concat_and_gather_grads() {
    let err = check_op(&[("a", vec![2, 3]), ("b", vec![3, 3])], |g, p, _| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let c = g.concat_rows(&[a, b])?;
        g.gather_rows(c, vec![4, 0, 0, 2, 1])
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm_grads() {
    let err = check_op(
        &[("x", vec![3, 5]), ("gamma", vec![5]), ("beta", vec![5])],
        |g, p, _| {
            let (x, ga, be) = (g.param(p, "x")?, g.param(p, "gamma")?, g.param(p, "beta")?);
            g.layer_norm(x, ga, be)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm_graph_matches_reference() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
    let ga = g.constant(Tensor::vector(vec![3.0, 3.0]));
    let be = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let y = g.layer_norm(x, ga, be).unwrap();
    let reference = layer_norm(&[2.0, 0.0], &[3.0, 3.0], &[1.0, 1.0]).unwrap();
    assert_eq!(g.value(y).data(), reference.as_slice());
}

#[test]
fn gelu_and_sigmoid_grads() {
    let err = check_op(&[("x", vec![2, 4])], |g, p, _| {
        let x = g.param(p, "x")?;
        let y = g.gelu(x);
        Ok(g.sigmoid(y))
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_grads() {
    // two blocks of three tokens, two heads of width two
    let err = check_op(
        &[("q", vec![6, 4]), ("k", vec![6, 4]), ("v", vec![6, 4])],
        |g, p, _| {
            let (q, k, v) = (g.param(p, "q")?, g.param(p, "k")?, g.param(p, "v")?);
            g.attention(q, k, v, 3, 2, 2)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn mean_groups_and_softmax_grads() {
    let err = check_op(&[("x", vec![6, 3])], |g, p, _| {
        let x = g.param(p, "x")?;
        let m = g.mean_groups(x, 3)?;
        g.softmax_rows(m)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn regression_and_bce_losses_grads() {
    let err = check_op(&[("z", vec![5])], |g, p, rng| {
        let z = g.param(p, "z")?;
        let t: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..5).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..1.0)).collect();
        let a = g.weighted_sq_err(z, t, w.clone())?;
        let b = g.bce_logits(z, y, w)?;
        g.linear_combination(&[(a, 0.3), (b, 0.7)])
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_cross_entropy_grads() {
    let err = check_op(&[("logits", vec![3, 4])], |g, p, rng| {
        let z = g.param(p, "logits")?;
        let labels = (0..3).map(|_| rng.gen_range(0..4)).collect();
        g.softmax_ce(z, labels, vec![1.0 / 3.0; 3])
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn dot_score_ce_grads() {
    let err = check_op(&[("pred", vec![3, 4]), ("bank", vec![7, 4])], |g, p, rng| {
        let (pr, bank) = (g.param(p, "pred")?, g.param(p, "bank")?);
        let spans = vec![(0, 3), (3, 4), (1, 2)];
        let targets = spans.iter().map(|&(_, l)| rng.gen_range(0..l)).collect();
        g.dot_score_ce(pr, bank, spans, targets, vec![0.5, 0.25, 0.25])
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn cosine_grads() {
    let err = check_op(&[("a", vec![3, 5]), ("b", vec![3, 5])], |g, p, _| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        g.cosine_rows(a, b)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn cosine_degenerate_rows_have_no_gradient() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
    store.insert("b", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.param(&store, "a").unwrap(), g.param(&store, "b").unwrap());
    let c = g.cosine_rows(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[0.0]);
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert!(grads["b"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_rows_positive_and_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..TRIALS {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 7]));
        let x = g.scale(x, 10.0);
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(7) {
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        store.insert("q", rand_tensor(&mut rng, &[6, 4])).unwrap();
        store.insert("w", rand_tensor(&mut rng, &[4, 4])).unwrap();
        let mut g = Graph::new();
        let (q, w) = (g.param(&store, "q").unwrap(), g.param(&store, "w").unwrap());
        let x = g.matmul(q, w).unwrap();
        let a = g.attention(x, x, x, 3, 2, 2).unwrap();
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        (g.value(l).item().to_bits(), grads)
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn shared_param_leaf_accumulates() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::vector(vec![2.0])).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, "x").unwrap();
    let b = g.param(&store, "x").unwrap();
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    let s = g.add(y, a).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads["x"].item(), 5.0);
}

#[test]
fn frozen_graph_has_no_grads() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::vector(vec![2.0])).unwrap();
    let mut g = Graph::frozen();
    let a = g.param(&store, "x").unwrap();
    let y = g.mul(a, a).unwrap();
    assert!(g.backward(y).unwrap().is_empty());
}

#[test]
fn dimension_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(g.matmul(a, b).is_err());
    assert!(g.gather_rows(a, vec![2]).is_err());
    let nan = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
    assert!(matches!(g.softmax_rows(nan), Err(crate::Error::Numeric(_))));
}
