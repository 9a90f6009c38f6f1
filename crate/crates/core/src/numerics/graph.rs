//! Reverse-mode differentiation over an explicit tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the backward pass. Nodes are appended in execution order, so walking
//! the tape from the end visits each node once in reverse topological order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::functional::{
    gelu, gelu_grad, layer_norm_into, log_sum_exp, sigmoid, softmax_into, softplus,
};
use crate::numerics::{Grads, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Below this norm a cosine is treated as undefined: value 0, no gradient.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleRows(Var, Vec<f64>),
    ScaleByColumn {
        x: Var,
        gates: Var,
        col: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        head_dim: usize,
        probs: Vec<f64>,
    },
    MeanGroups(Var, usize),
    SoftmaxRows(Var),
    Sum(Var),
    WeightedSqErr {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    DotScoreCe {
        pred: Var,
        bank: Var,
        spans: Vec<(usize, usize)>,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<Vec<f64>>,
    },
    CosineRows {
        a: Var,
        b: Var,
        degenerate: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass and its tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: bool,
}

/// `C = op(A) * op(B) + beta * C` for row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three slices, whose lengths are checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} produced a non-finite value")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are constants: for inference only.
    pub fn frozen() -> Self {
        Graph {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            needs_grad: !self.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul_nt {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::new(shape, data).expect("shape preserved"), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[i, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(Error::dimension(format!(
                "add_row {:?} + {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let shape = self.shape(x).to_vec();
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(Tensor::new(shape, data).expect("shape preserved"), Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        self.push(Tensor::new(shape, data).expect("shape preserved"), Op::AddConst(x), &[x])
    }

    /// Multiply row `i` by the constant `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if s.len() != r {
            return Err(Error::dimension(format!(
                "scale_rows: {} rows, {} factors",
                r,
                s.len()
            )));
        }
        let shape = self.shape(x).to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .zip(&s)
            .flat_map(|(row, &f)| row.iter().map(move |v| v * f))
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::ScaleRows(x, s), &[x]))
    }

    /// Multiply row `i` of `x` by `gates[i, col]` (a differentiable factor).
    pub fn scale_by_column(&mut self, x: Var, gates: Var, col: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (gr, gc) = self.dims(gates);
        if gr != r || col >= gc {
            return Err(Error::dimension(format!(
                "scale_by_column {:?} by column {} of {:?}",
                self.shape(x),
                col,
                self.shape(gates)
            )));
        }
        let g = self.value(gates).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .enumerate()
            .flat_map(|(i, row)| {
                let f = g[i * gc + col];
                row.iter().map(move |v| v * f)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ScaleByColumn { x, gates, col },
            &[x, gates],
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dimension("concat_rows of nothing"));
        };
        let c = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::dimension(format!(
                    "concat_rows column mismatch {} vs {}",
                    pc, c
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::matrix(rows, c, data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Select rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dimension(format!("gather index {bad} out of {r} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        Ok(self.push(Tensor::matrix(n, c, data)?, Op::GatherRows(x, idx), &[x]))
    }

    /// Row-wise layer normalization with shared `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c || c == 0 {
            return Err(Error::dimension(format!(
                "layer_norm {:?} with gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            inv_std.push(layer_norm_into(row, &ones, &zeros, &mut xhat[i * c..(i + 1) * c]));
            layer_norm_into(row, gv, bv, &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::new(shape, data).expect("shape preserved"), Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        self.push(Tensor::new(shape, data).expect("shape preserved"), Op::Sigmoid(x), &[x])
    }

    /// Multi-head scaled dot-product attention, full and unmasked, applied
    /// independently to consecutive blocks of `group` rows.
    ///
    /// `q`, `k`, `v` are `[blocks * group, heads * head_dim]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let (r, c) = self.dims(q);
        if self.dims(k) != (r, c)
            || self.dims(v) != (r, c)
            || c != heads * head_dim
            || group == 0
            || r % group != 0
        {
            return Err(Error::dimension(format!(
                "attention q{:?} k{:?} v{:?} group {} heads {} head_dim {}",
                self.shape(q),
                self.shape(k),
                self.shape(v),
                group,
                heads,
                head_dim
            )));
        }
        let blocks = r / group;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; blocks * heads * group * group];
        let mut out = vec![0.0; r * c];
        let mut scores = vec![0.0; group];
        for blk in 0..blocks {
            for h in 0..heads {
                let off = h * head_dim;
                let p_base = (blk * heads + h) * group * group;
                for i in 0..group {
                    let qi = &qv[(blk * group + i) * c + off..][..head_dim];
                    for j in 0..group {
                        let kj = &kv[(blk * group + j) * c + off..][..head_dim];
                        scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let p = &mut probs[p_base + i * group..p_base + (i + 1) * group];
                    softmax_into(&scores, p);
                    let o = &mut out[(blk * group + i) * c + off..][..head_dim];
                    for j in 0..group {
                        let vj = &vv[(blk * group + j) * c + off..][..head_dim];
                        let pj = p[j];
                        for t in 0..head_dim {
                            o[t] += pj * vj[t];
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        check_finite(&out, "attention")?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                head_dim,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean over consecutive blocks of `group` rows: `[n * group, c] -> [n, c]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if group == 0 || r % group != 0 {
            return Err(Error::dimension(format!(
                "mean_groups: {r} rows not divisible into groups of {group}"
            )));
        }
        let n = r / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let o = &mut out[b * c..(b + 1) * c];
            for i in 0..group {
                for (acc, v) in o.iter_mut().zip(&src[(b * group + i) * c..][..c]) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v /= group as f64;
            }
        }
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::MeanGroups(x, group), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        check_finite(self.value(x), "softmax input")?;
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum_k c_k * x_k` over scalar nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::dimension("linear_combination expects scalars"));
            }
            let scaled = self.scale(v, c);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::dimension("linear_combination of nothing"))
    }

    fn check_len(&self, x: Var, n: usize, what: &str) -> Result<()> {
        if self.value(x).len() != n {
            return Err(Error::dimension(format!(
                "{what}: expected {n} entries, got {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// `sum_i w_i * (pred_i - target_i)^2`.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        self.check_len(pred, target.len(), "weighted_sq_err")?;
        if weights.len() != target.len() {
            return Err(Error::dimension("weighted_sq_err weights"));
        }
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(&target)
            .zip(&weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            },
            &[pred],
        ))
    }

    /// Sigmoid + binary cross-entropy on logits: `sum_i w_i * bce(z_i, y_i)`.
    pub fn bce_logits(&mut self, logits: Var, target: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        self.check_len(logits, target.len(), "bce_logits")?;
        if weights.len() != target.len() {
            return Err(Error::dimension("bce_logits weights"));
        }
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(&target)
            .zip(&weights)
            .map(|((&z, &y), &w)| w * (softplus(z) - y * z))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                target,
                weights,
            },
            &[logits],
        ))
    }

    /// Softmax + categorical cross-entropy: `sum_i w_i * ce(logits_i, label_i)`.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if labels.len() != r || weights.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(Error::dimension(format!(
                "softmax_ce: logits {:?}, {} labels",
                self.shape(logits),
                labels.len()
            )));
        }
        check_finite(self.value(logits), "softmax_ce logits")?;
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            loss += weights[i] * (log_sum_exp(row) - row[labels[i]]);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
                probs,
            },
            &[logits],
        ))
    }

    /// Cross-entropy of logits formed by dotting each `pred` row with a
    /// contiguous block of `bank` rows.
    ///
    /// Row `i` scores against `bank[spans[i].0 .. spans[i].0 + spans[i].1]`
    /// and its target is `targets[i]` within that block.
    pub fn dot_score_ce(
        &mut self,
        pred: Var,
        bank: Var,
        spans: Vec<(usize, usize)>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let (r, c) = self.dims(pred);
        let (br, bc) = self.dims(bank);
        if bc != c || spans.len() != r || targets.len() != r || weights.len() != r {
            return Err(Error::dimension(format!(
                "dot_score_ce: pred {:?}, bank {:?}, {} spans",
                self.shape(pred),
                self.shape(bank),
                spans.len()
            )));
        }
        for (&(start, len), &t) in spans.iter().zip(&targets) {
            if len == 0 || start + len > br || t >= len {
                return Err(Error::dimension(format!(
                    "dot_score_ce span ({start}, {len}) target {t} over {br} bank rows"
                )));
            }
        }
        let pv = self.value(pred).data();
        let bv = self.value(bank).data();
        let mut loss = 0.0;
        let mut all_probs = Vec::with_capacity(r);
        for i in 0..r {
            let (start, len) = spans[i];
            let p = &pv[i * c..(i + 1) * c];
            let logits: Vec<f64> = (0..len)
                .map(|j| {
                    let e = &bv[(start + j) * c..(start + j + 1) * c];
                    p.iter().zip(e).map(|(a, b)| a * b).sum()
                })
                .collect();
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("dot_score_ce produced a non-finite logit"));
            }
            let mut probs = vec![0.0; len];
            softmax_into(&logits, &mut probs);
            loss += weights[i] * (log_sum_exp(&logits) - logits[targets[i]]);
            all_probs.push(probs);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::DotScoreCe {
                pred,
                bank,
                spans,
                targets,
                weights,
                probs: all_probs,
            },
            &[pred, bank],
        ))
    }

    /// Row-wise cosine similarity. Rows where either side has norm below
    /// [`COSINE_NORM_FLOOR`] yield 0 with no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let (r, c) = self.dims(a);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r);
        let mut degenerate = Vec::with_capacity(r);
        for i in 0..r {
            let x = &av[i * c..(i + 1) * c];
            let y = &bv[i * c..(i + 1) * c];
            let (na, nb) = (norm2(x), norm2(y));
            if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                out.push(0.0);
                degenerate.push(true);
            } else {
                let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                out.push(d / (na * nb));
                degenerate.push(false);
            }
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::CosineRows { a, b, degenerate },
            &[a, b],
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients of every parameter
    /// leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::dimension(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dout, &mut grads)?;
            if let Op::Param(name) = &node.op {
                out.insert(
                    name.clone(),
                    Tensor::new(node.value.shape().to_vec(), dout)?,
                );
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        dout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        // Accumulates into an input's gradient buffer, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let dims = |v: Var| (nodes[v.0].value.rows(), nodes[v.0].value.cols());

        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                acc(*a, &mut |g| gemm(m, n, k, dout, false, val(*b), true, g, 1.0));
                acc(*b, &mut |g| gemm(k, m, n, val(*a), true, dout, false, g, 1.0));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).0;
                acc(*a, &mut |g| gemm(m, n, k, dout, false, val(*b), false, g, 1.0));
                acc(*b, &mut |g| gemm(n, m, k, dout, true, val(*a), false, g, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dout));
                acc(*b, &mut |g| add_into(g, dout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dout));
                acc(*b, &mut |g| {
                    for (x, d) in g.iter_mut().zip(dout) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |g| {
                    for ((x, d), y) in g.iter_mut().zip(dout).zip(val(*b)) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, d), y) in g.iter_mut().zip(dout).zip(val(*a)) {
                        *x += d * y;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let c = dims(*x).1;
                acc(*x, &mut |g| add_into(g, dout));
                acc(*bias, &mut |g| {
                    for row in dout.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (x, d) in g.iter_mut().zip(dout) {
                    *x += c * d;
                }
            }),
            Op::AddConst(x) => acc(*x, &mut |g| add_into(g, dout)),
            Op::ScaleRows(x, s) => {
                let c = dims(*x).1;
                acc(*x, &mut |g| {
                    for ((grow, drow), f) in g.chunks_mut(c).zip(dout.chunks(c)).zip(s) {
                        for (x, d) in grow.iter_mut().zip(drow) {
                            *x += f * d;
                        }
                    }
                });
            }
            Op::ScaleByColumn { x, gates, col } => {
                let c = dims(*x).1;
                let gc = dims(*gates).1;
                let gv = val(*gates);
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for (i, (grow, drow)) in g.chunks_mut(c).zip(dout.chunks(c)).enumerate() {
                        let f = gv[i * gc + col];
                        for (x, d) in grow.iter_mut().zip(drow) {
                            *x += f * d;
                        }
                    }
                });
                acc(*gates, &mut |g| {
                    for (i, (xrow, drow)) in xv.chunks(c).zip(dout.chunks(c)).enumerate() {
                        g[i * gc + col] += xrow.iter().zip(drow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |g| add_into(g, &dout[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = dims(*x).1;
                acc(*x, &mut |g| {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &dout[j * c..(j + 1) * c]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = dims(*x).1;
                let gv = val(*gamma);
                acc(*gamma, &mut |g| {
                    for (drow, hrow) in dout.chunks(c).zip(xhat.chunks(c)) {
                        for ((x, d), h) in g.iter_mut().zip(drow).zip(hrow) {
                            *x += d * h;
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for drow in dout.chunks(c) {
                        add_into(g, drow);
                    }
                });
                acc(*x, &mut |g| {
                    let n = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (i, (drow, hrow)) in dout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for t in 0..c {
                            dxhat[t] = drow[t] * gv[t];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n;
                        let grow = &mut g[i * c..(i + 1) * c];
                        for t in 0..c {
                            grow[t] += inv_std[i] * (dxhat[t] - mean_d - hrow[t] * mean_dh);
                        }
                    }
                });
            }
            Op::Gelu(x) => acc(*x, &mut |g| {
                for ((x, d), v) in g.iter_mut().zip(dout).zip(val(*x)) {
                    *x += d * gelu_grad(*v);
                }
            }),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((x, d), s) in g.iter_mut().zip(dout).zip(y) {
                        *x += d * s * (1.0 - s);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                head_dim,
                probs,
            } => {
                let (group, heads, hd) = (*group, *heads, *head_dim);
                let (r, c) = dims(*q);
                let blocks = r / group;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; r * c];
                let mut dk = vec![0.0; r * c];
                let mut dv = vec![0.0; r * c];
                let mut dp = vec![0.0; group];
                for blk in 0..blocks {
                    for h in 0..heads {
                        let off = h * hd;
                        let p_base = (blk * heads + h) * group * group;
                        for i in 0..group {
                            let p = &probs[p_base + i * group..p_base + (i + 1) * group];
                            let doi = &dout[(blk * group + i) * c + off..][..hd];
                            for j in 0..group {
                                let vj = &vv[(blk * group + j) * c + off..][..hd];
                                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let dvj = &mut dv[(blk * group + j) * c + off..][..hd];
                                for t in 0..hd {
                                    dvj[t] += p[j] * doi[t];
                                }
                            }
                            let dot_pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = &qv[(blk * group + i) * c + off..][..hd];
                            for j in 0..group {
                                let ds = p[j] * (dp[j] - dot_pdp) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv[(blk * group + j) * c + off..][..hd];
                                let dqi = &mut dq[(blk * group + i) * c + off..][..hd];
                                for t in 0..hd {
                                    dqi[t] += ds * kj[t];
                                }
                                let dkj = &mut dk[(blk * group + j) * c + off..][..hd];
                                for t in 0..hd {
                                    dkj[t] += ds * qi[t];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |g| add_into(g, &dq));
                acc(*k, &mut |g| add_into(g, &dk));
                acc(*v, &mut |g| add_into(g, &dv));
            }
            Op::MeanGroups(x, group) => {
                let c = dims(*x).1;
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |g| {
                    for (i, grow) in g.chunks_mut(c).enumerate() {
                        let drow = &dout[(i / group) * c..][..c];
                        for (x, d) in grow.iter_mut().zip(drow) {
                            *x += d * inv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = dims(*x).1;
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((grow, drow), yrow) in g.chunks_mut(c).zip(dout.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for t in 0..c {
                            grow[t] += yrow[t] * (drow[t] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| {
                for v in g.iter_mut() {
                    *v += dout[0];
                }
            }),
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            } => acc(*pred, &mut |g| {
                for (i, (p, t)) in val(*pred).iter().zip(target).enumerate() {
                    g[i] += dout[0] * 2.0 * weights[i] * (p - t);
                }
            }),
            Op::BceLogits {
                logits,
                target,
                weights,
            } => acc(*logits, &mut |g| {
                for (i, (z, y)) in val(*logits).iter().zip(target).enumerate() {
                    g[i] += dout[0] * weights[i] * (sigmoid(*z) - y);
                }
            }),
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                let c = dims(*logits).1;
                acc(*logits, &mut |g| {
                    for (i, &l) in labels.iter().enumerate() {
                        let w = dout[0] * weights[i];
                        for t in 0..c {
                            let onehot = if t == l { 1.0 } else { 0.0 };
                            g[i * c + t] += w * (probs[i * c + t] - onehot);
                        }
                    }
                });
            }
            Op::DotScoreCe {
                pred,
                bank,
                spans,
                targets,
                weights,
                probs,
            } => {
                let c = dims(*pred).1;
                let (pv, bv) = (val(*pred), val(*bank));
                acc(*pred, &mut |g| {
                    for (i, &(start, len)) in spans.iter().enumerate() {
                        let w = dout[0] * weights[i];
                        let grow = &mut g[i * c..(i + 1) * c];
                        for j in 0..len {
                            let dl = w * (probs[i][j] - if j == targets[i] { 1.0 } else { 0.0 });
                            let e = &bv[(start + j) * c..(start + j + 1) * c];
                            for t in 0..c {
                                grow[t] += dl * e[t];
                            }
                        }
                    }
                });
                acc(*bank, &mut |g| {
                    for (i, &(start, len)) in spans.iter().enumerate() {
                        let w = dout[0] * weights[i];
                        let p = &pv[i * c..(i + 1) * c];
                        for j in 0..len {
                            let dl = w * (probs[i][j] - if j == targets[i] { 1.0 } else { 0.0 });
                            let grow = &mut g[(start + j) * c..(start + j + 1) * c];
                            for t in 0..c {
                                grow[t] += dl * p[t];
                            }
                        }
                    }
                });
            }
            Op::CosineRows { a, b, degenerate } => {
                let c = dims(*a).1;
                let (av, bv) = (val(*a), val(*b));
                let cos = node.value.data();
                let side = |x: &[f64], y: &[f64], cos: f64, d: f64, g: &mut [f64]| {
                    let (nx, ny) = (norm2(x), norm2(y));
                    for t in 0..x.len() {
                        g[t] += d * (y[t] / (nx * ny) - cos * x[t] / (nx * nx));
                    }
                };
                acc(*a, &mut |g| {
                    for i in 0..degenerate.len() {
                        if !degenerate[i] {
                            let r = i * c..(i + 1) * c;
                            side(&av[r.clone()], &bv[r.clone()], cos[i], dout[i], &mut g[r]);
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..degenerate.len() {
                        if !degenerate[i] {
                            let r = i * c..(i + 1) * c;
                            side(&bv[r.clone()], &av[r.clone()], cos[i], dout[i], &mut g[r]);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
