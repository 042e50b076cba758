//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor is a dense row-major `rows x cols` block of f64 living in one
//! arena that is rebuilt per training step. The op set is fixed: matmul,
//! elementwise add/sub/mul, scalar broadcasts, tanh, sqrt, softmax,
//! layer-norm, row/column/total reductions, row slicing/gathering/concat, and
//! a fused multi-head attention block. Gradients of every op are checked
//! against central finite differences in the test suite.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (parameters).
    Leaf,
    /// Non-differentiable input (data, detached values).
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    AddScalar { x: usize, s: usize, neg: bool },
    MulScalar { x: usize, s: usize },
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    SqrtEps(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    SumAll(usize),
    MeanAll(usize),
    SumAxis0(usize),
    SumAxis1(usize),
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    Attention(Box<AttentionArgs>),
}

#[derive(Debug, Clone)]
struct AttentionArgs {
    x: usize,
    tokens: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    heads: usize,
}

struct Node {
    rows: usize,
    cols: usize,
    off: usize,
    saved_off: usize,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Flat computation tape. `reset` keeps the allocated capacity so a training
/// loop reuses the same arenas every step.
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    saved: Vec<f64>,
    poisoned: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), vals: Vec::new(), saved: Vec::new(), poisoned: None }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.saved.clear();
        self.poisoned = None;
    }

    /// First op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poisoned
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.vals[n.off..n.off + n.rows * n.cols]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].rows * self.nodes[v.0].cols, 1);
        self.vals[self.nodes[v.0].off]
    }

    fn push(&mut self, rows: usize, cols: usize, saved_len: usize, op: Op) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        let saved_off = self.saved.len();
        self.saved.resize(saved_off + saved_len, 0.0);
        self.nodes.push(Node { rows, cols, off, saved_off, op });
        (Var(self.nodes.len() - 1), off)
    }

    fn finite_scan(&mut self, off: usize, len: usize, name: &'static str) {
        if self.poisoned.is_none() && !self.vals[off..off + len].iter().all(|v| v.is_finite()) {
            self.poisoned = Some(name);
        }
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf: data length mismatch");
        let (v, off) = self.push(rows, cols, 0, Op::Leaf);
        self.vals[off..off + data.len()].copy_from_slice(data);
        self.finite_scan(off, data.len(), "leaf");
        v
    }

    /// Non-differentiable input node.
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        assert_eq!(data.len(), rows * cols, "constant: data length mismatch");
        let (v, off) = self.push(rows, cols, 0, Op::Const);
        self.vals[off..off + data.len()].copy_from_slice(data);
        self.finite_scan(off, data.len(), "constant");
        v
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(1, 1, &[x])
    }

    fn shape2(&self, a: Var, b: Var, what: &str) -> (usize, usize) {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!((r, c), (self.rows(b), self.cols(b)), "{what}: shape mismatch");
        (r, c)
    }

    fn binary_ew(&mut self, a: Var, b: Var, op: fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op, name: &'static str) -> Var {
        let (r, c) = self.shape2(a, b, name);
        let (v, off) = self.push(r, c, 0, mk(a.0, b.0));
        let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
        for i in 0..r * c {
            self.vals[off + i] = op(self.vals[ao + i], self.vals[bo + i]);
        }
        self.finite_scan(off, r * c, name);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_ew(a, b, |x, y| x + y, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_ew(a, b, |x, y| x - y, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_ew(a, b, |x, y| x * y, Op::Mul, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, co) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(r, co, 0, Op::Scale(a.0, c));
        let ao = self.nodes[a.0].off;
        for i in 0..r * co {
            self.vals[off + i] = c * self.vals[ao + i];
        }
        self.finite_scan(off, r * co, "scale");
        v
    }

    /// `[n,m] + [1,m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(row), self.cols(row)), (1, c), "add_row: row must be [1,{c}]");
        let (v, off) = self.push(r, c, 0, Op::AddRow(a.0, row.0));
        let (ao, ro) = (self.nodes[a.0].off, self.nodes[row.0].off);
        for i in 0..r {
            for j in 0..c {
                self.vals[off + i * c + j] = self.vals[ao + i * c + j] + self.vals[ro + j];
            }
        }
        self.finite_scan(off, r * c, "add_row");
        v
    }

    /// `x + s` or `x - s` with `s` a `[1,1]` variable broadcast everywhere.
    pub fn add_scalar(&mut self, x: Var, s: Var, neg: bool) -> Var {
        assert_eq!(self.rows(s) * self.cols(s), 1, "add_scalar: s must be scalar");
        let (r, c) = (self.rows(x), self.cols(x));
        let (v, off) = self.push(r, c, 0, Op::AddScalar { x: x.0, s: s.0, neg });
        let sv = self.vals[self.nodes[s.0].off];
        let sv = if neg { -sv } else { sv };
        let xo = self.nodes[x.0].off;
        for i in 0..r * c {
            self.vals[off + i] = self.vals[xo + i] + sv;
        }
        self.finite_scan(off, r * c, "add_scalar");
        v
    }

    /// `x * s` with `s` a `[1,1]` variable broadcast everywhere.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.rows(s) * self.cols(s), 1, "mul_scalar: s must be scalar");
        let (r, c) = (self.rows(x), self.cols(x));
        let (v, off) = self.push(r, c, 0, Op::MulScalar { x: x.0, s: s.0 });
        let sv = self.vals[self.nodes[s.0].off];
        let xo = self.nodes[x.0].off;
        for i in 0..r * c {
            self.vals[off + i] = self.vals[xo + i] * sv;
        }
        self.finite_scan(off, r * c, "mul_scalar");
        v
    }

    /// `[n,k] x [k,m]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = (self.rows(a), self.cols(a));
        let (kb, m) = (self.rows(b), self.cols(b));
        assert_eq!(k, kb, "matmul: inner dims {k} vs {kb}");
        let (v, off) = self.push(n, m, 0, Op::MatMul(a.0, b.0));
        let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
        for i in 0..n {
            for p in 0..k {
                let aip = self.vals[ao + i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..m {
                    self.vals[off + i * m + j] += aip * self.vals[bo + p * m + j];
                }
            }
        }
        self.finite_scan(off, n * m, "matmul");
        v
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(c, r, 0, Op::Transpose(a.0));
        let ao = self.nodes[a.0].off;
        for i in 0..r {
            for j in 0..c {
                self.vals[off + j * r + i] = self.vals[ao + i * c + j];
            }
        }
        v
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(r, c, 0, Op::Tanh(a.0));
        let ao = self.nodes[a.0].off;
        for i in 0..r * c {
            self.vals[off + i] = self.vals[ao + i].tanh();
        }
        self.finite_scan(off, r * c, "tanh");
        v
    }

    /// Elementwise `sqrt(x + eps)`. Inputs must satisfy `x + eps >= 0`.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(r, c, 0, Op::SqrtEps(a.0));
        let ao = self.nodes[a.0].off;
        for i in 0..r * c {
            self.vals[off + i] = (self.vals[ao + i] + eps).sqrt();
        }
        self.finite_scan(off, r * c, "sqrt_eps");
        v
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(r, c, 0, Op::SoftmaxRows(a.0));
        let ao = self.nodes[a.0].off;
        for i in 0..r {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                mx = mx.max(self.vals[ao + i * c + j]);
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = (self.vals[ao + i * c + j] - mx).exp();
                self.vals[off + i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                self.vals[off + i * c + j] /= sum;
            }
        }
        self.finite_scan(off, r * c, "softmax_rows");
        v
    }

    /// Row-wise layer norm with learnable gain/bias (`[1,m]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!((self.rows(gain), self.cols(gain)), (1, c), "layer_norm: gain shape");
        assert_eq!((self.rows(bias), self.cols(bias)), (1, c), "layer_norm: bias shape");
        // saved: normalized x-hat [r*c] then inv_std [r]
        let (v, off) = self.push(r, c, r * c + r, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 });
        let so = self.nodes[v.0].saved_off;
        let (xo, go, bo) = (self.nodes[x.0].off, self.nodes[gain.0].off, self.nodes[bias.0].off);
        for i in 0..r {
            let row = xo + i * c;
            let mean = self.vals[row..row + c].iter().sum::<f64>() / c as f64;
            let var = self.vals[row..row + c].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            self.saved[so + r * c + i] = inv_std;
            for j in 0..c {
                let xh = (self.vals[row + j] - mean) * inv_std;
                self.saved[so + i * c + j] = xh;
                self.vals[off + i * c + j] = xh * self.vals[go + j] + self.vals[bo + j];
            }
        }
        self.finite_scan(off, r * c, "layer_norm");
        v
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(1, 1, 0, Op::SumAll(a.0));
        let ao = self.nodes[a.0].off;
        self.vals[off] = self.vals[ao..ao + r * c].iter().sum();
        self.finite_scan(off, 1, "sum_all");
        v
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(1, 1, 0, Op::MeanAll(a.0));
        let ao = self.nodes[a.0].off;
        self.vals[off] = self.vals[ao..ao + r * c].iter().sum::<f64>() / (r * c) as f64;
        self.finite_scan(off, 1, "mean_all");
        v
    }

    /// Column sums: `[n,m] -> [1,m]`.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(1, c, 0, Op::SumAxis0(a.0));
        let ao = self.nodes[a.0].off;
        for i in 0..r {
            for j in 0..c {
                self.vals[off + j] += self.vals[ao + i * c + j];
            }
        }
        self.finite_scan(off, c, "sum_axis0");
        v
    }

    /// Row sums: `[n,m] -> [n,1]`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let (v, off) = self.push(r, 1, 0, Op::SumAxis1(a.0));
        let ao = self.nodes[a.0].off;
        for i in 0..r {
            self.vals[off + i] = self.vals[ao + i * c..ao + (i + 1) * c].iter().sum();
        }
        self.finite_scan(off, r, "sum_axis1");
        v
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(start + len <= r, "slice_rows: out of range");
        let (v, off) = self.push(len, c, 0, Op::SliceRows { x: a.0, start });
        let ao = self.nodes[a.0].off;
        self.vals.copy_within(ao + start * c..ao + (start + len) * c, off);
        v
    }

    /// Row gather (duplicate indices allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(idx.iter().all(|&i| i < r), "gather_rows: index out of range");
        let (v, off) = self.push(idx.len(), c, 0, Op::GatherRows { x: a.0, idx: idx.to_vec() });
        let ao = self.nodes[a.0].off;
        for (k, &i) in idx.iter().enumerate() {
            self.vals.copy_within(ao + i * c..ao + (i + 1) * c, off + k * c);
        }
        v
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let c = self.cols(parts[0]);
        let total: usize = parts.iter().map(|&p| {
            assert_eq!(self.cols(p), c, "concat_rows: column mismatch");
            self.rows(p)
        }).sum();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let (v, off) = self.push(total, c, 0, Op::ConcatRows(ids));
        let mut cur = off;
        for &p in parts {
            let n = &self.nodes[p.0];
            let len = n.rows * n.cols;
            self.vals.copy_within(n.off..n.off + len, cur);
            cur += len;
        }
        v
    }

    /// Fused multi-head attention: queries from `x LN-free`, keys/values from
    /// `tokens`, all projections `[d,d]`, optional additive logit bias per
    /// token. Softmax over tokens per query row and head.
    pub fn attention(&mut self, x: Var, tokens: Var, wq: Var, wk: Var, wv: Var, wo: Var, heads: usize, bias: Option<&[f64]>) -> Var {
        let (n, d) = (self.rows(x), self.cols(x));
        let (m, dt) = (self.rows(tokens), self.cols(tokens));
        assert_eq!(d, dt, "attention: token dim mismatch");
        for (w, name) in [(wq, "wq"), (wk, "wk"), (wv, "wv"), (wo, "wo")] {
            assert_eq!((self.rows(w), self.cols(w)), (d, d), "attention: {name} must be [{d},{d}]");
        }
        assert!(d % heads == 0, "attention: dim {d} not divisible by heads {heads}");
        if let Some(b) = bias {
            assert_eq!(b.len(), m, "attention: bias length");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias_vec: Option<&[f64]> = bias;
        // saved: q [n*d], k [m*d], v [m*d], ctx [n*d], att [heads*n*m]
        let saved_len = n * d + 2 * m * d + n * d + heads * n * m;
        let args = AttentionArgs {
            x: x.0,
            tokens: tokens.0,
            wq: wq.0,
            wk: wk.0,
            wv: wv.0,
            wo: wo.0,
            heads,
        };
        let (v, off) = self.push(n, d, saved_len, Op::Attention(Box::new(args)));
        let so = self.nodes[v.0].saved_off;
        let (q_o, k_o, v_o, ctx_o, att_o) = (so, so + n * d, so + n * d + m * d, so + n * d + 2 * m * d, so + 2 * n * d + 2 * m * d);
        let (xo, to) = (self.nodes[x.0].off, self.nodes[tokens.0].off);
        let (wqo, wko, wvo, woo) = (self.nodes[wq.0].off, self.nodes[wk.0].off, self.nodes[wv.0].off, self.nodes[wo.0].off);

        mat_into(&self.vals, xo, n, d, &self.vals, wqo, d, &mut self.saved, q_o);
        mat_into(&self.vals, to, m, d, &self.vals, wko, d, &mut self.saved, k_o);
        mat_into(&self.vals, to, m, d, &self.vals, wvo, d, &mut self.saved, v_o);

        for h in 0..heads {
            let hc = h * dh;
            for i in 0..n {
                let arow = att_o + h * n * m + i * m;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    let mut s = 0.0;
                    for p in 0..dh {
                        s += self.saved[q_o + i * d + hc + p] * self.saved[k_o + j * d + hc + p];
                    }
                    s *= scale;
                    if let Some(b) = &bias_vec {
                        s += b[j];
                    }
                    self.saved[arow + j] = s;
                    mx = mx.max(s);
                }
                let mut sum = 0.0;
                for j in 0..m {
                    let e = (self.saved[arow + j] - mx).exp();
                    self.saved[arow + j] = e;
                    sum += e;
                }
                for j in 0..m {
                    self.saved[arow + j] /= sum;
                }
                for p in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += self.saved[arow + j] * self.saved[v_o + j * d + hc + p];
                    }
                    self.saved[ctx_o + i * d + hc + p] = acc;
                }
            }
        }
        let mut out = vec![0.0; n * d];
        mat_into(&self.saved, ctx_o, n, d, &self.vals, woo, d, &mut out, 0);
        self.vals[off..off + n * d].copy_from_slice(&out);
        self.finite_scan(off, n * d, "attention");
        v
    }

    /// Euclidean norm of all entries as a `[1,1]` node (`sqrt(sum x^2 + eps)`
    /// with a tiny eps so the gradient stays bounded at the origin).
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        let s = self.sum_all(sq);
        self.sqrt_eps(s, 1e-24)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradient buffers for
    /// the leaves the caller cares about.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got [{}x{}]",
                ln.rows, ln.cols
            )));
        }
        if let Some(op) = self.poisoned {
            return Err(Error::numerical(op, "non-finite value in forward pass"));
        }
        let mut grads = vec![0.0f64; self.vals.len()];
        let mut touched = vec![false; self.nodes.len()];
        grads[self.nodes[loss.0].off] = 1.0;
        touched[loss.0] = true;
        let mut dy: Vec<f64> = Vec::new();

        for i in (0..=loss.0).rev() {
            if !touched[i] {
                continue;
            }
            let (off, rows, cols, so) = {
                let n = &self.nodes[i];
                (n.off, n.rows, n.cols, n.saved_off)
            };
            let len = rows * cols;
            dy.clear();
            dy.extend_from_slice(&grads[off..off + len]);
            if !dy.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical(op_name(&self.nodes[i].op), "non-finite gradient in backward pass"));
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k]);
                    self.accum(&mut grads, &mut touched, b, |k, _| dy[k]);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k]);
                    self.accum(&mut grads, &mut touched, b, |k, _| -dy[k]);
                }
                Op::Mul(a, b) => {
                    let (ao, bo) = (self.nodes[a].off, self.nodes[b].off);
                    let vals = &self.vals;
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k] * vals[bo + k]);
                    self.accum(&mut grads, &mut touched, b, |k, _| dy[k] * vals[ao + k]);
                }
                Op::Scale(a, c) => {
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k] * c);
                }
                Op::AddRow(a, r) => {
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k]);
                    let ro = self.nodes[r].off;
                    for i2 in 0..rows {
                        for j in 0..cols {
                            grads[ro + j] += dy[i2 * cols + j];
                        }
                    }
                    touched[r] = true;
                }
                Op::AddScalar { x, s, neg } => {
                    self.accum(&mut grads, &mut touched, x, |k, _| dy[k]);
                    let sum: f64 = dy.iter().sum();
                    grads[self.nodes[s].off] += if neg { -sum } else { sum };
                    touched[s] = true;
                }
                Op::MulScalar { x, s } => {
                    let sv = self.vals[self.nodes[s].off];
                    self.accum(&mut grads, &mut touched, x, |k, _| dy[k] * sv);
                    let xo = self.nodes[x].off;
                    let dot: f64 = dy.iter().enumerate().map(|(k, g)| g * self.vals[xo + k]).sum();
                    grads[self.nodes[s].off] += dot;
                    touched[s] = true;
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let m = cols;
                    let (ao, bo) = (self.nodes[a].off, self.nodes[b].off);
                    // dA = dY . B^T
                    for i2 in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += dy[i2 * m + j] * self.vals[bo + p * m + j];
                            }
                            grads[ao + i2 * k + p] += acc;
                        }
                    }
                    // dB = A^T . dY
                    for p in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i2 in 0..n {
                                acc += self.vals[ao + i2 * k + p] * dy[i2 * m + j];
                            }
                            grads[bo + p * m + j] += acc;
                        }
                    }
                    touched[a] = true;
                    touched[b] = true;
                }
                Op::Transpose(a) => {
                    let ao = self.nodes[a].off;
                    let (ar, ac) = (self.nodes[a].rows, self.nodes[a].cols);
                    for i2 in 0..ar {
                        for j in 0..ac {
                            grads[ao + i2 * ac + j] += dy[j * ar + i2];
                        }
                    }
                    touched[a] = true;
                }
                Op::Tanh(a) => {
                    let vals = &self.vals;
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k] * (1.0 - vals[off + k] * vals[off + k]));
                }
                Op::SqrtEps(a) => {
                    let vals = &self.vals;
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k] * 0.5 / vals[off + k].max(1e-300));
                }
                Op::SoftmaxRows(a) => {
                    let ao = self.nodes[a].off;
                    for i2 in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += dy[i2 * cols + j] * self.vals[off + i2 * cols + j];
                        }
                        for j in 0..cols {
                            let y = self.vals[off + i2 * cols + j];
                            grads[ao + i2 * cols + j] += y * (dy[i2 * cols + j] - dot);
                        }
                    }
                    touched[a] = true;
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (xo, go, bo) = (self.nodes[x].off, self.nodes[gain].off, self.nodes[bias].off);
                    for i2 in 0..rows {
                        let inv_std = self.saved[so + rows * cols + i2];
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..cols {
                            let gdy = dy[i2 * cols + j] * self.vals[go + j];
                            let xh = self.saved[so + i2 * cols + j];
                            mean_g += gdy;
                            mean_gx += gdy * xh;
                            grads[go + j] += dy[i2 * cols + j] * xh;
                            grads[bo + j] += dy[i2 * cols + j];
                        }
                        mean_g /= cols as f64;
                        mean_gx /= cols as f64;
                        for j in 0..cols {
                            let gdy = dy[i2 * cols + j] * self.vals[go + j];
                            let xh = self.saved[so + i2 * cols + j];
                            grads[xo + i2 * cols + j] += (gdy - mean_g - xh * mean_gx) * inv_std;
                        }
                    }
                    touched[x] = true;
                    touched[gain] = true;
                    touched[bias] = true;
                }
                Op::SumAll(a) => {
                    let g = dy[0];
                    self.accum(&mut grads, &mut touched, a, |_, _| g);
                }
                Op::MeanAll(a) => {
                    let sz = (self.nodes[a].rows * self.nodes[a].cols) as f64;
                    let g = dy[0] / sz;
                    self.accum(&mut grads, &mut touched, a, |_, _| g);
                }
                Op::SumAxis0(a) => {
                    let ac = self.nodes[a].cols;
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k % ac]);
                }
                Op::SumAxis1(a) => {
                    let ac = self.nodes[a].cols;
                    self.accum(&mut grads, &mut touched, a, |k, _| dy[k / ac]);
                }
                Op::SliceRows { x, start } => {
                    let xo = self.nodes[x].off;
                    for k in 0..len {
                        grads[xo + start * cols + k] += dy[k];
                    }
                    touched[x] = true;
                }
                Op::GatherRows { x, ref idx } => {
                    let xo = self.nodes[x].off;
                    for (k, &i2) in idx.iter().enumerate() {
                        for j in 0..cols {
                            grads[xo + i2 * cols + j] += dy[k * cols + j];
                        }
                    }
                    touched[x] = true;
                }
                Op::ConcatRows(ref parts) => {
                    let mut cur = 0;
                    for &p in parts {
                        let plen = self.nodes[p].rows * self.nodes[p].cols;
                        let po = self.nodes[p].off;
                        for k in 0..plen {
                            grads[po + k] += dy[cur + k];
                        }
                        cur += plen;
                        touched[p] = true;
                    }
                }
                Op::Attention(ref args) => {
                    self.attention_backward(args, rows, cols, so, &dy, &mut grads, &mut touched);
                }
            }
        }
        Ok(Gradients { grads, offsets: self.nodes.iter().map(|n| (n.off, n.rows * n.cols)).collect() })
    }

    fn accum<F: Fn(usize, usize) -> f64>(&self, grads: &mut [f64], touched: &mut [bool], parent: usize, f: F) {
        let n = &self.nodes[parent];
        let len = n.rows * n.cols;
        for k in 0..len {
            grads[n.off + k] += f(k, len);
        }
        touched[parent] = true;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, args: &AttentionArgs, n: usize, d: usize, so: usize, dy: &[f64], grads: &mut [f64], touched: &mut [bool]) {
        let m = self.nodes[args.tokens].rows;
        let heads = args.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q_o, k_o, v_o, ctx_o, att_o) = (so, so + n * d, so + n * d + m * d, so + n * d + 2 * m * d, so + 2 * n * d + 2 * m * d);
        let (xo, to) = (self.nodes[args.x].off, self.nodes[args.tokens].off);
        let (wqo, wko, wvo, woo) = (self.nodes[args.wq].off, self.nodes[args.wk].off, self.nodes[args.wv].off, self.nodes[args.wo].off);

        // dCtx = dY . Wo^T ; dWo = ctx^T . dY
        let mut dctx = vec![0.0; n * d];
        for i in 0..n {
            for p in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += dy[i * d + j] * self.vals[woo + p * d + j];
                }
                dctx[i * d + p] = acc;
            }
        }
        for p in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += self.saved[ctx_o + i * d + p] * dy[i * d + j];
                }
                grads[woo + p * d + j] += acc;
            }
        }

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut datt = vec![0.0; m];
        for h in 0..heads {
            let hc = h * dh;
            for i in 0..n {
                let arow = att_o + h * n * m + i * m;
                let mut dot = 0.0;
                for j in 0..m {
                    let mut da = 0.0;
                    for p in 0..dh {
                        da += dctx[i * d + hc + p] * self.saved[v_o + j * d + hc + p];
                    }
                    datt[j] = da;
                    dot += da * self.saved[arow + j];
                }
                for j in 0..m {
                    let a = self.saved[arow + j];
                    let dlogit = a * (datt[j] - dot);
                    for p in 0..dh {
                        dq[i * d + hc + p] += dlogit * self.saved[k_o + j * d + hc + p] * scale;
                        dk[j * d + hc + p] += dlogit * self.saved[q_o + i * d + hc + p] * scale;
                        dv[j * d + hc + p] += self.saved[arow + j] * dctx[i * d + hc + p];
                    }
                }
            }
        }

        // dX += dQ . Wq^T ; dWq += X^T . dQ
        for i in 0..n {
            for p in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += dq[i * d + j] * self.vals[wqo + p * d + j];
                }
                grads[self.nodes[args.x].off + i * d + p] += acc;
            }
        }
        for p in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += self.vals[xo + i * d + p] * dq[i * d + j];
                }
                grads[wqo + p * d + j] += acc;
            }
        }
        // dTokens += dK . Wk^T + dV . Wv^T ; dWk += T^T . dK ; dWv += T^T . dV
        for i in 0..m {
            for p in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += dk[i * d + j] * self.vals[wko + p * d + j] + dv[i * d + j] * self.vals[wvo + p * d + j];
                }
                grads[to + i * d + p] += acc;
            }
        }
        for p in 0..d {
            for j in 0..d {
                let mut acc_k = 0.0;
                let mut acc_v = 0.0;
                for i in 0..m {
                    acc_k += self.vals[to + i * d + p] * dk[i * d + j];
                    acc_v += self.vals[to + i * d + p] * dv[i * d + j];
                }
                grads[wko + p * d + j] += acc_k;
                grads[wvo + p * d + j] += acc_v;
            }
        }
        for t in [args.x, args.tokens, args.wq, args.wk, args.wv, args.wo] {
            touched[t] = true;
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Const => "constant",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Tanh(..) => "tanh",
        Op::SqrtEps(..) => "sqrt_eps",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::SumAxis0(..) => "sum_axis0",
        Op::SumAxis1(..) => "sum_axis1",
        Op::SliceRows { .. } => "slice_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::Attention(..) => "attention",
    }
}

#[allow(clippy::too_many_arguments)]
fn mat_into(lhs: &[f64], lo: usize, n: usize, k: usize, rhs: &[f64], ro: usize, m: usize, out: &mut [f64], oo: usize) {
    for v in out[oo..oo + n * m].iter_mut() {
        *v = 0.0;
    }
    for i in 0..n {
        for p in 0..k {
            let a = lhs[lo + i * k + p];
            if a == 0.0 {
                continue;
            }
            for j in 0..m {
                out[oo + i * m + j] += a * rhs[ro + p * m + j];
            }
        }
    }
}

/// Gradient buffers produced by [`Tape::backward`]. Vars that took no part in
/// the loss report zero gradients.
pub struct Gradients {
    grads: Vec<f64>,
    offsets: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        let (off, len) = self.offsets[v.0];
        &self.grads[off..off + len]
    }
}
