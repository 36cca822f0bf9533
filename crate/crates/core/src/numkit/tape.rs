//! Append-only reverse-mode tape over [`Tensor`] values.
//!
//! Every op stores its output value and its parents. Backward walks the
//! nodes in reverse insertion order, which is a reverse topological order
//! because parents always precede children.

use std::collections::BTreeMap;

use super::checked;
use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter registered on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SegmentMean(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    NormalizeRows(Var, Vec<f64>),
    HingeRank {
        scores: Var,
        gold: Vec<usize>,
        margin: f64,
    },
    NllRows {
        logits: Var,
        targets: Vec<(usize, usize)>,
    },
    KlDiag([Var; 4]),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter, or `None` when it never reached the tape.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if checked() && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).same_shape(self.value(b), op)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    /// Adds the `1 x m` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(Error::Dimension {
                op: "add_bias",
                left: xs,
                right: bs,
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..xs.0 {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    /// `x * w + b` for `x: n x in`, `w: in x out`, `b: 1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Reduces every entry to a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    /// Averages consecutive row segments of `x`; `lengths` must sum to `x.rows()`.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let total: usize = lengths.iter().sum();
        if total != rows || lengths.contains(&0) {
            return Err(Error::Dimension {
                op: "segment_mean",
                left: (rows, cols),
                right: (total, lengths.len()),
            });
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(lengths.len(), cols);
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let inv = 1.0 / len as f64;
            let dst = out.row_mut(s);
            for r in start..start + len {
                for (o, v) in dst.iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
            start += len;
        }
        self.push(out, Op::SegmentMean(x, lengths.to_vec()), "segment_mean")
    }

    /// Mean of all rows as a `1 x cols` tensor.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        self.segment_mean(x, &[rows])
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_raw(ids.len(), cols, data);
        self.push(out, Op::Gather(table, ids.to_vec()), "gather")
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: s,
                });
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_raw(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > rows || len == 0 {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: (rows, cols),
                right: (start + len, cols),
            });
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::from_raw(len, cols, data), Op::SliceRows(x, start), "slice_rows")
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let n = dot(row, row).sqrt().max(NORM_EPS);
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::from_raw(rows, cols, data);
        self.push(out, Op::NormalizeRows(x, norms), "normalize_rows")
    }

    /// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        self.matmul_t(na, nb)
    }

    /// Margin ranking loss over a score matrix: for each row `i`,
    /// `sum_{j != gold[i]} max(0, margin - (s[i, gold[i]] - s[i, j]))`.
    pub fn hinge_rank(&mut self, scores: Var, gold: &[usize], margin: f64) -> Result<Var> {
        let (rows, cols) = self.shape(scores);
        if gold.len() != rows {
            return Err(Error::Dimension {
                op: "hinge_rank",
                left: (rows, cols),
                right: (gold.len(), 1),
            });
        }
        if let Some(&g) = gold.iter().find(|&&g| g >= cols) {
            return Err(Error::Contract(format!(
                "gold column {g} outside {cols} candidates"
            )));
        }
        let s = self.value(scores);
        let mut total = 0.0;
        for (i, &g) in gold.iter().enumerate() {
            let pos = s.get(i, g);
            for j in (0..cols).filter(|&j| j != g) {
                total += (margin - (pos - s.get(i, j))).max(0.0);
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::HingeRank {
                scores,
                gold: gold.to_vec(),
                margin,
            },
            "hinge_rank",
        )
    }

    /// `sum over (row, col) of -log softmax(logits[row])[col]`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Contract(format!(
                "target ({r}, {c}) outside logits of shape {rows}x{cols}"
            )));
        }
        let lv = self.value(logits);
        let lse: Vec<f64> = (0..rows).map(|r| log_sum_exp(lv.row(r))).collect();
        let total: f64 = targets.iter().map(|&(r, c)| lse[r] - lv.get(r, c)).sum();
        self.push(
            Tensor::scalar(total),
            Op::NllRows {
                logits,
                targets: targets.to_vec(),
            },
            "nll_rows",
        )
    }

    /// Summed KL divergence `KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p))` over every entry.
    pub fn kl_diag(&mut self, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Result<Var> {
        self.same_shape(mu_q, lv_q, "kl_diag")?;
        self.same_shape(mu_q, mu_p, "kl_diag")?;
        self.same_shape(mu_q, lv_p, "kl_diag")?;
        let total = kl_diag_value(
            self.value(mu_q).data(),
            self.value(lv_q).data(),
            self.value(mu_p).data(),
            self.value(lv_p).data(),
        );
        self.push(
            Tensor::scalar(total),
            Op::KlDiag([mu_q, lv_q, mu_p, lv_p]),
            "kl_diag",
        )
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match out.grads.get_mut(id) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.grads.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b))?);
                    acc(*b, self.value(*a).t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(self.value(*b))?);
                    acc(*b, g.t_matmul(self.value(*a))?);
                }
                Op::AddBias(x, b) => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::from_raw(1, cols, db));
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |d, y| d * y));
                    acc(*b, g.zip_map(self.value(*a), |d, x| d * x));
                }
                Op::Scale(a, c) => acc(*a, g.map(|d| d * c)),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
                Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d / x)),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
                ),
                Op::Clamp(a, lo, hi) => acc(
                    *a,
                    g.zip_map(self.value(*a), |d, x| {
                        if x >= *lo && x <= *hi {
                            d
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Tensor::filled(r, c, g.data()[0]));
                }
                Op::SegmentMean(x, lengths) => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut start = 0;
                    for (s, &len) in lengths.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        let src = g.row(s);
                        for r in start..start + len {
                            for (d, v) in dx.row_mut(r).iter_mut().zip(src) {
                                *d = v * inv;
                            }
                        }
                        start += len;
                    }
                    acc(*x, dx);
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.shape(*table);
                    let mut dt = Tensor::zeros(rows, cols);
                    for (k, &i) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    acc(*table, dt);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let data = g.data()[start * cols..(start + rows) * cols].to_vec();
                        acc(p, Tensor::from_raw(rows, cols, data));
                        start += rows;
                    }
                }
                Op::SliceRows(x, start) => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(*x, dx);
                }
                Op::NormalizeRows(x, norms) => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut dx = Vec::with_capacity(rows * cols);
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let proj = dot(yr, gr);
                        dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * proj) / n));
                    }
                    acc(*x, Tensor::from_raw(rows, cols, dx));
                }
                Op::HingeRank {
                    scores,
                    gold,
                    margin,
                } => {
                    let s = self.value(*scores);
                    let (rows, cols) = s.shape();
                    let up = g.data()[0];
                    let mut ds = Tensor::zeros(rows, cols);
                    for (i, &gi) in gold.iter().enumerate() {
                        let pos = s.get(i, gi);
                        for j in (0..cols).filter(|&j| j != gi) {
                            if margin - (pos - s.get(i, j)) > 0.0 {
                                ds.row_mut(i)[j] += up;
                                ds.row_mut(i)[gi] -= up;
                            }
                        }
                    }
                    acc(*scores, ds);
                }
                Op::NllRows { logits, targets } => {
                    let lv = self.value(*logits);
                    let (rows, cols) = lv.shape();
                    let up = g.data()[0];
                    let mut counts = vec![0usize; rows];
                    let mut dl = Tensor::zeros(rows, cols);
                    for &(r, c) in targets {
                        counts[r] += 1;
                        dl.row_mut(r)[c] -= up;
                    }
                    for (r, &n) in counts.iter().enumerate().filter(|(_, &n)| n > 0) {
                        let row = lv.row(r);
                        let lse = log_sum_exp(row);
                        let w = up * n as f64;
                        for (d, &x) in dl.row_mut(r).iter_mut().zip(row) {
                            *d += w * (x - lse).exp();
                        }
                    }
                    acc(*logits, dl);
                }
                Op::KlDiag([mq, lq, mp, lp]) => {
                    let up = g.data()[0];
                    let (mqv, lqv, mpv, lpv) = (
                        self.value(*mq),
                        self.value(*lq),
                        self.value(*mp),
                        self.value(*lp),
                    );
                    let (r, c) = mqv.shape();
                    let n = r * c;
                    let (mut dmq, mut dlq, mut dmp, mut dlp) = (
                        Vec::with_capacity(n),
                        Vec::with_capacity(n),
                        Vec::with_capacity(n),
                        Vec::with_capacity(n),
                    );
                    for k in 0..n {
                        let (a, b) = (mqv.data()[k], lqv.data()[k]);
                        let (p, q) = (mpv.data()[k], lpv.data()[k]);
                        let inv_var_p = (-q).exp();
                        let diff = a - p;
                        dmq.push(up * diff * inv_var_p);
                        dmp.push(-up * diff * inv_var_p);
                        dlq.push(up * 0.5 * ((b - q).exp() - 1.0));
                        dlp.push(up * (0.5 - 0.5 * (b.exp() + diff * diff) * inv_var_p));
                    }
                    acc(*mq, Tensor::from_raw(r, c, dmq));
                    acc(*lq, Tensor::from_raw(r, c, dlq));
                    acc(*mp, Tensor::from_raw(r, c, dmp));
                    acc(*lp, Tensor::from_raw(r, c, dlp));
                }
            }
        }
        Ok(out)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn kl_diag_value(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..mu_q.len() {
        let diff = mu_q[k] - mu_p[k];
        total += 0.5 * (lv_p[k] - lv_q[k]) + (lv_q[k].exp() + diff * diff) / (2.0 * lv_p[k].exp())
            - 0.5;
    }
    total
}
