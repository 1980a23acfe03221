use super::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Gradients, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a `(batch * seq_len) x d` activation is split into padded sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    /// Number of real (unpadded) positions per sequence.
    pub lengths: Vec<usize>,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Abs(Var),
    Relu(Var),
    RowSoftmax(Var),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropyRows {
        probs: Var,
        target: Tensor,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking the node list
/// backwards is a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Binds a parameter as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Elementwise sum. `b` may also be a `1 x n` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            let out = Tensor::new(ta.rows(), ta.cols(), data)?;
            Ok(self.push(out, Op::Add(a, b)))
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            let mut out = ta.clone();
            let n = ta.cols();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            Ok(self.push(out, Op::AddRow(a, b)))
        } else {
            Err(shape_err("add", ta, tb))
        }
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor {
            rows: ta.rows(),
            cols: ta.cols(),
            data,
        };
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor {
            rows: ta.rows(),
            cols: ta.cols(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        }
    }

    /// Softmax along each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Numeric("row_softmax: non-finite input".into()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(ta.cols().max(1)) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::RowSoftmax(a)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = ta.clone();
        let mut norms = Vec::with_capacity(ta.rows());
        for (r, row) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            let norm = dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "l2_normalize_rows: row {r} has norm {norm}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2NormRows { x: a, norms }))
    }

    /// Row-wise layer normalization with `1 x n` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.rows(), n, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let d = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tt.rows() {
                return Err(Error::Input(format!(
                    "token id {id} out of range for vocabulary of {}",
                    tt.rows()
                )));
            }
            data.extend_from_slice(tt.row_slice(id));
        }
        let out = Tensor::new(ids.len(), d, data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= tx.rows() {
                return Err(Error::Shape(format!(
                    "select_rows: row {i} out of {}",
                    tx.rows()
                )));
            }
            data.extend_from_slice(tx.row_slice(i));
        }
        let out = Tensor::new(idx.len(), d, data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Column-wise mean over rows, `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(Error::Shape("mean_rows of an empty tensor".into()));
        }
        let mut out = vec![0.0; ta.cols()];
        for row in ta.data().chunks(ta.cols()) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let m = ta.rows() as f64;
        out.iter_mut().for_each(|o| *o /= m);
        Ok(self.push(Tensor::row(&out), Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean over rows of `-sum_j target_ij * ln(max(p_ij, 1e-12))`.
    pub fn cross_entropy_rows(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(probs);
        if tp.shape() != target.shape() {
            return Err(shape_err("cross_entropy_rows", tp, target));
        }
        if tp.rows() == 0 {
            return Err(Error::Shape("cross_entropy_rows of an empty tensor".into()));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &y)| y != 0.0)
            .map(|(&p, &y)| -y * p.max(PROB_FLOOR).ln())
            .sum();
        let out = Tensor::scalar(total / tp.rows() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropyRows {
                probs,
                target: target.clone(),
            },
        ))
    }

    /// Masked multi-head scaled dot-product attention over padded sequences.
    ///
    /// `q`, `k` and `v` are `(batch * seq_len) x d`. Keys at positions
    /// `>= lengths[b]` receive zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            batch,
            seq_len,
            ref lengths,
            heads,
        } = *layout;
        let d = tq.cols();
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tq.rows() != batch * seq_len || lengths.len() != batch {
            return Err(Error::Shape(format!(
                "attention: {} rows do not match batch {batch} x seq_len {seq_len}",
                tq.rows()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: d={d} not divisible by {heads} heads"
            )));
        }
        if lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(Error::Shape(
                "attention: sequence length out of range".into(),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq.rows(), d);
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * d + off..][..dh];
                    let p_base = ((b * heads + h) * seq_len + i) * seq_len;
                    let prow = &mut probs[p_base..p_base + len];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * seq_len + j) * d + off..][..dh];
                        *p = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out.data_mut()[(b * seq_len + i) * d + off..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &vd[(b * seq_len + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `root`; returns gradients for every
    /// parameter in `params` (zero where unreachable).
    pub fn backward(&self, root: Var, params: &ParamSet) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(params);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = out.get_mut(*id);
                    if slot.len() != g.len() {
                        return Err(Error::Shape(format!(
                            "parameter {} bound with a different shape",
                            params.name(*id)
                        )));
                    }
                    for (s, v) in slot.data_mut().iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_acc(&g, tb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_at_acc(ta.data(), &g, &mut gb, m, k, n);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    let gt = Tensor::new(node.value.rows(), node.value.cols(), g)?.transpose();
                    accumulate(&mut grads, *a, gt.into_data());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let n = node.value.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|x| x * c).collect());
                }
                Op::ScaleBy(a, s) => {
                    let c = self.value(*s).data()[0];
                    let gs = dot(&g, self.value(*a).data());
                    accumulate(&mut grads, *a, g.iter().map(|x| x * c).collect());
                    accumulate(&mut grads, *s, vec![gs]);
                }
                Op::Exp(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(x, y)| x * y)
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, v)| x * v.signum())
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let n = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out_r) in g
                        .chunks(n)
                        .zip(node.value.data().chunks(n))
                        .zip(ga.chunks_mut(n))
                    {
                        let s = dot(gr, yr);
                        for ((o, gv), yv) in out_r.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2NormRows { x, norms } => {
                    let n = node.value.cols();
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((gr, yr), out_r)) in g
                        .chunks(n)
                        .zip(node.value.data().chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let s = dot(gr, yr);
                        for ((o, gv), yv) in out_r.iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * s) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = node.value.cols();
                    let gam = self.value(*gamma).data();
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    let mut gx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, ((gr, hr), out_r)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                            gbeta[j] += gr[j];
                            let dh = gr[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            out_r[j] = inv_std[r] / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut gt = vec![0.0; tt.len()];
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (s, v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SelectRows { x, idx } => {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let mut gx = vec![0.0; tx.len()];
                    for (row, &i) in g.chunks(d).zip(idx) {
                        for (s, v) in gx[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let m = ta.rows() as f64;
                    let ga = (0..ta.len()).map(|i| g[i % ta.cols()] / m).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::CrossEntropyRows { probs, target } => {
                    let tp = self.value(*probs);
                    let m = tp.rows() as f64;
                    let gp = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &y)| {
                            if y == 0.0 || p <= PROB_FLOOR {
                                0.0
                            } else {
                                -g[0] * y / (p * m)
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *probs, gp);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        layout,
                        probs,
                    );
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn attention_backward(
    g: &[f64],
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    layout: &AttentionLayout,
    probs: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = tq.cols();
    let AttentionLayout {
        batch,
        seq_len,
        ref lengths,
        heads,
    } = *layout;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
    let mut gq = vec![0.0; tq.len()];
    let mut gk = vec![0.0; tk.len()];
    let mut gv = vec![0.0; tv.len()];
    let mut dscore = vec![0.0; seq_len];
    for b in 0..batch {
        let len = lengths[b];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq_len {
                let gi = &g[(b * seq_len + i) * d + off..][..dh];
                let p_base = ((b * heads + h) * seq_len + i) * seq_len;
                let prow = &probs[p_base..p_base + len];
                let mut weighted = 0.0;
                for j in 0..len {
                    let vj = &vd[(b * seq_len + j) * d + off..][..dh];
                    let dp = dot(gi, vj);
                    dscore[j] = dp;
                    weighted += prow[j] * dp;
                    let gvj = &mut gv[(b * seq_len + j) * d + off..][..dh];
                    for (s, &x) in gvj.iter_mut().zip(gi) {
                        *s += prow[j] * x;
                    }
                }
                let qi_row = (b * seq_len + i) * d + off;
                for j in 0..len {
                    let ds = prow[j] * (dscore[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_row = (b * seq_len + j) * d + off;
                    for t in 0..dh {
                        gq[qi_row + t] += ds * kd[kj_row + t];
                        gk[kj_row + t] += ds * qd[qi_row + t];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
