//! Dense 64-bit tensors, graph layers and tape-based reverse-mode gradients.
//!
//! Every forward kernel exists once and is shared by the plain functions
//! (`gcn_layer`, `gat_layer`, ...) and the recording [`Tape`]. Graph
//! structure enters as constants: [`SparseMatrix`] for fixed propagation
//! operators and [`Neighborhoods`] for attention.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied inside the logarithms of the reconstruction loss.
pub const BCE_CLAMP: f64 = 1e-12;
pub const GAT_SLOPE: f64 = 0.2;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Glorot-uniform initialization.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    fn check_same(&self, other: &Tensor2, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (x, &b) in o.iter_mut().zip(other.row(k)) {
                    *x += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (x, &bv) in out.row_mut(i).iter_mut().zip(b) {
                    *x += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.check_same(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other);
        Ok(out)
    }

    fn add_assign(&mut self, other: &Tensor2) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds the `1 x cols` tensor `bias` to every row.
    pub fn add_row(&self, bias: &Tensor2) -> Result<Tensor2> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape(format!(
                "bias {:?} for {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 x cols` tensor.
    pub fn sum_rows(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for r in 0..self.rows {
            for (x, v) in out.data.iter_mut().zip(self.row(r)) {
                *x += v;
            }
        }
        out
    }

    /// Stacks tensors of equal width on top of each other.
    pub fn vstack(parts: &[&Tensor2]) -> Result<Tensor2> {
        let cols = parts.first().map_or(0, |t| t.cols);
        if parts.iter().any(|t| t.cols != cols) {
            return Err(Error::Shape("vstack with differing widths".into()));
        }
        let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Tensor2 {
            rows: parts.iter().map(|t| t.rows).sum(),
            cols,
            data,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compressed sparse row matrix used as a constant propagation operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for r in &rows {
            for &(c, v) in r {
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.set(r, c, t.get(r, c) + v);
            }
        }
        t
    }

    /// `self * x`.
    pub fn mul(&self, x: &Tensor2) -> Result<Tensor2> {
        if self.cols != x.rows {
            return Err(Error::Shape(format!(
                "sparse {:?} x {:?}",
                self.shape(),
                x.shape()
            )));
        }
        let mut out = Tensor2::zeros(self.rows, x.cols);
        for r in 0..self.rows {
            let o = out.row_mut(r);
            for (c, v) in self.row(r) {
                for (a, b) in o.iter_mut().zip(x.row(c)) {
                    *a += v * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * g`.
    pub fn t_mul(&self, g: &Tensor2) -> Result<Tensor2> {
        if self.rows != g.rows {
            return Err(Error::Shape(format!(
                "sparse^T {:?} x {:?}",
                self.shape(),
                g.shape()
            )));
        }
        let mut out = Tensor2::zeros(self.cols, g.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                for (a, b) in out.row_mut(c).iter_mut().zip(g.row(r)) {
                    *a += v * b;
                }
            }
        }
        Ok(out)
    }
}

/// `D^-1/2 (A + I) D^-1/2` for a symmetric adjacency given as neighbor
/// lists without self entries.
pub fn normalize_adjacency(adj: &[Vec<usize>]) -> SparseMatrix {
    let deg: Vec<f64> = adj.iter().map(|r| (r.len() + 1) as f64).collect();
    let rows = adj
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut row: Vec<(usize, f64)> = nb
                .iter()
                .chain(std::iter::once(&i))
                .map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt()))
                .collect();
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    SparseMatrix::from_rows(adj.len(), rows)
}

/// Row-normalized adjacency: row `i` averages the neighbors of `i`. Rows
/// of isolated nodes are empty, so their aggregate is zero.
pub fn mean_aggregator(adj: &[Vec<usize>]) -> SparseMatrix {
    let rows = adj
        .iter()
        .map(|nb| {
            let w = 1.0 / nb.len().max(1) as f64;
            nb.iter().map(|&j| (j, w)).collect()
        })
        .collect();
    SparseMatrix::from_rows(adj.len(), rows)
}

/// Attention neighborhoods: each node's neighbors plus itself, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn with_self_loops(adj: &[Vec<usize>]) -> Self {
        let lists = adj
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut l = nb.clone();
                l.push(i);
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect();
        Neighborhoods { lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }
}

pub fn leaky_relu(h: &Tensor2, slope: f64) -> Tensor2 {
    h.map(|x| if x > 0.0 { x } else { slope * x })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout mask: zero with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Tensor2 {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor2 { rows, cols, data }
}

pub fn dropout(h: &Tensor2, p: f64, rng: &mut impl Rng, mode: Mode) -> Tensor2 {
    if mode == Mode::Eval || p == 0.0 {
        return h.clone();
    }
    let mask = dropout_mask(h.rows, h.cols, p, rng);
    let mut out = h.clone();
    for (a, m) in out.data.iter_mut().zip(&mask.data) {
        *a *= m;
    }
    out
}

/// `A_hat H W + b`.
pub fn gcn_layer(ahat: &SparseMatrix, h: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    ahat.mul(&h.matmul(w)?)?.add_row(b)
}

/// `H W_self + mean_agg(H) W_neigh + b`.
pub fn sage_layer(
    agg: &SparseMatrix,
    h: &Tensor2,
    w_self: &Tensor2,
    w_neigh: &Tensor2,
    b: &Tensor2,
) -> Result<Tensor2> {
    h.matmul(w_self)?
        .add(&agg.mul(h)?.matmul(w_neigh)?)?
        .add_row(b)
}

/// Per-node attention weights aligned with `Neighborhoods::of(i)`, and the
/// pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub alpha: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

fn gat_kernel(wh: &Tensor2, a_src: &Tensor2, a_dst: &Tensor2, nb: &Neighborhoods) -> Result<(Tensor2, Attention)> {
    if a_src.shape() != (1, wh.cols) || a_dst.shape() != (1, wh.cols) || nb.len() != wh.rows {
        return Err(Error::Shape(format!(
            "gat: features {:?}, attention {:?}/{:?}, {} neighborhoods",
            wh.shape(),
            a_src.shape(),
            a_dst.shape(),
            nb.len()
        )));
    }
    let s: Vec<f64> = (0..wh.rows).map(|i| dot(wh.row(i), &a_src.data)).collect();
    let t: Vec<f64> = (0..wh.rows).map(|j| dot(wh.row(j), &a_dst.data)).collect();
    let mut out = Tensor2::zeros(wh.rows, wh.cols);
    let mut alpha = Vec::with_capacity(wh.rows);
    let mut pre = Vec::with_capacity(wh.rows);
    for i in 0..wh.rows {
        let ps: Vec<f64> = nb.of(i).iter().map(|&j| s[i] + t[j]).collect();
        let e: Vec<f64> = ps.iter().map(|&x| if x > 0.0 { x } else { GAT_SLOPE * x }).collect();
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = e.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        let a: Vec<f64> = ex.iter().map(|x| x / z).collect();
        let o = out.row_mut(i);
        for (&j, &aij) in nb.of(i).iter().zip(&a) {
            for (x, v) in o.iter_mut().zip(wh.row(j)) {
                *x += aij * v;
            }
        }
        alpha.push(a);
        pre.push(ps);
    }
    Ok((out, Attention { alpha, pre }))
}

/// Single-head attention layer without bias: `sum_j alpha_ij W h_j`.
pub fn gat_layer(
    nb: &Neighborhoods,
    h: &Tensor2,
    w: &Tensor2,
    a_src: &Tensor2,
    a_dst: &Tensor2,
) -> Result<(Tensor2, Attention)> {
    gat_kernel(&h.matmul(w)?, a_src, a_dst, nb)
}

/// Batch-normalization parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum,
            eps,
        }
    }

    /// Folds a batch's mean and biased variance into the running statistics.
    /// The running variance stores the unbiased estimate.
    fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        let corr = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for k in 0..mean.len() {
            self.running_mean[k] = (1.0 - self.momentum) * self.running_mean[k] + self.momentum * mean[k];
            self.running_var[k] = (1.0 - self.momentum) * self.running_var[k] + self.momentum * var[k] * corr;
        }
    }
}

struct BnForward {
    out: Tensor2,
    xhat: Tensor2,
    inv_std: Vec<f64>,
}

fn column_stats(x: &Tensor2) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows as f64;
    let mean: Vec<f64> = x.sum_rows().data.iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (k, v) in x.row(r).iter().enumerate() {
            var[k] += (v - mean[k]).powi(2);
        }
    }
    (mean, var.iter().map(|v| v / n).collect())
}

fn bn_kernel(x: &Tensor2, gamma: &Tensor2, beta: &Tensor2, mean: &[f64], var: &[f64], eps: f64) -> Result<BnForward> {
    if gamma.shape() != (1, x.cols) || beta.shape() != (1, x.cols) || mean.len() != x.cols {
        return Err(Error::Shape(format!(
            "batch norm over {:?} with scale {:?}",
            x.shape(),
            gamma.shape()
        )));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor2::zeros(x.rows, x.cols);
    let mut out = Tensor2::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for k in 0..x.cols {
            let h = (x.get(r, k) - mean[k]) * inv_std[k];
            xhat.set(r, k, h);
            out.set(r, k, h * gamma.data[k] + beta.data[k]);
        }
    }
    Ok(BnForward { out, xhat, inv_std })
}

/// Batch normalization. `Train` normalizes with the batch's own statistics
/// and updates `state`; `Eval` applies the running statistics.
pub fn batch_norm(x: &Tensor2, gamma: &Tensor2, beta: &Tensor2, state: &mut BatchNormState, mode: Mode) -> Result<Tensor2> {
    match mode {
        Mode::Train => {
            let (mean, var) = column_stats(x);
            let f = bn_kernel(x, gamma, beta, &mean, &var, state.eps)?;
            state.update(&mean, &var, x.rows);
            Ok(f.out)
        }
        Mode::Eval => Ok(bn_kernel(x, gamma, beta, &state.running_mean, &state.running_var, state.eps)?.out),
    }
}

/// `sigma(Z Z^T)`.
pub fn inner_product_decode(z: &Tensor2) -> Tensor2 {
    z.matmul_t(z).expect("Z Z^T is always well-formed").map(sigmoid)
}

fn bce_term(logit: f64, target: bool) -> (f64, f64) {
    // Loss and its derivative in the logit; zero slope where the clamp binds.
    let (p, q) = (sigmoid(logit), sigmoid(-logit));
    if target {
        if p > BCE_CLAMP {
            (-p.ln(), -q)
        } else {
            (-BCE_CLAMP.ln(), 0.0)
        }
    } else if q > BCE_CLAMP {
        (-q.ln(), p)
    } else {
        (-BCE_CLAMP.ln(), 0.0)
    }
}

/// Mean off-diagonal binary cross-entropy between `P` and a 0/1 target.
pub fn bce_loss(p: &Tensor2, target: &Tensor2) -> Result<f64> {
    p.check_same(target, "bce")?;
    let n = p.rows;
    if n != p.cols || n < 2 {
        return Err(Error::Shape(format!("bce needs a square matrix of order >= 2, got {:?}", p.shape())));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (pv, a) = (p.get(i, j), target.get(i, j));
                total -= a * pv.max(BCE_CLAMP).ln() + (1.0 - a) * (1.0 - pv).max(BCE_CLAMP).ln();
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// One graph inside a block-diagonal batch: its row range and dense 0/1
/// symmetric target without diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBlock {
    pub offset: usize,
    pub size: usize,
    pub target: Vec<bool>,
}

impl GraphBlock {
    pub fn new(offset: usize, adj: &[Vec<usize>]) -> Self {
        let n = adj.len();
        let mut target = vec![false; n * n];
        for (i, nb) in adj.iter().enumerate() {
            for &j in nb {
                target[i * n + j] = true;
                target[j * n + i] = true;
            }
        }
        GraphBlock {
            offset,
            size: n,
            target,
        }
    }
}

/// Per-graph mean off-diagonal BCE of the inner-product decoder, and the
/// logit derivatives of `mean over graphs` when `with_grad` is set.
fn recon_kernel(z: &Tensor2, blocks: &[GraphBlock], with_grad: bool) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut losses = Vec::with_capacity(blocks.len());
    let mut grads = Vec::new();
    let g = blocks.len() as f64;
    for b in blocks {
        let n = b.size;
        if n < 2 || b.offset + n > z.rows {
            return Err(Error::Shape(format!(
                "graph block at {} of size {n} in a batch of {} rows",
                b.offset, z.rows
            )));
        }
        let pairs = (n * (n - 1)) as f64;
        let mut total = 0.0;
        let mut d = if with_grad { vec![0.0; n * n] } else { Vec::new() };
        for i in 0..n {
            let zi = z.row(b.offset + i);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (l, dl) = bce_term(dot(zi, z.row(b.offset + j)), b.target[i * n + j]);
                total += l;
                if with_grad {
                    d[i * n + j] = dl / (pairs * g);
                }
            }
        }
        losses.push(total / pairs);
        if with_grad {
            grads.push(d);
        }
    }
    Ok((losses, grads))
}

/// Reconstruction error of each graph in a batch.
pub fn reconstruction_losses(z: &Tensor2, blocks: &[GraphBlock]) -> Result<Vec<f64>> {
    Ok(recon_kernel(z, blocks, false)?.0)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Rc<SparseMatrix>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Mask(Var, Tensor2),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Gat {
        wh: Var,
        a_src: Var,
        a_dst: Var,
        nb: Rc<Neighborhoods>,
        att: Attention,
    },
    Recon {
        z: Var,
        blocks: Rc<Vec<GraphBlock>>,
        dlogit: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor2,
    op: Op,
}

/// Records a forward computation for one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn spmm(&mut self, s: &Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let out = s.mul(self.value(x))?;
        Ok(self.push(out, Op::SpMM(Rc::clone(s), x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mask(&mut self, x: Var, mask: Tensor2) -> Result<Var> {
        let v = self.value(x);
        v.check_same(&mask, "mask")?;
        let mut out = v.clone();
        for (a, m) in out.data.iter_mut().zip(&mask.data) {
            *a *= m;
        }
        Ok(self.push(out, Op::Mask(x, mask)))
    }

    /// Batch normalization; see [`batch_norm`]. In `Eval` mode the running
    /// statistics are constants and the op is affine in `x`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, mode: Mode) -> Result<Var> {
        let xv = self.value(x);
        let (f, batch_stats) = match mode {
            Mode::Train => {
                let (mean, var) = column_stats(xv);
                let f = bn_kernel(xv, self.value(gamma), self.value(beta), &mean, &var, state.eps)?;
                state.update(&mean, &var, xv.rows);
                (f, true)
            }
            Mode::Eval => (
                bn_kernel(xv, self.value(gamma), self.value(beta), &state.running_mean, &state.running_var, state.eps)?,
                false,
            ),
        };
        Ok(self.push(
            f.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
                batch_stats,
            },
        ))
    }

    /// Attention aggregation over already-projected features `wh`.
    pub fn gat(&mut self, wh: Var, a_src: Var, a_dst: Var, nb: &Rc<Neighborhoods>) -> Result<Var> {
        let (out, att) = gat_kernel(self.value(wh), self.value(a_src), self.value(a_dst), nb)?;
        Ok(self.push(
            out,
            Op::Gat {
                wh,
                a_src,
                a_dst,
                nb: Rc::clone(nb),
                att,
            },
        ))
    }

    /// Mean over graphs of the per-graph reconstruction error, as `1 x 1`.
    /// Also returns the per-graph errors.
    pub fn reconstruction_loss(&mut self, z: Var, blocks: &Rc<Vec<GraphBlock>>) -> Result<(Var, Vec<f64>)> {
        if blocks.is_empty() {
            return Err(Error::Shape("reconstruction loss over an empty batch".into()));
        }
        let (losses, dlogit) = recon_kernel(self.value(z), blocks, true)?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let v = self.push(
            Tensor2::filled(1, 1, mean),
            Op::Recon {
                z,
                blocks: Rc::clone(blocks),
                dlogit,
            },
        );
        Ok((v, losses))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor2::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Tensor2| match &mut grads[v.0] {
                Some(t) => t.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b))?);
                    acc(*b, self.value(*a).t_matmul(&g)?);
                }
                Op::SpMM(s, x) => acc(*x, s.t_mul(&g)?),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(x, b) => {
                    acc(*b, g.sum_rows());
                    acc(*x, g.clone());
                }
                Op::Transpose(x) => acc(*x, g.transpose()),
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    let mut d = g.clone();
                    for (dv, &v) in d.data.iter_mut().zip(&xv.data) {
                        if v <= 0.0 {
                            *dv *= slope;
                        }
                    }
                    acc(*x, d);
                }
                Op::Mask(x, m) => {
                    let mut d = g.clone();
                    for (dv, mv) in d.data.iter_mut().zip(&m.data) {
                        *dv *= mv;
                    }
                    acc(*x, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gam = &self.value(*gamma).data;
                    let (n, c) = g.shape();
                    let mut dgamma = Tensor2::zeros(1, c);
                    let dbeta = g.sum_rows();
                    for r in 0..n {
                        for k in 0..c {
                            dgamma.data[k] += g.get(r, k) * xhat.get(r, k);
                        }
                    }
                    let mut dx = Tensor2::zeros(n, c);
                    for k in 0..c {
                        let scale = gam[k] * inv_std[k];
                        if *batch_stats {
                            let nf = n as f64;
                            for r in 0..n {
                                let v = nf * g.get(r, k) - dbeta.data[k] - xhat.get(r, k) * dgamma.data[k];
                                dx.set(r, k, scale * v / nf);
                            }
                        } else {
                            for r in 0..n {
                                dx.set(r, k, scale * g.get(r, k));
                            }
                        }
                    }
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                    acc(*x, dx);
                }
                Op::Gat {
                    wh,
                    a_src,
                    a_dst,
                    nb,
                    att,
                } => {
                    let whv = self.value(*wh);
                    let (asv, adv) = (&self.value(*a_src).data, &self.value(*a_dst).data);
                    let (n, c) = whv.shape();
                    let mut dwh = Tensor2::zeros(n, c);
                    let mut ds = vec![0.0; n];
                    let mut dt = vec![0.0; n];
                    for i in 0..n {
                        let gi = g.row(i);
                        let alpha = &att.alpha[i];
                        let dalpha: Vec<f64> = nb.of(i).iter().map(|&j| dot(gi, whv.row(j))).collect();
                        let inner: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                        for (k, &j) in nb.of(i).iter().enumerate() {
                            for (x, gv) in dwh.row_mut(j).iter_mut().zip(gi) {
                                *x += alpha[k] * gv;
                            }
                            let de = alpha[k] * (dalpha[k] - inner);
                            let dpre = if att.pre[i][k] > 0.0 { de } else { GAT_SLOPE * de };
                            ds[i] += dpre;
                            dt[j] += dpre;
                        }
                    }
                    let mut das = Tensor2::zeros(1, c);
                    let mut dad = Tensor2::zeros(1, c);
                    for i in 0..n {
                        let row = whv.row(i);
                        for k in 0..c {
                            das.data[k] += ds[i] * row[k];
                            dad.data[k] += dt[i] * row[k];
                        }
                        for (k, x) in dwh.row_mut(i).iter_mut().enumerate() {
                            *x += ds[i] * asv[k] + dt[i] * adv[k];
                        }
                    }
                    acc(*wh, dwh);
                    acc(*a_src, das);
                    acc(*a_dst, dad);
                }
                Op::Recon { z, blocks, dlogit } => {
                    let zv = self.value(*z);
                    let scale = g.data[0];
                    let mut dz = Tensor2::zeros(zv.rows, zv.cols);
                    for (b, d) in blocks.iter().zip(dlogit) {
                        let n = b.size;
                        for i in 0..n {
                            for j in 0..n {
                                let w = (d[i * n + j] + d[j * n + i]) * scale;
                                if w == 0.0 {
                                    continue;
                                }
                                let (o, src) = (b.offset + i, b.offset + j);
                                for k in 0..zv.cols {
                                    dz.data[o * zv.cols + k] += w * zv.data[src * zv.cols + k];
                                }
                            }
                        }
                    }
                    acc(*z, dz);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` did not
    /// influence the root.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor2 {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Tensor2::zeros(r, c)
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor2], grads: &[Tensor2]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in parameter tensor {k}")));
            }
            params[k].check_same(g, "adam")?;
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences with step `h`.
/// `f` returns the loss and the gradient for every tensor of `params`.
pub fn check_gradients(
    params: &[Tensor2],
    h: f64,
    mut f: impl FnMut(&[Tensor2]) -> Result<(f64, Vec<Tensor2>)>,
) -> Result<GradCheck> {
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape("gradient count differs from parameter count".into()));
    }
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        tensor: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.to_vec();
    for t in 0..params.len() {
        for i in 0..params[t].data.len() {
            let orig = work[t].data[i];
            work[t].data[i] = orig + h;
            let (fp, _) = f(&work)?;
            work[t].data[i] = orig - h;
            let (fm, _) = f(&work)?;
            work[t].data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[t].data[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at tensor {t} entry {i}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: rel,
                    tensor: t,
                    index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &Tensor2, b: &Tensor2, tol: f64) -> bool {
        a.shape() == b.shape() && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn rand_t(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Naive dense product used as an oracle.
    fn naive(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut o = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                o.set(i, j, s);
            }
        }
        o
    }

    const PATH3: [&[usize]; 3] = [&[1], &[0, 2], &[1]];

    fn adj(lists: &[&[usize]]) -> Vec<Vec<usize>> {
        lists.iter().map(|l| l.to_vec()).collect()
    }

    #[test]
    fn products_agree_with_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(4, 3, &mut rng);
        let b = rand_t(3, 5, &mut rng);
        assert!(close(&a.matmul(&b).unwrap(), &naive(&a, &b), 1e-12));
        assert!(close(&a.t_matmul(&a).unwrap(), &naive(&a.transpose(), &a), 1e-12));
        assert!(close(&a.matmul_t(&a).unwrap(), &naive(&a, &a.transpose()), 1e-12));
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn normalized_adjacency_examples() {
        assert_eq!(normalize_adjacency(&[vec![]]).to_dense(), Tensor2::identity(1));
        let k2 = normalize_adjacency(&adj(&[&[1], &[0]])).to_dense();
        assert!(k2.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 7;
        let mut lists = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(0.4) {
                    lists[i].push(j);
                    lists[j].push(i);
                }
            }
        }
        let d = normalize_adjacency(&lists).to_dense();
        assert!(close(&d, &d.transpose(), 0.0));
        for r in 0..n {
            let s: f64 = d.row(r).iter().sum();
            assert!(s > 0.0 && s <= (n as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn gcn_layer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rand_t(4, 3, &mut rng);
        let eye = SparseMatrix::from_rows(4, (0..4).map(|i| vec![(i, 1.0)]).collect());
        let out = gcn_layer(&eye, &h, &Tensor2::identity(3), &Tensor2::zeros(1, 3)).unwrap();
        assert_eq!(out, h);
        let b = t(&[&[1.0, -2.0]]);
        let z = gcn_layer(&eye, &Tensor2::zeros(4, 3), &rand_t(3, 2, &mut rng), &b).unwrap();
        assert!((0..4).all(|r| z.row(r) == b.row(0)));
        // Random 4-node graph against dense products.
        let lists = adj(&[&[1, 2], &[0], &[0, 3], &[2]]);
        let ahat = normalize_adjacency(&lists);
        let w = rand_t(3, 2, &mut rng);
        let expected = naive(&naive(&ahat.to_dense(), &h), &w).add_row(&b).unwrap();
        assert!(close(&gcn_layer(&ahat, &h, &w, &b).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn sage_layer_examples() {
        let ws = t(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let wn = t(&[&[0.5, 0.5], &[-1.0, 1.0]]);
        let b = t(&[&[0.1, 0.2]]);
        let iso = sage_layer(&mean_aggregator(&[vec![]]), &t(&[&[3.0, 4.0]]), &ws, &wn, &b).unwrap();
        assert!(close(&iso, &t(&[&[3.1, 8.2]]), 1e-12));
        let k2 = sage_layer(&mean_aggregator(&adj(&[&[1], &[0]])), &t(&[&[1.0, 1.0], &[1.0, 1.0]]), &ws, &wn, &b).unwrap();
        assert_eq!(k2.row(0), k2.row(1));
        // Path a-b-c by hand: b averages a and c.
        let h = t(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]]);
        let out = sage_layer(&mean_aggregator(&adj(&PATH3)), &h, &ws, &wn, &b).unwrap();
        // b: self (0,2); mean (1.5,1) -> (0.75-1, 0.75+1) = (-0.25, 1.75).
        assert!(close(&t(&[out.row(1)]), &t(&[&[0.0 - 0.25 + 0.1, 2.0 + 1.75 + 0.2]]), 1e-12));
    }

    #[test]
    fn gat_layer_examples() {
        let nb = Neighborhoods::with_self_loops(&adj(&PATH3));
        let w = Tensor2::identity(2);
        let a_src = t(&[&[0.3, -0.1]]);
        let a_dst = t(&[&[0.2, 0.4]]);
        let h = t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let (out, att) = gat_layer(&nb, &h, &w, &a_src, &a_dst).unwrap();
        for a in &att.alpha {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Node 0 attends to {0, 1}: e00 = lrelu(0.3 + 0.2), e01 = lrelu(0.3 + 0.4).
        let (e0, e1) = (0.5f64, 0.7f64);
        let a0 = e0.exp() / (e0.exp() + e1.exp());
        assert!((att.alpha[0][0] - a0).abs() < 1e-12);
        assert!((out.get(0, 0) - a0).abs() < 1e-12);
        assert!((out.get(0, 1) - (1.0 - a0)).abs() < 1e-12);
        // Negative score goes through the 0.2 slope: node 1 with a_src = -1.
        let (_, neg) = gat_layer(&nb, &h, &w, &t(&[&[-1.0, -1.0]]), &Tensor2::zeros(1, 2)).unwrap();
        assert!(neg.alpha[1].iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
        let same = Tensor2::filled(3, 2, 0.7);
        let (_, uni) = gat_layer(&nb, &same, &w, &a_src, &a_dst).unwrap();
        assert!(uni.alpha[1].iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_modes() {
        let gamma = t(&[&[2.0, 1.0]]);
        let beta = t(&[&[0.5, -1.0]]);
        let mut st = BatchNormState::new(2, 0.1, 1e-5);
        let x = t(&[&[3.0, 1.0], &[3.0, 2.0], &[3.0, 6.0]]);
        let y = batch_norm(&x, &gamma, &beta, &mut st, Mode::Train).unwrap();
        assert!((0..3).all(|r| y.get(r, 0) == 0.5));
        let col: Vec<f64> = (0..3).map(|r| y.get(r, 1) + 1.0).collect();
        let m = col.iter().sum::<f64>() / 3.0;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        assert!((st.running_mean[1] - 0.3).abs() < 1e-12);
        // Unbiased batch variance of (1, 2, 6) is 7.
        assert!((st.running_var[1] - (0.9 + 0.7)).abs() < 1e-12);
        let mut fresh = BatchNormState::new(2, 0.1, 0.0);
        let e = batch_norm(&x, &gamma, &beta, &mut fresh, Mode::Eval).unwrap();
        assert!(close(&e, &x.matmul(&t(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap().add_row(&beta).unwrap(), 1e-12));
        assert_eq!(fresh, BatchNormState::new(2, 0.1, 0.0));
    }

    #[test]
    fn activation_and_dropout() {
        let x = t(&[&[1.0, 0.0, 2.5]]);
        assert_eq!(leaky_relu(&x, 0.01), x);
        assert_eq!(leaky_relu(&t(&[&[-2.0]]), 0.01).get(0, 0), -0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(dropout(&x, 0.0, &mut rng, Mode::Train), x);
        assert_eq!(dropout(&x, 0.2, &mut rng, Mode::Eval), x);
        let ones = Tensor2::filled(1, 100_000, 1.0);
        let d = dropout(&ones, 0.2, &mut rng, Mode::Train);
        let mean = d.data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01);
    }

    #[test]
    fn decoder_and_loss() {
        let p = inner_product_decode(&Tensor2::zeros(3, 8));
        assert!(p.data().iter().all(|&v| v == 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_t(4, 3, &mut rng);
        let p = inner_product_decode(&z);
        assert!(close(&p, &p.transpose(), 0.0));
        let oracle = naive(&z, &z.transpose()).map(|v| 1.0 / (1.0 + (-v).exp()));
        assert!(close(&p, &oracle, 1e-15));
        let half = Tensor2::filled(3, 3, 0.5);
        let target = t(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
        assert!((bce_loss(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&target, &target).unwrap() < 1e-10);
        // 2x2 by hand: p01 = p10 = 0.8, target 1 -> -ln 0.8.
        let p2 = t(&[&[0.0, 0.8], &[0.8, 0.0]]);
        let a2 = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!((bce_loss(&p2, &a2).unwrap() + 0.8f64.ln()).abs() < 1e-15);
        // The batched kernel agrees with the dense formula.
        let lists = adj(&[&[1, 3], &[0], &[3], &[0, 2]]);
        let blk = GraphBlock::new(0, &lists);
        let dense_t = Tensor2::from_vec(4, 4, blk.target.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        let l = reconstruction_losses(&z, &[blk]).unwrap()[0];
        assert!((l - bce_loss(&p, &dense_t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tape_gradients() {
        // f(w) = ||w||^2 = w w^T has gradient 2w.
        let mut tape = Tape::new();
        let w0 = t(&[&[1.5, -2.0, 0.25]]);
        let w = tape.leaf(w0.clone());
        let wt = tape.transpose(w);
        let f = tape.matmul(w, wt).unwrap();
        assert_eq!(tape.value(f).get(0, 0), 6.3125);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(w, &tape), w0.map(|v| 2.0 * v));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lists = adj(&[&[1, 2], &[0, 3], &[0], &[1]]);
        let sm = Rc::new(normalize_adjacency(&lists));
        let nb = Rc::new(Neighborhoods::with_self_loops(&lists));
        let blocks = Rc::new(vec![GraphBlock::new(0, &lists)]);
        let x = rand_t(4, 3, &mut rng);
        let params = vec![rand_t(3, 4, &mut rng), rand_t(1, 4, &mut rng), rand_t(1, 4, &mut rng), rand_t(1, 4, &mut rng), rand_t(1, 4, &mut rng)];
        let st = BatchNormState::new(4, 0.1, 1e-5);
        let mask = dropout_mask(4, 4, 0.3, &mut rng);
        let mut run = |p: &[Tensor2]| -> Result<(f64, Vec<Tensor2>)> {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let vars: Vec<Var> = p.iter().map(|v| tape.leaf(v.clone())).collect();
            let h = tape.matmul(xv, vars[0])?;
            let h = tape.spmm(&sm, h)?;
            let h = tape.add_row(h, vars[1])?;
            let mut s = st.clone();
            let h = tape.batch_norm(h, vars[3], vars[4], &mut s, Mode::Train)?;
            let h = tape.leaky_relu(h, 0.01);
            let h = tape.mask(h, mask.clone())?;
            let skip = tape.add(h, h)?;
            let h = tape.gat(skip, vars[2], vars[1], &nb)?;
            let (l, _) = tape.reconstruction_loss(h, &blocks)?;
            let g = tape.backward(l)?;
            Ok((tape.value(l).get(0, 0), vars.iter().map(|&v| g.wrt(v, &tape)).collect()))
        };
        let rep = check_gradients(&params, 1e-5, &mut run).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![t(&[&[1.0, -1.0]])];
        let mut adam = Adam::new(1e-3, &[(1, 2)]);
        adam.step(&mut p, &[Tensor2::zeros(1, 2)]).unwrap();
        assert_eq!(p[0], t(&[&[1.0, -1.0]]));
        assert_eq!(adam.t, 1);
        adam.step(&mut p, &[t(&[&[2.0, -3.0]])]).unwrap();
        // First nonzero step moves each entry by ~lr against the gradient sign.
        assert!(p[0].get(0, 0) < 1.0 && p[0].get(0, 1) > -1.0);
        let bad = adam.step(&mut p, &[t(&[&[f64::NAN, 0.0]])]);
        assert!(matches!(bad, Err(Error::Numerical(_))));
    }
}
