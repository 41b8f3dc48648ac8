//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a node
//! holding its value and the ids of its inputs. [`Graph::backward`] walks the
//! tape in reverse and accumulates vector-Jacobian products. Parameter leaves
//! are copied in from a [`ParamStore`] and their gradients are added back with
//! [`Graph::accumulate_into`].
//!
//! All values are rank-2 `[rows, cols]`; the ops cover what the feed-forward
//! stacks, Gaussian codecs and point-process selectors need, including a few
//! fused kernels (pairwise Gaussian log-density, ordered subset
//! log-likelihood) whose backward passes are written by hand.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One "pick a count, then pick that many distinct items" draw.
///
/// `count` is the sampled size (1-based, so head slot `count - 1`), `order`
/// the item indices in the order they were drawn without replacement.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SubsetDraw {
    pub count: usize,
    pub order: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Sum(Var),
    SumRows(Var),
    LogSoftmax(Var),
    LogSumExpRows(Var),
    PickCols(Var, Vec<usize>),
    Diag(Var),
    GaussPairwise {
        z: Var,
        mu: Var,
        logvar: Var,
    },
    SubsetLogProb {
        logits: Var,
        count_dims: usize,
        draws: Vec<Option<SubsetDraw>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-probability of one ordered subset draw under (count head, index head)
/// logits. Returns `None` if the draw does not fit the logits.
pub fn subset_log_prob(logits: &[f64], count_dims: usize, draw: &SubsetDraw) -> Option<f64> {
    if count_dims == 0 || logits.len() <= count_dims {
        return None;
    }
    let (count_logits, index_logits) = logits.split_at(count_dims);
    if draw.count == 0 || draw.count > count_dims || draw.order.len() != draw.count {
        return None;
    }
    let mut lp = count_logits[draw.count - 1] - log_sum_exp(count_logits.iter().copied());
    let mut removed = vec![false; index_logits.len()];
    for &idx in &draw.order {
        if idx >= index_logits.len() || removed[idx] {
            return None;
        }
        let lse = log_sum_exp(
            index_logits
                .iter()
                .zip(&removed)
                .filter(|(_, r)| !**r)
                .map(|(x, _)| *x),
        );
        lp += index_logits[idx] - lse;
        removed[idx] = true;
    }
    Some(lp)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters are treated as constants. Used for evaluation
    /// passes that never call `backward`.
    pub fn no_grad() -> Self {
        Graph {
            track_params: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient without being a stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.value(id).clone();
        let track = self.track_params;
        self.push(t, Op::Param(id), track)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: slices have exactly m*k, k*n and m*n elements with the
            // row-major strides passed below.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    av.data().as_ptr(),
                    k as isize,
                    1,
                    bv.data().as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::matrix(xv.rows(), c, out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::matrix(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::matrix(av.rows(), av.cols(), data).expect("unary keeps shape")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(a, |x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let r = xv.rows();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), v.shape()));
            }
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::shape("slice_cols", av.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for i in 0..av.rows() {
            out.extend_from_slice(&av.row_slice(i)[start..start + len]);
        }
        let t = Tensor::matrix(av.rows(), len, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::shape("slice_rows", av.shape(), &[start, len]));
        }
        let c = av.cols();
        let t = Tensor::matrix(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// Rows `idx` of `a`, in order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if let Some(bad) = idx.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::Index(format!("row {bad} of {} in gather_rows", av.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            data.extend_from_slice(av.row_slice(r));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `[rows, c]` zeros with row `idx[i]` set to row `i` of `a`. Indices must
    /// be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if idx.len() != av.rows() {
            return Err(Error::shape("scatter_rows", av.shape(), &[idx.len()]));
        }
        let mut seen = vec![false; rows];
        for &r in idx {
            if r >= rows || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Index(format!("row {r} of {rows} in scatter_rows")));
            }
        }
        let mut data = vec![0.0; rows * c];
        for (i, &r) in idx.iter().enumerate() {
            data[r * c..(r + 1) * c].copy_from_slice(av.row_slice(i));
        }
        let t = Tensor::matrix(rows, c, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::ScatterRows(a, idx.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[r, c] -> [r, 1]`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|i| av.row_slice(i).iter().sum()).collect();
        let t = Tensor::matrix(av.rows(), 1, data).expect("column");
        let rg = self.rg(a);
        self.push(t, Op::SumRows(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(av.len());
        for i in 0..av.rows() {
            let row = av.row_slice(i);
            let lse = log_sum_exp(row.iter().copied());
            out.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::matrix(av.rows(), c, out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// `[r, c] -> [r, 1]`, numerically stabilized.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows())
            .map(|i| log_sum_exp(av.row_slice(i).iter().copied()))
            .collect();
        let t = Tensor::matrix(av.rows(), 1, data).expect("column");
        let rg = self.rg(a);
        self.push(t, Op::LogSumExpRows(a), rg)
    }

    /// Gathers `a[r, idx[r]]` into a `[r, 1]` column.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(Error::shape("pick_cols", av.shape(), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= av.cols() {
                return Err(Error::Index(format!("column {c} of {} in pick_cols", av.cols())));
            }
            data.push(av.get(r, c));
        }
        let t = Tensor::matrix(idx.len(), 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::PickCols(a, idx.to_vec()), rg))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(Error::shape("diag", av.shape(), av.shape()));
        }
        let data = (0..av.rows()).map(|i| av.get(i, i)).collect();
        let t = Tensor::matrix(av.rows(), 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Diag(a), rg))
    }

    /// `out[i, j] = log N(z_i; mu_j, diag(exp(logvar_j)))`.
    pub fn gaussian_pairwise_log_pdf(&mut self, z: Var, mu: Var, logvar: Var) -> Result<Var> {
        let (zv, mv, lv) = (self.value(z), self.value(mu), self.value(logvar));
        same_shape("gaussian_pairwise_log_pdf", mv, lv)?;
        if zv.cols() != mv.cols() {
            return Err(Error::shape("gaussian_pairwise_log_pdf", zv.shape(), mv.shape()));
        }
        let (n, m, d) = (zv.rows(), mv.rows(), zv.cols());
        let mut out = vec![0.0; n * m];
        for j in 0..m {
            let mu_j = mv.row_slice(j);
            let lv_j = lv.row_slice(j);
            let base: f64 = lv_j.iter().map(|l| -0.5 * (LN_2PI + l)).sum();
            let prec: Vec<f64> = lv_j.iter().map(|l| (-l).exp()).collect();
            for i in 0..n {
                let z_i = zv.row_slice(i);
                let mut q = 0.0;
                for k in 0..d {
                    let diff = z_i[k] - mu_j[k];
                    q += diff * diff * prec[k];
                }
                out[i * m + j] = base - 0.5 * q;
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        let rg = self.rg(z) || self.rg(mu) || self.rg(logvar);
        Ok(self.push(t, Op::GaussPairwise { z, mu, logvar }, rg))
    }

    /// Per-row log-likelihood of ordered subset draws; rows whose draw is
    /// `None` contribute exactly zero.
    pub fn subset_log_prob(
        &mut self,
        logits: Var,
        count_dims: usize,
        draws: Vec<Option<SubsetDraw>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if draws.len() != lv.rows() {
            return Err(Error::shape("subset_log_prob", lv.shape(), &[draws.len()]));
        }
        let mut data = Vec::with_capacity(draws.len());
        for (r, d) in draws.iter().enumerate() {
            match d {
                None => data.push(0.0),
                Some(d) => {
                    let lp = subset_log_prob(lv.row_slice(r), count_dims, d).ok_or_else(|| {
                        Error::Invalid(format!(
                            "draw {d:?} inconsistent with {} logits ({} count dims)",
                            lv.cols(),
                            count_dims
                        ))
                    })?;
                    data.push(lp);
                }
            }
        }
        let t = Tensor::matrix(draws.len(), 1, data)?;
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::SubsetLogProb {
                logits,
                count_dims,
                draws,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (needs scalar)", lv.shape(), &[1, 1]));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if rg(a) {
                    let bdata = val(b).data();
                    let ga = acc(nodes, grads, a).expect("tracked");
                    // SAFETY: ga is m*k, g is m*n, b is k*n read as b^T via strides.
                    unsafe {
                        matrixmultiply::dgemm(
                            m,
                            n,
                            k,
                            1.0,
                            g.as_ptr(),
                            n as isize,
                            1,
                            bdata.as_ptr(),
                            1,
                            n as isize,
                            1.0,
                            ga.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if rg(b) {
                    let adata = val(a).data();
                    let gb = acc(nodes, grads, b).expect("tracked");
                    // SAFETY: gb is k*n, a (m*k) read as a^T via strides.
                    unsafe {
                        matrixmultiply::dgemm(
                            k,
                            m,
                            n,
                            1.0,
                            adata.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            1.0,
                            gb.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::AddBias(x, b) => {
                let c = val(*b).len();
                if let Some(gx) = acc(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += s * x;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(nodes[i].value.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                        if v > lo && v < hi {
                            *o += x;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = val(*gamma).len();
                let gam = val(*gamma).data();
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    let nc = c as f64;
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            gx[r * c + j] += inv / nc * (nc * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if let Some(gp) = acc(nodes, grads, *p) {
                        for (r, grow) in g.chunks(total).enumerate() {
                            add_into(&mut gp[r * w..(r + 1) * w], &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if let Some(gp) = acc(nodes, grads, *p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let w = nodes[i].value.cols();
                let c = val(*a).cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut ga[r * c + start..r * c + start + w], grow);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = val(*a).cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(&mut ga[start * c..start * c + g.len()], g);
                }
            }
            Op::GatherRows(a, idx) => {
                let c = val(*a).cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut ga[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ScatterRows(a, idx) => {
                let c = val(*a).cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumRows(a) => {
                let c = val(*a).cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (r, row) in ga.chunks_mut(c).enumerate() {
                        for o in row {
                            *o += g[r];
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = nodes[i].value.cols();
                let y = nodes[i].value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let s: f64 = grow.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += grow[j] - y[r * c + j].exp() * s;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let c = val(*a).cols();
                let x = val(*a).data();
                let y = nodes[i].value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..y.len() {
                        for j in 0..c {
                            ga[r * c + j] += g[r] * (x[r * c + j] - y[r]).exp();
                        }
                    }
                }
            }
            Op::PickCols(a, idx) => {
                let c = val(*a).cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * c + j] += g[r];
                    }
                }
            }
            Op::Diag(a) => {
                let n = val(*a).rows();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..n {
                        ga[r * n + r] += g[r];
                    }
                }
            }
            Op::GaussPairwise { z, mu, logvar } => {
                let (zv, mv, lv) = (val(*z), val(*mu), val(*logvar));
                let (n, m, d) = (zv.rows(), mv.rows(), zv.cols());
                let mut gz = vec![0.0; n * d];
                let mut gmu = vec![0.0; m * d];
                let mut glv = vec![0.0; m * d];
                for j in 0..m {
                    let mu_j = mv.row_slice(j);
                    let prec: Vec<f64> = lv.row_slice(j).iter().map(|l| (-l).exp()).collect();
                    for i in 0..n {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let z_i = zv.row_slice(i);
                        for k in 0..d {
                            let diff = z_i[k] - mu_j[k];
                            let w = diff * prec[k];
                            gz[i * d + k] -= gij * w;
                            gmu[j * d + k] += gij * w;
                            glv[j * d + k] += gij * (-0.5 + 0.5 * diff * w);
                        }
                    }
                }
                if let Some(a) = acc(nodes, grads, *z) {
                    add_into(a, &gz);
                }
                if let Some(a) = acc(nodes, grads, *mu) {
                    add_into(a, &gmu);
                }
                if let Some(a) = acc(nodes, grads, *logvar) {
                    add_into(a, &glv);
                }
            }
            Op::SubsetLogProb {
                logits,
                count_dims,
                draws,
            } => {
                let c = val(*logits).cols();
                let lv = val(*logits).data();
                if let Some(gl) = acc(nodes, grads, *logits) {
                    for (r, d) in draws.iter().enumerate() {
                        let Some(d) = d else { continue };
                        subset_log_prob_grad(
                            &lv[r * c..(r + 1) * c],
                            *count_dims,
                            d,
                            g[r],
                            &mut gl[r * c..(r + 1) * c],
                        );
                    }
                }
            }
        }
    }

    /// Adds gradients of every parameter leaf into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                if store.owns(*id) {
                    add_into(store.grad_mut(*id), g);
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn subset_log_prob_grad(row: &[f64], count_dims: usize, d: &SubsetDraw, g: f64, out: &mut [f64]) {
    let (cl, il) = row.split_at(count_dims);
    let lse = log_sum_exp(cl.iter().copied());
    for j in 0..count_dims {
        let onehot = if j + 1 == d.count { 1.0 } else { 0.0 };
        out[j] += g * (onehot - (cl[j] - lse).exp());
    }
    let mut removed = vec![false; il.len()];
    for &idx in &d.order {
        let lse = log_sum_exp(
            il.iter()
                .zip(&removed)
                .filter(|(_, r)| !**r)
                .map(|(x, _)| *x),
        );
        for j in 0..il.len() {
            if removed[j] {
                continue;
            }
            let onehot = if j == idx { 1.0 } else { 0.0 };
            out[count_dims + j] += g * (onehot - (il[j] - lse).exp());
        }
        removed[idx] = true;
    }
}
