//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it executes. [`Tape::backward`]
//! walks the record in exact reverse order and accumulates gradients into
//! every node that depends on a parameter leaf. A tape is built fresh for
//! each forward pass.

use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Below this product of column spreads a Pearson correlation is treated as undefined.
pub const PCC_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-registered operation: receives the output
/// gradient and the input values, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MeanRows(Var),
    NeighborMean(Var, Vec<Vec<usize>>),
    Sum(Var),
    Mse(Var, Var),
    /// Local gradients of the loss w.r.t. each input, scaled for a unit upstream gradient.
    Pcc {
        pred: Var,
        target: Var,
        d_pred: Vec<f64>,
        d_target: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// Records a trainable leaf. The tensor is copied onto the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_with(t.clone(), Op::Leaf, true)
    }

    /// Records a leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_with(t.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(Error::dim("add_row", tx.shape(), tr.shape()));
        }
        let mut out = tx.clone();
        let bias = tr.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.map(x, |v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Row-wise softmax; the row maximum is subtracted before exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row normalization to zero mean and unit variance, then `· gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.dims() != (1, n) {
                return Err(Error::dim("layer_norm", self.value(x).shape(), tp.shape()));
            }
        }
        let tx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gain, bias]))
    }

    /// Appends columns of each part, in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(m, total, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks the rows of each part, in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero parts".into()))?;
        let n = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, n, out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.cols() {
            return Err(Error::dim("slice_cols", t.shape(), &[start, end]));
        }
        let cols: Vec<usize> = (start..end).collect();
        let out = t.select_cols(&cols);
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(Error::dim("slice_rows", t.shape(), &[start, end]));
        }
        let rows: Vec<usize> = (start..end).collect();
        let out = t.select_rows(&rows);
        Ok(self.push(out, Op::SliceRows(x, start), &[x]))
    }

    /// Column-wise mean as a `1×k` row. Zero rows give a zero row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, k) = t.dims();
        let mut out = vec![0.0; k];
        for i in 0..m {
            running_mean(&mut out, t.row(i), i);
        }
        let out = Tensor::matrix(1, k, out).expect("row");
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Row `i` of the output is the mean of the rows of `x` listed in
    /// `lists[i]`; an empty list gives a zero row. Equivalent to
    /// `mean_rows(select_rows(x, lists[i]))` stacked over `i`.
    pub fn neighbor_mean(&mut self, x: Var, lists: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        let (n, k) = t.dims();
        if let Some(bad) = lists.iter().flatten().find(|&&j| j >= n) {
            return Err(Error::Contract(format!(
                "neighbor index {bad} out of range for {n} rows"
            )));
        }
        let mut out = vec![0.0; lists.len() * k];
        for (i, list) in lists.iter().enumerate() {
            let dst = &mut out[i * k..(i + 1) * k];
            for (count, &j) in list.iter().enumerate() {
                running_mean(dst, t.row(j), count);
            }
        }
        let out = Tensor::matrix(lists.len(), k, out)?;
        Ok(self.push(out, Op::NeighborMean(x, lists.to_vec()), &[x]))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1) as f64;
        let s = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target]))
    }

    /// Mean over columns of `1 − r_c`, with `r_c` the Pearson correlation
    /// between column `c` of `pred` and of `target` across rows.
    ///
    /// A column whose spreads multiply to less than [`PCC_EPS`] contributes
    /// exactly 1 and passes no gradient.
    pub fn pcc_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("pcc_loss", pred, target)?;
        let (n, g) = self.value(pred).dims();
        if n < 2 {
            return Err(Error::Contract(format!(
                "correlation loss needs at least 2 rows, got {n}"
            )));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let mut d_pred = vec![0.0; n * g];
        let mut d_target = vec![0.0; n * g];
        let mut total = 0.0;
        let inv_g = 1.0 / g as f64;
        for c in 0..g {
            let a = p.column(c);
            let b = t.column(c);
            let Some(stats) = PearsonParts::new(&a, &b) else {
                total += 1.0;
                continue;
            };
            total += 1.0 - stats.r;
            for i in 0..n {
                let (da, db) = (stats.da[i], stats.db[i]);
                d_pred[i * g + c] = -inv_g * (db / stats.norm - stats.r * da / stats.saa);
                d_target[i * g + c] = -inv_g * (da / stats.norm - stats.r * db / stats.sbb);
            }
        }
        let op = Op::Pcc {
            pred,
            target,
            d_pred,
            d_target,
        };
        Ok(self.push(Tensor::scalar(total * inv_g), op, &[pred, target]))
    }

    /// Registers an operation with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Var {
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward: Box::new(backward),
        };
        self.push(value, op, inputs)
    }

    /// Propagates gradients from a scalar loss to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradient as a tensor shaped like `v`; zeros when no gradient reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        let data = match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.value(v).len()],
        };
        Tensor::new(shape, data).expect("grad matches value shape")
    }

    /// Writes the gradient of `v` into `target.grad`.
    pub fn store_grad(&self, v: Var, target: &mut Tensor) {
        target.grad = Some(self.grad_tensor(v).into_data());
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims();
                let n = tb.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    matmul_nt_into(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    matmul_tn_into(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(v, grads) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, gi), bv) in ga.iter_mut().zip(g).zip(tb) {
                        *o += gi * bv;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((o, gi), av) in gb.iter_mut().zip(g).zip(ta) {
                        *o += gi * av;
                    }
                }
            }
            Op::AddRow(x, row) => {
                let n = out.cols();
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(gx, g, 1.0);
                }
                if let Some(gr) = self.slot(*row, grads) {
                    for chunk in g.chunks(n) {
                        axpy(gr, chunk, 1.0);
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(gx, g, *factor);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims();
                if let Some(gx) = self.slot(*x, grads) {
                    // out is r×c, x is c×r
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((o, gi), xv) in gx.iter_mut().zip(g).zip(tx) {
                        if *xv > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((y, gy), o) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gn = self.value(*gain).data();
                if let Some(gg) = self.slot(*gain, grads) {
                    for (gy, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gy[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(*bias, grads) {
                    for gy in g.chunks(n) {
                        axpy(gb, gy, 1.0);
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let nf = n as f64;
                    for (i, ((gy, h), o)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gy.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let scale = inv_std[i] / nf;
                        for j in 0..n {
                            o[j] += scale * (nf * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(p, grads) {
                        for (dst, src) in gp.chunks_mut(w.max(1)).zip(g.chunks(total.max(1))) {
                            axpy(dst, &src[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(p, grads) {
                        axpy(gp, &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let w = out.cols();
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(*x, grads) {
                    for (dst, src) in gx.chunks_mut(c.max(1)).zip(g.chunks(w.max(1))) {
                        axpy(&mut dst[*start..*start + w], src, 1.0);
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::MeanRows(x) => {
                let (m, k) = self.value(*x).dims();
                if m > 0 {
                    if let Some(gx) = self.slot(*x, grads) {
                        for dst in gx.chunks_mut(k.max(1)) {
                            axpy(dst, g, 1.0 / m as f64);
                        }
                    }
                }
            }
            Op::NeighborMean(x, lists) => {
                let k = out.cols();
                if let Some(gx) = self.slot(*x, grads) {
                    for (i, list) in lists.iter().enumerate() {
                        if list.is_empty() {
                            continue;
                        }
                        let w = 1.0 / list.len() as f64;
                        let src = &g[i * k..(i + 1) * k];
                        for &j in list {
                            axpy(&mut gx[j * k..(j + 1) * k], src, w);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let coef = 2.0 * g[0] / ta.len().max(1) as f64;
                if let Some(ga) = self.slot(*a, grads) {
                    for ((o, x), y) in ga.iter_mut().zip(ta).zip(tb) {
                        *o += coef * (x - y);
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((o, x), y) in gb.iter_mut().zip(ta).zip(tb) {
                        *o -= coef * (x - y);
                    }
                }
            }
            Op::Pcc {
                pred,
                target,
                d_pred,
                d_target,
            } => {
                if let Some(gp) = self.slot(*pred, grads) {
                    axpy(gp, d_pred, g[0]);
                }
                if let Some(gt) = self.slot(*target, grads) {
                    axpy(gt, d_target, g[0]);
                }
            }
            Op::Custom { inputs, backward } => {
                let grad_out = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let local = backward(&grad_out, &values);
                for (v, lg) in inputs.iter().zip(local) {
                    if let Some(gv) = self.slot(*v, grads) {
                        axpy(gv, lg.data(), 1.0);
                    }
                }
            }
        }
    }

    /// Accumulation buffer for `v`, allocated on first use; `None` if `v` takes no gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

/// Folds `row` into a mean over `seen` earlier rows. Averaging identical rows
/// returns that row exactly.
fn running_mean(mean: &mut [f64], row: &[f64], seen: usize) {
    let w = 1.0 / (seen + 1) as f64;
    for (m, v) in mean.iter_mut().zip(row) {
        *m += (v - *m) * w;
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Centered deviations and sums needed for a Pearson correlation and its gradient.
pub(crate) struct PearsonParts {
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub saa: f64,
    pub sbb: f64,
    pub norm: f64,
    pub r: f64,
}

impl PearsonParts {
    /// `None` when either side is (numerically) constant.
    pub fn new(a: &[f64], b: &[f64]) -> Option<Self> {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let da: Vec<f64> = a.iter().map(|v| v - ma).collect();
        let db: Vec<f64> = b.iter().map(|v| v - mb).collect();
        let saa: f64 = da.iter().map(|v| v * v).sum();
        let sbb: f64 = db.iter().map(|v| v * v).sum();
        let norm = saa.sqrt() * sbb.sqrt();
        if norm < PCC_EPS {
            return None;
        }
        let sab: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
        let r = (sab / norm).clamp(-1.0, 1.0);
        Some(Self {
            da,
            db,
            saa,
            sbb,
            norm,
            r,
        })
    }
}

/// Pearson correlation, or `None` if either input has (numerically) zero spread.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    PearsonParts::new(a, b).map(|p| p.r)
}
