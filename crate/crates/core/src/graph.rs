//! Tape-based reverse-mode autodiff over 2-D tensors.
//!
//! A `Graph` is an arena of nodes; each op validates shapes, computes its
//! value eagerly, checks the result is finite, and records enough to run the
//! backward pass. `backward` walks the tape once in reverse order and may be
//! called a single time per graph.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside the RMS normalizer: rms(x) = sqrt(mean(x^2) + RMSNORM_EPS).
pub const RMSNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    MulElem(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Silu(Var),
    RmsNormRows { x: Var, gain: Var },
    SoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    SumAll(Var),
    CrossEntropyMean { logits: Var, targets: Vec<usize> },
    FreezeRows { new: Var, old: Var, frozen: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_run: bool,
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("zeros are finite")
}

/// C += A (m x k) * B (k x n), row-major.
fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A (m x k) * B^T where B is (n x k), row-major.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, cv) in crow.iter_mut().enumerate() {
            let brow = &b[l * k..(l + 1) * k];
            let mut acc = 0.0;
            for j in 0..k {
                acc += arow[j] * brow[j];
            }
            *cv += acc;
        }
    }
}

/// C += A^T * B where A is (m x k) and B is (m x n); C is (k x n).
fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let crow = &mut c[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Gradient of the last `backward` call with respect to `v`, if any was
    /// accumulated there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires = t.requires_grad();
        self.push_unchecked(t, Op::Leaf, requires)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// x (m x n) + bias (1 x n), broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (bm, bn) = self.dims(bias);
        if bm != 1 || bn != n {
            return Err(Error::shape(
                "add_bias",
                format!("x is {m}x{n}, bias is {bm}x{bn}"),
            ));
        }
        let bdata = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(&bdata) {
                *v += b;
            }
        }
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(Error::shape(
                "mul_elem",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("mul_elem", value, Op::MulElem(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {m}x{k} * {k2}x{n}"),
            ));
        }
        let mut data = vec![0.0; m * n];
        mm_nn(self.value(a).data(), m, k, self.value(b).data(), n, &mut data);
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix_lenient(n, m, data)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("silu", value, Op::Silu(a), &[a])
    }

    /// Per-row RMS normalization with a learned gain:
    /// y = x / sqrt(mean(x^2) + eps) * gain.
    pub fn rmsnorm_rows(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (gm, gn) = self.dims(gain);
        if gm != 1 || gn != n {
            return Err(Error::shape(
                "rmsnorm",
                format!("x is {m}x{n}, gain is {gm}x{gn}"),
            ));
        }
        let gdata = self.value(gain).data().to_vec();
        let mut data = vec![0.0; m * n];
        for (out, row) in data.chunks_exact_mut(n).zip(self.value(x).rows_iter()) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64 + RMSNORM_EPS;
            let r = ms.sqrt();
            for j in 0..n {
                out[j] = row[j] / r * gdata[j];
            }
        }
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("rmsnorm", value, Op::RmsNormRows { x, gain }, &[x, gain])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut data = vec![0.0; m * n];
        for (out, row) in data.chunks_exact_mut(n).zip(self.value(a).rows_iter()) {
            out.copy_from_slice(&crate::vecmath::softmax(row));
        }
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("softmax", value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise softmax over a square score matrix where row i only sees
    /// columns 0..=i; masked entries come out exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m != n {
            return Err(Error::shape(
                "causal_softmax",
                format!("square matrix required, got {m}x{n}"),
            ));
        }
        let mut data = vec![0.0; m * n];
        for (i, (out, row)) in data
            .chunks_exact_mut(n)
            .zip(self.value(a).rows_iter())
            .enumerate()
        {
            let window = &row[..=i];
            let mx = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &z) in window.iter().enumerate() {
                let e = (z - mx).exp();
                out[j] = e;
                total += e;
            }
            for v in out[..=i].iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push("causal_softmax", value, Op::CausalSoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (m2, p) = self.dims(b);
        if m != m2 {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {m} vs {m2}"),
            ));
        }
        let mut data = Vec::with_capacity(m * (n + p));
        for (ra, rb) in self.value(a).rows_iter().zip(self.value(b).rows_iter()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::matrix_lenient(m, n + p, data)?;
        self.push("concat_cols", value, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("slice {start}..{} of {n} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in self.value(x).rows_iter() {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::matrix_lenient(m, len, data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start, len }, &[x])
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::InvalidInput(format!(
                "gather id {bad} out of range ({rows} rows)"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::matrix_lenient(ids.len(), n, data)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        let value = Tensor::matrix_lenient(1, 1, vec![total])?;
        self.push("sum", value, Op::SumAll(a), &[a])
    }

    /// Mean cross-entropy (nats) of row-wise logits against target indices.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m} logit rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidInput(format!(
                "target id {bad} out of range ({v} classes)"
            )));
        }
        let mut total = 0.0;
        for (row, &t) in self.value(logits).rows_iter().zip(targets) {
            total += crate::vecmath::cross_entropy_row(row, t);
        }
        let value = Tensor::matrix_lenient(1, 1, vec![total / m as f64])?;
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Row-wise select: rows marked frozen keep `old`, the rest take `new`.
    pub fn freeze_rows(&mut self, new: Var, old: Var, frozen: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(new);
        if self.dims(old) != (m, n) {
            return Err(Error::shape(
                "freeze_rows",
                format!("{:?} vs {:?}", self.dims(new), self.dims(old)),
            ));
        }
        if frozen.len() != m {
            return Err(Error::shape(
                "freeze_rows",
                format!("{m} rows vs {} flags", frozen.len()),
            ));
        }
        let mut data = Vec::with_capacity(m * n);
        for (t, f) in frozen.iter().enumerate() {
            let src = if *f { self.value(old) } else { self.value(new) };
            data.extend_from_slice(src.row(t));
        }
        let value = Tensor::matrix_lenient(m, n, data)?;
        self.push(
            "freeze_rows",
            value,
            Op::FreezeRows {
                new,
                old,
                frozen: frozen.to_vec(),
            },
            &[new, old],
        )
    }

    fn accum(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| zeros_like(&node.value));
        for (gi, ci) in g.data_mut().iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Reverse pass from a scalar loss. Visits the tape once in reverse
    /// topological order; calling it a second time on the same graph is an
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_run {
            return Err(Error::BackwardAlreadyRun);
        }
        self.backward_run = true;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = zeros_like(&self.nodes[loss.0].value);
        self.nodes[loss.0].grad = Some(seed);
        self.nodes[loss.0].grad.as_mut().unwrap().data_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(a, g.data());
                    self.accum(b, g.data());
                }
                Op::AddBias { x, bias } => {
                    self.accum(x, g.data());
                    let (_, n) = g.dims2();
                    let mut bg = vec![0.0; n];
                    for row in g.rows_iter() {
                        for (b, v) in bg.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    self.accum(bias, &bg);
                }
                Op::MulElem(a, b) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.data().iter().map(|gv| gv * c).collect();
                    self.accum(a, &da);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(a);
                    let (_, n) = self.dims(b);
                    let mut da = vec![0.0; m * k];
                    mm_nt(g.data(), m, n, self.value(b).data(), k, &mut da);
                    let mut db = vec![0.0; k * n];
                    mm_tn(self.value(a).data(), m, k, g.data(), n, &mut db);
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::Transpose(a) => {
                    let (n, m) = g.dims2();
                    let mut da = vec![0.0; m * n];
                    for i2 in 0..n {
                        for j in 0..m {
                            da[j * n + i2] = g.data()[i2 * m + j];
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Silu(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    self.accum(a, &da);
                }
                Op::RmsNormRows { x, gain } => {
                    let (m, n) = self.dims(x);
                    let gains = self.value(gain).data().to_vec();
                    let mut dx = vec![0.0; m * n];
                    let mut dgain = vec![0.0; n];
                    for (r, (grow, xrow)) in g
                        .rows_iter()
                        .zip(self.value(x).rows_iter())
                        .enumerate()
                    {
                        let ms =
                            xrow.iter().map(|v| v * v).sum::<f64>() / n as f64 + RMSNORM_EPS;
                        let rnorm = ms.sqrt();
                        let mut inner = 0.0;
                        for j in 0..n {
                            inner += grow[j] * gains[j] * xrow[j];
                        }
                        let c = inner / (n as f64 * rnorm * rnorm * rnorm);
                        let out = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] = grow[j] * gains[j] / rnorm - xrow[j] * c;
                            dgain[j] += grow[j] * xrow[j] / rnorm;
                        }
                    }
                    self.accum(x, &dx);
                    self.accum(gain, &dgain);
                }
                Op::SoftmaxRows(a) | Op::CausalSoftmaxRows(a) => {
                    let (m, n) = g.dims2();
                    let mut da = vec![0.0; m * n];
                    for (r, (grow, prow)) in g
                        .rows_iter()
                        .zip(self.nodes[i].value.rows_iter())
                        .enumerate()
                    {
                        let inner: f64 = grow.iter().zip(prow).map(|(gv, pv)| gv * pv).sum();
                        let out = &mut da[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] = prow[j] * (grow[j] - inner);
                        }
                    }
                    self.accum(a, &da);
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.dims(a);
                    let (_, nb) = self.dims(b);
                    let mut da = vec![0.0; m * na];
                    let mut db = vec![0.0; m * nb];
                    for (r, grow) in g.rows_iter().enumerate() {
                        da[r * na..(r + 1) * na].copy_from_slice(&grow[..na]);
                        db[r * nb..(r + 1) * nb].copy_from_slice(&grow[na..]);
                    }
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = self.dims(x);
                    let mut dx = vec![0.0; m * n];
                    for (r, grow) in g.rows_iter().enumerate() {
                        dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                    }
                    self.accum(x, &dx);
                }
                Op::GatherRows { table, ids } => {
                    let (rows, n) = self.dims(table);
                    let mut dt = vec![0.0; rows * n];
                    for (grow, &id) in g.rows_iter().zip(&ids) {
                        let out = &mut dt[id * n..(id + 1) * n];
                        for (o, gv) in out.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.accum(table, &dt);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let da = vec![gv; self.value(a).numel()];
                    self.accum(a, &da);
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let (m, n) = self.dims(logits);
                    let gv = g.item() / m as f64;
                    let mut dl = vec![0.0; m * n];
                    for (r, (row, &t)) in self
                        .value(logits)
                        .rows_iter()
                        .zip(&targets)
                        .enumerate()
                    {
                        let p = crate::vecmath::softmax(row);
                        let out = &mut dl[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] = gv * (p[j] - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.accum(logits, &dl);
                }
                Op::FreezeRows { new, old, frozen } => {
                    let (m, n) = g.dims2();
                    let mut dnew = vec![0.0; m * n];
                    let mut dold = vec![0.0; m * n];
                    for (t, grow) in g.rows_iter().enumerate() {
                        let dst = if frozen[t] { &mut dold } else { &mut dnew };
                        dst[t * n..(t + 1) * n].copy_from_slice(grow);
                    }
                    self.accum(new, &dnew);
                    self.accum(old, &dold);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leafv(g: &mut Graph, data: Vec<f64>, rows: usize, cols: usize, grad: bool) -> Var {
        g.leaf(
            Tensor::matrix(rows, cols, data)
                .unwrap()
                .with_requires_grad(grad),
        )
    }

    #[test]
    fn matmul_identity_and_example() {
        let mut g = Graph::new();
        let eye = leafv(&mut g, vec![1.0, 0.0, 0.0, 1.0], 2, 2, false);
        let m = leafv(&mut g, vec![1.0, 2.0, 3.0, 4.0], 2, 2, false);
        let prod = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(prod).data(), g.value(m).data());

        let a = leafv(&mut g, vec![1.0, 2.0, 3.0, 4.0], 2, 2, false);
        let b = leafv(&mut g, vec![0.0, 1.0], 2, 1, false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = leafv(&mut g, vec![0.0; 6], 2, 3, false);
        let b = leafv(&mut g, vec![0.0; 8], 2, 4, false);
        assert!(matches!(
            g.matmul(a, b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn silu_values() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![0.0, 1.0], 1, 2, false);
        let y = g.silu(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_sum() {
        let mut g = Graph::new();
        let z = leafv(&mut g, vec![0.3, -1.0, 2.2, 0.0], 1, 4, false);
        let zs = leafv(&mut g, vec![100.3, 99.0, 102.2, 100.0], 1, 4, false);
        let p = g.softmax_rows(z).unwrap();
        let ps = g.softmax_rows(zs).unwrap();
        let sum: f64 = g.value(p).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in g.value(p).data().iter().zip(g.value(ps).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let mut g = Graph::new();
        let z = leafv(&mut g, vec![5.0, 100.0, 1.0, 1.0], 2, 2, false);
        let p = g.causal_softmax_rows(z).unwrap();
        let d = g.value(p).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 0.5).abs() < 1e-15 && (d[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_is_2x() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![1.0, -2.0, 3.0], 1, 3, true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = leafv(&mut g, vec![1.0, -2.0, 3.0], 1, 3, true);
        let sq = g.mul_elem(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![1.0], 1, 1, true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardAlreadyRun)));
    }

    #[test]
    fn overflow_surfaces_as_error() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![1e308], 1, 1, false);
        let y = g.scale(x, 1e10);
        assert!(matches!(y, Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn rmsnorm_worked_row() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![3.0, 4.0], 1, 2, false);
        let gain = leafv(&mut g, vec![1.0, 1.0], 1, 2, false);
        let y = g.rmsnorm_rows(x, gain).unwrap();
        let r = (12.5_f64 + RMSNORM_EPS).sqrt();
        assert!((g.value(y).data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 4.0 / r).abs() < 1e-15);
    }
}
