//! Reverse-mode autodiff over a linear operation tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse and accumulates gradients into per-node buffers. The op
//! set is exactly what the attention classifier and its regularizer need:
//! no broadcasting beyond a row-vector bias add, no N-D tensors.

use crate::error::{Error, Result};
use crate::tensor::{matmul_values, softmax_row, Tensor2D};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddRowVec { a: NodeId, v: NodeId },
    SoftmaxRows { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Abs { a: NodeId },
    Square { a: NodeId },
    Ln { a: NodeId },
    GatherRows { table: NodeId, indices: Vec<usize> },
    GatherCols { a: NodeId, indices: Vec<usize> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Norm2 { a: NodeId },
    SelectElem { a: NodeId, row: usize, col: usize },
}

struct Node {
    value: Tensor2D,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records ops in order; backward visits each recorded op exactly once,
/// in reverse order of recording.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D, op: Op, requires_grad: bool) -> NodeId {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Differentiable leaf (model parameter or any input whose gradient is
    /// wanted).
    pub fn param(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf. Gradients are never accumulated into it.
    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id].value
    }

    /// Gradient buffer as filled by the most recent backward pass.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].value.rows(), self.nodes[id].value.cols())
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_values(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transposed();
        let rg = self.requires(a);
        self.push(value, Op::Transpose { a }, rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc {
            return Err(Error::Shape {
                op,
                lhs_rows: ar,
                lhs_cols: ac,
                rhs_rows: br,
                rhs_cols: bc,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor2D::new(r, c, data)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor2D::new(r, c, data)?, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor2D::new(r, c, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let rg = self.requires(a);
        self.push(
            Tensor2D::new(r, c, data).expect("same shape"),
            Op::Scale { a, factor },
            rg,
        )
    }

    /// Adds a 1xC row vector to every row of `a`.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (vr, vc) = self.shape(v);
        if vr != 1 || vc != ac {
            return Err(Error::Shape {
                op: "add_row_vec",
                lhs_rows: ar,
                lhs_cols: ac,
                rhs_rows: vr,
                rhs_cols: vc,
            });
        }
        let mut out = self.value(a).clone();
        let vrow: Vec<f64> = self.value(v).data().to_vec();
        for r in 0..ar {
            for (o, vv) in out.row_mut(r).iter_mut().zip(&vrow) {
                *o += vv;
            }
        }
        let rg = self.requires(a) || self.requires(v);
        Ok(self.push(out, Op::AddRowVec { a, v }, rg))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax_row(src.row(i)));
        }
        let rg = self.requires(a);
        self.push(
            Tensor2D::new(r, c, data).expect("same shape"),
            Op::SoftmaxRows { a },
            rg,
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), |id| Op::Tanh { a: id })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), |id| Op::Relu { a: id })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, |id| Op::Abs { a: id })
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, |id| Op::Square { a: id })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, |id| Op::Ln { a: id })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: impl Fn(NodeId) -> Op) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.requires(a);
        self.push(Tensor2D::new(r, c, data).expect("same shape"), op(a), rg)
    }

    /// Selects rows of `table` by index (embedding lookup). Backward
    /// scatter-adds into the table gradient.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let src = self.value(table);
        let cols = src.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= src.rows() {
                return Err(Error::Data(format!(
                    "row index {} out of range for {}x{} table",
                    i,
                    src.rows(),
                    cols
                )));
            }
            data.extend_from_slice(src.row(i));
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor2D::new(indices.len(), cols, data)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Selects columns of `a` by index, preserving order.
    pub fn gather_cols(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(r * indices.len());
        for i in 0..r {
            let row = src.row(i);
            for &j in indices {
                if j >= c {
                    return Err(Error::Data(format!(
                        "column index {} out of range for {}x{}",
                        j, r, c
                    )));
                }
                data.push(row[j]);
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor2D::new(r, indices.len(), data)?,
            Op::GatherCols {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(a);
        if start + len > src.rows() {
            return Err(Error::Data(format!(
                "row slice {}..{} out of range for {} rows",
                start,
                start + len,
                src.rows()
            )));
        }
        let cols = src.cols();
        let data = src.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.requires(a);
        Ok(self.push(Tensor2D::new(len, cols, data)?, Op::SliceRows { a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(a);
        if start + len > src.cols() {
            return Err(Error::Data(format!(
                "column slice {}..{} out of range for {} columns",
                start,
                start + len,
                src.cols()
            )));
        }
        let rows = src.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor2D::new(rows, len, data)?, Op::SliceCols { a, start }, rg))
    }

    /// Concatenates equally-tall blocks left to right.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs_rows: rows,
                        lhs_cols: self.value(parts[0]).cols(),
                        rhs_rows: t.rows(),
                        rhs_cols: t.cols(),
                    });
                }
                data.extend_from_slice(t.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor2D::new(rows, total, data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalization with learned gain/bias (each 1xC).
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = self.shape(id);
            if gr != 1 || gc != c {
                return Err(Error::Config(format!(
                    "layer norm {name} must be 1x{c}, got {gr}x{gc}"
                )));
            }
        }
        let src = self.value(x);
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let denom = (var + eps).sqrt();
            for j in 0..c {
                data.push((row[j] - mean) / denom * g[j] + b[j]);
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Tensor2D::new(r, c, data)?,
            Op::LayerNormRows { x, gain, bias, eps },
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor2D::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor2D::scalar(total / n), Op::Mean { a }, rg)
    }

    /// Euclidean norm of all entries, as a scalar node.
    pub fn norm2(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.requires(a);
        self.push(Tensor2D::scalar(total.sqrt()), Op::Norm2 { a }, rg)
    }

    pub fn select_elem(&mut self, a: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if row >= r || col >= c {
            return Err(Error::Data(format!(
                "element ({row},{col}) out of range for {r}x{c}"
            )));
        }
        let v = self.value(a).get(row, col);
        let rg = self.requires(a);
        Ok(self.push(Tensor2D::scalar(v), Op::SelectElem { a, row, col }, rg))
    }

    /// Elementwise sum of equally-shaped nodes (scalars included).
    pub fn sum_nodes(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let mut it = terms.iter();
        let first = *it
            .next()
            .ok_or_else(|| Error::Contract("sum_nodes of zero terms".into()))?;
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Backward from a single scalar node seeded with gradient 1.
    pub fn backward(&mut self, loss: NodeId, retain: bool) -> Result<()> {
        self.backward_seeded(&[(loss, 1.0)], retain)
    }

    /// Backward from several scalar seeds at once. Each seed must be a 1x1
    /// node. With `retain` the tape can be replayed again; without it a
    /// second call is a contract error.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, f64)], retain: bool) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward on a tape already consumed without retain".into(),
            ));
        }
        if seeds.is_empty() {
            return Err(Error::Contract("backward with no seed nodes".into()));
        }
        for &(id, _) in seeds {
            if !self.value(id).is_scalar() {
                let (r, c) = self.shape(id);
                return Err(Error::Contract(format!(
                    "backward seeded at non-scalar node of shape {r}x{c}"
                )));
            }
        }
        if !retain {
            self.consumed = true;
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        for &(id, g) in seeds {
            self.nodes[id].grad[0] += g;
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.step_backward(idx);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                // dA += dC * B^T ; dB += A^T * dC
                let d_out = self.grad_tensor(idx);
                if self.requires(a) {
                    let bt = self.nodes[b].value.transposed();
                    let da = matmul_values(&d_out, &bt).expect("shapes fixed at record time");
                    self.accumulate(a, da.data());
                }
                if self.requires(b) {
                    let at = self.nodes[a].value.transposed();
                    let db = matmul_values(&at, &d_out).expect("shapes fixed at record time");
                    self.accumulate(b, db.data());
                }
            }
            Op::Transpose { a } => {
                if self.requires(a) {
                    let da = self.grad_tensor(idx).transposed();
                    self.accumulate(a, da.data());
                }
            }
            Op::Add { a, b } => {
                let d = self.nodes[idx].grad.clone();
                if self.requires(a) {
                    self.accumulate(a, &d);
                }
                if self.requires(b) {
                    self.accumulate(b, &d);
                }
            }
            Op::Sub { a, b } => {
                let d = self.nodes[idx].grad.clone();
                if self.requires(a) {
                    self.accumulate(a, &d);
                }
                if self.requires(b) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                let d = self.nodes[idx].grad.clone();
                if self.requires(a) {
                    let da: Vec<f64> = d
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f64> = d
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, factor } => {
                if self.requires(a) {
                    let da: Vec<f64> = self.nodes[idx].grad.iter().map(|g| g * factor).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::AddRowVec { a, v } => {
                let d = self.nodes[idx].grad.clone();
                if self.requires(a) {
                    self.accumulate(a, &d);
                }
                if self.requires(v) {
                    let cols = self.nodes[v].value.cols();
                    let mut dv = vec![0.0; cols];
                    for chunk in d.chunks(cols) {
                        for (acc, g) in dv.iter_mut().zip(chunk) {
                            *acc += g;
                        }
                    }
                    self.accumulate(v, &dv);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.requires(a) {
                    let y = self.nodes[idx].value.clone();
                    let d = &self.nodes[idx].grad;
                    let cols = y.cols();
                    let mut da = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = &d[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(dr).map(|(yv, dv)| yv * dv).sum();
                        for j in 0..cols {
                            da[r * cols + j] = yr[j] * (dr[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::Tanh { a } => {
                if self.requires(a) {
                    let da: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(self.nodes[idx].value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Relu { a } => {
                if self.requires(a) {
                    let da: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Abs { a } => {
                if self.requires(a) {
                    let da: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(g, x)| g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Square { a } => {
                if self.requires(a) {
                    let da: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(g, x)| g * 2.0 * x)
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Ln { a } => {
                if self.requires(a) {
                    let da: Vec<f64> = self.nodes[idx]
                        .grad
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(g, x)| g / x)
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::GatherRows { table, indices } => {
                if self.requires(table) {
                    let cols = self.nodes[table].value.cols();
                    let mut dt = vec![0.0; self.nodes[table].value.len()];
                    let d = &self.nodes[idx].grad;
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dt[i * cols + j] += d[r * cols + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
            Op::GatherCols { a, indices } => {
                if self.requires(a) {
                    let (rows, cols) = self.shape(a);
                    let k = indices.len();
                    let mut da = vec![0.0; rows * cols];
                    let d = &self.nodes[idx].grad;
                    for r in 0..rows {
                        for (out_j, &src_j) in indices.iter().enumerate() {
                            da[r * cols + src_j] += d[r * k + out_j];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::SliceRows { a, start } => {
                if self.requires(a) {
                    let (_, cols) = self.shape(a);
                    let mut da = vec![0.0; self.nodes[a].value.len()];
                    let d = &self.nodes[idx].grad;
                    da[start * cols..start * cols + d.len()].copy_from_slice(d);
                    self.accumulate(a, &da);
                }
            }
            Op::SliceCols { a, start } => {
                if self.requires(a) {
                    let (rows, cols) = self.shape(a);
                    let len = self.nodes[idx].value.cols();
                    let mut da = vec![0.0; rows * cols];
                    let d = &self.nodes[idx].grad;
                    for r in 0..rows {
                        for j in 0..len {
                            da[r * cols + start + j] = d[r * len + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::ConcatCols { parts } => {
                let d = self.nodes[idx].grad.clone();
                let rows = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in &parts {
                    let w = self.nodes[p].value.cols();
                    if self.requires(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&d[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (rows, cols) = self.shape(x);
                let d = self.nodes[idx].grad.clone();
                let src = self.nodes[x].value.clone();
                let g = self.nodes[gain].value.data().to_vec();
                let n = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = src.row(r);
                    let dr = &d[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let denom = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / denom).collect();
                    // dL/dxhat_j = gain_j * dy_j
                    let gd: Vec<f64> = g.iter().zip(dr).map(|(gv, dv)| gv * dv).collect();
                    let gd_mean = gd.iter().sum::<f64>() / n;
                    let gd_xhat_mean =
                        gd.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..cols {
                        dx[r * cols + j] = (gd[j] - gd_mean - xhat[j] * gd_xhat_mean) / denom;
                        dgain[j] += dr[j] * xhat[j];
                        dbias[j] += dr[j];
                    }
                }
                if self.requires(x) {
                    self.accumulate(x, &dx);
                }
                if self.requires(gain) {
                    self.accumulate(gain, &dgain);
                }
                if self.requires(bias) {
                    self.accumulate(bias, &dbias);
                }
            }
            Op::Sum { a } => {
                if self.requires(a) {
                    let g = self.nodes[idx].grad[0];
                    let da = vec![g; self.nodes[a].value.len()];
                    self.accumulate(a, &da);
                }
            }
            Op::Mean { a } => {
                if self.requires(a) {
                    let n = self.nodes[a].value.len();
                    let g = self.nodes[idx].grad[0] / n as f64;
                    let da = vec![g; n];
                    self.accumulate(a, &da);
                }
            }
            Op::Norm2 { a } => {
                if self.requires(a) {
                    let norm = self.nodes[idx].value.get(0, 0);
                    let g = self.nodes[idx].grad[0];
                    let da: Vec<f64> = if norm == 0.0 {
                        vec![0.0; self.nodes[a].value.len()]
                    } else {
                        self.nodes[a]
                            .value
                            .data()
                            .iter()
                            .map(|v| g * v / norm)
                            .collect()
                    };
                    self.accumulate(a, &da);
                }
            }
            Op::SelectElem { a, row, col } => {
                if self.requires(a) {
                    let cols = self.nodes[a].value.cols();
                    let mut da = vec![0.0; self.nodes[a].value.len()];
                    da[row * cols + col] = self.nodes[idx].grad[0];
                    self.accumulate(a, &da);
                }
            }
        }
    }

    fn grad_tensor(&self, idx: usize) -> Tensor2D {
        let (r, c) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
        Tensor2D::new(r, c, self.nodes[idx].grad.clone()).expect("grad buffer matches value")
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        debug_assert_eq!(self.nodes[id].grad.len(), delta.len());
        for (g, d) in self.nodes[id].grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(tape: &mut Tape, v: f64) -> NodeId {
        tape.param(Tensor2D::scalar(v))
    }

    #[test]
    fn matmul_backward_hand_values() {
        // c = a*b at a=2, b=3, dc=1 -> da=3, db=2
        let mut tape = Tape::new();
        let a = scalar_param(&mut tape, 2.0);
        let b = scalar_param(&mut tape, 3.0);
        let c = tape.matmul(a, b).unwrap();
        tape.backward(c, false).unwrap();
        assert_eq!(tape.grad(a), &[3.0]);
        assert_eq!(tape.grad(b), &[2.0]);
    }

    #[test]
    fn squared_error_gradient_hand_calculus() {
        // loss = (w*x - y)^2 at w=1, x=2, y=0 -> dw = 2*(wx-y)*x = 8
        let mut tape = Tape::new();
        let w = scalar_param(&mut tape, 1.0);
        let x = tape.constant(Tensor2D::scalar(2.0));
        let y = tape.constant(Tensor2D::scalar(0.0));
        let wx = tape.mul(w, x).unwrap();
        let resid = tape.sub(wx, y).unwrap();
        let loss = tape.square(resid);
        tape.backward(loss, false).unwrap();
        assert!((tape.grad(w)[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor2D::row_vector(vec![0.3, -1.0, 2.5]));
        let loss = tape.sum(p);
        tape.backward(loss, false).unwrap();
        assert_eq!(tape.grad(p), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_matches_reference_values() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2D::row_vector(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax_rows(x);
        let out = tape.value(y).data();
        let expected = [0.0900, 0.2447, 0.6652];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-4, "got {o}, expected {e}");
        }
    }

    #[test]
    fn backward_on_non_scalar_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2D::row_vector(vec![1.0, 2.0]));
        let err = tape.backward(x, false).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn consumed_tape_rejects_second_backward() {
        let mut tape = Tape::new();
        let x = scalar_param(&mut tape, 1.5);
        let loss = tape.square(x);
        tape.backward(loss, false).unwrap();
        let err = tape.backward(loss, false).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn retained_backward_replays_identically() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2D::row_vector(vec![0.5, -0.25, 1.5]));
        let t = tape.tanh(x);
        let s = tape.square(t);
        let loss = tape.sum(s);
        tape.backward(loss, true).unwrap();
        let first: Vec<f64> = tape.grad(x).to_vec();
        tape.backward(loss, true).unwrap();
        let second: Vec<f64> = tape.grad(x).to_vec();
        assert_eq!(first, second);
        // and a final non-retained pass still works
        tape.backward(loss, false).unwrap();
        assert_eq!(tape.grad(x), first.as_slice());
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let mut tape = Tape::new();
        let table =
            tape.param(Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let picked = tape.gather_rows(table, &[0, 0, 1]).unwrap();
        let loss = tape.sum(picked);
        tape.backward(loss, false).unwrap();
        assert_eq!(tape.grad(table), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor2D::zeros(2, 2));
        assert!(matches!(
            tape.gather_rows(table, &[2]).unwrap_err(),
            Error::Data(_)
        ));
    }
}
