use super::{numel, DiffTensor, Node, Op, Tape};
use crate::error::{Error, Result};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn source_indices(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if out == src {
        return (0..n).collect();
    }
    if numel(src) == 1 {
        return vec![0; n];
    }
    let rank = out.len();
    let mut padded = vec![1; rank - src.len()];
    padded.extend_from_slice(src);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    res
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, numel(shape) / rows.max(1))
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (numel(shape) / cols.max(1), cols)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl<'t> DiffTensor<'t> {
    fn same_tape(&self, other: &DiffTensor<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> DiffTensor<'t> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect(), n.tracked)
        };
        self.tape.push(shape, value, tracked, op)
    }

    fn binary(
        &self,
        other: &DiffTensor<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<DiffTensor<'t>> {
        self.same_tape(other);
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
                op: name,
                left: a.shape.clone(),
                right: b.shape.clone(),
            })?;
            let value = if a.shape == b.shape {
                a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let ia = source_indices(&shape, &a.shape);
                let ib = source_indices(&shape, &b.shape);
                ia.iter()
                    .zip(&ib)
                    .map(|(&i, &j)| f(a.value[i], b.value[j]))
                    .collect()
            };
            (shape, value, a.tracked || b.tracked)
        };
        Ok(self.tape.push(shape, value, tracked, op))
    }

    pub fn add(&self, other: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        if let Some(index) = other.values().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        self.binary(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> DiffTensor<'t> {
        self.unary(|x| c * x, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> DiffTensor<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> DiffTensor<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> DiffTensor<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<DiffTensor<'t>> {
        self.check_positive("log")?;
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn sqrt(&self) -> Result<DiffTensor<'t>> {
        self.check_positive("sqrt")?;
        Ok(self.unary(f64::sqrt, Op::Sqrt(self.id)))
    }

    pub fn tanh(&self) -> DiffTensor<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> DiffTensor<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> DiffTensor<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    /// x * sigmoid(x).
    pub fn swish(&self) -> Result<DiffTensor<'t>> {
        self.mul(&self.sigmoid())
    }

    fn check_positive(&self, op: &'static str) -> Result<()> {
        if let Some((index, &value)) = self.values().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(Error::Domain { op, index, value });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        self.same_tape(other);
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (vec![m, n], matmul_raw(&a.value, &b.value, m, k, n), a.tracked || b.tracked)
        };
        Ok(self.tape.push(shape, value, tracked, Op::MatMul(self.id, other.id)))
    }

    /// Transpose of a 2-axis tensor.
    pub fn t(&self) -> Result<DiffTensor<'t>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::InvalidShape {
                    op: "transpose",
                    shape: a.shape.clone(),
                });
            }
            let (m, n) = (a.shape[0], a.shape[1]);
            (vec![n, m], transpose_raw(&a.value, m, n), a.tracked)
        };
        Ok(self.tape.push(shape, value, tracked, Op::Transpose(self.id)))
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<DiffTensor<'t>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return Err(Error::InvalidShape {
                    op: "sum_axis",
                    shape: a.shape.clone(),
                });
            }
            let mut out_shape = a.shape.clone();
            out_shape[axis] = 1;
            let outer: usize = a.shape[..axis].iter().product();
            let len = a.shape[axis];
            let inner: usize = a.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += a.value[base + i];
                    }
                }
            }
            (out_shape, out, a.tracked)
        };
        Ok(self.tape.push(shape, value, tracked, Op::SumAxis(self.id)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<DiffTensor<'t>> {
        let len = *self.shape().get(axis).ok_or_else(|| Error::InvalidShape {
            op: "mean_axis",
            shape: self.shape(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Sum of all elements as a shape-[1] tensor.
    pub fn sum(&self) -> DiffTensor<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.value.iter().sum(), a.tracked)
        };
        self.tape.push(vec![1], vec![value], tracked, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> DiffTensor<'t> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    fn last_axis_map(&self, log: bool) -> DiffTensor<'t> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let (rows, cols) = last_axis(&a.shape);
            let mut out = vec![0.0; a.value.len()];
            for r in 0..rows {
                let x = &a.value[r * cols..(r + 1) * cols];
                let y = &mut out[r * cols..(r + 1) * cols];
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
                if log {
                    let lse = m + s.ln();
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = v - lse;
                    }
                } else {
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = (v - m).exp() / s;
                    }
                }
            }
            (a.shape.clone(), out, a.tracked)
        };
        let op = if log {
            Op::LogSoftmax(self.id)
        } else {
            Op::Softmax(self.id)
        };
        self.tape.push(shape, value, tracked, op)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> DiffTensor<'t> {
        self.last_axis_map(false)
    }

    /// Log-softmax over the last axis, computed with a max shift.
    pub fn log_softmax(&self) -> DiffTensor<'t> {
        self.last_axis_map(true)
    }

    /// Replaces elements where `mask` is true with `value`.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<DiffTensor<'t>> {
        let (shape, out, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if mask.len() != a.value.len() {
                return Err(Error::ShapeMismatch {
                    op: "masked_fill",
                    left: a.shape.clone(),
                    right: vec![mask.len()],
                });
            }
            let out = a
                .value
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { value } else { x })
                .collect();
            (a.shape.clone(), out, a.tracked)
        };
        Ok(self
            .tape
            .push(shape, out, tracked, Op::MaskedFill(self.id, mask.to_vec())))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<DiffTensor<'t>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let (rows, width) = rows_of(&a.shape);
            if start >= end || end > rows {
                return Err(Error::InvalidShape {
                    op: "slice_rows",
                    shape: a.shape.clone(),
                });
            }
            let mut shape = a.shape.clone();
            shape[0] = end - start;
            (shape, a.value[start * width..end * width].to_vec(), a.tracked)
        };
        Ok(self.tape.push(shape, value, tracked, Op::SliceRows(self.id, start)))
    }

    /// Gathers rows along axis 0 (indices may repeat).
    pub fn select_rows(&self, indices: &[usize]) -> Result<DiffTensor<'t>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let (rows, width) = rows_of(&a.shape);
            if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
                return Err(Error::InvalidShape {
                    op: "select_rows",
                    shape: a.shape.clone(),
                });
            }
            let mut value = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                value.extend_from_slice(&a.value[i * width..(i + 1) * width]);
            }
            let mut shape = a.shape.clone();
            shape[0] = indices.len();
            (shape, value, a.tracked)
        };
        Ok(self
            .tape
            .push(shape, value, tracked, Op::SelectRows(self.id, indices.to_vec())))
    }

    /// Scalar whose gradient with respect to `self` is the supplied constant.
    pub(crate) fn with_fixed_grad(&self, value: f64, grad: Vec<f64>) -> DiffTensor<'t> {
        debug_assert_eq!(grad.len(), self.numel());
        let tracked = self.is_tracked();
        self.tape
            .push(vec![1], vec![value], tracked, Op::FixedGrad(self.id, grad))
    }
}

impl Tape {
    /// Concatenation along axis 0; trailing axes must agree.
    pub fn concat<'t>(&'t self, parts: &[DiffTensor<'t>]) -> Result<DiffTensor<'t>> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            shape: vec![],
        })?;
        let (shape, value, tracked) = {
            let nodes = self.nodes();
            let base = &nodes[first.id].shape;
            let mut rows = 0;
            let mut value = Vec::new();
            let mut tracked = false;
            for p in parts {
                assert!(std::ptr::eq(p.tape, self), "operands recorded on different tapes");
                let n = &nodes[p.id];
                if n.shape.len() != base.len() || n.shape[1..] != base[1..] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: base.clone(),
                        right: n.shape.clone(),
                    });
                }
                rows += n.shape[0];
                value.extend_from_slice(&n.value);
                tracked |= n.tracked;
            }
            let mut shape = base.clone();
            shape[0] = rows;
            (shape, value, tracked)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(shape, value, tracked, Op::Concat(ids)))
    }
}

/// Adds `contrib` into the gradient of `lower[id]` if that node is tracked.
fn accumulate(lower: &mut [Node], id: usize, contrib: impl FnOnce(&mut [f64], &[f64])) {
    let node = &mut lower[id];
    if !node.tracked {
        return;
    }
    let n = node.value.len();
    let grad = node.grad.get_or_insert_with(|| vec![0.0; n]);
    contrib(grad, &node.value);
}

/// Accumulates an output-shaped contribution into a possibly broadcast operand.
fn accumulate_bcast(lower: &mut [Node], id: usize, out_shape: &[usize], contrib: &[f64]) {
    if !lower[id].tracked {
        return;
    }
    let src_shape = lower[id].shape.clone();
    if src_shape == out_shape {
        accumulate(lower, id, |g, _| {
            for (gi, &c) in g.iter_mut().zip(contrib) {
                *gi += c;
            }
        });
    } else {
        let idx = source_indices(out_shape, &src_shape);
        accumulate(lower, id, |g, _| {
            for (&i, &c) in idx.iter().zip(contrib) {
                g[i] += c;
            }
        });
    }
}

fn operand_values(lower: &[Node], id: usize, out_shape: &[usize]) -> Vec<f64> {
    let n = &lower[id];
    if n.shape == out_shape {
        n.value.clone()
    } else {
        source_indices(out_shape, &n.shape)
            .into_iter()
            .map(|i| n.value[i])
            .collect()
    }
}

/// Pushes the gradient `g` of `node` into its operands, all of which live in `lower`.
pub(super) fn propagate(node: &Node, g: &[f64], lower: &mut [Node]) {
    let y = &node.value;
    let shape = &node.shape;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accumulate_bcast(lower, a, shape, g);
            accumulate_bcast(lower, b, shape, g);
        }
        &Op::Sub(a, b) => {
            accumulate_bcast(lower, a, shape, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate_bcast(lower, b, shape, &neg);
        }
        &Op::Mul(a, b) => {
            let av = operand_values(lower, a, shape);
            let bv = operand_values(lower, b, shape);
            if lower[a].tracked {
                let c: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
                accumulate_bcast(lower, a, shape, &c);
            }
            if lower[b].tracked {
                let c: Vec<f64> = g.iter().zip(&av).map(|(g, a)| g * a).collect();
                accumulate_bcast(lower, b, shape, &c);
            }
        }
        &Op::Div(a, b) => {
            let bv = operand_values(lower, b, shape);
            if lower[a].tracked {
                let c: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g / b).collect();
                accumulate_bcast(lower, a, shape, &c);
            }
            if lower[b].tracked {
                // d(a/b)/db = -y/b
                let c: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .zip(&bv)
                    .map(|((g, y), b)| -g * y / b)
                    .collect();
                accumulate_bcast(lower, b, shape, &c);
            }
        }
        &Op::Scale(a, c) => accumulate(lower, a, |ga, _| {
            for (gi, &gv) in ga.iter_mut().zip(g) {
                *gi += c * gv;
            }
        }),
        &Op::AddScalar(a) => accumulate(lower, a, |ga, _| {
            for (gi, &gv) in ga.iter_mut().zip(g) {
                *gi += gv;
            }
        }),
        &Op::MatMul(a, b) => {
            let (m, k) = (lower[a].shape[0], lower[a].shape[1]);
            let n = lower[b].shape[1];
            if lower[a].tracked {
                let bt = transpose_raw(&lower[b].value, k, n);
                let c = matmul_raw(g, &bt, m, n, k);
                accumulate(lower, a, |ga, _| {
                    for (gi, ci) in ga.iter_mut().zip(c) {
                        *gi += ci;
                    }
                });
            }
            if lower[b].tracked {
                let at = transpose_raw(&lower[a].value, m, k);
                let c = matmul_raw(&at, g, k, m, n);
                accumulate(lower, b, |gb, _| {
                    for (gi, ci) in gb.iter_mut().zip(c) {
                        *gi += ci;
                    }
                });
            }
        }
        &Op::Transpose(a) => {
            let (m, n) = (shape[0], shape[1]);
            let gt = transpose_raw(g, m, n);
            accumulate(lower, a, |ga, _| {
                for (gi, ci) in ga.iter_mut().zip(gt) {
                    *gi += ci;
                }
            });
        }
        &Op::Exp(a) => accumulate(lower, a, |ga, _| {
            for ((gi, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                *gi += gv * yv;
            }
        }),
        &Op::Log(a) => accumulate(lower, a, |ga, x| {
            for ((gi, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                *gi += gv / xv;
            }
        }),
        &Op::Sqrt(a) => accumulate(lower, a, |ga, _| {
            for ((gi, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                *gi += gv * 0.5 / yv;
            }
        }),
        &Op::Tanh(a) => accumulate(lower, a, |ga, _| {
            for ((gi, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                *gi += gv * (1.0 - yv * yv);
            }
        }),
        &Op::Relu(a) => accumulate(lower, a, |ga, x| {
            for ((gi, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                if xv > 0.0 {
                    *gi += gv;
                }
            }
        }),
        &Op::Sigmoid(a) => accumulate(lower, a, |ga, _| {
            for ((gi, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                *gi += gv * yv * (1.0 - yv);
            }
        }),
        &Op::SumAxis(a) => {
            let idx = source_indices(&lower[a].shape, shape);
            accumulate(lower, a, |ga, _| {
                for (gi, &i) in ga.iter_mut().zip(&idx) {
                    *gi += g[i];
                }
            });
        }
        &Op::SumAll(a) => accumulate(lower, a, |ga, _| {
            for gi in ga.iter_mut() {
                *gi += g[0];
            }
        }),
        &Op::Softmax(a) => {
            let (rows, cols) = last_axis(shape);
            accumulate(lower, a, |ga, _| {
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(g, y)| g * y).sum();
                    for j in s {
                        ga[j] += y[j] * (g[j] - dot);
                    }
                }
            });
        }
        &Op::LogSoftmax(a) => {
            let (rows, cols) = last_axis(shape);
            accumulate(lower, a, |ga, _| {
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[s.clone()].iter().sum();
                    for j in s {
                        ga[j] += g[j] - y[j].exp() * gsum;
                    }
                }
            });
        }
        Op::MaskedFill(a, mask) => accumulate(lower, *a, |ga, _| {
            for ((gi, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                if !m {
                    *gi += gv;
                }
            }
        }),
        Op::Concat(ids) => {
            let mut offset = 0;
            for &id in ids {
                let len = lower[id].value.len();
                let part = &g[offset..offset + len];
                accumulate(lower, id, |gi, _| {
                    for (a, &b) in gi.iter_mut().zip(part) {
                        *a += b;
                    }
                });
                offset += len;
            }
        }
        &Op::SliceRows(a, start) => {
            let (_, width) = rows_of(shape);
            accumulate(lower, a, |ga, _| {
                let dst = &mut ga[start * width..start * width + g.len()];
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            });
        }
        Op::SelectRows(a, indices) => {
            let (_, width) = rows_of(shape);
            accumulate(lower, *a, |ga, _| {
                for (r, &i) in indices.iter().enumerate() {
                    for w in 0..width {
                        ga[i * width + w] += g[r * width + w];
                    }
                }
            });
        }
        Op::FixedGrad(a, jac) => accumulate(lower, *a, |ga, _| {
            for (gi, &j) in ga.iter_mut().zip(jac) {
                *gi += g[0] * j;
            }
        }),
    }
}
