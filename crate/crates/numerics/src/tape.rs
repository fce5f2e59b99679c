use std::cell::{Cell, RefCell};
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NumericsError, Result};
use crate::kernels::{self, AttentionLayout};
use crate::tensor::Tensor;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Concat { a: usize, b: usize, a_cols: usize, b_cols: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, normed: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: usize, ids: Vec<usize> },
    Dropout { a: usize, mask: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, heads: usize, layout: Arc<AttentionLayout>, probs: Vec<f64> },
    SegmentMax { a: usize, argmax: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    Sum { a: usize },
    Mean { a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations supporting one reverse pass.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        let needs_grad = self.grad_enabled;
        self.push_node(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        self.grad_enabled && ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn push(&self, value: Tensor, inputs: &[usize], op: impl FnOnce() -> Op) -> Var<'_> {
        let needs_grad = self.needs(inputs);
        let op = if needs_grad { op() } else { Op::Leaf };
        self.push_node(value, op, needs_grad)
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one sweep.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(NumericsError::ForeignVar);
        }
        if self.consumed.replace(true) {
            return Err(NumericsError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

/// Sum `g` into `dst`, folding it when `dst` is a broadcast operand.
fn accumulate_folded(dst: &mut [f64], g: &[f64], scale: f64) {
    for chunk in g.chunks(dst.len()) {
        for (d, v) in dst.iter_mut().zip(chunk) {
            *d += scale * v;
        }
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(grads, nodes, a) {
                kernels::gemm(g, nodes[b].value.data(), da, m, n, k, false, true, 1.0);
            }
            if let Some(db) = slot(grads, nodes, b) {
                kernels::gemm(nodes[a].value.data(), g, db, k, m, n, true, false, 1.0);
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                accumulate_folded(da, g, 1.0);
            }
            if let Some(db) = slot(grads, nodes, b) {
                accumulate_folded(db, g, 1.0);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(da) = slot(grads, nodes, a) {
                accumulate_folded(da, g, 1.0);
            }
            if let Some(db) = slot(grads, nodes, b) {
                accumulate_folded(db, g, -1.0);
            }
        }
        &Op::Mul { a, b } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if let Some(da) = slot(grads, nodes, a) {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * bv[i % bv.len()];
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                let p = db.len();
                for (i, (&gi, &ai)) in g.iter().zip(av).enumerate() {
                    db[i % p] += gi * ai;
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(da) = slot(grads, nodes, a) {
                accumulate_folded(da, g, factor);
            }
        }
        &Op::Concat { a, b, a_cols, b_cols } => {
            let w = a_cols + b_cols;
            if let Some(da) = slot(grads, nodes, a) {
                for (dr, gr) in da.chunks_mut(a_cols).zip(g.chunks(w)) {
                    dr.iter_mut().zip(&gr[..a_cols]).for_each(|(d, v)| *d += v);
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for (dr, gr) in db.chunks_mut(b_cols).zip(g.chunks(w)) {
                    dr.iter_mut().zip(&gr[a_cols..]).for_each(|(d, v)| *d += v);
                }
            }
        }
        &Op::Transpose { a, rows, cols } => {
            if let Some(da) = slot(grads, nodes, a) {
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                accumulate_folded(da, g, 1.0);
            }
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = node.value.data();
            if let Some(da) = slot(grads, nodes, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dotp: f64 = (0..len).map(|t| g[base + t * inner] * y[base + t * inner]).sum();
                        for t in 0..len {
                            let ix = base + t * inner;
                            da[ix] += y[ix] * (g[ix] - dotp);
                        }
                    }
                }
            }
        }
        &Op::Sigmoid { a } => {
            let y = node.value.data();
            if let Some(da) = slot(grads, nodes, a) {
                for i in 0..da.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        &Op::Relu { a } => {
            let y = node.value.data();
            if let Some(da) = slot(grads, nodes, a) {
                for i in 0..da.len() {
                    if y[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, normed, inv_std } => {
            let cols = nodes[*gain].value.len();
            let gamma = nodes[*gain].value.data();
            if let Some(dg) = slot(grads, nodes, *gain) {
                for (gr, nr) in g.chunks(cols).zip(normed.chunks(cols)) {
                    for c in 0..cols {
                        dg[c] += gr[c] * nr[c];
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                accumulate_folded(db, g, 1.0);
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for (r, (gr, nr)) in g.chunks(cols).zip(normed.chunks(cols)).enumerate() {
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gamma[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dn = dxhat.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / n;
                    let out = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        out[c] += inv_std[r] * (dxhat[c] - mean_d - nr[c] * mean_dn);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let cols = nodes[*table].value.cols();
            if let Some(dt) = slot(grads, nodes, *table) {
                for (r, &ix) in ids.iter().enumerate() {
                    let dst = &mut dt[ix * cols..(ix + 1) * cols];
                    dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..da.len() {
                    da[i] += g[i] * mask[i];
                }
            }
        }
        Op::Attention { q, k, v, heads, layout, probs } => {
            let d = nodes[*q].value.cols();
            let mut gq = vec![0.0; nodes[*q].value.len()];
            let mut gk = vec![0.0; nodes[*k].value.len()];
            let mut gv = vec![0.0; nodes[*v].value.len()];
            kernels::attention_backward(
                nodes[*q].value.data(),
                nodes[*k].value.data(),
                nodes[*v].value.data(),
                d,
                *heads,
                layout,
                probs,
                g,
                &mut gq,
                &mut gk,
                &mut gv,
            );
            for (id, part) in [(*q, gq), (*k, gk), (*v, gv)] {
                if let Some(dst) = slot(grads, nodes, id) {
                    accumulate_folded(dst, &part, 1.0);
                }
            }
        }
        Op::SegmentMax { a, argmax } => {
            let cols = node.value.cols();
            if let Some(da) = slot(grads, nodes, *a) {
                for (i, &row) in argmax.iter().enumerate() {
                    da[row * cols + i % cols] += g[i];
                }
            }
        }
        Op::CrossEntropy { logits, targets, mask, probs, count } => {
            let v = nodes[*logits].value.cols();
            if let Some(dl) = slot(grads, nodes, *logits) {
                let s = g[0] / *count as f64;
                for (r, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
                    if !keep {
                        continue;
                    }
                    let row = &mut dl[r * v..(r + 1) * v];
                    let p = &probs[r * v..(r + 1) * v];
                    for c in 0..v {
                        row[c] += s * p[c];
                    }
                    row[t] -= s;
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(da) = slot(grads, nodes, a) {
                let s = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(t) => t.clone(),
            None => {
                let value = var.value();
                Tensor::zeros(value.shape()).expect("shape")
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    let b_trim: &[usize] = if b.len() == 2 && b[0] == 1 { &b[1..] } else { b };
    b_trim.len() <= a.len() && a.ends_with(b_trim)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(NumericsError::ForeignVar)
        }
    }

    /// `(.., k) · (k, n)`; leading axes of `self` are treated as rows.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let a = self.value();
        let b = rhs.value();
        let k = a.cols();
        if b.shape().len() != 2 || b.shape()[0] != k {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, n) = (a.rows(), b.shape()[1]);
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.tape.push(value, &[self.id, rhs.id], || Op::MatMul { a: self.id, b: rhs.id, m, k, n }))
    }

    fn binary(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Var<'t>)> {
        self.same_tape(&rhs)?;
        let a = self.value();
        let b = rhs.value();
        if !broadcastable(a.shape(), b.shape()) {
            return Err(NumericsError::ShapeMismatch {
                op: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let bv = b.data();
        let p = bv.len();
        let out: Vec<f64> = a.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % p])).collect();
        Ok((Tensor::new(a.shape(), out)?, rhs))
    }

    /// Elementwise sum; `rhs` may be a trailing-axes broadcast (e.g. a bias row).
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (value, rhs) = self.binary(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.push(value, &[self.id, rhs.id], || Op::Add { a: self.id, b: rhs.id }))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (value, rhs) = self.binary(rhs, "sub", |x, y| x - y)?;
        Ok(self.tape.push(value, &[self.id, rhs.id], || Op::Sub { a: self.id, b: rhs.id }))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (value, rhs) = self.binary(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.push(value, &[self.id, rhs.id], || Op::Mul { a: self.id, b: rhs.id }))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let a = self.value();
        let value = Tensor::new(a.shape(), a.data().iter().map(|x| x * factor).collect()).expect("shape");
        self.tape.push(value, &[self.id], || Op::Scale { a: self.id, factor })
    }

    /// Concatenation along the last axis.
    pub fn concat(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(NumericsError::ShapeMismatch {
                op: "concat",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (a_cols, b_cols) = (a.cols(), b.cols());
        let mut out = Vec::with_capacity(a.len() + b.len());
        for (ra, rb) in a.data().chunks(a_cols).zip(b.data().chunks(b_cols)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = a_cols + b_cols;
        let value = Tensor::new(&shape, out)?;
        Ok(self.tape.push(value, &[self.id, rhs.id], || Op::Concat {
            a: self.id,
            b: rhs.id,
            a_cols,
            b_cols,
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                shape: a.shape().to_vec(),
                reason: "transpose needs a matrix".into(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let src = a.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(&[cols, rows], out)?;
        Ok(self.tape.push(value, &[self.id], || Op::Transpose { a: self.id, rows, cols }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape)?;
        Ok(self.tape.push(value, &[self.id], || Op::Reshape { a: self.id }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = a.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for t in 0..len {
                    buf[t] = out[base + t * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for t in 0..len {
                    out[base + t * inner] = buf[t];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.tape.push(value, &[self.id], || Op::Softmax {
            a: self.id,
            outer,
            len,
            inner,
        }))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(kernels::sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |a| Op::Relu { a })
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var<'t> {
        let a = self.value();
        let value = Tensor::new(a.shape(), a.data().iter().map(|&x| f(x)).collect()).expect("shape");
        self.tape.push(value, &[self.id], || op(self.id))
    }

    /// Row-wise layer normalization over the last axis (ε = 1e-5).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let cols = x.cols();
        if gv.len() != cols || bv.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; x.len()];
        let mut normed = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.rows());
        for ((xr, or), nr) in x.data().chunks(cols).zip(out.chunks_mut(cols)).zip(normed.chunks_mut(cols)) {
            inv_std.push(kernels::layer_norm_row(xr, gv.data(), bv.data(), or, nr));
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.tape.push(value, &[self.id, gain.id, bias.id], || Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            normed,
            inv_std,
        }))
    }

    /// Row lookup (`self` is the table); output shape `(ids.len(), cols)`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let (rows, cols) = (table.rows(), table.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(table.row(i));
        }
        let value = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.tape.push(value, &[self.id], || Op::Gather {
            table: self.id,
            ids: ids.to_vec(),
        }))
    }

    /// Inverted dropout; identity when `train` is false or `p` is zero.
    pub fn dropout(self, p: f64, seed: u64, train: bool) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                reason: format!("p = {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(self);
        }
        let a = self.value();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(a.shape(), out)?;
        Ok(self.tape.push(value, &[self.id], || Op::Dropout { a: self.id, mask }))
    }

    /// Column-wise maximum over each row segment; output `(segments, cols)`.
    pub fn segment_max(self, segments: &[Range<usize>]) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = Vec::with_capacity(segments.len() * cols);
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for s in segments {
            if s.is_empty() || s.end > rows {
                return Err(NumericsError::InvalidArgument {
                    op: "segment_max",
                    reason: format!("segment {s:?} invalid for {rows} rows"),
                });
            }
            for c in 0..cols {
                let mut best = s.start;
                for r in s.clone() {
                    if a.data()[r * cols + c] > a.data()[best * cols + c] {
                        best = r;
                    }
                }
                out.push(a.data()[best * cols + c]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&[segments.len(), cols], out)?;
        Ok(self.tape.push(value, &[self.id], || Op::SegmentMax { a: self.id, argmax }))
    }

    /// Mean negative log-likelihood of `targets` over unmasked rows.
    pub fn cross_entropy(self, targets: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let logits = self.value();
        let (rows, v) = (logits.rows(), logits.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: logits.shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("target {bad} outside vocabulary of {v}"),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumericsError::AllMasked);
        }
        let mut probs = logits.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            kernels::log_softmax_in_place(row);
            if mask[r] {
                total -= row[targets[r]];
            }
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.tape.push(value, &[self.id], || Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(total), &[self.id], || Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let m = a.data().iter().sum::<f64>() / a.len() as f64;
        self.tape.push(Tensor::scalar(m), &[self.id], || Op::Mean { a: self.id })
    }
}

/// Embedding lookup: rows of `table` selected by `ids`.
pub fn embedding_lookup<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    table.gather_rows(ids)
}

/// Batched multi-head scaled dot-product attention over projected
/// queries, keys and values; `layout` assigns key rows to query rows.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    layout: Arc<AttentionLayout>,
) -> Result<Var<'t>> {
    q.same_tape(&k)?;
    q.same_tape(&v)?;
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let d = qv.cols();
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::InvalidArgument {
            op: "attention",
            reason: format!("model width {d} not divisible by {heads} heads"),
        });
    }
    if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            left: kv.shape().to_vec(),
            right: vv.shape().to_vec(),
        });
    }
    for g in &layout.groups {
        if g.queries.end > qv.rows() || g.keys.is_empty() || g.keys.iter().any(|&r| r >= kv.rows()) {
            return Err(NumericsError::InvalidArgument {
                op: "attention",
                reason: format!("layout group {:?} out of range", g.queries),
            });
        }
    }
    let needs = q.tape.needs(&[q.id, k.id, v.id]);
    let mut out = vec![0.0; qv.len()];
    let mut probs = if needs { vec![0.0; layout.prob_len(heads)] } else { Vec::new() };
    kernels::attention_forward(
        qv.data(),
        kv.data(),
        vv.data(),
        d,
        heads,
        &layout,
        &mut out,
        needs.then_some(probs.as_mut_slice()),
    );
    let value = Tensor::new(qv.shape(), out)?;
    Ok(q.tape.push(value, &[q.id, k.id, v.id], || Op::Attention {
        q: q.id,
        k: k.id,
        v: v.id,
        heads,
        layout,
        probs,
    }))
}
