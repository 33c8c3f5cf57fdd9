use std::collections::HashMap;

use super::cells::{self, CellCache, StepInputs};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    LogSoftmax(Var),
    SoftmaxXent { logits: Var, probs: Vec<f64>, targets: Vec<usize>, weights: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Cell(Box<CellOp>),
}

#[derive(Debug, Clone)]
struct CellOp {
    lstm: bool,
    x: Var,
    row: usize,
    extra: Option<Var>,
    state: Var,
    wh: Var,
    bh: Var,
    cache: CellCache,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    // Persistent only for leaves and parameters.
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape.
///
/// Nodes are pushed in evaluation order, so the tape index order is a
/// topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `c += a · b` for row-major `a: [m,k]`, `b: [k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(super) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass buffers whose lengths cover every index the
    // given dims and strides address; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(super) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf or parameter node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Gradient-tracked input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a parameter, copying its current value. Repeated calls for the
    /// same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Parameter value as an untracked constant.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor { shape: src.shape().to_vec(), data };
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape().to_vec(), data };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k) = as_matrix(ta);
        let n = tb.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, ta.data(), (k as isize, 1), tb.data(), (n as isize, 1), &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a row vector (`[n]` or `[1,n]`) to every row of `a: [m,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let n = ta.cols();
        if ta.shape().len() != 2 || tr.numel() != n || tr.rows() != 1 {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor { shape: ta.shape().to_vec(), data };
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(value, Op::AddRow(a, row), tracked))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, super::fastmath::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, super::fastmath::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `log(1 + exp(a))`, overflow-safe.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols: no inputs"));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(first), t.shape()));
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Tensor { shape: vec![rows, width], data }, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows: no inputs"));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start >= end || end > t.cols() {
            return Err(Error::invalid(format!(
                "slice_cols: range {start}..{end} invalid for shape {:?}",
                t.shape()
            )));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor { shape: vec![rows, end - start], data }, Op::SliceCols { src: a, start }, tracked))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start >= end || end > t.rows() {
            return Err(Error::invalid(format!(
                "slice_rows: range {start}..{end} invalid for shape {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor { shape: vec![end - start, c], data }, Op::SliceRows { src: a, start }, tracked))
    }

    /// Selects rows of `table: [V,E]` by id, producing `[ids.len(), E]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(Error::invalid(format!("gather: table shape {:?} with {} ids", t.shape(), ids.len())));
        }
        let (v, e) = as_matrix(t);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("gather: id {bad} out of range for {v} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let tracked = self.tracked(table);
        Ok(self.push(Tensor { shape: vec![ids.len(), e], data }, Op::Gather { table, ids: ids.to_vec() }, tracked))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor { shape: t.shape().to_vec(), data };
        let tracked = self.tracked(a);
        self.push(value, Op::LogSoftmax(a), tracked)
    }

    /// `Σ_b w_b · (−log softmax(logits_b)[target_b])`, returned as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (b, v) = as_matrix(t);
        if t.shape().len() != 2 || targets.len() != b || weights.len() != b {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: logits {:?} with {} targets and {} weights",
                t.shape(),
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = Vec::with_capacity(b * v);
        let mut total = 0.0;
        for ((row, &tgt), &w) in t.data().chunks(v).zip(targets).zip(weights) {
            if tgt >= v {
                return Err(Error::invalid(format!("softmax_cross_entropy: target {tgt} >= {v}")));
            }
            let lse = logsumexp(row);
            if w != 0.0 {
                total += w * (lse - row[tgt]);
            }
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let tracked = self.tracked(logits);
        let op = Op::SoftmaxXent { logits, probs, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(total), op, tracked))
    }

    /// Fused GRU step. Rows `row..row+B` of `x: [_, 3H]` hold the input-side
    /// gate pre-activations, `extra: [B,3H]` is added to them, `h: [B,H]`,
    /// `wh: [H,3H]` and `bh: [1,3H]`. Gates are ordered reset, update,
    /// candidate and `h' = n + u ⊙ (h − n)`.
    pub fn gru_cell(&mut self, x: Var, row: usize, extra: Option<Var>, h: Var, wh: Var, bh: Var) -> Result<Var> {
        self.cell(false, x, row, extra, h, wh, bh)
    }

    /// Fused LSTM step over state rows `[h | c]` (`[B,2H]`), with gates
    /// ordered input, forget, output, candidate. Other arguments as in
    /// [`Graph::gru_cell`] with `4H` gate columns.
    pub fn lstm_cell(&mut self, x: Var, row: usize, extra: Option<Var>, state: Var, wh: Var, bh: Var) -> Result<Var> {
        self.cell(true, x, row, extra, state, wh, bh)
    }

    #[allow(clippy::too_many_arguments)]
    fn cell(&mut self, lstm: bool, x: Var, row: usize, extra: Option<Var>, state: Var, wh: Var, bh: Var) -> Result<Var> {
        let name = if lstm { "lstm_cell" } else { "gru_cell" };
        let ws = self.shape(wh).to_vec();
        if ws.len() != 2 {
            return Err(Error::invalid(format!("{name}: recurrent weight shape {ws:?}")));
        }
        let hidden = ws[0];
        let gates = if lstm { 4 } else { 3 } * hidden;
        let width = if lstm { 2 } else { 1 } * hidden;
        let ss = self.shape(state).to_vec();
        if ss.len() != 2 || ss[1] != width || ws[1] != gates {
            return Err(shape_err(name, &ss, &ws));
        }
        let rows = ss[0];
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] != gates || row + rows > xs[0] {
            return Err(Error::invalid(format!("{name}: rows {row}..{} of input {xs:?} for {gates} gate columns", row + rows)));
        }
        if self.value(bh).numel() != gates {
            return Err(shape_err(name, self.shape(bh), &ws));
        }
        if let Some(e) = extra {
            if self.shape(e) != [rows, gates] {
                return Err(shape_err(name, self.shape(e), &[rows, gates]));
            }
        }
        let inputs = StepInputs {
            x: self.value(x).data(),
            row,
            extra: extra.map(|e| self.value(e).data()),
            state: self.value(state).data(),
            wh: self.value(wh).data(),
            bh: self.value(bh).data(),
            rows,
            hidden,
        };
        let (out, cache) = if lstm { cells::lstm_forward(&inputs) } else { cells::gru_forward(&inputs) };
        let tracked = [Some(x), extra, Some(state), Some(wh), Some(bh)].into_iter().flatten().any(|v| self.tracked(v));
        let op = Op::Cell(Box::new(CellOp { lstm, x, row, extra, state, wh, bh, cache }));
        Ok(self.push(Tensor { shape: vec![rows, width], data: out }, op, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Reverse pass from a scalar root.
    ///
    /// Leaf and parameter gradients accumulate across calls; intermediate
    /// gradients are discarded when the pass ends.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let n_root = self.value(root).numel();
        if n_root != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.tracked(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                let persistent = &mut self.nodes[i].grad;
                match persistent {
                    Some(buf) => add_into(buf, &g),
                    None => *persistent = Some(g),
                }
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[i];
            macro_rules! acc {
                ($v:expr) => {
                    slot(&mut grads, nodes, $v)
                };
            }
            match &node.op {
                Op::Constant | Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = as_matrix(ta);
                    let n = tb.shape()[1];
                    if let Some(da) = acc!(*a) {
                        // dA = dC · Bᵀ
                        gemm_acc(m, n, k, &g, (n as isize, 1), tb.data(), (1, n as isize), da);
                    }
                    if let Some(db) = acc!(*b) {
                        // dB = Aᵀ · dC
                        gemm_acc(k, m, n, ta.data(), (1, k as isize), &g, (n as isize, 1), db);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(da) = acc!(*a) {
                        add_into(da, &g);
                    }
                    if let Some(db) = acc!(*b) {
                        add_into(db, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(da) = acc!(*a) {
                        add_into(da, &g);
                    }
                    if let Some(db) = acc!(*b) {
                        db.iter_mut().zip(&g).for_each(|(d, x)| *d -= x);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(da) = acc!(*a) {
                        for ((d, x), y) in da.iter_mut().zip(&g).zip(tb.data()) {
                            *d += x * y;
                        }
                    }
                    if let Some(db) = acc!(*b) {
                        for ((d, x), y) in db.iter_mut().zip(&g).zip(ta.data()) {
                            *d += x * y;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let n = nodes[a.0].value.cols();
                    if let Some(da) = acc!(*a) {
                        add_into(da, &g);
                    }
                    if let Some(dr) = acc!(*row) {
                        for chunk in g.chunks(n) {
                            add_into(dr, chunk);
                        }
                    }
                }
                Op::Affine(a, scale) => {
                    if let Some(da) = acc!(*a) {
                        da.iter_mut().zip(&g).for_each(|(d, x)| *d += scale * x);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    if let Some(da) = acc!(*a) {
                        for ((d, x), &s) in da.iter_mut().zip(&g).zip(y) {
                            *d += x * s * (1.0 - s);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    if let Some(da) = acc!(*a) {
                        for ((d, x), &t) in da.iter_mut().zip(&g).zip(y) {
                            *d += x * (1.0 - t * t);
                        }
                    }
                }
                Op::Relu(a) => {
                    let src = nodes[a.0].value.data();
                    if let Some(da) = acc!(*a) {
                        for ((d, x), &s) in da.iter_mut().zip(&g).zip(src) {
                            if s > 0.0 {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    if let Some(da) = acc!(*a) {
                        for ((d, x), &e) in da.iter_mut().zip(&g).zip(y) {
                            *d += x * e;
                        }
                    }
                }
                Op::Log(a) => {
                    let src = nodes[a.0].value.data();
                    if let Some(da) = acc!(*a) {
                        for ((d, x), &s) in da.iter_mut().zip(&g).zip(src) {
                            *d += x / s;
                        }
                    }
                }
                Op::Abs(a) => {
                    let src = nodes[a.0].value.data();
                    if let Some(da) = acc!(*a) {
                        for ((d, x), &s) in da.iter_mut().zip(&g).zip(src) {
                            *d += x * s.signum() * f64::from(u8::from(s != 0.0));
                        }
                    }
                }
                Op::Softplus(a) => {
                    let src = nodes[a.0].value.data();
                    if let Some(da) = acc!(*a) {
                        for ((d, x), &s) in da.iter_mut().zip(&g).zip(src) {
                            *d += x * sigmoid(s);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let width = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(dp) = acc!(*p) {
                            for r in 0..rows {
                                add_into(&mut dp[r * w..(r + 1) * w], &g[r * width + offset..r * width + offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { src, start } => {
                    let rows = node.value.rows();
                    let w = node.value.cols();
                    let full = nodes[src.0].value.cols();
                    if let Some(ds) = acc!(*src) {
                        for r in 0..rows {
                            add_into(&mut ds[r * full + start..r * full + start + w], &g[r * w..(r + 1) * w]);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.numel();
                        if let Some(dp) = acc!(*p) {
                            add_into(dp, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { src, start } => {
                    let c = node.value.cols();
                    if let Some(ds) = acc!(*src) {
                        add_into(&mut ds[start * c..start * c + g.len()], &g);
                    }
                }
                Op::Gather { table, ids } => {
                    let e = nodes[table.0].value.cols();
                    if let Some(dt) = acc!(*table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let c = node.value.cols();
                    let y = node.value.data();
                    if let Some(da) = acc!(*a) {
                        for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let total: f64 = grow.iter().sum();
                            for ((d, x), l) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += x - l.exp() * total;
                            }
                        }
                    }
                }
                Op::SoftmaxXent { logits, probs, targets, weights } => {
                    let v = nodes[logits.0].value.cols();
                    let up = g[0];
                    if let Some(dl) = acc!(*logits) {
                        for (b, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let scale = up * w;
                            let row = &mut dl[b * v..(b + 1) * v];
                            for (d, p) in row.iter_mut().zip(&probs[b * v..(b + 1) * v]) {
                                *d += scale * p;
                            }
                            row[t] -= scale;
                        }
                    }
                }
                Op::Cell(c) => {
                    let ws = nodes[c.wh.0].value.shape();
                    let (hidden, gates) = (ws[0], ws[1]);
                    let state = nodes[c.state.0].value.data();
                    let rows = node.value.rows();
                    let inputs = StepInputs {
                        x: nodes[c.x.0].value.data(),
                        row: c.row,
                        extra: c.extra.map(|e| nodes[e.0].value.data()),
                        state,
                        wh: nodes[c.wh.0].value.data(),
                        bh: nodes[c.bh.0].value.data(),
                        rows,
                        hidden,
                    };
                    let (dx, dhp, mut dstate) = if c.lstm {
                        cells::lstm_backward(&inputs, &c.cache, &g)
                    } else {
                        cells::gru_backward(&inputs, &c.cache, &g)
                    };
                    if let Some(d) = acc!(c.x) {
                        add_into(&mut d[c.row * gates..(c.row + rows) * gates], &dx);
                    }
                    if let Some(e) = c.extra {
                        if let Some(d) = acc!(e) {
                            add_into(d, &dx);
                        }
                    }
                    let stride = if c.lstm { 2 * hidden } else { hidden };
                    if nodes[c.state.0].tracked {
                        // dh_prev += dhp · Whᵀ, into the first `hidden` columns of each state row.
                        let mut dh = vec![0.0; rows * hidden];
                        gemm_acc(rows, gates, hidden, &dhp, (gates as isize, 1), inputs.wh, (1, gates as isize), &mut dh);
                        for r in 0..rows {
                            add_into(&mut dstate[r * stride..r * stride + hidden], &dh[r * hidden..(r + 1) * hidden]);
                        }
                        if let Some(d) = acc!(c.state) {
                            add_into(d, &dstate);
                        }
                    }
                    if let Some(d) = acc!(c.wh) {
                        // dWh += h_prevᵀ · dhp
                        gemm_acc(hidden, rows, gates, state, (1, stride as isize), &dhp, (gates as isize, 1), d);
                    }
                    if let Some(d) = acc!(c.bh) {
                        for chunk in dhp.chunks(gates) {
                            add_into(d, chunk);
                        }
                    }
                }
                Op::Sum(a) => {
                    let up = g[0];
                    if let Some(da) = acc!(*a) {
                        da.iter_mut().for_each(|d| *d += up);
                    }
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel() as f64;
                    let up = g[0] / n;
                    if let Some(da) = acc!(*a) {
                        da.iter_mut().for_each(|d| *d += up);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}
