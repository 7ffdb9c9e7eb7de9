//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix; vectors are `1 x n` rows and
//! batches stack samples along the first axis. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters enter the tape through [`Graph::weight`]. A [`Weights`] binding
//! either tracks gradients for its store or feeds the values in as constants,
//! which is how a whole network is placed behind a stop-gradient.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::NnError;
use crate::params::{ParamId, ParamKey, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter store is bound into a graph.
#[derive(Clone, Copy)]
pub struct Weights<'a> {
    pub store: &'a ParamStore,
    pub track: bool,
}

impl<'a> Weights<'a> {
    /// Gradients flow into `store`.
    pub fn train(store: &'a ParamStore) -> Self {
        Self { store, track: true }
    }

    /// Values are used as constants; no gradient reaches `store`.
    pub fn fixed(store: &'a ParamStore) -> Self {
        Self { store, track: false }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Normalize(Var, Arc<Vec<f64>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    SumAll(Var),
    RowSum(Var),
    RowMax(Var, Arc<Vec<usize>>),
    Pick(Var, Arc<Vec<usize>>),
    SoftmaxRows(Var),
    BatchedVecMat(Var, Var),
    BlockMatMul(Var, Var, usize),
    Reshape(Var),
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    /// Some parameter is reachable through this node.
    grad: bool,
}

/// Accumulated parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    entries: HashMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Matrix> {
        self.entries.get(&ParamKey::new(store.store_id(), id))
    }

    pub(crate) fn for_store(&self, store_id: u64) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.entries
            .iter()
            .filter(move |(k, _)| k.store == store_id)
            .map(|(k, v)| (k.param, v))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of parameter tensors that received a gradient.
    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(ParamKey, bool), Var>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, op: Op) -> Var {
        let grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].grad),
        };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let m = Matrix::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(m)
    }

    /// Copies the value of `v` onto a fresh leaf, cutting the gradient path.
    pub fn stop(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_arc(value, Op::Leaf)
    }

    /// Binds a parameter. Repeated bindings of the same parameter share a node.
    pub fn weight(&mut self, w: &Weights<'_>, id: ParamId) -> Var {
        let key = ParamKey::new(w.store.store_id(), id);
        if let Some(&v) = self.bound.get(&(key, w.track)) {
            return v;
        }
        let value = w.store.shared(id);
        let op = if w.track { Op::Param(key) } else { Op::Leaf };
        let v = self.push_arc(value, op);
        self.bound.insert((key, w.track), v);
        v
    }

    fn check(&self, op: &'static str, ok: bool, a: Var, b: Var) -> Result<(), NnError> {
        if ok {
            Ok(())
        } else {
            Err(NnError::Shape {
                op,
                left: self.shape(a),
                right: self.shape(b),
            })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check("matmul", self.shape(a).1 == self.shape(b).0, a, b)?;
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check("add", self.shape(a) == self.shape(b), a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check("sub", self.shape(a) == self.shape(b), a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check("mul", self.shape(a) == self.shape(b), a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a + b` with a `1 x c` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(row);
        self.check("add_row", rb == 1 && ca == cb, a, row)?;
        let _ = ra;
        let v = self.value(a) + self.value(row);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `a * b` with a `1 x c` row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (_, ca) = self.shape(a);
        let (rb, cb) = self.shape(row);
        self.check("mul_row", rb == 1 && ca == cb, a, row)?;
        let v = self.value(a) * self.value(row);
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    /// `a * c` with an `r x 1` column broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NnError> {
        let (ra, _) = self.shape(a);
        let (rc, cc) = self.shape(col);
        self.check("mul_col", cc == 1 && ra == rc, a, col)?;
        let v = self.value(a) * self.value(col);
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut out = Matrix::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, v) in out.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
        }
        self.push(out, Op::Normalize(a, Arc::new(inv_std)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            self.check("concat_cols", self.shape(p).0 == rows, parts[0], p)?;
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat cols");
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            self.check("concat_rows", self.shape(p).1 == cols, parts[0], p)?;
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat rows");
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let cols = self.shape(a).1;
        if start >= end || end > cols {
            return Err(NnError::Config(format!(
                "slice_cols {start}..{end} out of range for width {cols}"
            )));
        }
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Same values in row-major order under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(NnError::Shape { op: "reshape", left: (r, c), right: (rows, cols) });
        }
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Matrix::from_shape_vec((rows, cols), flat).expect("reshape");
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Row `k` of the output is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, NnError> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NnError::Config(format!("gather row {bad} out of {rows}")));
        }
        let src = self.value(a);
        let mut out = Matrix::zeros((index.len(), cols));
        for (k, &i) in index.iter().enumerate() {
            out.row_mut(k).assign(&src.row(i));
        }
        Ok(self.push(out, Op::GatherRows(a, Arc::new(index))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns, giving an `r x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    /// Per-row maximum as an `r x 1` column; ties resolve to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let idx: Vec<usize> = x.outer_iter().map(|r| argmax(r.as_slice().expect("contiguous"))).collect();
        let mut out = Matrix::zeros((idx.len(), 1));
        for (r, &c) in idx.iter().enumerate() {
            out[[r, 0]] = x[[r, c]];
        }
        self.push(out, Op::RowMax(a, Arc::new(idx)))
    }

    /// Element `a[r, index[r]]` for every row, as an `r x 1` column.
    pub fn pick(&mut self, a: Var, index: Vec<usize>) -> Result<Var, NnError> {
        let (rows, cols) = self.shape(a);
        if index.len() != rows || index.iter().any(|&c| c >= cols) {
            return Err(NnError::Config(format!(
                "pick: {} indices for a {rows}x{cols} matrix",
                index.len()
            )));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros((rows, 1));
        for (r, &c) in index.iter().enumerate() {
            out[[r, 0]] = x[[r, c]];
        }
        Ok(self.push(out, Op::Pick(a, Arc::new(index))))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise vector-matrix product. `q` is `b x n`, `w` is `b x (n*m)`
    /// holding one row-major `n x m` matrix per row; the result is `b x m`.
    pub fn batched_vecmat(&mut self, q: Var, w: Var) -> Result<Var, NnError> {
        let (b, n) = self.shape(q);
        let (bw, nm) = self.shape(w);
        self.check("batched_vecmat", b == bw && n > 0 && nm % n == 0, q, w)?;
        let m = nm / n;
        let qv = self.value(q);
        let wv = self.value(w);
        let mut out = Matrix::zeros((b, m));
        for r in 0..b {
            let wr = wv.row(r);
            let mut orow = out.row_mut(r);
            for i in 0..n {
                let qi = qv[[r, i]];
                if qi == 0.0 {
                    continue;
                }
                for k in 0..m {
                    orow[k] += qi * wr[i * m + k];
                }
            }
        }
        Ok(self.push(out, Op::BatchedVecMat(q, w)))
    }

    /// Block-diagonal product: `a` is `(blocks*p) x s`, `e` is `(blocks*s) x c`,
    /// and block `k` of the `(blocks*p) x c` result is `a_k · e_k`.
    pub fn block_matmul(&mut self, a: Var, e: Var, blocks: usize) -> Result<Var, NnError> {
        let (ra, s) = self.shape(a);
        let (re, c) = self.shape(e);
        self.check(
            "block_matmul",
            blocks > 0 && ra % blocks == 0 && re == blocks * s,
            a,
            e,
        )?;
        let p = ra / blocks;
        let av = self.value(a);
        let ev = self.value(e);
        let mut out = Matrix::zeros((ra, c));
        for k in 0..blocks {
            let ab = av.slice(s![k * p..(k + 1) * p, ..]);
            let eb = ev.slice(s![k * s..(k + 1) * s, ..]);
            out.slice_mut(s![k * p..(k + 1) * p, ..]).assign(&ab.dot(&eb));
        }
        Ok(self.push(out, Op::BlockMatMul(a, e, blocks)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.shape(loss) != (1, 1) {
            return Err(NnError::Config(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        let mut out = Gradients::default();
        let need = |v: Var| self.nodes[v.0].grad;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            for input in inputs(&node.op) {
                if input.0 >= idx {
                    return Err(NnError::Internal(format!(
                        "node {idx} reads node {} which is not earlier on the tape",
                        input.0
                    )));
                }
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => match out.entries.get_mut(key) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.entries.insert(*key, g);
                    }
                },
                Op::MatMul(a, b) => {
                    if need(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if need(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if need(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                }
                Op::MulRow(a, b) => {
                    if need(*b) {
                        let gb = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *b, gb);
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                }
                Op::MulCol(a, c) => {
                    if need(*c) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *c, gc);
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*c));
                    }
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    accumulate(&mut grads, *a, Matrix::from_shape_vec(dim, flat).expect("reshape grad"));
                }
                Op::Affine(a, scale) => {
                    let mut ga = g;
                    ga *= *scale;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**y).for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**y).for_each(|d, &v| *d *= v * (1.0 - v));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**y).for_each(|d, &v| *d *= 1.0 - v * v);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Normalize(a, inv_std) => {
                    let cols = y.ncols() as f64;
                    let mut ga = Matrix::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / cols;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let inv = inv_std[r];
                        for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *o = inv * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        accumulate(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        accumulate(&mut grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                    for (k, &i) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Matrix::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let dim = self.value(*a).raw_dim();
                    let mut ga = Matrix::zeros(dim);
                    for (mut row, gv) in ga.outer_iter_mut().zip(g.column(0).iter()) {
                        row.fill(*gv);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowMax(a, index) | Op::Pick(a, index) => {
                    let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                    for (r, &c) in index.iter().enumerate() {
                        ga[[r, c]] = g[[r, 0]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = &g * &**y;
                    for (mut row, yr) in ga.outer_iter_mut().zip(y.outer_iter()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|d, &yv| *d -= yv * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BatchedVecMat(q, w) => {
                    let qv = self.value(*q);
                    let wv = self.value(*w);
                    let (b, n) = qv.dim();
                    let m = g.ncols();
                    let mut gq = Matrix::zeros((b, n));
                    let mut gw = Matrix::zeros((b, n * m));
                    for r in 0..b {
                        let gr = g.row(r);
                        let wr = wv.row(r);
                        for i in 0..n {
                            let mut acc = 0.0;
                            let qi = qv[[r, i]];
                            for k in 0..m {
                                acc += gr[k] * wr[i * m + k];
                                gw[[r, i * m + k]] = qi * gr[k];
                            }
                            gq[[r, i]] = acc;
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *w, gw);
                }
                Op::BlockMatMul(a, e, blocks) => {
                    let av = self.value(*a);
                    let ev = self.value(*e);
                    let p = av.nrows() / blocks;
                    let sdim = av.ncols();
                    if need(*a) {
                        let mut ga = Matrix::zeros(av.raw_dim());
                        for k in 0..*blocks {
                            let gb = g.slice(s![k * p..(k + 1) * p, ..]);
                            let eb = ev.slice(s![k * sdim..(k + 1) * sdim, ..]);
                            ga.slice_mut(s![k * p..(k + 1) * p, ..]).assign(&gb.dot(&eb.t()));
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if need(*e) {
                        let mut ge = Matrix::zeros(ev.raw_dim());
                        for k in 0..*blocks {
                            let gb = g.slice(s![k * p..(k + 1) * p, ..]);
                            let ab = av.slice(s![k * p..(k + 1) * p, ..]);
                            ge.slice_mut(s![k * sdim..(k + 1) * sdim, ..]).assign(&ab.t().dot(&gb));
                        }
                        accumulate(&mut grads, *e, ge);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => Vec::new(),
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulRow(a, b)
        | Op::MulCol(a, b)
        | Op::BatchedVecMat(a, b)
        | Op::BlockMatMul(a, b, _) => vec![*a, *b],
        Op::Affine(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Abs(a)
        | Op::Normalize(a, _)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _)
        | Op::SumAll(a)
        | Op::RowSum(a)
        | Op::RowMax(a, _)
        | Op::Pick(a, _)
        | Op::SoftmaxRows(a)
        | Op::Reshape(a) => vec![*a],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest element, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[1.0, -2.0, 3.5]]);
        let mut g = Graph::new();
        let x = g.weight(&Weights::train(&store), p);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(&store, p).unwrap(), &array![[1.0, 1.0, 1.0]]);
    }

    #[test]
    fn stop_blocks_gradient_into_factor() {
        let mut store = ParamStore::new();
        let v = store.add("v", array![[2.0, -3.0]]);
        let w = store.add("w", array![[0.5, 4.0]]);
        let mut g = Graph::new();
        let bind = Weights::train(&store);
        let vv = g.weight(&bind, v);
        let ww = g.weight(&bind, w);
        let sv = g.stop(vv);
        let prod = g.mul(sv, ww).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(&store, v).is_none());
        assert_eq!(grads.get(&store, w).unwrap(), &array![[2.0, -3.0]]);
    }

    #[test]
    fn fixed_binding_produces_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[1.0]]);
        let mut g = Graph::new();
        let x = g.weight(&Weights::fixed(&store), p);
        let y = g.scale(x, 3.0);
        let loss = g.sum(y);
        assert!(g.backward(loss).unwrap().is_empty());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros((2, 3)));
        let b = g.constant(Matrix::zeros((2, 3)));
        assert!(matches!(g.matmul(a, b), Err(NnError::Shape { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.9, 0.2, 0.0, 0.3]), 1);
        assert_eq!(argmax(&[1.0; 5]), 0);
    }

    #[test]
    fn block_matmul_matches_per_block_products() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 0.0], [0.5, 0.5], [0.0, 2.0], [1.0, 1.0]]);
        let e = g.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        let out = g.block_matmul(a, e, 2).unwrap();
        assert_eq!(
            g.value(out),
            &array![[1.0, 2.0], [2.0, 3.0], [14.0, 16.0], [12.0, 14.0]]
        );
    }
}
