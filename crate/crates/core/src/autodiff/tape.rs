use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, SparseMatrix, Tensor};
use super::TensorError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    MeanAll(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SelectCol(Var, usize),
    Gather(Var, Rc<[usize]>),
    ScatterSum(Var, Rc<[usize]>),
    Sparse(Rc<SparseMatrix>, Var),
    OverwriteRows(Var, Rc<[usize]>),
    ScalarMap(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of array operations supporting one reverse sweep.
///
/// Inputs always precede outputs, so the reverse sweep is a single backwards
/// pass over the node list.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from `v` reached the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialising zeros when it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(v.idx).copied().unwrap_or((1, 1));
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let taken = if v.tape == self.tape { self.grads.get_mut(v.idx).and_then(Option::take) } else { None };
        taken.unwrap_or_else(|| {
            let (r, c) = self.shapes.get(v.idx).copied().unwrap_or((1, 1));
            Tensor::zeros(r, c)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Copies the value of `v` off the tape. Gradients do not flow through the copy.
    pub fn detach(&self, v: Var) -> Tensor {
        self.value(v).clone()
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.idx].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.idx].value.matmul(&self.nodes[b.idx].value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, what: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.nodes[a.idx].value.zip_map(&self.nodes[b.idx].value, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.nodes[a.idx].value.zip_map(&self.nodes[b.idx].value, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.nodes[a.idx].value.zip_map(&self.nodes[b.idx].value, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_broadcast(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(row)?;
        let (ar, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(TensorError::shape("add_broadcast", (ar, ac), self.shape(row)));
        }
        let mut value = self.nodes[a.idx].value.clone();
        let bias = self.nodes[row.idx].value.data().to_vec();
        for r in 0..ar {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies every entry of `a` by the `1 x 1` value `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(s)?;
        if self.shape(s) != (1, 1) {
            return Err(TensorError::shape("mul_scalar_var", self.shape(a), self.shape(s)));
        }
        let k = self.nodes[s.idx].value.item();
        let value = self.nodes[a.idx].value.map(|x| x * k);
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(value, Op::MulScalarVar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.idx].value.map(|x| x * c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.idx].value.map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.idx].value.map(|x| x * x);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Square(a), rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let t = &self.nodes[a.idx].value;
        if t.is_empty() {
            return Err(TensorError::Empty("mean_all"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::MeanAll(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = Tensor::scalar(self.nodes[a.idx].value.sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SumAll(a), rg))
    }

    /// Side-by-side concatenation of tensors with equal row counts.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_columns"))?;
        self.check(first)?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            self.check(p)?;
            if self.shape(p).0 != rows {
                return Err(TensorError::shape("concat_columns", self.shape(first), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let src = &self.nodes[p.idx].value;
            let pc = src.cols();
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pc].copy_from_slice(src.row(r));
            }
            offset += pc;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(TensorError::IndexOutOfRange { index: end, bound: r });
        }
        let src = &self.nodes[a.idx].value;
        let value = Tensor::from_vec(end - start, c, src.data()[start * c..end * c].to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Column `col` of `a` as an `n x 1` tensor.
    pub fn select_column(&mut self, a: Var, col: usize) -> Result<Var, TensorError> {
        self.check(a)?;
        let (_, c) = self.shape(a);
        if col >= c {
            return Err(TensorError::IndexOutOfRange { index: col, bound: c });
        }
        let value = self.nodes[a.idx].value.column_of(col);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SelectCol(a, col), rg))
    }

    /// `out[k] = a[index[k]]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var, TensorError> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.idx].value;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, bound: r });
            }
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::from_vec(index.len(), c, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Gather(a, index), rg))
    }

    /// `out[index[k]] += a[k]` into `out_rows` zero-initialised rows.
    pub fn scatter_sum_rows(&mut self, a: Var, index: Rc<[usize]>, out_rows: usize) -> Result<Var, TensorError> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        if index.len() != r {
            return Err(TensorError::shape("scatter_sum_rows", (r, c), (index.len(), 1)));
        }
        let mut value = Tensor::zeros(out_rows, c);
        let src = &self.nodes[a.idx].value;
        for (k, &i) in index.iter().enumerate() {
            if i >= out_rows {
                return Err(TensorError::IndexOutOfRange { index: i, bound: out_rows });
            }
            for (d, s) in value.row_mut(i).iter_mut().zip(src.row(k)) {
                *d += s;
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::ScatterSum(a, index), rg))
    }

    /// Applies a constant sparse linear map: `m * a`.
    pub fn sparse_apply(&mut self, m: Rc<SparseMatrix>, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = m.apply(&self.nodes[a.idx].value)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Sparse(m, a), rg))
    }

    /// Replaces the listed rows of `a` by the rows of `values` (same order).
    /// Overwritten rows carry no gradient back to `a`.
    pub fn overwrite_rows(&mut self, a: Var, rows: Rc<[usize]>, values: &Tensor) -> Result<Var, TensorError> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        if values.shape() != (rows.len(), c) {
            return Err(TensorError::shape("overwrite_rows", (rows.len(), c), values.shape()));
        }
        let mut value = self.nodes[a.idx].value.clone();
        for (k, &i) in rows.iter().enumerate() {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, bound: r });
            }
            value.row_mut(i).copy_from_slice(values.row(k));
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::OverwriteRows(a, rows), rg))
    }

    /// Records `value = g(s)` for a scalar input `s`, given the pointwise
    /// derivative `dg/ds` with the same shape as `value`.
    pub fn scalar_map(&mut self, s: Var, value: Tensor, derivative: Tensor) -> Result<Var, TensorError> {
        self.check(s)?;
        if self.shape(s) != (1, 1) {
            return Err(TensorError::shape("scalar_map", (1, 1), self.shape(s)));
        }
        if value.shape() != derivative.shape() {
            return Err(TensorError::shape("scalar_map", value.shape(), derivative.shape()));
        }
        let rg = self.any_grad(&[s]);
        Ok(self.push(value, Op::ScalarMap(s, derivative), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        self.check(loss)?;
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::NotScalar(self.shape(loss)));
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Result<Gradients, TensorError> {
        self.check(out)?;
        if seed.shape() != self.shape(out) {
            return Err(TensorError::shape("backward seed", self.shape(out), seed.shape()));
        }
        let n = out.idx + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.idx] = Some(seed);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { tape: self.id, grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.idx].requires_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.idx].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(false, g, true, bv, 1.0, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(true, av, false, g, 1.0, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(1.0, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.axpy(1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(1.0, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(1.0, g);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let c = g.cols();
                    let acc = gr.data_mut();
                    for r in 0..g.rows() {
                        for (d, s) in acc.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulScalarVar(a, s) => {
                let k = self.nodes[s.idx].value.item();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(k, g);
                }
                let av = &self.nodes[a.idx].value;
                if let Some(gs) = self.slot(grads, *s) {
                    let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    gs.data_mut()[0] += dot;
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(*c, g);
                }
            }
            Op::Relu(a) => {
                let out = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), o) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *o > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Square(a) => {
                let av = &self.nodes[a.idx].value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), x) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += 2.0 * x * gi;
                    }
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.idx].value.len() as f64;
                let gv = g.item() / n;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::SumAll(a) => {
                let gv = g.item();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..g.rows() {
                            for (d, s) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + pc]) {
                                *d += s;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let c = g.cols();
                    let dst = &mut ga.data_mut()[start * c..start * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::SelectCol(a, col) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*col] += g.get(r, 0);
                    }
                }
            }
            Op::Gather(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &i) in index.iter().enumerate() {
                        for (d, s) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ScatterSum(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &i) in index.iter().enumerate() {
                        for (d, s) in ga.row_mut(k).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sparse(m, a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    m.apply_transpose_into(g, ga);
                }
            }
            Op::OverwriteRows(a, rows) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(1.0, g);
                    for &i in rows.iter() {
                        let before: Vec<f64> = g.row(i).to_vec();
                        for (d, s) in ga.row_mut(i).iter_mut().zip(before) {
                            *d -= s;
                        }
                    }
                }
            }
            Op::ScalarMap(s, deriv) => {
                if let Some(gs) = self.slot(grads, *s) {
                    let dot: f64 = g.data().iter().zip(deriv.data()).map(|(x, y)| x * y).sum();
                    gs.data_mut()[0] += dot;
                }
            }
        }
    }
}
