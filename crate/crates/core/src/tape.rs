//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] replays the records in exact reverse order and
//! accumulates parameter adjoints into the owning [`ParamStore`]. A tape
//! serves exactly one forward/backward cycle; reuse is an error.
//!
//! Every forward primitive checks its output for non-finite values and
//! fails instead of propagating NaN/Inf.

use crate::error::NumericError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(String),
    Matmul(Var, Var),
    Add(Var, Var),
    /// mat (m×n) + row vector (1×n), broadcast over rows
    AddRowBroadcast(Var, Var),
    /// mat (m×n) + column of values (1×m), out[i][j] = mat[i][j] + v[i]
    AddColBroadcast(Var, Var),
    Mul(Var, Var),
    /// tensor × scalar variable (1×1)
    MulScalar(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Index(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    MaskedSoftmax(Var, Vec<bool>),
    /// logsumexp over axis 0: (m×n) -> (1×n)
    LogsumexpRows(Var),
    LogsumexpAll(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    /// mean binary cross-entropy of sigmoid(logits) against constant targets
    BceWithLogits(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericError> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumericError> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Record a parameter; its adjoint is accumulated on backward.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericError> {
        let p = store
            .get(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))?;
        self.push(p.value.clone(), Op::Param(name.to_string()), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::Matmul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn add_row_broadcast(&mut self, mat: Var, row: Var) -> Result<Var, NumericError> {
        let (m, r) = (self.value(mat), self.value(row));
        assert_eq!(r.rows(), 1, "broadcast vector must be 1×n");
        assert_eq!(m.cols(), r.cols(), "broadcast width mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.at(i, j) + r.at(0, j);
                out.set(i, j, v);
            }
        }
        self.push(out, Op::AddRowBroadcast(mat, row), "add_row_broadcast")
    }

    pub fn add_col_broadcast(&mut self, mat: Var, col: Var) -> Result<Var, NumericError> {
        let (m, c) = (self.value(mat), self.value(col));
        assert_eq!(c.rows(), 1, "broadcast vector must be 1×m");
        assert_eq!(m.rows(), c.cols(), "broadcast height mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.at(i, j) + c.at(0, i);
                out.set(i, j, v);
            }
        }
        self.push(out, Op::AddColBroadcast(mat, col), "add_col_broadcast")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn mul_scalar(&mut self, t: Var, s: Var) -> Result<Var, NumericError> {
        let sv = self.value(s).item();
        let out = self.value(t).map(|x| x * sv);
        self.push(out, Op::MulScalar(t, s), "mul_scalar")
    }

    pub fn scale(&mut self, t: Var, c: f64) -> Result<Var, NumericError> {
        let out = self.value(t).map(|x| x * c);
        self.push(out, Op::Scale(t, c), "scale")
    }

    pub fn neg(&mut self, t: Var) -> Result<Var, NumericError> {
        self.scale(t, -1.0)
    }

    pub fn tanh(&mut self, t: Var) -> Result<Var, NumericError> {
        let out = self.value(t).map(f64::tanh);
        self.push(out, Op::Tanh(t), "tanh")
    }

    pub fn sigmoid(&mut self, t: Var) -> Result<Var, NumericError> {
        let out = self.value(t).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(t), "sigmoid")
    }

    pub fn leaky_relu(&mut self, t: Var, slope: f64) -> Result<Var, NumericError> {
        assert!(slope > 0.0 && slope < 1.0, "leaky_relu slope must be in (0,1)");
        let out = self.value(t).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(t, slope), "leaky_relu")
    }

    pub fn exp(&mut self, t: Var) -> Result<Var, NumericError> {
        let out = self.value(t).map(f64::exp);
        self.push(out, Op::Exp(t), "exp")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                for j in 0..t.cols() {
                    out.set(i, off + j, t.at(i, j));
                }
            }
            off += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::new(total, cols, data), Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, t: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let src = self.value(t);
        assert!(start + len <= src.rows(), "slice_rows out of range");
        let cols = src.cols();
        let data = src.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::new(len, cols, data), Op::SliceRows(t, start, len), "slice_rows")
    }

    pub fn slice_cols(&mut self, t: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let src = self.value(t);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(src.rows(), len);
        for i in 0..src.rows() {
            for j in 0..len {
                out.set(i, j, src.at(i, start + j));
            }
        }
        self.push(out, Op::SliceCols(t, start, len), "slice_cols")
    }

    pub fn index(&mut self, t: Var, r: usize, c: usize) -> Result<Var, NumericError> {
        let v = self.value(t).at(r, c);
        self.push(Tensor::scalar(v), Op::Index(t, r, c), "index")
    }

    pub fn gather_rows(&mut self, t: Var, indices: &[usize]) -> Result<Var, NumericError> {
        let src = self.value(t);
        let cols = src.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < src.rows(), "gather_rows index out of range");
            data.extend_from_slice(src.row(i));
        }
        self.push(
            Tensor::new(indices.len(), cols, data),
            Op::GatherRows(t, indices.to_vec()),
            "gather_rows",
        )
    }

    /// Numerically stable softmax over all elements; masked positions get
    /// exactly zero and take no probability mass.
    pub fn masked_softmax(&mut self, t: Var, mask: &[bool]) -> Result<Var, NumericError> {
        let src = self.value(t);
        assert_eq!(mask.len(), src.len(), "mask length mismatch");
        if !mask.iter().any(|&m| m) {
            return Err(NumericError::AllMasked);
        }
        let max = src
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = src.clone();
        let mut total = 0.0;
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        for v in out.data_mut() {
            *v /= total;
        }
        self.push(out, Op::MaskedSoftmax(t, mask.to_vec()), "masked_softmax")
    }

    pub fn softmax(&mut self, t: Var) -> Result<Var, NumericError> {
        let mask = vec![true; self.value(t).len()];
        self.masked_softmax(t, &mask)
    }

    /// logsumexp over axis 0: (m×n) -> (1×n).
    pub fn logsumexp_rows(&mut self, t: Var) -> Result<Var, NumericError> {
        let src = self.value(t);
        let (m, n) = src.shape();
        let mut out = Tensor::zeros(1, n);
        for j in 0..n {
            let max = (0..m).map(|i| src.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..m).map(|i| (src.at(i, j) - max).exp()).sum();
            out.set(0, j, max + s.ln());
        }
        self.push(out, Op::LogsumexpRows(t), "logsumexp_rows")
    }

    pub fn logsumexp_all(&mut self, t: Var) -> Result<Var, NumericError> {
        let src = self.value(t);
        let max = src.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = src.data().iter().map(|&v| (v - max).exp()).sum();
        self.push(Tensor::scalar(max + s.ln()), Op::LogsumexpAll(t), "logsumexp_all")
    }

    pub fn sum(&mut self, t: Var) -> Result<Var, NumericError> {
        let s: f64 = self.value(t).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(t), "sum")
    }

    pub fn mean(&mut self, t: Var) -> Result<Var, NumericError> {
        let src = self.value(t);
        let s: f64 = src.data().iter().sum();
        self.push(Tensor::scalar(s / src.len() as f64), Op::Mean(t), "mean")
    }

    pub fn transpose(&mut self, t: Var) -> Result<Var, NumericError> {
        let out = self.value(t).transpose();
        self.push(out, Op::Transpose(t), "transpose")
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var, NumericError> {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce target shape mismatch");
        let n = z.len() as f64;
        let mut total = 0.0;
        for (&zi, &yi) in z.data().iter().zip(targets.data()) {
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        self.push(Tensor::scalar(total / n), Op::BceWithLogits(logits, targets), "bce_with_logits")
    }

    /// Reverse sweep from a scalar loss. Parameter adjoints are added (+=)
    /// into `store`; the tape is consumed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumericError> {
        if self.consumed {
            return Err(NumericError::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(NumericError::NonScalarLoss { rows: lt.rows(), cols: lt.cols() });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let op = &node.op;
            let out_val = &node.value;
            match op {
                Op::Leaf => {}
                Op::Param(name) => {
                    store.accumulate_grad(name, &g)?;
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    da.gemm_acc(1.0, &g, false, bv, true);
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    db.gemm_acc(1.0, av, true, &g, false);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRowBroadcast(mat, row) => {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = dr.at(0, j) + g.at(i, j);
                            dr.set(0, j, v);
                        }
                    }
                    acc(&mut grads, *mat, g);
                    acc(&mut grads, *row, dr);
                }
                Op::AddColBroadcast(mat, col) => {
                    let mut dc = Tensor::zeros(1, g.rows());
                    for i in 0..g.rows() {
                        let s: f64 = g.row(i).iter().sum();
                        dc.set(0, i, s);
                    }
                    acc(&mut grads, *mat, g);
                    acc(&mut grads, *col, dc);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = elementwise(&g, bv, |x, y| x * y);
                    let db = elementwise(&g, av, |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MulScalar(t, s) => {
                    let sv = self.nodes[s.0].value.item();
                    let tv = &self.nodes[t.0].value;
                    let dt = g.map(|x| x * sv);
                    let ds: f64 = g.data().iter().zip(tv.data()).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *t, dt);
                    acc(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::Scale(t, c) => {
                    acc(&mut grads, *t, g.map(|x| x * c));
                }
                Op::Tanh(t) => {
                    let dt = elementwise(&g, out_val, |gi, yi| gi * (1.0 - yi * yi));
                    acc(&mut grads, *t, dt);
                }
                Op::Sigmoid(t) => {
                    let dt = elementwise(&g, out_val, |gi, yi| gi * yi * (1.0 - yi));
                    acc(&mut grads, *t, dt);
                }
                Op::LeakyRelu(t, slope) => {
                    let tv = &self.nodes[t.0].value;
                    let dt = elementwise(&g, tv, |gi, xi| if xi > 0.0 { gi } else { gi * slope });
                    acc(&mut grads, *t, dt);
                }
                Op::Exp(t) => {
                    let dt = elementwise(&g, out_val, |gi, yi| gi * yi);
                    acc(&mut grads, *t, dt);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            for j in 0..w {
                                dp.set(i, j, g.at(i, off + j));
                            }
                        }
                        off += w;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.nodes[p.0].value.rows();
                        let cols = g.cols();
                        let data = g.data()[off * cols..(off + r) * cols].to_vec();
                        off += r;
                        acc(&mut grads, p, Tensor::new(r, cols, data));
                    }
                }
                Op::SliceRows(t, start, len) => {
                    let src = &self.nodes[t.0].value;
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    for i in 0..*len {
                        for j in 0..src.cols() {
                            dt.set(start + i, j, g.at(i, j));
                        }
                    }
                    acc(&mut grads, *t, dt);
                }
                Op::SliceCols(t, start, len) => {
                    let src = &self.nodes[t.0].value;
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        for j in 0..*len {
                            dt.set(i, start + j, g.at(i, j));
                        }
                    }
                    acc(&mut grads, *t, dt);
                }
                Op::Index(t, r, c) => {
                    let src = &self.nodes[t.0].value;
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    dt.set(*r, *c, g.item());
                    acc(&mut grads, *t, dt);
                }
                Op::GatherRows(t, indices) => {
                    let src = &self.nodes[t.0].value;
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..src.cols() {
                            let v = dt.at(i, j) + g.at(k, j);
                            dt.set(i, j, v);
                        }
                    }
                    acc(&mut grads, *t, dt);
                }
                Op::MaskedSoftmax(t, mask) => {
                    let y = out_val;
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .map(|((gi, yi), _)| gi * yi)
                        .sum();
                    let mut dt = Tensor::zeros(y.rows(), y.cols());
                    for (k, ((gi, yi), &m)) in
                        g.data().iter().zip(y.data()).zip(mask).enumerate()
                    {
                        if m {
                            dt.data_mut()[k] = yi * (gi - dot);
                        }
                    }
                    acc(&mut grads, *t, dt);
                }
                Op::LogsumexpRows(t) => {
                    let src = &self.nodes[t.0].value;
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        for j in 0..src.cols() {
                            dt.set(i, j, g.at(0, j) * (src.at(i, j) - out_val.at(0, j)).exp());
                        }
                    }
                    acc(&mut grads, *t, dt);
                }
                Op::LogsumexpAll(t) => {
                    let src = &self.nodes[t.0].value;
                    let gv = g.item();
                    let lse = out_val.item();
                    let dt = src.map(|x| gv * (x - lse).exp());
                    acc(&mut grads, *t, dt);
                }
                Op::Sum(t) => {
                    let src = &self.nodes[t.0].value;
                    let gv = g.item();
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    dt.fill(gv);
                    acc(&mut grads, *t, dt);
                }
                Op::Mean(t) => {
                    let src = &self.nodes[t.0].value;
                    let gv = g.item() / src.len() as f64;
                    let mut dt = Tensor::zeros(src.rows(), src.cols());
                    dt.fill(gv);
                    acc(&mut grads, *t, dt);
                }
                Op::Transpose(t) => {
                    acc(&mut grads, *t, g.transpose());
                }
                Op::BceWithLogits(t, targets) => {
                    let z = &self.nodes[t.0].value;
                    let gv = g.item() / z.len() as f64;
                    let data = z
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&zi, &yi)| gv * (1.0 / (1.0 + (-zi).exp()) - yi))
                        .collect();
                    acc(&mut grads, *t, Tensor::new(z.rows(), z.cols(), data));
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}
