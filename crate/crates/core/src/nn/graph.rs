//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only for the duration of one
//! forward pass. Every op appends a node holding its output and enough
//! context to run its backward rule. [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of each parameter that was touched.
//!
//! Ops treat tensors as matrices: the last dimension is the column count and
//! all leading dimensions are folded into rows.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{Gradients, NnError, ParamStore, Tensor};

/// Smallest probability fed to a log in [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Gelu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    CrossEntropy { probs: Var, targets: Vec<usize>, weights: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, kernel: Var, bias: Option<Var> },
    Dropout { x: Var, mask: Vec<f64> },
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Records one forward computation.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<String, Var>,
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: node_op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input. Receives no gradient outside the graph.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NnError> {
        self.push("constant", value, Op::Leaf)
    }

    /// The node for a stored parameter. Repeated calls with the same name
    /// return the same node, so tied uses share one gradient.
    pub fn param(&mut self, name: &str) -> Result<Var, NnError> {
        if let Some(v) = self.param_nodes.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(name.to_string(), v);
        Ok(v)
    }

    /// `y = x Wᵀ + b` with `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.rank() != 2 || xt.cols() != wt.shape()[1] {
            return Err(shape_err(
                "linear",
                format!("input {:?} vs weight {:?}", xt.shape(), wt.shape()),
            ));
        }
        let (rows, inp, out) = (xt.rows(), xt.cols(), wt.shape()[0]);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != out {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs weight {:?}", bt.shape(), wt.shape()),
                ));
            }
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bt.data());
            }
        }
        matmul_bt_acc(xt.data(), wt.data(), &mut y, rows, inp, out);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let t = Tensor::new(shape, y)?;
        self.push("linear", t, Op::Linear { x, w, b })
    }

    /// Linear layer over named parameters.
    pub fn linear_named(&mut self, x: Var, w: &str, b: &str) -> Result<Var, NnError> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        self.linear(x, w, Some(b))
    }

    /// `[m,k] x [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", at.shape(), bt.shape())));
        }
        let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
        let mut y = vec![0.0; m * n];
        matmul_acc(at.data(), bt.data(), &mut y, m, k, n);
        let t = Tensor::matrix(m, n, y)?;
        self.push("matmul", t, Op::MatMul(a, b))
    }

    /// `[m,k] x [n,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[1] {
            return Err(shape_err("matmul_bt", format!("{:?} x {:?}ᵀ", at.shape(), bt.shape())));
        }
        let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
        let mut y = vec![0.0; m * n];
        matmul_bt_acc(at.data(), bt.data(), &mut y, m, k, n);
        let t = Tensor::matrix(m, n, y)?;
        self.push("matmul_bt", t, Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let at = self.value(a);
        let (m, n) = (at.rows(), at.cols());
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[j * m + i] = at.data()[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, y)?;
        self.push("transpose", t, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node_op: Op,
    ) -> Result<Var, NnError> {
        self.same_shape(op, a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        self.push(op, t, node_op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (at, rt) = (self.value(a), self.value(row));
        if rt.len() != at.cols() {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", at.shape(), rt.shape())));
        }
        let c = at.cols();
        let data = at
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rt.data()[i % c])
            .collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        self.push("add_row", t, Op::AddRow(a, row))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, NnError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        self.push("affine", t, Op::Affine { x, scale })
    }

    fn map(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, node_op: Op) -> Result<Var, NnError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(op, t, node_op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NnError> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        self.map(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NnError> {
        self.map("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let xt = self.value(x);
        let t = softmax_rows(xt);
        self.push("softmax", t, Op::Softmax(x))
    }

    /// Mean over rows of `-ln p[row, target]`, with `p` floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var, NnError> {
        let rows = self.value(probs).rows();
        let w = vec![1.0 / rows.max(1) as f64; rows];
        self.weighted_cross_entropy(probs, targets, &w)
    }

    /// `Σ_r weights[r] * -ln p[r, targets[r]]`
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, NnError> {
        let pt = self.value(probs);
        let (rows, k) = (pt.rows(), pt.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} rows, {} targets, {} weights", rows, targets.len(), weights.len()),
            ));
        }
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= k {
                return Err(NnError::Index { index: t, bound: k });
            }
            if w != 0.0 {
                loss -= w * pt.get(r, t).max(PROB_FLOOR).ln();
            }
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Row-wise layer normalisation with learned gain and bias of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xt.cols();
        if gt.len() != c || bt.len() != c {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with gain {:?} bias {:?}", xt.shape(), gt.shape(), bt.shape()),
            ));
        }
        let rows = xt.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xt.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                y[r * c + j] = gt.data()[j] * xh + bt.data()[j];
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), y)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let xt = self.value(x);
        let c = xt.cols();
        if start >= end || end > c {
            return Err(shape_err("slice_cols", format!("[{}, {}) of {:?}", start, end, xt.shape())));
        }
        let rows = xt.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&xt.row_slice(r)[start..end]);
        }
        let t = Tensor::matrix(rows, w, data)?;
        self.push("slice_cols", t, Op::SliceCols { x, start })
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let xt = self.value(x);
        if start >= end || end > xt.rows() {
            return Err(shape_err("slice_rows", format!("[{}, {}) of {:?}", start, end, xt.shape())));
        }
        let c = xt.cols();
        let data = xt.data()[start * c..end * c].to_vec();
        let t = Tensor::matrix(end - start, c, data)?;
        self.push("slice_rows", t, Op::SliceRows { x, start })
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
            return Err(shape_err("concat_cols", format!("row counts differ: {:?}", shapes)));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != c) {
            let shapes: Vec<_> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
            return Err(shape_err("concat_rows", format!("column counts differ: {:?}", shapes)));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / c.max(1);
        let t = Tensor::matrix(rows, c, data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()))
    }

    /// Column-wise mean over rows, giving `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let xt = self.value(x);
        let (rows, c) = (xt.rows(), xt.cols());
        if rows == 0 {
            return Err(shape_err("mean_rows", "empty input".into()));
        }
        let mut data = vec![0.0; c];
        for r in 0..rows {
            for (d, v) in data.iter_mut().zip(xt.row_slice(r)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        let t = Tensor::matrix(1, c, data)?;
        self.push("mean_rows", t, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i` of the output.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let tt = self.value(table);
        let (n, c) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(NnError::Index { index: id, bound: n });
            }
            data.extend_from_slice(tt.row_slice(id));
        }
        let t = Tensor::matrix(ids.len(), c, data)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Valid 1-D cross-correlation. `x: [len, in]`, `kernel: [width, in, out]`,
    /// optional `bias: [out]`; output `[len - width + 1, out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var, NnError> {
        let (xt, kt) = (self.value(x), self.value(kernel));
        if kt.rank() != 3 || xt.cols() != kt.shape()[1] {
            return Err(shape_err(
                "conv1d",
                format!("input {:?} vs kernel {:?}", xt.shape(), kt.shape()),
            ));
        }
        let (len, inp) = (xt.rows(), xt.cols());
        let (width, out) = (kt.shape()[0], kt.shape()[2]);
        if len < width {
            return Err(shape_err(
                "conv1d",
                format!("input length {} shorter than kernel width {}", len, width),
            ));
        }
        let olen = len - width + 1;
        let mut y = vec![0.0; olen * out];
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.len() != out {
                return Err(shape_err("conv1d", format!("bias {:?} for {} channels", bt.shape(), out)));
            }
            for t in 0..olen {
                y[t * out..(t + 1) * out].copy_from_slice(bt.data());
            }
        }
        let (xd, kd) = (xt.data(), kt.data());
        for t in 0..olen {
            let y_row = &mut y[t * out..(t + 1) * out];
            for w in 0..width {
                for i in 0..inp {
                    let xv = xd[(t + w) * inp + i];
                    if xv == 0.0 {
                        continue;
                    }
                    let k_row = &kd[(w * inp + i) * out..(w * inp + i + 1) * out];
                    for (o, kv) in y_row.iter_mut().zip(k_row) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let t = Tensor::matrix(olen, out, y)?;
        self.push("conv1d", t, Op::Conv1d { x, kernel, bias })
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    /// Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, NnError> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(NnError::Config(format!("dropout probability {} must be < 1", p)));
        }
        let xt = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xt.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(x))
    }

    /// Runs the backward pass from a scalar node and collects parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match out.grads.get_mut(name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            out.grads.insert(name.clone(), t);
                        }
                    }
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op, y: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (rows, inp, out) = (xt.rows(), xt.cols(), wt.shape()[0]);
                matmul_acc(g, wt.data(), slot(grads, *x, rows * inp), rows, out, inp);
                matmul_at_acc(g, xt.data(), slot(grads, *w, out * inp), rows, out, inp);
                if let Some(b) = b {
                    let gb = slot(grads, *b, out);
                    for r in 0..rows {
                        for (d, v) in gb.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                matmul_bt_acc(g, bt.data(), slot(grads, *a, m * k), m, n, k);
                matmul_at_acc(at.data(), g, slot(grads, *b, k * n), m, k, n);
            }
            Op::MatMulBt(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
                matmul_acc(g, bt.data(), slot(grads, *a, m * k), m, n, k);
                matmul_at_acc(g, at.data(), slot(grads, *b, n * k), m, n, k);
            }
            Op::Transpose(a) => {
                let (n, m) = (y.rows(), y.cols());
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                for (d, v) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                    *d -= v;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                for ((d, v), bv) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bd) {
                    *d += v * bv;
                }
                for ((d, v), av) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(ad) {
                    *d += v * av;
                }
            }
            Op::AddRow(a, row) => {
                add_into(slot(grads, *a, g.len()), g);
                let c = y.cols();
                let gr = slot(grads, *row, c);
                for (i, v) in g.iter().enumerate() {
                    gr[i % c] += v;
                }
            }
            Op::Affine { x, scale } => {
                for (d, v) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += scale * v;
                }
            }
            Op::Tanh(x) => {
                for ((d, v), yv) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(y.data()) {
                    *d += v * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid(x) => {
                for ((d, v), yv) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(y.data()) {
                    *d += v * yv * (1.0 - yv);
                }
            }
            Op::Exp(x) => {
                for ((d, v), yv) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(y.data()) {
                    *d += v * yv;
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                for ((d, v), xv) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xd) {
                    let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    *d += v * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data();
                for ((d, v), xv) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xd) {
                    if *xv >= *lo && *xv <= *hi {
                        *d += v;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let gx = slot(grads, *x, g.len());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                probs,
                targets,
                weights,
            } => {
                let pt = self.value(*probs);
                let k = pt.cols();
                let gp = slot(grads, *probs, pt.len());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let p = pt.get(r, t);
                    if p >= PROB_FLOOR {
                        gp[r * k + t] -= g[0] * w / p;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = y.cols();
                let rows = y.rows();
                let gam = self.value(*gamma).data().to_vec();
                {
                    let gg = slot(grads, *gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                {
                    let gb = slot(grads, *beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                let gx = slot(grads, *x, rows * c);
                let n = c as f64;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let dxh = g[r * c + j] * gam[j];
                        sum_d += dxh;
                        sum_dx += dxh * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let dxh = g[r * c + j] * gam[j];
                        gx[r * c + j] +=
                            rstd[r] / n * (n * dxh - sum_d - xhat[r * c + j] * sum_dx);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xt = self.value(*x);
                let (c, w) = (xt.cols(), y.cols());
                let gx = slot(grads, *x, xt.len());
                for r in 0..y.rows() {
                    for j in 0..w {
                        gx[r * c + start + j] += g[r * w + j];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let gx = slot(grads, *x, xt.len());
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let pt = self.value(*p);
                    let w = pt.cols();
                    let gp = slot(grads, *p, pt.len());
                    for r in 0..y.rows() {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    add_into(slot(grads, *p, n), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::MeanRows(x) => {
                let xt = self.value(*x);
                let (rows, c) = (xt.rows(), xt.cols());
                let gx = slot(grads, *x, xt.len());
                for r in 0..rows {
                    for j in 0..c {
                        gx[r * c + j] += g[j] / rows as f64;
                    }
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                for d in slot(grads, *x, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let gt = slot(grads, *table, tt.len());
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let (xt, kt) = (self.value(*x), self.value(*kernel));
                let inp = xt.cols();
                let (width, out) = (kt.shape()[0], kt.shape()[2]);
                let olen = y.rows();
                let (xd, kd) = (xt.data(), kt.data());
                {
                    let gx = slot(grads, *x, xt.len());
                    for t in 0..olen {
                        let g_row = &g[t * out..(t + 1) * out];
                        for w in 0..width {
                            for i in 0..inp {
                                let k_row = &kd[(w * inp + i) * out..(w * inp + i + 1) * out];
                                let s: f64 = g_row.iter().zip(k_row).map(|(a, b)| a * b).sum();
                                gx[(t + w) * inp + i] += s;
                            }
                        }
                    }
                }
                {
                    let gk = slot(grads, *kernel, kt.len());
                    for t in 0..olen {
                        let g_row = &g[t * out..(t + 1) * out];
                        for w in 0..width {
                            for i in 0..inp {
                                let xv = xd[(t + w) * inp + i];
                                if xv == 0.0 {
                                    continue;
                                }
                                let gk_row = &mut gk[(w * inp + i) * out..(w * inp + i + 1) * out];
                                for (d, gv) in gk_row.iter_mut().zip(g_row) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let gb = slot(grads, *b, out);
                    for t in 0..olen {
                        add_into(gb, &g[t * out..(t + 1) * out]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for ((d, v), m) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                    *d += v * m;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax outside any graph.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
