use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a primitive in errors and fault-injection hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Input,
    Param,
    MatMul,
    Add,
    Mul,
    Scale,
    Concat,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    LogSoftmax,
    Log,
    Dropout,
    Gather,
    SliceCols,
    Transpose,
    Sum,
    Conv1dMaxPool,
    LstmCell,
    MarginalNll,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Input => "input",
            Primitive::Param => "param",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Concat => "concat",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Log => "log",
            Primitive::Dropout => "dropout",
            Primitive::Gather => "gather",
            Primitive::SliceCols => "slice_cols",
            Primitive::Transpose => "transpose",
            Primitive::Sum => "sum",
            Primitive::Conv1dMaxPool => "conv1d_max_pool",
            Primitive::LstmCell => "lstm_cell",
            Primitive::MarginalNll => "marginal_nll",
        }
    }
}

/// A correct answer for one query of [`Tape::marginal_nll`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NllTarget {
    /// The artificial antecedent, whose score is pinned to zero.
    Epsilon,
    /// Position within the query's candidate list.
    Candidate(usize),
}

/// One query of the marginal log-likelihood: a list of score rows plus the
/// subset of them (or ε) that counts as correct.
#[derive(Debug, Clone, PartialEq)]
pub struct NllQuery {
    pub candidates: Vec<usize>,
    pub targets: Vec<NllTarget>,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, bool),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Log(Var),
    Dropout {
        input: Var,
        mask: Vec<bool>,
        scale: T,
    },
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    Conv1dMaxPool {
        input: Var,
        filters: Var,
        bias: Var,
        width: usize,
        segments: Vec<(usize, usize)>,
        argmax: Vec<usize>,
        /// Smallest gap between a pooled maximum and its runner-up window.
        margin: Option<T>,
    },
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        b: Var,
        gates: Vec<T>,
        tanh_c: Vec<T>,
    },
    MarginalNll(Var, Vec<NllQuery>),
}

impl<T> Op<T> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Input => Primitive::Input,
            Op::Param(_) => Primitive::Param,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Concat(..) => Primitive::Concat,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Relu(_) => Primitive::Relu,
            Op::Softmax(..) => Primitive::Softmax,
            Op::LogSoftmax(..) => Primitive::LogSoftmax,
            Op::Log(_) => Primitive::Log,
            Op::Dropout { .. } => Primitive::Dropout,
            Op::Gather(..) => Primitive::Gather,
            Op::SliceCols(..) => Primitive::SliceCols,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Sum(_) => Primitive::Sum,
            Op::Conv1dMaxPool { .. } => Primitive::Conv1dMaxPool,
            Op::LstmCell { .. } => Primitive::LstmCell,
            Op::MarginalNll(..) => Primitive::MarginalNll,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

/// Records primitive applications over a borrowed parameter store.
///
/// Nodes are appended in evaluation order, so the inputs of node `k` always
/// have indices below `k`. Parameters are referenced, not copied.
#[derive(Debug)]
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    fault: Option<Primitive>,
}

fn mismatch(op: &'static str, shapes: &[&[usize]], detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

fn require_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(mismatch(op, &[t.shape()], "expected a rank-2 tensor"))
    }
}

/// `(count, len, stride, start_of(group))` for reductions along `axis` of a matrix.
fn axis_groups(
    rows: usize,
    cols: usize,
    axis: usize,
) -> (usize, usize, usize, impl Fn(usize) -> usize) {
    if axis == 1 {
        (
            rows,
            cols,
            1,
            Box::new(move |g: usize| g * cols) as Box<dyn Fn(usize) -> usize>,
        )
    } else {
        (
            cols,
            rows,
            cols,
            Box::new(move |g: usize| g) as Box<dyn Fn(usize) -> usize>,
        )
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Real>(values: impl Iterator<Item = T> + Clone) -> T {
    let Some(max) = values.clone().reduce(T::max) else {
        return T::neg_infinity();
    };
    if max == T::neg_infinity() {
        return max;
    }
    max + values
        .map(|v| (v - max).exp())
        .fold(T::zero(), |a, b| a + b)
        .ln()
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.value(*id),
            _ => unreachable!("every non-parameter node owns its value"),
        }
    }

    /// Distance of the recorded forward pass from the nearest point where the
    /// graph is not differentiable: the smallest `|x|` over ReLU inputs and
    /// the smallest gap between a max-pool winner and its runner-up. `None`
    /// when the graph has no such points.
    pub fn kink_margin(&self) -> Option<f64> {
        let mut margin: Option<f64> = None;
        let mut note = |m: f64| margin = Some(margin.map_or(m, |x| x.min(m)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    if let Some(m) = self
                        .value(*a)
                        .data()
                        .iter()
                        .map(|v| v.abs().as_f64())
                        .reduce(f64::min)
                    {
                        note(m);
                    }
                }
                Op::Conv1dMaxPool {
                    margin: Some(m), ..
                } => note(m.as_f64()),
                _ => {}
            }
        }
        margin
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    /// Inputs of a node, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Log(a)
            | Op::Gather(a, _)
            | Op::SliceCols(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::MarginalNll(a, _) => vec![*a],
            Op::Dropout { input, .. } => vec![*input],
            Op::Concat(xs, _) => xs.clone(),
            Op::Conv1dMaxPool {
                input,
                filters,
                bias,
                ..
            } => vec![*input, *filters, *bias],
            Op::LstmCell { x, h, c, w, b, .. } => vec![*x, *h, *c, *w, *b],
        }
    }

    /// Makes backward rules of `primitive` return negated input gradients.
    #[cfg(any(test, feature = "fault-injection"))]
    pub fn inject_sign_flip(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.primitive().name(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Input, value)
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(mismatch(
                "matmul",
                &[ta.shape(), tb.shape()],
                "inner dimensions differ",
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(ta.data(), tb.data(), m, k, n, &mut out);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?)
    }

    /// Elementwise sum; `b` may also be a `[1, n]` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x + y)
                .collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return self.push(Op::Add(a, b, false), out);
        }
        let (m, n) = require_matrix("add", ta)?;
        if tb.shape() != [1, n] {
            return Err(mismatch(
                "add",
                &[ta.shape(), tb.shape()],
                "shapes neither equal nor row-broadcastable",
            ));
        }
        let mut out = ta.clone();
        for r in 0..m {
            for (o, &y) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += y;
            }
        }
        self.push(Op::Add(a, b, true), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(
                "mul",
                &[ta.shape(), tb.shape()],
                "elementwise product needs equal shapes",
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), out)
    }

    /// Concatenates matrices along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(mismatch(
                "concat",
                &[],
                format!("{} inputs along axis {axis}", inputs.len()),
            ));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        for &v in inputs {
            require_matrix("concat", self.value(v))?;
        }
        let other = 1 - axis;
        let fixed = shapes[0][other];
        if shapes.iter().any(|s| s[other] != fixed) {
            return Err(mismatch(
                "concat",
                &shapes,
                format!("dimension {other} must agree"),
            ));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * fixed);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::matrix(total, fixed, data)?
        } else {
            let mut data = Vec::with_capacity(total * fixed);
            for r in 0..fixed {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
            Tensor::matrix(fixed, total, data)?
        };
        self.push(Op::Concat(inputs.to_vec(), axis), out)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(Op::Relu(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.ln());
        self.push(Op::Log(a), out)
    }

    /// Softmax within each row (`axis = 1`) or each column (`axis = 0`).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.normalize(a, axis, "softmax", false)?;
        self.push(Op::Softmax(a, axis), out)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.normalize(a, axis, "log_softmax", true)?;
        self.push(Op::LogSoftmax(a, axis), out)
    }

    fn normalize(&self, a: Var, axis: usize, op: &'static str, log: bool) -> Result<Tensor<T>> {
        let t = self.value(a);
        let (rows, cols) = require_matrix(op, t)?;
        if axis > 1 {
            return Err(mismatch(op, &[t.shape()], format!("axis {axis}")));
        }
        let mut out = t.clone();
        let (count, len, stride, start) = axis_groups(rows, cols, axis);
        let data = out.data_mut();
        for g in 0..count {
            let s = start(g);
            let idx = (0..len).map(|k| s + k * stride);
            let max = idx
                .clone()
                .map(|i| data[i])
                .reduce(T::max)
                .unwrap_or_else(T::zero);
            let total = idx
                .clone()
                .map(|i| (data[i] - max).exp())
                .fold(T::zero(), |a, b| a + b);
            let log_total = total.ln();
            for i in idx {
                data[i] = if log {
                    data[i] - max - log_total
                } else {
                    (data[i] - max).exp() / total
                };
            }
        }
        Ok(out)
    }

    /// Inverted dropout with an externally supplied keep-mask.
    pub fn dropout(&mut self, a: Var, mask: Vec<bool>, rate: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(mismatch(
                "dropout",
                &[t.shape(), &[mask.len()]],
                "mask length must equal tensor size",
            ));
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let data = t
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * scale } else { T::zero() })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(
            Op::Dropout {
                input: a,
                mask,
                scale,
            },
            out,
        )
    }

    /// Selects rows of a matrix by index; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = require_matrix("gather", t)?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        self.push(Op::Gather(a, indices.to_vec()), out)
    }

    /// Embedding lookup: one row of `table` per id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = require_matrix("slice_cols", t)?;
        if start + len > cols {
            return Err(mismatch(
                "slice_cols",
                &[t.shape()],
                format!("columns {start}..{}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = require_matrix("transpose", t)?;
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = t.get(r, c);
            }
        }
        let out = Tensor::matrix(cols, rows, data)?;
        self.push(Op::Transpose(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    /// 1-D convolution of width `width` over each character segment, followed
    /// by a max over time and a bias.
    ///
    /// `input` is `[total_chars, channels]`, `filters` is
    /// `[width * channels, n_filters]` (row `k * channels + ch` weights offset
    /// `k`), `bias` is `[1, n_filters]`. Each `(start, len)` segment is zero
    /// padded on both sides to at least `width`, so every segment yields one
    /// output row regardless of its length.
    pub fn conv1d_max_pool(
        &mut self,
        input: Var,
        filters: Var,
        bias: Var,
        width: usize,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let (ti, tf, tb) = (self.value(input), self.value(filters), self.value(bias));
        let (total, ch) = require_matrix("conv1d_max_pool", ti)?;
        let (fr, nf) = require_matrix("conv1d_max_pool", tf)?;
        if width == 0 || fr != width * ch || tb.shape() != [1, nf] {
            return Err(mismatch(
                "conv1d_max_pool",
                &[ti.shape(), tf.shape(), tb.shape()],
                format!("filters must be [{}*{ch}, f] and bias [1, f]", width),
            ));
        }
        let mut out = vec![T::zero(); segments.len() * nf];
        let mut argmax = vec![0usize; segments.len() * nf];
        let mut window = vec![T::zero(); nf];
        let mut best: Vec<Option<T>> = vec![None; nf];
        let mut runner_up: Vec<Option<T>> = vec![None; nf];
        let mut margin: Option<T> = None;
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > total {
                return Err(mismatch(
                    "conv1d_max_pool",
                    &[ti.shape()],
                    format!("segment ({start}, {len})"),
                ));
            }
            let padded = len.max(width);
            let left = (padded - len) / 2;
            best.iter_mut().for_each(|b| *b = None);
            runner_up.iter_mut().for_each(|r| *r = None);
            for p in 0..=(padded - width) {
                window.iter_mut().for_each(|w| *w = T::zero());
                for k in 0..width {
                    let pos = p + k;
                    if pos < left || pos - left >= len {
                        continue;
                    }
                    let row = ti.row(start + pos - left);
                    for (c, &x) in row.iter().enumerate() {
                        let frow = tf.row(k * ch + c);
                        for (w, &f) in window.iter_mut().zip(frow) {
                            *w += x * f;
                        }
                    }
                }
                for f in 0..nf {
                    let w = window[f];
                    if best[f].is_none_or(|b| w > b) {
                        runner_up[f] = best[f];
                        best[f] = Some(w);
                        argmax[s * nf + f] = p;
                    } else if runner_up[f].is_none_or(|r| w > r) {
                        runner_up[f] = Some(w);
                    }
                }
            }
            for f in 0..nf {
                let b = best[f].expect("every segment has a window");
                if let Some(r) = runner_up[f] {
                    let gap = b - r;
                    margin = Some(margin.map_or(gap, |m| m.min(gap)));
                }
                out[s * nf + f] = b + tb.data()[f];
            }
        }
        let out = Tensor::matrix(segments.len(), nf, out)?;
        self.push(
            Op::Conv1dMaxPool {
                input,
                filters,
                bias,
                width,
                segments: segments.to_vec(),
                argmax,
                margin,
            },
            out,
        )
    }

    /// One LSTM step for a batch of rows.
    ///
    /// `x` is `[n, in]`, `h` and `c` are `[n, H]`, `w` is `[in + H, 4H]` with
    /// gate column blocks ordered input, forget, candidate, output, and `b` is
    /// `[1, 4H]`. Returns `[n, 2H]` holding the new hidden state followed by
    /// the new cell state.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, th, tc, tw, tb) = (
            self.value(x),
            self.value(h),
            self.value(c),
            self.value(w),
            self.value(b),
        );
        let (n, input) = require_matrix("lstm_cell", tx)?;
        let (hn, hidden) = require_matrix("lstm_cell", th)?;
        let shapes = [tx.shape(), th.shape(), tc.shape(), tw.shape(), tb.shape()];
        if hn != n
            || tc.shape() != [n, hidden]
            || tw.shape() != [input + hidden, 4 * hidden]
            || tb.shape() != [1, 4 * hidden]
        {
            return Err(mismatch(
                "lstm_cell",
                &shapes,
                "expected x[n,in] h[n,H] c[n,H] w[in+H,4H] b[1,4H]",
            ));
        }
        let g4 = 4 * hidden;
        let mut gates = vec![T::zero(); n * g4];
        matmul_into(
            tx.data(),
            &tw.data()[..input * g4],
            n,
            input,
            g4,
            &mut gates,
        );
        matmul_into(
            th.data(),
            &tw.data()[input * g4..],
            n,
            hidden,
            g4,
            &mut gates,
        );
        let mut out = vec![T::zero(); n * 2 * hidden];
        let mut tanh_c = vec![T::zero(); n * hidden];
        for r in 0..n {
            let z = &mut gates[r * g4..(r + 1) * g4];
            for (zv, &bv) in z.iter_mut().zip(tb.data()) {
                *zv += bv;
            }
            for k in 0..hidden {
                z[k] = sigmoid(z[k]);
                z[hidden + k] = sigmoid(z[hidden + k]);
                z[2 * hidden + k] = z[2 * hidden + k].tanh();
                z[3 * hidden + k] = sigmoid(z[3 * hidden + k]);
                let c_new = z[hidden + k] * tc.get(r, k) + z[k] * z[2 * hidden + k];
                let tcn = c_new.tanh();
                tanh_c[r * hidden + k] = tcn;
                out[r * 2 * hidden + k] = z[3 * hidden + k] * tcn;
                out[r * 2 * hidden + hidden + k] = c_new;
            }
        }
        let out = Tensor::matrix(n, 2 * hidden, out)?;
        self.push(
            Op::LstmCell {
                x,
                h,
                c,
                w,
                b,
                gates,
                tanh_c,
            },
            out,
        )
    }

    /// Summed negative marginal log-likelihood over queries.
    ///
    /// `scores` is `[n, 1]`. Each query scores ε (fixed at 0) plus the listed
    /// rows, and the loss is `logsumexp(all) - logsumexp(targets)`, computed
    /// with max-subtraction.
    pub fn marginal_nll(&mut self, scores: Var, mut queries: Vec<NllQuery>) -> Result<Var> {
        for q in &mut queries {
            q.targets.sort_unstable();
            q.targets.dedup();
        }
        let t = self.value(scores);
        let (n, one) = require_matrix("marginal_nll", t)?;
        if one != 1 {
            return Err(mismatch(
                "marginal_nll",
                &[t.shape()],
                "scores must be a column",
            ));
        }
        let mut total = T::zero();
        for q in &queries {
            if q.targets.is_empty() {
                return Err(mismatch(
                    "marginal_nll",
                    &[t.shape()],
                    "query without targets",
                ));
            }
            for &i in &q.candidates {
                if i >= n {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "marginal_nll",
                        index: i,
                        bound: n,
                    });
                }
            }
            for target in &q.targets {
                if let NllTarget::Candidate(k) = *target {
                    if k >= q.candidates.len() {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: "marginal_nll",
                            index: k,
                            bound: q.candidates.len(),
                        });
                    }
                }
            }
            let data = t.data();
            let all = std::iter::once(T::zero()).chain(q.candidates.iter().map(|&i| data[i]));
            let gold = q.targets.iter().map(|target| match *target {
                NllTarget::Epsilon => T::zero(),
                NllTarget::Candidate(k) => data[q.candidates[k]],
            });
            total += log_sum_exp(all) - log_sum_exp(gold);
        }
        self.push(Op::MarginalNll(scores, queries), Tensor::scalar(total))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lt.shape(), T::one()));
        let mut per_param: Vec<Option<Tensor<T>>> = Vec::new();
        per_param.resize_with(self.params.len(), || None);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                match &mut per_param[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let mut contributions = self.input_grads(&node.op, Var(idx), &g)?;
            if self.fault == Some(node.op.primitive()) {
                for (_, t) in &mut contributions {
                    t.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, t) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Ok(Gradients { per_param })
    }

    fn input_grads(&self, op: &Op<T>, out: Var, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = self.value(out);
        let zip_map = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Result<Tensor<T>> {
            let data = a
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gv)| f(x, gv))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        };
        Ok(match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![T::zero(); m * k];
                matmul_nt_into(g.data(), tb.data(), m, n, k, &mut da);
                let mut db = vec![T::zero(); k * n];
                matmul_tn_into(ta.data(), g.data(), m, k, n, &mut db);
                vec![
                    (*a, Tensor::matrix(m, k, da)?),
                    (*b, Tensor::matrix(k, n, db)?),
                ]
            }
            Op::Add(a, b, broadcast) => {
                let gb = if *broadcast {
                    let cols = g.cols();
                    let mut acc = vec![T::zero(); cols];
                    for r in 0..g.rows() {
                        for (s, &v) in acc.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    Tensor::matrix(1, cols, acc)?
                } else {
                    g.clone()
                };
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, zip_map(tb, &|bv, gv| bv * gv)?),
                    (*b, zip_map(ta, &|av, gv| av * gv)?),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * *f))],
            Op::Concat(inputs, axis) => {
                let mut parts = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v);
                    let (r, c) = (shape[0], shape[1]);
                    let part = if *axis == 0 {
                        Tensor::matrix(r, c, g.data()[offset * c..(offset + r) * c].to_vec())?
                    } else {
                        let mut data = Vec::with_capacity(r * c);
                        for row in 0..r {
                            data.extend_from_slice(&g.row(row)[offset..offset + c]);
                        }
                        Tensor::matrix(r, c, data)?
                    };
                    offset += if *axis == 0 { r } else { c };
                    parts.push((v, part));
                }
                parts
            }
            Op::Tanh(a) => vec![(*a, zip_map(y, &|yv, gv| gv * (T::one() - yv * yv))?)],
            Op::Sigmoid(a) => vec![(*a, zip_map(y, &|yv, gv| gv * yv * (T::one() - yv))?)],
            Op::Relu(a) => vec![(
                *a,
                zip_map(y, &|yv, gv| if yv > T::zero() { gv } else { T::zero() })?,
            )],
            Op::Log(a) => vec![(*a, zip_map(self.value(*a), &|xv, gv| gv / xv)?)],
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(op, Op::LogSoftmax(..));
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![T::zero(); rows * cols];
                let (count, len, stride, start) = axis_groups(rows, cols, *axis);
                let (yd, gd) = (y.data(), g.data());
                for grp in 0..count {
                    let s = start(grp);
                    let idx = (0..len).map(|k| s + k * stride);
                    if log {
                        let gsum = idx.clone().map(|i| gd[i]).fold(T::zero(), |a, b| a + b);
                        for i in idx {
                            dx[i] = gd[i] - yd[i].exp() * gsum;
                        }
                    } else {
                        let dot = idx
                            .clone()
                            .map(|i| gd[i] * yd[i])
                            .fold(T::zero(), |a, b| a + b);
                        for i in idx {
                            dx[i] = yd[i] * (gd[i] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::matrix(rows, cols, dx)?)]
            }
            Op::Dropout { input, mask, scale } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &keep)| if keep { gv * *scale } else { T::zero() })
                    .collect();
                vec![(*input, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Gather(a, indices) => {
                let mut dx = Tensor::zeros(self.shape(*a));
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                vec![(*a, dx)]
            }
            Op::SliceCols(a, start) => {
                let mut dx = Tensor::zeros(self.shape(*a));
                let len = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                vec![(*a, dx)]
            }
            Op::Transpose(a) => {
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let mut data = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        data[c * rows + r] = g.get(r, c);
                    }
                }
                vec![(*a, Tensor::matrix(cols, rows, data)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(self.shape(*a), g.item()))],
            Op::Conv1dMaxPool {
                input,
                filters,
                bias,
                width,
                segments,
                argmax,
                ..
            } => {
                let (ti, tf) = (self.value(*input), self.value(*filters));
                let ch = ti.cols();
                let nf = tf.cols();
                let mut di = Tensor::zeros(ti.shape());
                let mut df = Tensor::zeros(tf.shape());
                let mut db = vec![T::zero(); nf];
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let padded = len.max(*width);
                    let left = (padded - len) / 2;
                    for f in 0..nf {
                        let gv = g.get(s, f);
                        db[f] += gv;
                        let p = argmax[s * nf + f];
                        for k in 0..*width {
                            let pos = p + k;
                            if pos < left || pos - left >= len {
                                continue;
                            }
                            let row = start + pos - left;
                            for c in 0..ch {
                                let fi = (k * ch + c) * nf + f;
                                df.data_mut()[fi] += gv * ti.get(row, c);
                                di.data_mut()[row * ch + c] += gv * tf.data()[fi];
                            }
                        }
                    }
                }
                vec![
                    (*input, di),
                    (*filters, df),
                    (*bias, Tensor::matrix(1, nf, db)?),
                ]
            }
            Op::LstmCell {
                x,
                h,
                c,
                w,
                b,
                gates,
                tanh_c,
            } => {
                let (tx, th, tc, tw) = (
                    self.value(*x),
                    self.value(*h),
                    self.value(*c),
                    self.value(*w),
                );
                let (n, input) = (tx.shape()[0], tx.shape()[1]);
                let hidden = th.shape()[1];
                let g4 = 4 * hidden;
                let mut dz = vec![T::zero(); n * g4];
                let mut dc_prev = vec![T::zero(); n * hidden];
                let one = T::one();
                for r in 0..n {
                    let z = &gates[r * g4..(r + 1) * g4];
                    for k in 0..hidden {
                        let (i, f, cand, o) =
                            (z[k], z[hidden + k], z[2 * hidden + k], z[3 * hidden + k]);
                        let tcn = tanh_c[r * hidden + k];
                        let dh = g.get(r, k);
                        let dc = g.get(r, hidden + k) + dh * o * (one - tcn * tcn);
                        let d = &mut dz[r * g4..(r + 1) * g4];
                        d[k] = dc * cand * i * (one - i);
                        d[hidden + k] = dc * tc.get(r, k) * f * (one - f);
                        d[2 * hidden + k] = dc * i * (one - cand * cand);
                        d[3 * hidden + k] = dh * tcn * o * (one - o);
                        dc_prev[r * hidden + k] = dc * f;
                    }
                }
                // [x | h] · W  =>  dW = [x | h]ᵀ dz, d[x | h] = dz Wᵀ
                let mut dw = vec![T::zero(); (input + hidden) * g4];
                matmul_tn_into(tx.data(), &dz, n, input, g4, &mut dw[..input * g4]);
                matmul_tn_into(th.data(), &dz, n, hidden, g4, &mut dw[input * g4..]);
                let mut dx = vec![T::zero(); n * input];
                matmul_nt_into(&dz, &tw.data()[..input * g4], n, g4, input, &mut dx);
                let mut dh = vec![T::zero(); n * hidden];
                matmul_nt_into(&dz, &tw.data()[input * g4..], n, g4, hidden, &mut dh);
                let mut db = vec![T::zero(); g4];
                for r in 0..n {
                    for (s, &v) in db.iter_mut().zip(&dz[r * g4..(r + 1) * g4]) {
                        *s += v;
                    }
                }
                vec![
                    (*x, Tensor::matrix(n, input, dx)?),
                    (*h, Tensor::matrix(n, hidden, dh)?),
                    (*c, Tensor::matrix(n, hidden, dc_prev)?),
                    (*w, Tensor::matrix(input + hidden, g4, dw)?),
                    (*b, Tensor::matrix(1, g4, db)?),
                ]
            }
            Op::MarginalNll(scores, queries) => {
                let t = self.value(*scores);
                let data = t.data();
                let gv = g.item();
                let mut ds = Tensor::zeros(t.shape());
                for q in queries {
                    let vals: Vec<T> = std::iter::once(T::zero())
                        .chain(q.candidates.iter().map(|&i| data[i]))
                        .collect();
                    let lse_all = log_sum_exp(vals.iter().copied());
                    let slot = |target: &NllTarget| match *target {
                        NllTarget::Epsilon => 0,
                        NllTarget::Candidate(k) => k + 1,
                    };
                    let lse_gold = log_sum_exp(q.targets.iter().map(|tg| vals[slot(tg)]));
                    for (k, &i) in q.candidates.iter().enumerate() {
                        ds.data_mut()[i] += gv * (vals[k + 1] - lse_all).exp();
                    }
                    for tg in &q.targets {
                        if let NllTarget::Candidate(k) = *tg {
                            ds.data_mut()[q.candidates[k]] -= gv * (vals[k + 1] - lse_gold).exp();
                        }
                    }
                }
                vec![(*scores, ds)]
            }
        })
    }
}
