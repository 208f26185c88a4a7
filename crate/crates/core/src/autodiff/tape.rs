//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! the backward sweep is a single reverse scan.
//!
//! Set `STOIC_NAN_CHECK=1` to scan every op output for NaN/Inf; the first
//! offending op is reported by [`Tape::backward`] and [`Tape::nan_report`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the vector returned by [`Tape::gradients`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    PairSum(Var, Var, usize),
    RepeatRows(Var, usize),
    GroupMean(Var, usize),
    StraightThrough(Var),
    ScaleSym(Var, Var),
    AddEye(Var),
    BernoulliKl(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Powf(..) => "powf",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::PairSum(..) => "pair_sum",
            Op::RepeatRows(..) => "repeat_rows",
            Op::GroupMean(..) => "group_mean",
            Op::StraightThrough(_) => "straight_through",
            Op::ScaleSym(..) => "scale_sym",
            Op::AddEye(_) => "add_eye",
            Op::BernoulliKl(..) => "bernoulli_kl",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
    nan_check: bool,
    nan_report: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Whether `STOIC_NAN_CHECK` requests per-op NaN scanning.
pub fn nan_check_from_env() -> bool {
    std::env::var("STOIC_NAN_CHECK").is_ok_and(|v| !v.is_empty() && v != "0")
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_nan_check(nan_check_from_env())
    }

    pub fn with_nan_check(nan_check: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
            nan_check,
            nan_report: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First op whose output contained NaN/Inf, when scanning is enabled.
    pub fn nan_report(&self) -> Option<&str> {
        self.nan_report.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        assert!(!self.consumed, "tape reused after backward");
        if self.nan_check && self.nan_report.is_none() && !value.all_finite() {
            self.nan_report = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data).expect("same shape"), op)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bn, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bn * n * m];
        let (da, db) = (self.val(a), self.val(b));
        for i in 0..bn {
            gemm(
                n,
                k,
                m,
                &da[i * n * k..(i + 1) * n * k],
                false,
                &db[i * k * m..(i + 1) * k * m],
                false,
                &mut out[i * n * m..(i + 1) * n * m],
                0.0,
            );
        }
        let t = Tensor::new(vec![bn, n, m], out)?;
        Ok(self.push(t, Op::BatchMatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// Adds a length-`c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.val(row);
        let mut data = self.val(a).to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row)))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, col: Var, a: Var) -> Result<Var> {
        let (rows, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(col).len() != rows {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * {:?}", self.shape(col), self.shape(a)),
            ));
        }
        let s = self.val(col).to_vec();
        let data = self
            .val(a)
            .chunks(c)
            .zip(&s)
            .flat_map(|(chunk, &k)| chunk.iter().map(move |x| x * k))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulCol(col, a)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + k)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    /// Clamp into `[lo, hi]`; zero gradient where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).len().max(1) as f64;
        let s = self.val(a).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let c = self.value(a).cols();
        let data: Vec<f64> = self.val(a).chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape(a).to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        self.push(Tensor::new(shape, data).expect("row_sum"), Op::RowSum(a))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p)[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, c) = (self.value(a).rows(), self.value(a).cols());
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} > {c} columns"),
            ));
        }
        let data = self
            .val(a)
            .chunks(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::shape("slice_rows", format!("{start}+{len} of {s:?}")));
        }
        let c = s[1];
        let data = self.val(a)[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let c = self.value(a).cols();
        let mut data = self.val(a).to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data).expect("softmax"), Op::SoftmaxRows(a))
    }

    /// Swaps the last two axes (2-D or batched 3-D).
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = transpose_last2(self.value(a))?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// For `p`, `q` of shape `[B*n, d]`, returns `[B*n*n, d]` with row
    /// `(b, i, j)` equal to `p[b*n + i] + q[b*n + j]`.
    pub fn pair_sum(&mut self, p: Var, q: Var, n: usize) -> Result<Var> {
        self.same_shape("pair_sum", p, q)?;
        let (rows, d) = (self.value(p).rows(), self.value(p).cols());
        if n == 0 || rows % n != 0 {
            return Err(Error::shape("pair_sum", format!("{rows} rows not divisible by {n}")));
        }
        let groups = rows / n;
        let (pv, qv) = (self.val(p), self.val(q));
        let mut data = Vec::with_capacity(groups * n * n * d);
        for b in 0..groups {
            for i in 0..n {
                let pi = &pv[(b * n + i) * d..(b * n + i + 1) * d];
                for j in 0..n {
                    let qj = &qv[(b * n + j) * d..(b * n + j + 1) * d];
                    data.extend(pi.iter().zip(qj).map(|(x, y)| x + y));
                }
            }
        }
        let t = Tensor::new(vec![groups * n * n, d], data)?;
        Ok(self.push(t, Op::PairSum(p, q, n)))
    }

    /// `[B, d] -> [B*n, d]`, each row repeated `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let d = self.value(a).cols();
        let data: Vec<f64> = self
            .val(a)
            .chunks(d)
            .flat_map(|r| std::iter::repeat_n(r, n).flatten().copied())
            .collect();
        let rows = data.len() / d.max(1);
        self.push(
            Tensor::new(vec![rows, d], data).expect("repeat_rows"),
            Op::RepeatRows(a, n),
        )
    }

    /// `[B*n, d] -> [B, d]`, mean over each consecutive group of `n` rows.
    pub fn group_mean(&mut self, a: Var, n: usize) -> Result<Var> {
        let (rows, d) = (self.value(a).rows(), self.value(a).cols());
        if n == 0 || rows % n != 0 {
            return Err(Error::shape("group_mean", format!("{rows} rows not divisible by {n}")));
        }
        let groups = rows / n;
        let v = self.val(a);
        let mut data = vec![0.0; groups * d];
        for b in 0..groups {
            for i in 0..n {
                let r = &v[(b * n + i) * d..(b * n + i + 1) * d];
                for (acc, x) in data[b * d..(b + 1) * d].iter_mut().zip(r) {
                    *acc += x;
                }
            }
        }
        data.iter_mut().for_each(|x| *x /= n as f64);
        Ok(self.push(Tensor::new(vec![groups, d], data)?, Op::GroupMean(a, n)))
    }

    /// Forward value `1{a > 0.5}`, gradient passed through unchanged.
    pub fn straight_through(&mut self, a: Var) -> Var {
        self.unary(a, Op::StraightThrough(a), |x| if x > 0.5 { 1.0 } else { 0.0 })
    }

    /// For `m: [B, n, n]` and `d: [B, n, 1]`, returns `m[b,i,j] * d[b,i] * d[b,j]`.
    pub fn scale_sym(&mut self, m: Var, d: Var) -> Result<Var> {
        let (sm, sd) = (self.shape(m).to_vec(), self.shape(d).to_vec());
        if sm.len() != 3 || sm[1] != sm[2] || sd != [sm[0], sm[1], 1] {
            return Err(Error::shape("scale_sym", format!("{sm:?} with {sd:?}")));
        }
        let (bn, n) = (sm[0], sm[1]);
        let (mv, dv) = (self.val(m), self.val(d));
        let mut data = vec![0.0; bn * n * n];
        for b in 0..bn {
            for i in 0..n {
                for j in 0..n {
                    let o = (b * n + i) * n + j;
                    data[o] = mv[o] * dv[b * n + i] * dv[b * n + j];
                }
            }
        }
        Ok(self.push(Tensor::new(sm, data)?, Op::ScaleSym(m, d)))
    }

    /// Adds the identity to each trailing square matrix.
    pub fn add_eye(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let k = s.len();
        if k < 2 || s[k - 1] != s[k - 2] {
            return Err(Error::shape("add_eye", format!("{s:?}")));
        }
        let n = s[k - 1];
        let mut data = self.val(a).to_vec();
        for block in data.chunks_mut(n * n) {
            for i in 0..n {
                block[i * n + i] += 1.0;
            }
        }
        Ok(self.push(Tensor::new(s, data)?, Op::AddEye(a)))
    }

    /// Elementwise KL(Bernoulli(sigmoid(x)) || Bernoulli(p)).
    pub fn bernoulli_kl(&mut self, logits: Var, p: f64) -> Var {
        self.unary(logits, Op::BernoulliKl(logits, p), |x| bernoulli_kl(x, p))
    }

    /// Writes `d loss / d param` into `store` for every parameter on the tape,
    /// then frees the recorded intermediates.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.sweep(loss, false)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
        self.nodes.clear();
        self.params.clear();
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None where unreachable).
    /// Consumes the tape's one backward pass but keeps values readable.
    pub fn gradients(&mut self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        self.sweep(loss, true)
    }

    /// Reverse sweep; without `keep_all` only leaf and parameter gradients
    /// survive, which keeps peak memory near the size of the tape.
    fn sweep(&mut self, loss: Var, keep_all: bool) -> Result<Vec<Option<Vec<f64>>>> {
        if self.consumed {
            return Err(Error::Tape("backward already called on this tape".into()));
        }
        if let Some(op) = &self.nan_report {
            return Err(Error::NonFinite { op: op.clone() });
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if keep_all || matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let len = |v: Var| nodes[v.0].value.len();
        let v = |x: Var| nodes[x.0].value.data();
        macro_rules! slot {
            ($x:expr) => {{
                let n = len($x);
                grads[$x.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        macro_rules! elementwise {
            ($a:expr, |$k:ident| $d:expr) => {{
                let dst = slot!($a);
                for $k in 0..g.len() {
                    dst[$k] += g[$k] * $d;
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G B^T, dB = A^T G
                gemm(m, n, k, g, false, v(*b), true, slot!(*a), 1.0);
                gemm(k, m, n, v(*a), true, g, false, slot!(*b), 1.0);
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bn, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
                {
                    let bv = v(*b);
                    let da = slot!(*a);
                    for t in 0..bn {
                        gemm(
                            n,
                            m,
                            k,
                            &g[t * n * m..(t + 1) * n * m],
                            false,
                            &bv[t * k * m..(t + 1) * k * m],
                            true,
                            &mut da[t * n * k..(t + 1) * n * k],
                            1.0,
                        );
                    }
                }
                let av = v(*a);
                let db = slot!(*b);
                for t in 0..bn {
                    gemm(
                        k,
                        n,
                        m,
                        &av[t * n * k..(t + 1) * n * k],
                        true,
                        &g[t * n * m..(t + 1) * n * m],
                        false,
                        &mut db[t * k * m..(t + 1) * k * m],
                        1.0,
                    );
                }
            }
            Op::Add(a, b) => {
                elementwise!(*a, |k| 1.0);
                elementwise!(*b, |k| 1.0);
            }
            Op::Sub(a, b) => {
                elementwise!(*a, |k| 1.0);
                elementwise!(*b, |k| -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                elementwise!(*a, |k| bv[k]);
                elementwise!(*b, |k| av[k]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                elementwise!(*a, |k| 1.0 / bv[k]);
                elementwise!(*b, |k| -av[k] / (bv[k] * bv[k]));
            }
            Op::AddRow(a, row) => {
                elementwise!(*a, |k| 1.0);
                let c = len(*row);
                let dst = slot!(*row);
                for chunk in g.chunks(c) {
                    for (d, x) in dst.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
            }
            Op::MulCol(col, a) => {
                let c = nodes[a.0].value.cols();
                let (cv, av) = (v(*col), v(*a));
                {
                    let da = slot!(*a);
                    for (r, (dst, gr)) in da.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for (d, x) in dst.iter_mut().zip(gr) {
                            *d += x * cv[r];
                        }
                    }
                }
                let dc = slot!(*col);
                for (r, (ar, gr)) in av.chunks(c).zip(g.chunks(c)).enumerate() {
                    dc[r] += ar.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::Scale(a, s) => elementwise!(*a, |k| *s),
            Op::Shift(a) => elementwise!(*a, |k| 1.0),
            Op::Tanh(a) => elementwise!(*a, |k| 1.0 - out[k] * out[k]),
            Op::Sigmoid(a) => elementwise!(*a, |k| out[k] * (1.0 - out[k])),
            Op::Relu(a) => {
                let av = v(*a);
                elementwise!(*a, |k| if av[k] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Exp(a) => elementwise!(*a, |k| out[k]),
            Op::Ln(a) => {
                let av = v(*a);
                elementwise!(*a, |k| 1.0 / av[k])
            }
            Op::Softplus(a) => {
                let av = v(*a);
                elementwise!(*a, |k| sigmoid(av[k]))
            }
            Op::Square(a) => {
                let av = v(*a);
                elementwise!(*a, |k| 2.0 * av[k])
            }
            Op::Powf(a, p) => {
                let av = v(*a);
                elementwise!(*a, |k| p * av[k].powf(p - 1.0))
            }
            Op::Clamp(a, lo, hi) => {
                let av = v(*a);
                elementwise!(*a, |k| if av[k] < *lo || av[k] > *hi { 0.0 } else { 1.0 })
            }
            Op::Sum(a) => {
                let dst = slot!(*a);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = len(*a) as f64;
                let dst = slot!(*a);
                dst.iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::RowSum(a) => {
                let c = nodes[a.0].value.cols();
                let dst = slot!(*a);
                for (r, chunk) in dst.chunks_mut(c).enumerate() {
                    chunk.iter_mut().for_each(|d| *d += g[r]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    let dst = slot!(p);
                    for (r, chunk) in dst.chunks_mut(w).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        for (d, x) in chunk.iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = nodes[a.0].value.cols();
                let w = node.value.cols();
                let dst = slot!(*a);
                for (r, chunk) in dst.chunks_mut(c).enumerate() {
                    for (d, x) in chunk[*start..start + w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *d += x;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                let dst = slot!(*a);
                for (d, x) in dst[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let dst = slot!(*a);
                for ((d, y), gr) in dst.chunks_mut(c).zip(out.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        d[k] += y[k] * (gr[k] - dot);
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                let back = transpose_last2(&gt).expect("transpose");
                let dst = slot!(*a);
                for (d, x) in dst.iter_mut().zip(back.data()) {
                    *d += x;
                }
            }
            Op::Reshape(a) => elementwise!(*a, |k| 1.0),
            Op::PairSum(p, q, n) => {
                let n = *n;
                let d = node.value.cols();
                let groups = len(*p) / (n * d);
                {
                    let dp = slot!(*p);
                    for b in 0..groups {
                        for i in 0..n {
                            let dst = &mut dp[(b * n + i) * d..(b * n + i + 1) * d];
                            for j in 0..n {
                                let r = (b * n + i) * n + j;
                                for (x, y) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                let dq = slot!(*q);
                for b in 0..groups {
                    for i in 0..n {
                        for j in 0..n {
                            let r = (b * n + i) * n + j;
                            let dst = &mut dq[(b * n + j) * d..(b * n + j + 1) * d];
                            for (x, y) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::RepeatRows(a, n) => {
                let d = node.value.cols();
                let dst = slot!(*a);
                for (r, chunk) in g.chunks(d).enumerate() {
                    let src = r / n;
                    for (x, y) in dst[src * d..(src + 1) * d].iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
            Op::GroupMean(a, n) => {
                let d = node.value.cols();
                let inv = 1.0 / *n as f64;
                let dst = slot!(*a);
                for (r, chunk) in dst.chunks_mut(d).enumerate() {
                    let b = r / n;
                    for (x, y) in chunk.iter_mut().zip(&g[b * d..(b + 1) * d]) {
                        *x += y * inv;
                    }
                }
            }
            Op::StraightThrough(a) => elementwise!(*a, |k| 1.0),
            Op::ScaleSym(m, dvar) => {
                let s = node.value.shape();
                let (bn, n) = (s[0], s[1]);
                let (mv, dv) = (v(*m), v(*dvar));
                {
                    let dm = slot!(*m);
                    for b in 0..bn {
                        for i in 0..n {
                            for j in 0..n {
                                let o = (b * n + i) * n + j;
                                dm[o] += g[o] * dv[b * n + i] * dv[b * n + j];
                            }
                        }
                    }
                }
                let dd = slot!(*dvar);
                for b in 0..bn {
                    for i in 0..n {
                        for j in 0..n {
                            let o = (b * n + i) * n + j;
                            let w = g[o] * mv[o];
                            dd[b * n + i] += w * dv[b * n + j];
                            dd[b * n + j] += w * dv[b * n + i];
                        }
                    }
                }
            }
            Op::AddEye(a) => elementwise!(*a, |k| 1.0),
            Op::BernoulliKl(a, p) => {
                let av = v(*a);
                let lp = (p / (1.0 - p)).ln();
                elementwise!(*a, |k| {
                    let t = sigmoid(av[k]);
                    t * (1.0 - t) * (av[k] - lp)
                })
            }
        }
    }
}

fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let k = s.len();
    if k < 2 {
        return Err(Error::shape("transpose", format!("{s:?}")));
    }
    let (r, c) = (s[k - 2], s[k - 1]);
    let mut out = vec![0.0; t.len()];
    for (src, dst) in t.data().chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(k - 2, k - 1);
    Tensor::new(shape, out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// KL(Bernoulli(sigmoid(x)) || Bernoulli(p)), evaluated through log-sigmoids
/// so saturated logits stay finite.
pub fn bernoulli_kl(x: f64, p: f64) -> f64 {
    let theta = sigmoid(x);
    let log_theta = -softplus(-x);
    let log_one_minus = -softplus(x);
    theta * (log_theta - p.ln()) + (1.0 - theta) * (log_one_minus - (1.0 - p).ln())
}
