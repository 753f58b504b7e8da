use crate::error::{Result, TensorError};
use crate::norm::{BatchNormMode, RunningStats, BATCH_NORM_EPS};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Maximum(Var, Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax { x: Var, exclude: Option<Vec<bool>> },
    Select { x: Var, index: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulScalar(a, b) | AddScalar(a, b) | Maximum(a, b) => vec![*a, *b],
            Scale(x, _) | AddConst(x) | Tanh(x) | Sigmoid(x) | Relu(x) | Exp(x) | Log(x)
            | Transpose(x) | Sum(x) | Mean(x) | Softmax(x) => vec![*x],
            SliceCols { x, .. } | SliceRows { x, .. } | LogSoftmax { x, .. } | Select { x, .. } => {
                vec![*x]
            }
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Arena of values plus the operations that produced them.
///
/// A recording tape keeps enough information to run [`Tape::backward`]. A
/// tape created with [`Tape::no_grad`] stores values only: every result is a
/// plain leaf and [`Tape::recorded_ops`] stays at zero.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims().map_err(|_| TensorError::NotMatrix {
        op,
        shape: t.shape().to_vec(),
    })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn scalar_check(op: &'static str, x: &Tensor, s: &Tensor) -> Result<()> {
    if s.len() != 1 {
        return Err(TensorError::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    Ok(())
}

/// Row-major `a[m×k] · b[k×n]`.
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
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates but never records.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (non-leaf) operations.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    /// Drops every value created after `len`. Only allowed on a
    /// non-recording tape, where no node can refer back to the dropped ones.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if self.recording {
            return Err(TensorError::NotRecording(
                "truncate is only valid on a no_grad tape",
            ));
        }
        self.nodes.truncate(len);
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a leaf; it is differentiable iff `t.requires_grad` and the
    /// tape records.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = self.recording && t.requires_grad;
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a parameter leaf tagged with its slot in a parameter list.
    pub fn param(&mut self, slot: usize, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad: self.recording,
            param: Some(slot),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad =
            self.recording && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same length");
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", at)?;
        let (k2, n) = matrix_dims("matmul", bt)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: at.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let data = matmul_raw(at.data(), bt.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b)))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(name, at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum. Ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// `x[m×n] + row[1×n]`, the row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xt, rt) = (self.value(x), self.value(row));
        let (m, n) = matrix_dims("add_row", xt)?;
        if rt.shape() != [1, n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: xt.shape().to_vec(),
                right: rt.shape().to_vec(),
            });
        }
        let r = rt.data();
        let mut data = xt.data().to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(d, b)| *d += b);
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    /// `x * s` for a `1 × 1` tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        scalar_check("mul_scalar", self.value(x), self.value(s))?;
        let sv = self.value(s).item();
        Ok(self.unary(x, |v| v * sv, Op::MulScalar(x, s)))
    }

    /// `x + s` for a `1 × 1` tensor `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        scalar_check("add_scalar", self.value(x), self.value(s))?;
        let sv = self.value(s).item();
        Ok(self.unary(x, |v| v + sv, Op::AddScalar(x, s)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (m, n) = matrix_dims("transpose", xt)?;
        let data = transpose_raw(xt.data(), m, n);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Transpose(x)))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let (m, n) = matrix_dims("slice_cols", xt)?;
        if start + len > n {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xt.data()[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols { x, start }))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let (m, n) = matrix_dims("slice_rows", xt)?;
        if start + len > m {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let data = xt.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::matrix(len, n, data)?, Op::SliceRows { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_cols", t)?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(m, total, data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_rows", t)?;
            if c != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Adds up a list of same-shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Row-wise softmax. Entries flagged in `exclude` get probability
    /// exactly 0 and take no part in the max shift or the normalizer.
    pub fn softmax_rows(&mut self, x: Var, exclude: Option<&[bool]>) -> Result<Var> {
        let xt = self.value(x);
        let (m, n) = matrix_dims("softmax_rows", xt)?;
        check_mask("softmax_rows", xt, exclude)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xt.data()[i * n..(i + 1) * n];
            let keep = |j: usize| exclude.is_none_or(|e| !e[i * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow {
                    op: "softmax_rows",
                    row: i,
                });
            }
            let mut z = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(x)))
    }

    /// Row-wise log-softmax. Excluded entries hold `-inf` and receive no
    /// gradient; select only unmasked entries from the result.
    pub fn log_softmax_rows(&mut self, x: Var, exclude: Option<&[bool]>) -> Result<Var> {
        let xt = self.value(x);
        let (m, n) = matrix_dims("log_softmax_rows", xt)?;
        check_mask("log_softmax_rows", xt, exclude)?;
        let mut out = vec![f64::NEG_INFINITY; m * n];
        for i in 0..m {
            let row = &xt.data()[i * n..(i + 1) * n];
            let keep = |j: usize| exclude.is_none_or(|e| !e[i * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow {
                    op: "log_softmax_rows",
                    row: i,
                });
            }
            let z: f64 = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            let lse = max + z.ln();
            for j in (0..n).filter(|&j| keep(j)) {
                out[i * n + j] = row[j] - lse;
            }
        }
        let exclude = exclude.map(<[bool]>::to_vec);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::LogSoftmax { x, exclude }))
    }

    /// Entry `(row, col)` as a `1 × 1` tensor.
    pub fn select(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let xt = self.value(x);
        let (m, n) = matrix_dims("select", xt)?;
        if row >= m || col >= n {
            return Err(TensorError::OutOfRange {
                op: "select",
                index: row * n + col,
                len: m * n,
            });
        }
        let index = row * n + col;
        let v = xt.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }))
    }

    /// Per-feature batch normalization of `x[b×d]` followed by
    /// `gamma[1×d]` scale and `beta[1×d]` shift.
    ///
    /// Train mode uses the batch mean and biased variance and folds the
    /// batch statistics into `running`; eval mode normalizes with `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: &mut RunningStats,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (b, d) = matrix_dims("batch_norm", xt)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    left: xt.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        if running.mean.len() != d || running.var.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: xt.shape().to_vec(),
                right: vec![running.mean.len()],
            });
        }
        let train = mode == BatchNormMode::Train;
        let (mean, var) = if train {
            if b < 2 {
                return Err(TensorError::BatchTooSmall { rows: b });
            }
            let mut mean = vec![0.0; d];
            for i in 0..b {
                for j in 0..d {
                    mean[j] += xt.data()[i * d + j];
                }
            }
            mean.iter_mut().for_each(|v| *v /= b as f64);
            let mut var = vec![0.0; d];
            for i in 0..b {
                for j in 0..d {
                    let c = xt.data()[i * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            let unbiased: Vec<f64> = var.iter().map(|v| v / (b - 1) as f64).collect();
            var.iter_mut().for_each(|v| *v /= b as f64);
            running.update(&mean, &unbiased);
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (xt.data()[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + bt[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok(self.push(Tensor::matrix(b, d, out)?, op))
    }

    /// Reverse pass from a scalar `loss`, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeded with `seed` instead of 1, i.e. the gradients of
    /// `seed * loss`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![seed]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|slot| (slot, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                acc(*a, &mut |da| {
                    // dA = G Bᵀ
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bt.data()[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    // dB = Aᵀ G
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = at.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gv)| *d += av * gv);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((x, gv), bv) in d.iter_mut().zip(g).zip(bt.data()) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gv), av) in d.iter_mut().zip(g).zip(at.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = out.cols();
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }),
            Op::AddConst(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::MulScalar(x, s) => {
                let sv = val(*s).item();
                let xt = val(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += sv * b));
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(xt.data()).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::AddScalar(x, s) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*s, &mut |d| d[0] += g.iter().sum::<f64>());
            }
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((a, gv), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *a += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((a, gv), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *a += gv * y * (1.0 - y);
                }
            }),
            Op::Relu(x) => {
                let xt = val(*x);
                acc(*x, &mut |d| {
                    for ((a, gv), xv) in d.iter_mut().zip(g).zip(xt.data()) {
                        if *xv > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((a, gv), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *a += gv * y;
                }
            }),
            Op::Log(x) => {
                let xt = val(*x);
                acc(*x, &mut |d| {
                    for ((a, gv), xv) in d.iter_mut().zip(g).zip(xt.data()) {
                        *a += gv / xv;
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        if at.data()[k] >= bt.data()[k] {
                            *x += g[k];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        if at.data()[k] < bt.data()[k] {
                            *x += g[k];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (out.rows(), out.cols());
                let gt = transpose_raw(g, m, n);
                acc(*x, &mut |d| add_into(d, &gt));
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (out.rows(), out.cols());
                let n = val(*x).cols();
                acc(*x, &mut |d| {
                    for r in 0..m {
                        add_into(&mut d[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                acc(*x, &mut |d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |d| {
                        for r in 0..m {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += scale));
            }
            Op::Softmax(x) => {
                let n = out.cols();
                acc(*x, &mut |d| {
                    for r in 0..out.rows() {
                        let y = &out.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, exclude } => {
                let n = out.cols();
                let keep = |k: usize| exclude.as_ref().is_none_or(|e| !e[k]);
                acc(*x, &mut |d| {
                    for r in 0..out.rows() {
                        let gsum: f64 = (r * n..(r + 1) * n).filter(|&k| keep(k)).map(|k| g[k]).sum();
                        for k in (r * n..(r + 1) * n).filter(|&k| keep(k)) {
                            d[k] += g[k] - out.data()[k].exp() * gsum;
                        }
                    }
                });
            }
            Op::Select { x, index } => acc(*x, &mut |d| d[*index] += g[0]),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (b, dim) = (out.rows(), out.cols());
                let gam = val(*gamma).data();
                acc(*gamma, &mut |d| {
                    for r in 0..b {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for chunk in g.chunks(dim) {
                        add_into(d, chunk);
                    }
                });
                acc(*x, &mut |d| {
                    if !*train {
                        for r in 0..b {
                            for j in 0..dim {
                                d[r * dim + j] += g[r * dim + j] * gam[j] * inv_std[j];
                            }
                        }
                        return;
                    }
                    let bf = b as f64;
                    for j in 0..dim {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for r in 0..b {
                            let dh = g[r * dim + j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * dim + j];
                        }
                        for r in 0..b {
                            let dh = g[r * dim + j] * gam[j];
                            d[r * dim + j] +=
                                inv_std[j] / bf * (bf * dh - sum_dh - xhat[r * dim + j] * sum_dh_h);
                        }
                    }
                });
            }
        }
    }
}

fn check_mask(op: &'static str, xt: &Tensor, exclude: Option<&[bool]>) -> Result<()> {
    if let Some(e) = exclude {
        if e.len() != xt.len() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: xt.shape().to_vec(),
                right: vec![e.len()],
            });
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// d(loss)/d(v), or `None` when `v` does not influence the loss or does
    /// not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(slot, gradient)` for every parameter leaf reached by the pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(slot, node)| self.grads[node].as_deref().map(|g| (slot, g)))
    }

    /// Adds every parameter gradient into `params[slot].grad`.
    pub fn accumulate_into(&self, params: &mut [Tensor]) -> Result<()> {
        for (slot, g) in self.param_grads() {
            let len = params.len();
            params
                .get_mut(slot)
                .ok_or(TensorError::OutOfRange {
                    op: "accumulate_into",
                    index: slot,
                    len,
                })?
                .accumulate_grad(g)?;
        }
        Ok(())
    }
}
