//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! one node holding its value; [`Graph::backward`] walks the tape in exact
//! reverse order and accumulates gradients into leaves created with
//! [`Graph::leaf`]. Broadcasting is limited to scalar-vs-tensor; every other
//! promotion goes through an explicit op ([`Graph::expand_rows`],
//! [`Graph::reshape`]).

use crate::error::{contract, Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows.len() × cols` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for an empty shape).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.last_dim() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(xs)`; `-inf` when every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Row-wise softmax over the last axis. `-inf` entries map to exactly 0.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.last_dim();
    let mut out = t.data.clone();
    for (r, row) in out.chunks_mut(c.max(1)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { op: "softmax", row: r });
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor {
        shape: t.shape.clone(),
        data: out,
    })
}

fn log_softmax_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.last_dim();
    let mut out = t.data.clone();
    for (r, row) in out.chunks_mut(c.max(1)).enumerate() {
        let lse = logsumexp(row);
        if lse == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow {
                op: "log_softmax",
                row: r,
            });
        }
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(Tensor {
        shape: t.shape.clone(),
        data: out,
    })
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MaxLast(Var, Vec<usize>),
    Index(Var, usize),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ExpandRows(Var),
    Reshape(Var),
    PickPerRow(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowCosine {
        a: Var,
        b: Var,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    /// Scalar whose gradient w.r.t. `input` was computed during the forward pass.
    ScalarFn { input: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape == b.shape {
        Ok(Bcast::Same)
    } else if a.numel() == 1 {
        Ok(Bcast::LhsScalar)
    } else if b.numel() == 1 {
        Ok(Bcast::RhsScalar)
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn binary_map(a: &Tensor, b: &Tensor, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match mode {
        Bcast::Same => Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        },
        Bcast::LhsScalar => {
            let x = a.data[0];
            Tensor {
                shape: b.shape.clone(),
                data: b.data.iter().map(|&y| f(x, y)).collect(),
            }
        }
        Bcast::RhsScalar => {
            let y = b.data[0];
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&x| f(x, y)).collect(),
            }
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Trainable input; `backward` accumulates into its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let mode = broadcast("add", x, y)?;
        let value = binary_map(x, y, mode, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let mode = broadcast("sub", x, y)?;
        let value = binary_map(x, y, mode, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let mode = broadcast("mul", x, y)?;
        let value = binary_map(x, y, mode, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let mode = broadcast("div", x, y)?;
        if y.data.contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let value = binary_map(x, y, mode, |p, q| p / q);
        Ok(self.push(value, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * c).collect(),
        };
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v + c).collect(),
        };
        self.push(value, Op::AddConst(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v.exp()).collect(),
        };
        self.push(value, Op::Exp(a), &[a])
    }

    /// Natural log; non-positive entries are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v.ln()).collect(),
        };
        Ok(self.push(value, Op::Log(a), &[a]))
    }

    /// Log-space variant of [`Graph::log`]: zeros map to `-inf` and carry no gradient.
    pub fn log_or_neg_inf(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data.iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("negative argument {bad}"),
            });
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x
                .data
                .iter()
                .map(|&v| if v == 0.0 { f64::NEG_INFINITY } else { v.ln() })
                .collect(),
        };
        Ok(self.push(value, Op::Log(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(value, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis; `-inf` entries act as mask sentinels.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = log_softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.data.iter().sum::<f64>() / x.numel() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Maximum over the last axis. The gradient goes to the first maximal entry.
    pub fn max_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let mut arg = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.rows());
        for row in x.data.chunks(c) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let value = Tensor::vector(out);
        self.push(value, Op::MaxLast(a, arg), &[a])
    }

    /// Single element by flat index, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let x = self.value(a);
        if i >= x.numel() {
            return Err(contract(format!(
                "index {i} out of range for shape {:?}",
                x.shape
            )));
        }
        let value = Tensor::scalar(x.data[i]);
        Ok(self.push(value, Op::Index(a, i), &[a]))
    }

    /// Selects rows of a matrix (embedding lookup, single-row access).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(contract(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
        }
        let value = Tensor {
            shape: vec![rows.len(), c],
            data,
        };
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather_rows(a, &[i])
    }

    /// Stacks equally sized inputs as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("stack_rows needs at least one input"))?;
        let c = self.value(*first).numel();
        let mut data = Vec::with_capacity(parts.len() * c);
        for p in parts {
            let x = self.value(*p);
            if x.numel() != c {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    lhs: self.value(*first).shape.clone(),
                    rhs: x.shape.clone(),
                });
            }
            data.extend_from_slice(&x.data);
        }
        let value = Tensor {
            shape: vec![parts.len(), c],
            data,
        };
        Ok(self.push(value, Op::StackRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat_cols needs at least one input"))?;
        let (r, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let x = self.value(*p);
            let (pr, pc) = x.dims2("concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape.clone(),
                    rhs: x.shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor {
            shape: vec![r, total],
            data,
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(contract(format!("column range {start}..{end} invalid for {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&x.data[i * c + start..i * c + end]);
        }
        let value = Tensor {
            shape: vec![r, w],
            data,
        };
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    /// Repeats a vector (any shape, read flat) as `rows` identical rows.
    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Var {
        let x = self.value(a);
        let c = x.numel();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&x.data);
        }
        let value = Tensor {
            shape: vec![rows, c],
            data,
        };
        self.push(value, Op::ExpandRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// One entry per row: `out[i] = a[i, cols[i]]`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2("pick_per_row")?;
        if cols.len() != r {
            return Err(Error::Dimension {
                op: "pick_per_row",
                lhs: x.shape.clone(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(contract(format!("column {bad} out of range for {c}")));
        }
        let value = Tensor::vector(cols.iter().enumerate().map(|(i, &j)| x.data[i * c + j]).collect());
        Ok(self.push(value, Op::PickPerRow(a, cols.to_vec()), &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let rows = xv.rows();
        let mut normalized = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data.chunks(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mu) * is;
                normalized.push(n);
                out.push(n * g.data[j] + b.data[j]);
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data: out,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Cosine similarity between corresponding rows of two `N×d` matrices.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("row_cosine", x, y)?;
        x.dims2("row_cosine")?;
        let c = x.last_dim();
        let rows = x.rows();
        let mut norm_a = Vec::with_capacity(rows);
        let mut norm_b = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let (ra, rb) = (&x.data[i * c..(i + 1) * c], &y.data[i * c..(i + 1) * c]);
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na <= 1e-12 {
                return Err(Error::DegenerateVector { which: "lhs", row: i });
            }
            if nb <= 1e-12 {
                return Err(Error::DegenerateVector { which: "rhs", row: i });
            }
            let dot: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
            out.push(dot / (na * nb));
            norm_a.push(na);
            norm_b.push(nb);
        }
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::RowCosine { a, b, norm_a, norm_b }, &[a, b]))
    }

    /// Appends a scalar node whose value and gradient w.r.t. `input` were
    /// computed outside the tape (e.g. by a dynamic-programming recursion).
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::Dimension {
                op: "scalar_fn",
                lhs: self.value(input).shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, grad }, &[input]))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape.clone(),
                            data: g,
                        })
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape[0], av.shape[1]);
                let nn = bv.shape[1];
                acc(*a, &mut |s| gemm_nt(g, &bv.data, s, m, nn, k));
                acc(*b, &mut |s| gemm_tn(&av.data, g, s, k, m, nn));
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[1], out.shape[0]);
                acc(*a, &mut |s| {
                    for p in 0..r {
                        for q in 0..c {
                            s[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (an, bn) = (self.value(*a).numel(), self.value(*b).numel());
                acc(*a, &mut |s| reduce_into(s, g, an, 1.0));
                acc(*b, &mut |s| reduce_into(s, g, bn, sign));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| product_grad(s, g, bv));
                acc(*b, &mut |s| product_grad(s, g, av));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, &mut |s| {
                    if s.len() == 1 && g.len() > 1 {
                        s[0] += g.iter().enumerate().map(|(j, gj)| gj / at(bv, j)).sum::<f64>();
                    } else {
                        s.iter_mut().enumerate().for_each(|(j, sj)| *sj += g[j] / at(bv, j));
                    }
                });
                acc(*b, &mut |s| {
                    // d(a/b)/db = -out / b
                    let term = |j: usize| -g[j] * out.data[j] / at(bv, j);
                    if s.len() == 1 && g.len() > 1 {
                        s[0] += (0..g.len()).map(term).sum::<f64>();
                    } else {
                        s.iter_mut().enumerate().for_each(|(j, sj)| *sj += term(j));
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi);
            }),
            Op::AddConst(a) | Op::Reshape(a) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for ((x, gi), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *x += gi * y * (1.0 - y);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |s| {
                for ((x, gi), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *x += gi * y;
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(&av.data) {
                        if *v > 0.0 {
                            *x += gi / v;
                        }
                    }
                })
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(&av.data) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let c = out.last_dim();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((x, gi), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gi - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = out.last_dim();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for ((x, gi), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += gi - y.exp() * total;
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::MaxLast(a, arg) => {
                let c = self.value(*a).last_dim();
                acc(*a, &mut |s| {
                    for (r, &j) in arg.iter().enumerate() {
                        s[r * c + j] += g[r];
                    }
                })
            }
            Op::Index(a, idx) => acc(*a, &mut |s| s[*idx] += g[0]),
            Op::GatherRows(a, rows) => {
                let c = out.last_dim();
                acc(*a, &mut |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            s[r * c + j] += g[k * c + j];
                        }
                    }
                })
            }
            Op::StackRows(parts) => {
                let c = out.last_dim();
                for (k, p) in parts.iter().enumerate() {
                    acc(*p, &mut |s| {
                        s.iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(x, gi)| *x += gi);
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    acc(*p, &mut |s| {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).last_dim();
                let w = out.last_dim();
                acc(*a, &mut |s| {
                    for r in 0..out.rows() {
                        for j in 0..w {
                            s[r * c + start + j] += g[r * w + j];
                        }
                    }
                })
            }
            Op::ExpandRows(a) => {
                let c = out.last_dim();
                acc(*a, &mut |s| {
                    for grow in g.chunks(c) {
                        s.iter_mut().zip(grow).for_each(|(x, gi)| *x += gi);
                    }
                })
            }
            Op::PickPerRow(a, cols) => {
                let c = self.value(*a).last_dim();
                acc(*a, &mut |s| {
                    for (r, &j) in cols.iter().enumerate() {
                        s[r * c + j] += g[r];
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let c = out.last_dim();
                let gv = self.value(*gamma);
                acc(*x, &mut |s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let nrow = &normalized[r * c..(r + 1) * c];
                        let dn: Vec<f64> = grow.iter().zip(&gv.data).map(|(p, q)| p * q).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            s[r * c + j] +=
                                is / c as f64 * (c as f64 * dn[j] - sum_dn - nrow[j] * sum_dn_n);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (grow, nrow) in g.chunks(c).zip(normalized.chunks(c)) {
                        for j in 0..c {
                            s[j] += grow[j] * nrow[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for grow in g.chunks(c) {
                        s.iter_mut().zip(grow).for_each(|(x, gi)| *x += gi);
                    }
                });
            }
            Op::RowCosine { a, b, norm_a, norm_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.last_dim();
                let cosine_grad = |s: &mut [f64], own: &Tensor, other: &Tensor, own_n: &[f64], other_n: &[f64]| {
                    for r in 0..own_n.len() {
                        let cos = out.data[r];
                        let (na, nb) = (own_n[r], other_n[r]);
                        for j in 0..c {
                            let d = other.data[r * c + j] / (na * nb) - cos * own.data[r * c + j] / (na * na);
                            s[r * c + j] += g[r] * d;
                        }
                    }
                };
                acc(*a, &mut |s| cosine_grad(s, av, bv, norm_a, norm_b));
                acc(*b, &mut |s| cosine_grad(s, bv, av, norm_b, norm_a));
            }
            Op::ScalarFn { input, grad } => acc(*input, &mut |s| {
                s.iter_mut().zip(grad).for_each(|(x, d)| *x += g[0] * d);
            }),
        }
    }
}

fn at(t: &Tensor, j: usize) -> f64 {
    if t.numel() == 1 {
        t.data[0]
    } else {
        t.data[j]
    }
}

/// Adds `sign * g` into `s`, summing everything when `s` is a broadcast scalar.
fn reduce_into(s: &mut [f64], g: &[f64], numel: usize, sign: f64) {
    if numel == 1 && g.len() > 1 {
        s[0] += sign * g.iter().sum::<f64>();
    } else {
        s.iter_mut().zip(g).for_each(|(x, gi)| *x += sign * gi);
    }
}

fn product_grad(s: &mut [f64], g: &[f64], other: &Tensor) {
    if s.len() == 1 && g.len() > 1 {
        s[0] += g.iter().enumerate().map(|(j, gj)| gj * at(other, j)).sum::<f64>();
    } else {
        s.iter_mut()
            .enumerate()
            .for_each(|(j, x)| *x += g[j] * at(other, j));
    }
}
