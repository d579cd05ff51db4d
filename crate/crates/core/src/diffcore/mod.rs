//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the insertion order is already
//! a topological order and the backward pass is a single reverse sweep.
//!
//! Shapes are row-major. Binary operations accept equal shapes or a
//! single-element operand that is broadcast; anything more general goes
//! through [`Graph::broadcast_to`]. Reductions act on the trailing axis.

mod fd;
pub mod special;

pub use fd::finite_difference;

use std::collections::HashMap;
use std::fmt;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to `{op}`: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {0} is not a marked input")]
    NotAnInput(usize),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Kernels understood by [`Graph::pairwise_kernel_mean`].
#[derive(Clone, Debug, PartialEq)]
pub enum PairKernel {
    /// `k(x, y) = -||x - y||`
    Energy,
    /// `k(x, y) = sum_i exp(-||x - y||^2 / (2 s_i^2))`
    GaussianMixture(Vec<f64>),
}

impl PairKernel {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            PairKernel::Energy => -d2.sqrt(),
            PairKernel::GaussianMixture(bw) => bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Abs(Var),
    Erf(Var),
    InvPhi(Var),
    LnGamma(Var),
    Softplus(Var),
    Sigmoid(Var),
    SumAll(Var),
    SumLast(Var),
    MeanLast(Var),
    VarLast(Var),
    NormLast(Var),
    SoftmaxLast(Var),
    GatherLast(Var, Vec<usize>),
    SortLast(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    BroadcastTo(Var),
    Reshape(Var),
    MatMul(Var, Var),
    PairwiseKernelMean(Var, Var, PairKernel),
    MapWithDerivative(Var, Vec<f64>),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Powf(..) => "powf",
            Op::Abs(_) => "abs",
            Op::Erf(_) => "erf",
            Op::InvPhi(_) => "inv_phi",
            Op::LnGamma(_) => "ln_gamma",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::SumAll(_) => "sum_all",
            Op::SumLast(_) => "sum_last",
            Op::MeanLast(_) => "mean_last",
            Op::VarLast(_) => "var_last",
            Op::NormLast(_) => "norm_last",
            Op::SoftmaxLast(_) => "softmax_last",
            Op::GatherLast(..) => "gather_last",
            Op::SortLast(..) => "sort_last",
            Op::ConcatLast(_) => "concat_last",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Reshape(_) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::PairwiseKernelMean(..) => "pairwise_kernel_mean",
            Op::MapWithDerivative(..) => "map_with_derivative",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of the requested inputs, keyed by node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        self.map.get(&v).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn into_map(self) -> HashMap<Var, Vec<f64>> {
        self.map
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&n) => (numel(&shape[..shape.len() - 1]), n),
        None => (1, 1),
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

    /// Total number of stored `f64` values across all nodes.
    pub fn stored_values(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn is_input(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Input)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite { op: op.tag() });
        }
        let requires_grad = match &op {
            Op::Input => true,
            Op::Constant => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::PairwiseKernelMean(a, b, _) => vec![*a, *b],
            Op::ConcatLast(xs) => xs.clone(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Powf(a, _)
            | Op::Abs(a)
            | Op::Erf(a)
            | Op::InvPhi(a)
            | Op::LnGamma(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::SumAll(a)
            | Op::SumLast(a)
            | Op::MeanLast(a)
            | Op::VarLast(a)
            | Op::NormLast(a)
            | Op::SoftmaxLast(a)
            | Op::GatherLast(a, _)
            | Op::SortLast(a, _)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::MapWithDerivative(a, _) => vec![*a],
        }
    }

    // ---- leaves ---------------------------------------------------------

    /// A leaf eligible for gradients.
    pub fn input(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        check_len("input", shape, &value)?;
        self.push(shape.to_vec(), value, Op::Input)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        check_len("constant", shape, &value)?;
        self.push(shape.to_vec(), value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Result<Var> {
        self.push(vec![], vec![x], Op::Constant)
    }

    // ---- elementwise binary --------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        tag: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (shape, value) = if na.shape == nb.shape {
            let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
            (na.shape.clone(), v)
        } else if nb.value.len() == 1 {
            let y = nb.value[0];
            (na.shape.clone(), na.value.iter().map(|&x| f(x, y)).collect())
        } else if na.value.len() == 1 {
            let x = na.value[0];
            (nb.shape.clone(), nb.value.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(DiffError::ShapeMismatch {
                op: tag,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    // ---- elementwise unary ---------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = &self.nodes[a.0];
        let shape = n.shape.clone();
        let value = n.value.iter().map(|&x| f(x)).collect();
        self.push(shape, value, op)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Addition of a constant.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn powf(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Powf(a, c), |x| x.powf(c))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn erf(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Erf(a), special::erf)
    }

    /// Inverse standard-normal CDF.
    pub fn inv_phi(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&p| p <= 0.0 || p >= 1.0) {
            return Err(DiffError::Invalid {
                op: "inv_phi",
                msg: "argument outside (0, 1)".into(),
            });
        }
        self.unary(a, Op::InvPhi(a), special::inv_phi)
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LnGamma(a), special::ln_gamma)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), special::softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), special::sigmoid)
    }

    /// Elementwise map whose forward values and local derivatives were
    /// computed by the caller. Lets samplers fuse expensive inner loops.
    pub fn map_with_derivative(&mut self, a: Var, value: Vec<f64>, derivative: Vec<f64>) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if value.len() != numel(&shape) || derivative.len() != value.len() {
            return Err(DiffError::Invalid {
                op: "map_with_derivative",
                msg: format!(
                    "expected {} values and derivatives, got {} and {}",
                    numel(&shape),
                    value.len(),
                    derivative.len()
                ),
            });
        }
        if derivative.iter().any(|d| !d.is_finite()) {
            return Err(DiffError::NonFinite {
                op: "map_with_derivative",
            });
        }
        self.push(shape, value, Op::MapWithDerivative(a, derivative))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![], vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    fn reduce_last(&mut self, a: Var, op: Op, min_len: usize, f: impl Fn(&[f64]) -> f64) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.is_empty() {
            return Err(DiffError::Invalid {
                op: op.tag(),
                msg: "cannot reduce a 0-d array".into(),
            });
        }
        let (rows, n) = split_last(&node.shape);
        if n < min_len {
            return Err(DiffError::Invalid {
                op: op.tag(),
                msg: format!("trailing axis has {n} entries, need at least {min_len}"),
            });
        }
        let shape = node.shape[..node.shape.len() - 1].to_vec();
        let value = (0..rows).map(|r| f(&node.value[r * n..(r + 1) * n])).collect();
        self.push(shape, value, op)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::SumLast(a), 1, |r| r.iter().sum())
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::MeanLast(a), 1, |r| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Sample variance with divisor `n - 1`.
    pub fn var_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::VarLast(a), 2, |r| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r.len() - 1) as f64
        })
    }

    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::NormLast(a), 1, |r| {
            r.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.is_empty() {
            return Err(DiffError::Invalid {
                op: "softmax_last",
                msg: "cannot apply to a 0-d array".into(),
            });
        }
        let (rows, n) = split_last(&node.shape);
        let mut value = node.value.clone();
        for r in 0..rows {
            special::softmax_in_place(&mut value[r * n..(r + 1) * n]);
        }
        let shape = node.shape.clone();
        self.push(shape, value, Op::SoftmaxLast(a))
    }

    // ---- indexing -------------------------------------------------------

    /// `out[..., j] = a[..., idx[j]]`; indices are constants.
    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let node = &self.nodes[a.0];
        let (rows, n) = split_last(&node.shape);
        if node.shape.is_empty() {
            return Err(DiffError::Invalid {
                op: "gather_last",
                msg: "cannot gather from a 0-d array".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DiffError::Invalid {
                op: "gather_last",
                msg: format!("index {bad} out of range for axis of length {n}"),
            });
        }
        let k = idx.len();
        let mut value = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &node.value[r * n..(r + 1) * n];
            value.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = node.shape.clone();
        *shape.last_mut().unwrap() = k;
        self.push(shape, value, Op::GatherLast(a, idx.to_vec()))
    }

    /// Sorts each trailing row ascending. The permutation is frozen at this
    /// point; gradients flow to the gathered source entries only.
    pub fn sort_last(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.is_empty() {
            return Err(DiffError::Invalid {
                op: "sort_last",
                msg: "cannot sort a 0-d array".into(),
            });
        }
        let (rows, n) = split_last(&node.shape);
        let mut perm = Vec::with_capacity(rows * n);
        let mut value = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &node.value[r * n..(r + 1) * n];
            let mut p: Vec<usize> = (0..n).collect();
            p.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            value.extend(p.iter().map(|&i| row[i]));
            perm.extend(p);
        }
        let shape = node.shape.clone();
        self.push(shape, value, Op::SortLast(a, perm))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(DiffError::Invalid {
            op: "concat_last",
            msg: "nothing to concatenate".into(),
        })?;
        let lead = self.nodes[first.0].shape.clone();
        if lead.is_empty() {
            return Err(DiffError::Invalid {
                op: "concat_last",
                msg: "cannot concatenate 0-d arrays; reshape to [1] first".into(),
            });
        }
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let s = &self.nodes[x.0].shape;
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (x, &w) in xs.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[x.0].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(shape, value, Op::ConcatLast(xs.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[a.0];
        if numel(shape) != node.value.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = node.value.clone();
        self.push(shape.to_vec(), value, Op::Reshape(a))
    }

    /// Right-aligned broadcasting: source axes of length 1 (or missing
    /// leading axes) are repeated to match `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.nodes[a.0].shape.clone();
        let map = broadcast_map(&src, shape).ok_or_else(|| DiffError::ShapeMismatch {
            op: "broadcast_to",
            lhs: src.clone(),
            rhs: shape.to_vec(),
        })?;
        let sv = &self.nodes[a.0].value;
        let value = map.iter().map(|&i| sv[i]).collect();
        self.push(shape.to_vec(), value, Op::BroadcastTo(a))
    }

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, n, k, m);
        self.push(vec![n, m], value, Op::MatMul(a, b))
    }

    /// `(1 / (n m)) * sum_{i,j} k(x_i, y_j)` for row sets `x: (n, d)` and
    /// `y: (m, d)`. Passing the same node twice gives the within-set mean.
    pub fn pairwise_kernel_mean(&mut self, x: Var, y: Var, kernel: PairKernel) -> Result<Var> {
        let (sx, sy) = (&self.nodes[x.0].shape, &self.nodes[y.0].shape);
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] || sx[0] == 0 || sy[0] == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "pairwise_kernel_mean",
                lhs: sx.clone(),
                rhs: sy.clone(),
            });
        }
        if let PairKernel::GaussianMixture(bw) = &kernel {
            if bw.is_empty() || bw.iter().any(|s| !(*s > 0.0)) {
                return Err(DiffError::Invalid {
                    op: "pairwise_kernel_mean",
                    msg: "gaussian mixture needs at least one positive bandwidth".into(),
                });
            }
        }
        let d = sx[1];
        let v = kernel_mean_value(&self.nodes[x.0].value, &self.nodes[y.0].value, d, &kernel);
        self.push(vec![], vec![v], Op::PairwiseKernelMean(x, y, kernel))
    }

    // ---- backward -------------------------------------------------------

    /// Adjoints of a scalar `output` with respect to each of `leaves`.
    /// Leaves with no path to the output receive zeros.
    pub fn gradient(&self, output: Var, leaves: &[Var]) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 || !out.shape.iter().all(|&d| d == 1) {
            return Err(DiffError::NonScalarOutput(out.shape.clone()));
        }
        for l in leaves {
            if !self.is_input(*l) {
                return Err(DiffError::NotAnInput(l.0));
            }
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        let mut map = HashMap::new();
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Input = node.op {
                if leaves.contains(&Var(i)) {
                    map.insert(Var(i), g);
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for l in leaves {
            map.entry(*l)
                .or_insert_with(|| vec![0.0; self.nodes[l.0].value.len()]);
        }
        Ok(Gradients { map })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum_bcast(*a, adj, g, |_, g| g);
                self.accum_bcast(*b, adj, g, |_, g| g);
            }
            Op::Sub(a, b) => {
                self.accum_bcast(*a, adj, g, |_, g| g);
                self.accum_bcast(*b, adj, g, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.wants(*a) {
                    self.accum_bcast(*a, adj, g, |k, g| g * pick(vb, k));
                }
                if self.wants(*b) {
                    self.accum_bcast(*b, adj, g, |k, g| g * pick(va, k));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.wants(*a) {
                    self.accum_bcast(*a, adj, g, |k, g| g / pick(vb, k));
                }
                if self.wants(*b) {
                    self.accum_bcast(*b, adj, g, |k, g| {
                        let d = pick(vb, k);
                        -g * pick(va, k) / (d * d)
                    });
                }
            }
            Op::Neg(a) => self.accum_map(*a, adj, g, |_, g| -g),
            Op::Scale(a, c) => self.accum_map(*a, adj, g, |_, g| g * c),
            Op::Shift(a) | Op::Reshape(a) => self.accum_map(*a, adj, g, |_, g| g),
            Op::Exp(a) => self.accum_map(*a, adj, g, |k, g| g * y[k]),
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                self.accum_map(*a, adj, g, |k, g| g / x[k])
            }
            Op::Sqrt(a) => self.accum_map(*a, adj, g, |k, g| if y[k] > 0.0 { g / (2.0 * y[k]) } else { 0.0 }),
            Op::Powf(a, c) => {
                let x = &self.nodes[a.0].value;
                self.accum_map(*a, adj, g, |k, g| g * c * x[k].powf(c - 1.0))
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value;
                self.accum_map(*a, adj, g, |k, g| g * sign0(x[k]))
            }
            Op::Erf(a) => {
                let x = &self.nodes[a.0].value;
                let c = 2.0 / std::f64::consts::PI.sqrt();
                self.accum_map(*a, adj, g, |k, g| g * c * (-x[k] * x[k]).exp())
            }
            Op::InvPhi(a) => {
                let c = (2.0 * std::f64::consts::PI).sqrt();
                self.accum_map(*a, adj, g, |k, g| g * c * (0.5 * y[k] * y[k]).exp())
            }
            Op::LnGamma(a) => {
                let x = &self.nodes[a.0].value;
                self.accum_map(*a, adj, g, |k, g| g * special::digamma(x[k]))
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                self.accum_map(*a, adj, g, |k, g| g * special::sigmoid(x[k]))
            }
            Op::Sigmoid(a) => self.accum_map(*a, adj, g, |k, g| g * y[k] * (1.0 - y[k])),
            Op::MapWithDerivative(a, d) => self.accum_map(*a, adj, g, |k, g| g * d[k]),
            Op::SumAll(a) => self.accum_map(*a, adj, g, |_, _| g[0]),
            Op::SumLast(a) | Op::MeanLast(a) => {
                let (_, n) = split_last(&self.nodes[a.0].shape);
                let c = if matches!(node.op, Op::MeanLast(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                self.accum_map(*a, adj, g, |k, _| g[k / n] * c)
            }
            Op::VarLast(a) => {
                let x = &self.nodes[a.0].value;
                let (rows, n) = split_last(&self.nodes[a.0].shape);
                let means: Vec<f64> = (0..rows)
                    .map(|r| x[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                let c = 2.0 / (n - 1) as f64;
                self.accum_map(*a, adj, g, |k, _| g[k / n] * c * (x[k] - means[k / n]))
            }
            Op::NormLast(a) => {
                let x = &self.nodes[a.0].value;
                let (_, n) = split_last(&self.nodes[a.0].shape);
                self.accum_map(*a, adj, g, |k, _| {
                    let nr = y[k / n];
                    if nr > 0.0 {
                        g[k / n] * x[k] / nr
                    } else {
                        0.0
                    }
                })
            }
            Op::SoftmaxLast(a) => {
                let (rows, n) = split_last(&node.shape);
                let mut dots = vec![0.0; rows];
                for r in 0..rows {
                    dots[r] = (r * n..(r + 1) * n).map(|k| g[k] * y[k]).sum();
                }
                self.accum_map(*a, adj, g, |k, g| y[k] * (g - dots[k / n]))
            }
            Op::GatherLast(a, idx) => {
                if !self.wants(*a) {
                    return;
                }
                let (rows, n) = split_last(&self.nodes[a.0].shape);
                let m = idx.len();
                let dst = slot(adj, *a, rows * n);
                for r in 0..rows {
                    for (j, &src) in idx.iter().enumerate() {
                        dst[r * n + src] += g[r * m + j];
                    }
                }
            }
            Op::SortLast(a, perm) => {
                if !self.wants(*a) {
                    return;
                }
                let (rows, n) = split_last(&self.nodes[a.0].shape);
                let dst = slot(adj, *a, rows * n);
                for r in 0..rows {
                    for j in 0..n {
                        dst[r * n + perm[r * n + j]] += g[r * n + j];
                    }
                }
            }
            Op::ConcatLast(xs) => {
                let rows = numel(&node.shape[..node.shape.len() - 1]);
                let total = *node.shape.last().unwrap();
                let mut offset = 0;
                for x in xs {
                    let w = *self.nodes[x.0].shape.last().unwrap();
                    if self.wants(*x) {
                        let dst = slot(adj, *x, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dst[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::BroadcastTo(a) => {
                if !self.wants(*a) {
                    return;
                }
                let src = &self.nodes[a.0].shape;
                let map = broadcast_map(src, &node.shape).expect("validated at construction");
                let dst = slot(adj, *a, numel(src));
                for (k, &s) in map.iter().enumerate() {
                    dst[s] += g[k];
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    // dA = G B^T
                    let vb = &self.nodes[b.0].value;
                    let dst = slot(adj, *a, n * k);
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * vb[p * m + j];
                            }
                            dst[i * k + p] += s;
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = A^T G
                    let va = &self.nodes[a.0].value;
                    let dst = slot(adj, *b, k * m);
                    for i in 0..n {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                dst[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                }
            }
            Op::PairwiseKernelMean(x, yv, kernel) => {
                let d = self.nodes[x.0].shape[1];
                let (vx, vy) = (&self.nodes[x.0].value, &self.nodes[yv.0].value);
                let (gx, gy) = kernel_mean_grad(vx, vy, d, kernel);
                if self.wants(*x) {
                    let dst = slot(adj, *x, vx.len());
                    for (t, s) in dst.iter_mut().zip(&gx) {
                        *t += g[0] * s;
                    }
                }
                if self.wants(*yv) {
                    let dst = slot(adj, *yv, vy.len());
                    for (t, s) in dst.iter_mut().zip(&gy) {
                        *t += g[0] * s;
                    }
                }
            }
        }
    }

    /// Accumulate into a parent of identical shape.
    fn accum_map(&self, a: Var, adj: &mut [Option<Vec<f64>>], g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.wants(a) {
            return;
        }
        let n = self.nodes[a.0].value.len();
        let dst = slot(adj, a, n);
        if n == g.len() {
            for (k, (t, &gk)) in dst.iter_mut().zip(g).enumerate() {
                *t += f(k, gk);
            }
        } else {
            // reductions: parent is larger than the output
            for (k, t) in dst.iter_mut().enumerate() {
                *t += f(k, 0.0);
            }
        }
    }

    /// Accumulate into a binary-op parent that may have been broadcast.
    fn accum_bcast(&self, a: Var, adj: &mut [Option<Vec<f64>>], g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.wants(a) {
            return;
        }
        let n = self.nodes[a.0].value.len();
        let dst = slot(adj, a, n);
        if n == g.len() {
            for (k, (t, &gk)) in dst.iter_mut().zip(g).enumerate() {
                *t += f(k, gk);
            }
        } else {
            dst[0] += g.iter().enumerate().map(|(k, &gk)| f(k, gk)).sum::<f64>();
        }
    }
}

/// Value of a possibly broadcast scalar operand at output position `k`.
#[inline]
fn pick(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], a: Var, n: usize) -> &mut Vec<f64> {
    adj[a.0].get_or_insert_with(|| vec![0.0; n])
}

fn check_len(op: &'static str, shape: &[usize], value: &[f64]) -> Result<()> {
    if numel(shape) != value.len() {
        return Err(DiffError::Invalid {
            op,
            msg: format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                value.len()
            ),
        });
    }
    Ok(())
}

/// For each output position of `dst`, the flat source index it reads.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let pad = dst.len() - src.len();
    let mut src_full = vec![1usize; pad];
    src_full.extend_from_slice(src);
    for (s, d) in src_full.iter().zip(dst) {
        if *s != *d && *s != 1 {
            return None;
        }
    }
    // source strides, zeroed on broadcast axes
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for ax in (0..dst.len()).rev() {
        strides[ax] = if src_full[ax] == 1 { 0 } else { acc };
        acc *= src_full[ax];
    }
    let total = numel(dst);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(out)
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn kernel_mean_value(x: &[f64], y: &[f64], d: usize, kernel: &PairKernel) -> f64 {
    let (n, m) = (x.len() / d, y.len() / d);
    if d == 1 && *kernel == PairKernel::Energy {
        return -special::sum_abs_diff(x, y) / (n * m) as f64;
    }
    let mut s = 0.0;
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..m {
            s += kernel.eval(xi, &y[j * d..(j + 1) * d]);
        }
    }
    s / (n * m) as f64
}

/// Gradients of the pairwise kernel mean with respect to both row sets.
/// When `x` and `y` are the same node the caller accumulates both.
fn kernel_mean_grad(x: &[f64], y: &[f64], d: usize, kernel: &PairKernel) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (x.len() / d, y.len() / d);
    let c = 1.0 / (n * m) as f64;
    if d == 1 && *kernel == PairKernel::Energy {
        // d/dx_i of -sum_j |x_i - y_j| = -(#{y < x_i} - #{y > x_i})
        let gx = special::sign_balance(x, y).into_iter().map(|s| -s * c).collect();
        let gy = special::sign_balance(y, x).into_iter().map(|s| -s * c).collect();
        return (gx, gy);
    }
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..m {
            let yj = &y[j * d..(j + 1) * d];
            let d2: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            // dk/dx_i = w * (x_i - y_j), dk/dy_j = -w * (x_i - y_j)
            let w = match kernel {
                PairKernel::Energy => {
                    if d2 > 0.0 {
                        -1.0 / d2.sqrt()
                    } else {
                        0.0
                    }
                }
                PairKernel::GaussianMixture(bw) => {
                    bw.iter().map(|s| -(-d2 / (2.0 * s * s)).exp() / (s * s)).sum()
                }
            };
            if w == 0.0 {
                continue;
            }
            for t in 0..d {
                let diff = xi[t] - yj[t];
                gx[i * d + t] += c * w * diff;
                gy[j * d + t] -= c * w * diff;
            }
        }
    }
    (gx, gy)
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}
