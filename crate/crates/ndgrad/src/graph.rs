//! Dynamic tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is a valid topological order and
//! [`Graph::backward`] is a single reverse sweep. Ops whose inputs do not
//! require gradients are stored as constants and skipped by the sweep.

use std::borrow::Cow;

use crate::error::{NdError, Result};
use crate::kernels::{self, MatRef};
use crate::tensor::{dims2, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Pick { input: Var, idx: Vec<usize> },
    Transpose(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
}

struct Node<'a> {
    op: Op,
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
}

/// Append-only operation tape. Leaves may borrow parameter storage for `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NdError {
    NdError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `len`. Only valid for inference-style
    /// use where no surviving node refers to the dropped ones.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node_op(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, shape, Cow::Owned(value), rg)
    }

    /// Leaf that borrows `t`'s storage; differentiable iff `t.requires_grad()`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), Cow::Borrowed(t.data()), t.requires_grad())
    }

    /// Borrowed leaf with an explicit gradient flag.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), Cow::Borrowed(t.data()), requires_grad)
    }

    /// Owned leaf; differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, Cow::Owned(t.into_data()), rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(t))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![1], Cow::Owned(vec![value]), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec()).unwrap()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value: Vec<f64> = self.value(x).iter().map(|&a| f(a)).collect();
        let shape = self.shape(x).to_vec();
        self.node_op(op, shape, value, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------------

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, MatRef::rows(self.value(a), k), MatRef::rows(self.value(b), n), &mut out, false);
        Ok(self.node_op(Op::MatMul(a, b), vec![m, n], out, &[a, b]))
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, MatRef::rows(self.value(a), k), MatRef::transposed(self.value(b), k), &mut out, false);
        Ok(self.node_op(Op::MatMulNt(a, b), vec![m, n], out, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.node_op(Op::Add(a, b), shape, out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.node_op(Op::Sub(a, b), shape, out, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.node_op(Op::Mul(a, b), shape, out, &[a, b]))
    }

    /// Adds a length-`n` vector to every row of `a[m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self.value(a).chunks_exact(n).flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.node_op(Op::AddRow(a, bias), shape, out, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Shift(a))
    }

    /// Adds a non-differentiable tensor of the same shape (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("add_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.node_op(Op::Shift(a), shape, out, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `max(0, x)`; subgradient 0 at the kink.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::log_sigmoid, Op::LogSigmoid(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = self.dims(a);
        let mut out = vec![0.0; self.value(a).len()];
        kernels::softmax_rows(self.value(a), c, &mut out);
        let shape = self.shape(a).to_vec();
        self.node_op(Op::Softmax(a), shape, out, &[a])
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, c) = self.dims(a);
        let mut out = vec![0.0; self.value(a).len()];
        kernels::log_softmax_rows(self.value(a), c, &mut out);
        let shape = self.shape(a).to_vec();
        self.node_op(Op::LogSoftmax(a), shape, out, &[a])
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        kernels::layer_norm_rows(self.value(x), c, self.value(gamma), self.value(beta), eps, &mut out, &mut xhat, &mut inv_std);
        let shape = self.shape(x).to_vec();
        Ok(self.node_op(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            shape,
            out,
            &[x, gamma, beta],
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.node_op(Op::Sum(a), vec![1], vec![s], &[a])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.node_op(Op::Mean(a), vec![1], vec![s], &[a])
    }

    /// Per-row sums of `a[m, n]`, shape `[m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks_exact(c).map(|row| row.iter().sum()).collect();
        self.node_op(Op::SumCols(a), vec![r, 1], out, &[a])
    }

    /// Column means of `a[m, n]`, shape `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks_exact(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        self.node_op(Op::MeanRows(a), vec![1, c], out, &[a])
    }

    /// Concatenates 2-D operands along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(NdError::InvalidArgument {
                op: "concat",
                msg: format!("need at least one input and axis 0 or 1 (got axis {axis})"),
            });
        }
        let dims: Vec<(usize, usize)> = inputs.iter().map(|&v| self.dims(v)).collect();
        let (r0, c0) = dims[0];
        let (shape, out) = if axis == 0 {
            if let Some(i) = dims.iter().position(|d| d.1 != c0) {
                return Err(shape_err("concat", self.shape(inputs[0]), self.shape(inputs[i])));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let out = inputs.iter().flat_map(|&v| self.value(v).iter().copied()).collect();
            (vec![rows, c0], out)
        } else {
            if let Some(i) = dims.iter().position(|d| d.0 != r0) {
                return Err(shape_err("concat", self.shape(inputs[0]), self.shape(inputs[i])));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&v, &(_, c)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(v)[i * c..(i + 1) * c]);
                }
            }
            (vec![r0, cols], out)
        };
        Ok(self.node_op(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
            inputs,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(NdError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {:?}", start + len, self.shape(a)),
            });
        }
        let v = self.value(a);
        let (shape, out) = if axis == 0 {
            (vec![len, c], v[start * c..(start + len) * c].to_vec())
        } else {
            let out = v.chunks_exact(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
            (vec![r, len], out)
        };
        Ok(self.node_op(Op::Slice { input: a, axis, start }, shape, out, &[a]))
    }

    /// Gathers rows of `table[V, d]`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(NdError::InvalidArgument {
                op: "embedding",
                msg: "empty id list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NdError::InvalidArgument {
                op: "embedding",
                msg: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.node_op(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            &[table],
        ))
    }

    /// Picks `a[i, idx[i]]` from every row, shape `[m]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(NdError::InvalidArgument {
                op: "pick",
                msg: format!("{} indices for shape {:?}", idx.len(), self.shape(a)),
            });
        }
        let v = self.value(a);
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        Ok(self.node_op(Op::Pick { input: a, idx: idx.to_vec() }, vec![r], out, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.node_op(Op::Transpose(a), vec![c, r], out, &[a])
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (_, c) = self.dims(a);
        let v = self.value(a);
        let norms: Vec<f64> = v.chunks_exact(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)).collect();
        let out = v.chunks_exact(c).zip(&norms).flat_map(|(r, &n)| r.iter().map(move |x| x / n)).collect();
        let shape = self.shape(a).to_vec();
        self.node_op(Op::L2Normalize { input: a, norms }, shape, out, &[a])
    }

    /// Same value, no gradient flow (stop-gradient).
    pub fn detach(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).to_vec();
        self.push(Op::Leaf, shape, Cow::Owned(value), false)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Gradients of every differentiable
    /// node reachable from `root` are available through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape.iter().product::<usize>() != 1 {
            return Err(NdError::NonScalarRoot(shape.to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf);
}

fn propagate(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: &Var| -> &[f64] { &nodes[v.0].value };
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let dims = |v: &Var| dims2(&nodes[v.0].shape);
    let out_shape = &nodes[i].shape;
    let y: &[f64] = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims(a);
            let n = out_shape[1];
            if rg(a) {
                acc(nodes, grads, *a, |ga| kernels::gemm(m, n, k, MatRef::rows(g, n), MatRef::transposed(val(b), n), ga, true));
            }
            if rg(b) {
                acc(nodes, grads, *b, |gb| kernels::gemm(k, m, n, MatRef::transposed(val(a), k), MatRef::rows(g, n), gb, true));
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = dims(a);
            let n = out_shape[1];
            if rg(a) {
                acc(nodes, grads, *a, |ga| kernels::gemm(m, n, k, MatRef::rows(g, n), MatRef::rows(val(b), k), ga, true));
            }
            if rg(b) {
                acc(nodes, grads, *b, |gb| kernels::gemm(n, m, k, MatRef::transposed(g, n), MatRef::rows(val(a), k), gb, true));
            }
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |ga| add_into(ga, g));
            acc(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |ga| add_into(ga, g));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Op::Mul(a, b) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).zip(val(b)).for_each(|((d, s), y)| *d += s * y));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(g).zip(val(a)).for_each(|((d, s), x)| *d += s * x));
        }
        Op::AddRow(a, bias) => {
            let n = val(bias).len();
            acc(nodes, grads, *a, |ga| add_into(ga, g));
            acc(nodes, grads, *bias, |gb| {
                for row in g.chunks_exact(n) {
                    add_into(gb, row);
                }
            });
        }
        Op::Scale(a, s) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)),
        Op::Shift(a) => acc(nodes, grads, *a, |ga| add_into(ga, g)),
        Op::Relu(a) => acc(nodes, grads, *a, |ga| {
            for ((d, s), &v) in ga.iter_mut().zip(g).zip(val(a)) {
                if v > 0.0 {
                    *d += s;
                }
            }
        }),
        Op::Tanh(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).zip(y).for_each(|((d, s), t)| *d += s * (1.0 - t * t))),
        Op::Exp(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).zip(y).for_each(|((d, s), e)| *d += s * e)),
        Op::Log(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).zip(val(a)).for_each(|((d, s), v)| *d += s / v)),
        Op::Square(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).zip(val(a)).for_each(|((d, s), v)| *d += 2.0 * s * v)),
        Op::Sigmoid(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().zip(g).zip(y).for_each(|((d, s), p)| *d += s * p * (1.0 - p))),
        Op::LogSigmoid(a) => acc(nodes, grads, *a, |ga| {
            ga.iter_mut().zip(g).zip(val(a)).for_each(|((d, s), &v)| *d += s * kernels::sigmoid(-v))
        }),
        Op::Softmax(a) => {
            let (_, c) = dims2(out_shape);
            acc(nodes, grads, *a, |ga| {
                for ((gr, yr), dr) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(s, p)| s * p).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let (_, c) = dims2(out_shape);
            acc(nodes, grads, *a, |ga| {
                for ((gr, yr), dr) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (_, c) = dims2(out_shape);
            acc(nodes, grads, *gamma, |gg| {
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    gg.iter_mut().zip(gr).zip(hr).for_each(|((d, s), h)| *d += s * h);
                }
            });
            acc(nodes, grads, *beta, |gb| {
                for gr in g.chunks_exact(c) {
                    add_into(gb, gr);
                }
            });
            let gam = val(gamma);
            acc(nodes, grads, *x, |gx| {
                let n = c as f64;
                let mut dh = vec![0.0; c];
                for (r, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                    dh.iter_mut().zip(gr).zip(gam).for_each(|((d, s), w)| *d = s * w);
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hr).map(|(d, h)| d * h).sum();
                    let is = inv_std[r];
                    let dr = &mut gx[r * c..(r + 1) * c];
                    for j in 0..c {
                        dr[j] += is / n * (n * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            });
        }
        Op::Sum(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => {
            let s = g[0] / val(a).len() as f64;
            acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d += s));
        }
        Op::SumCols(a) => {
            let (_, c) = dims(a);
            acc(nodes, grads, *a, |ga| {
                for (dr, s) in ga.chunks_exact_mut(c).zip(g) {
                    dr.iter_mut().for_each(|d| *d += s);
                }
            });
        }
        Op::MeanRows(a) => {
            let (r, c) = dims(a);
            let inv = 1.0 / r as f64;
            acc(nodes, grads, *a, |ga| {
                for dr in ga.chunks_exact_mut(c) {
                    dr.iter_mut().zip(g).for_each(|(d, s)| *d += s * inv);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let total_cols = out_shape[1];
            let mut offset = 0;
            for v in inputs {
                let (r, c) = dims(v);
                let off = offset;
                if *axis == 0 {
                    acc(nodes, grads, *v, |gv| add_into(gv, &g[off * total_cols..(off + r) * total_cols]));
                    offset += r;
                } else {
                    acc(nodes, grads, *v, |gv| {
                        for i in 0..r {
                            add_into(&mut gv[i * c..(i + 1) * c], &g[i * total_cols + off..i * total_cols + off + c]);
                        }
                    });
                    offset += c;
                }
            }
        }
        Op::Slice { input, axis, start } => {
            let (_, c) = dims(input);
            let start = *start;
            if *axis == 0 {
                acc(nodes, grads, *input, |gv| add_into(&mut gv[start * c..start * c + g.len()], g));
            } else {
                let len = out_shape[1];
                acc(nodes, grads, *input, |gv| {
                    for (dr, gr) in gv.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut dr[start..start + len], gr);
                    }
                });
            }
        }
        Op::Embedding { table, ids } => {
            let (_, d) = dims(table);
            acc(nodes, grads, *table, |gt| {
                for (gr, &id) in g.chunks_exact(d).zip(ids) {
                    add_into(&mut gt[id * d..(id + 1) * d], gr);
                }
            });
        }
        Op::Pick { input, idx } => {
            let (_, c) = dims(input);
            acc(nodes, grads, *input, |gv| {
                for (r, (&j, s)) in idx.iter().zip(g).enumerate() {
                    gv[r * c + j] += s;
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = dims(a);
            acc(nodes, grads, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::L2Normalize { input, norms } => {
            let (_, c) = dims2(out_shape);
            acc(nodes, grads, *input, |ga| {
                for (r, ((gr, yr), dr)) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(ga.chunks_exact_mut(c)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(s, p)| s * p).sum();
                    for j in 0..c {
                        dr[j] += (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.input(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_data = [1.5, -2.0, 0.25, 3.0, 4.0, -1.0, 0.0, 7.0, 2.0];
        let a = g.input(t(&[3, 3], &a_data));
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y), &a_data);
    }

    #[test]
    fn hinge_clamps() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[-2.0]));
        let y = g.hinge(x);
        assert_eq!(g.item(y), 0.0);
    }

    #[test]
    fn square_grad() {
        let x = t(&[1], &[3.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.mul(xv, xv).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_grad() {
        let x = t(&[4], &[0.3, -1.2, 2.0, 0.7]).with_grad();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let s = g.softmax(xv);
        let y = g.sum(s);
        g.backward(y).unwrap();
        assert!(g.grad(xv).unwrap().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.tanh(xv);
        assert!(matches!(g.backward(y), Err(NdError::NonScalarRoot(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[0.0; 6]));
        let b = g.input(t(&[2, 3], &[0.0; 6]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NdError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.exp(a);
        assert!(!g.requires_grad(b));
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = t(&[1], &[2.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let d = g.detach(xv);
        let y = g.mul(xv, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0]);
    }

    #[test]
    fn truncate_drops_tail() {
        let mut g = Graph::new();
        let a = g.input(t(&[1], &[1.0]));
        let mark = g.len();
        let _ = g.exp(a);
        g.truncate(mark);
        assert_eq!(g.len(), 1);
    }
}
