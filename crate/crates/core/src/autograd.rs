//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every forward operation in creation order, which is
//! already a topological order, so [`Tape::backward`] is a single reverse
//! sweep. Tapes are cheap and meant to be rebuilt for every training step.
//!
//! ```
//! use distvl_core::autograd::Tape;
//! use distvl_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::cell::{Ref, RefCell};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { a: Var, rstd: Vec<f64> },
    RowNormalize { a: Var, floor: f64, sums: Vec<f64> },
    Concat(Vec<(Var, usize)>),
    Slice { a: Var, start: usize, len: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    IndexRows { a: Var, idx: Vec<usize> },
    GatherLast { a: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records forward operations for a later backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `rhs` broadcasts onto `lhs` when it is a scalar or a trailing suffix.
fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    let n: usize = rhs.iter().product();
    n == 1 || (rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x);
    (y, dy)
}

/// `c (+)= op(a) * op(b)` for row-major blocks; transposition is expressed
/// through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // op(a) is m x k, op(b) is k x n.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover m*k, k*n and m*n elements and the strides
    // address exactly those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn unary(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(Var) -> Op,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        check_finite(name, out.data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, op(a), rg))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if !broadcasts(ta.shape(), tb.shape()) {
                return Err(mismatch(name, ta.shape(), tb.shape()));
            }
            let (da, db) = (ta.data(), tb.data());
            let nb = db.len();
            let data: Vec<f64> = if nb == da.len() {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            } else {
                da.chunks(nb)
                    .flat_map(|chunk| chunk.iter().zip(db).map(|(&x, &y)| f(x, y)))
                    .collect()
            };
            Tensor::new(ta.shape().to_vec(), data)?
        };
        check_finite(name, out.data())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op(a, b), rg))
    }

    /// Elementwise sum; `b` may be a scalar or a trailing-suffix shape.
    /// A smaller left operand is swapped to the right.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_for_broadcast(a, b);
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_for_broadcast(a, b);
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn order_for_broadcast(&self, a: Var, b: Var) -> (Var, Var) {
        let nodes = self.nodes.borrow();
        if nodes[a.0].value.numel() < nodes[b.0].value.numel() {
            (b, a)
        } else {
            (a, b)
        }
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, |a| Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", a, |x| gelu(x).0, Op::Gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let c = t.last_dim();
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(c) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        check_finite("softmax_rows", out.data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let c = t.last_dim();
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(c) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        check_finite("log_softmax_rows", out.data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmaxRows(a), rg))
    }

    /// Normalizes every row (last axis) to zero mean and unit variance.
    /// No affine transform is applied.
    pub fn layer_norm(&self, a: Var) -> Result<Var> {
        let (out, rstd) = {
            let t = self.value(a);
            let c = t.last_dim();
            let mut data = t.data().to_vec();
            let mut rstd = Vec::with_capacity(t.rows());
            for row in data.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * r);
                rstd.push(r);
            }
            (Tensor::new(t.shape().to_vec(), data)?, rstd)
        };
        check_finite("layer_norm", out.data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LayerNorm { a, rstd }, rg))
    }

    /// Divides each non-negative row by its sum, with the denominator
    /// floored at `floor`. Rows that sum to exactly zero become uniform.
    pub fn row_normalize(&self, a: Var, floor: f64) -> Result<Var> {
        let (out, sums) = {
            let t = self.value(a);
            let c = t.last_dim();
            let mut data = t.data().to_vec();
            let mut sums = Vec::with_capacity(t.rows());
            for row in data.chunks_mut(c) {
                let s: f64 = row.iter().sum();
                if s == 0.0 {
                    row.fill(1.0 / c as f64);
                } else {
                    let d = s.max(floor);
                    row.iter_mut().for_each(|v| *v /= d);
                }
                sums.push(s);
            }
            (Tensor::new(t.shape().to_vec(), data)?, sums)
        };
        check_finite("row_normalize", out.data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RowNormalize { a, floor, sums }, rg))
    }

    /// Matrix product over the last two axes. Leading axes are batch axes and
    /// must agree, unless `b` is 2-D, in which case it is shared.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, op) = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(mismatch("matmul", sa, sb));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let shared_rhs = sb.len() == 2;
            if k != k2 || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
                return Err(mismatch("matmul", sa, sb));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let mut data = vec![0.0; batch * m * n];
            if shared_rhs {
                gemm(batch * m, k, n, ta.data(), false, tb.data(), false, &mut data, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ta.data()[i * m * k..],
                        false,
                        &tb.data()[i * k * n..],
                        false,
                        &mut data[i * m * n..],
                        false,
                    );
                }
            }
            let op = Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            };
            (Tensor::new(shape, data)?, op)
        };
        check_finite("matmul", out.data())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let s = t.shape();
            if s.len() < 2 {
                return Err(mismatch("transpose", s, &[]));
            }
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let mut shape = s.to_vec();
            let l = shape.len();
            shape.swap(l - 2, l - 1);
            let mut data = vec![0.0; t.numel()];
            for (src, dst) in t.data().chunks(r * c).zip(data.chunks_mut(r * c)) {
                for i in 0..r {
                    for j in 0..c {
                        dst[j * r + i] = src[i * c + j];
                    }
                }
            }
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (out, widths) = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape();
            let lead = &first[..first.len() - 1];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                if &s[..s.len() - 1] != lead {
                    return Err(mismatch("concat_last", first, s));
                }
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::new(shape, data)?, widths)
        };
        let rg = self.rg(parts);
        let op = Op::Concat(parts.iter().copied().zip(widths).collect());
        Ok(self.push(out, op, rg))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let c = t.last_dim();
            if len == 0 || start + len > c {
                return Err(mismatch("slice_last", t.shape(), &[start, len]));
            }
            let data: Vec<f64> = t
                .data()
                .chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice { a, start, len }, rg))
    }

    /// Splits the last axis into `parts` equal contiguous chunks.
    pub fn split_last(&self, a: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.value(a).last_dim();
        if parts == 0 || c % parts != 0 {
            return Err(mismatch("split", &self.shape(a), &[parts]));
        }
        let w = c / parts;
        (0..parts).map(|i| self.slice_last(a, i * w, w)).collect()
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self, a: Var) -> Result<Var> {
        let m = {
            let t = self.value(a);
            t.data().iter().sum::<f64>() / t.numel() as f64
        };
        check_finite("mean", &[m])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Sums out the last axis.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let c = t.last_dim();
            let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
            let mut shape = t.shape()[..t.shape().len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, data)?
        };
        check_finite("sum_last", out.data())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumLast(a), rg))
    }

    /// Gathers rows (last-axis vectors) by index into a `[idx.len(), C]` tensor.
    pub fn index_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let c = t.last_dim();
            let rows = t.rows();
            if idx.is_empty() {
                return Err(Error::InvalidArgument("index_rows with no indices".into()));
            }
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= rows {
                    return Err(mismatch("index_rows", t.shape(), &[i]));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), c], data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::IndexRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks element `idx[r]` from each row `r`; result shape `[rows]`.
    pub fn gather_last(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let c = t.last_dim();
            if idx.len() != t.rows() || idx.iter().any(|&i| i >= c) {
                return Err(mismatch("gather_last", t.shape(), &[idx.len()]));
            }
            let data = idx.iter().enumerate().map(|(r, &i)| t.row(r)[i]).collect();
            Tensor::new(vec![idx.len()], data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::GatherLast {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of every reachable differentiable leaf with
    /// d(root)/d(leaf), adding to gradients left by earlier calls.
    pub fn backward(&self, root: Var) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let rnode = &nodes[root.0];
            if rnode.value.numel() != 1 {
                return Err(Error::NonScalarRoot(rnode.value.shape().to_vec()));
            }
            if !rnode.requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
            grads[root.0] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=root.0).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                } else {
                    propagate(&nodes, &mut grads, node, &g);
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Adds into the gradient slot of `v` when it requires a gradient.
fn acc<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (da, db) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                if *shared_rhs {
                    gemm(batch * m, n, k, g, false, db, true, ga, true);
                } else {
                    for i in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &db[i * k * n..],
                            true,
                            &mut ga[i * m * k..],
                            true,
                        );
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                if *shared_rhs {
                    gemm(k, batch * m, n, da, true, g, false, gb, true);
                } else {
                    for i in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            &da[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut gb[i * k * n..],
                            true,
                        );
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let nb = gb.len();
                for (i, y) in g.iter().enumerate() {
                    gb[i % nb] += sign * y;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let nb = vb.len();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, y) in g.iter().enumerate() {
                    ga[i] += y * vb[i % nb];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, y) in g.iter().enumerate() {
                    gb[i % nb] += y * va[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
        }
        Op::Log(a) => {
            let va = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / va[i];
                }
            }
        }
        Op::Relu(a) => {
            let va = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    if va[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
        }
        Op::Gelu(a) => {
            let va = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu(va[i]).1;
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let c = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let c = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            let c = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, *a) {
                let rows = g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c));
                for (((gr, xr), dr), r) in rows.zip(rstd) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgx = gr.iter().zip(xr).map(|(x, y)| x * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dr[j] += r * (gr[j] - mg - xr[j] * mgx);
                    }
                }
            }
        }
        Op::RowNormalize { a, floor, sums } => {
            let c = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, *a) {
                let rows = g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c));
                for (((gr, yr), dr), &s) in rows.zip(sums) {
                    if s == 0.0 {
                        continue;
                    }
                    if s >= *floor {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            dr[j] += (gr[j] - dot) / s;
                        }
                    } else {
                        for j in 0..c {
                            dr[j] += gr[j] / floor;
                        }
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(gp) = acc(nodes, grads, p) {
                    for (r, row) in g.chunks(total).enumerate() {
                        for j in 0..w {
                            gp[r * w + j] += row[offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Slice { a, start, len } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let c = nodes[a.0].value.last_dim();
                for (r, row) in g.chunks(*len).enumerate() {
                    for j in 0..*len {
                        ga[r * c + start + j] += row[j];
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                for (src, dst) in g.chunks(r * c).zip(ga.chunks_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += src[j * r + i];
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumLast(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let c = nodes[a.0].value.last_dim();
                for (row, y) in ga.chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|x| *x += y);
                }
            }
        }
        Op::IndexRows { a, idx } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let c = node.value.last_dim();
                for (row, &i) in g.chunks(c).zip(idx) {
                    for j in 0..c {
                        ga[i * c + j] += row[j];
                    }
                }
            }
        }
        Op::GatherLast { a, idx } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let c = nodes[a.0].value.last_dim();
                for (r, (&i, y)) in idx.iter().zip(g).enumerate() {
                    ga[r * c + i] += y;
                }
            }
        }
    }
}
