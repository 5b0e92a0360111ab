//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Nodes are
//! appended after their inputs, so the tape is topologically ordered by
//! construction and `backward` walks it once, back to front. A fresh tape is
//! built for every forward pass; nothing is reused between passes.
//!
//! Gradients accumulate into leaf tensors. Calling `backward` twice on the
//! same loss without [`Tape::zero_grads`] doubles every leaf gradient.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{validate_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Position-wise nonlinearity used in the feed-forward blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    #[default]
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph; see the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes (trailing alignment). Returns the
/// output shape and, for each operand, its strides expressed over the output
/// dimensions (0 where the operand is broadcast).
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let nd = a.len().max(b.len());
    let sa = row_major_strides(a);
    let sb = row_major_strides(b);
    let mut out = vec![0; nd];
    let mut a_str = vec![0; nd];
    let mut b_str = vec![0; nd];
    for d in 0..nd {
        let da = (d + a.len()).checked_sub(nd).map(|i| (a[i], sa[i]));
        let db = (d + b.len()).checked_sub(nd).map(|i| (b[i], sb[i]));
        let (na, ta) = da.unwrap_or((1, 0));
        let (nb, tb) = db.unwrap_or((1, 0));
        out[d] = match (na, nb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
        a_str[d] = if na == 1 { 0 } else { ta };
        b_str[d] = if nb == 1 { 0 } else { tb };
    }
    Some((out, a_str, b_str))
}

/// Walks every multi-index of `shape` in row-major order, calling
/// `f(flat, ia, ib)` with the operand offsets given by the two stride sets.
fn for_each_strided2(
    shape: &[usize],
    a_str: &[usize],
    b_str: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let len: usize = shape.iter().product();
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..len {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += a_str[d];
            ib += b_str[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= a_str[d] * shape[d];
            ib -= b_str[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[n×r] += a[n×k] · b[k×r]` (or `b[r×k]ᵀ` when `transpose_b`).
fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, r: usize, tb: bool) {
    if tb {
        for i in 0..n {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..r {
                let br = &b[j * k..(j + 1) * k];
                c[i * r + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    } else {
        for i in 0..n {
            let cr = &mut c[i * r..(i + 1) * r];
            for kk in 0..k {
                let av = a[i * k + kk];
                let br = &b[kk * r..(kk + 1) * r];
                for (cv, bv) in cr.iter_mut().zip(br) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Gradient of the matmul kernel with respect to both operands.
#[allow(clippy::too_many_arguments)]
fn matmul_kernel_backward(
    g: &[f64],
    a: &[f64],
    b: &[f64],
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
    n: usize,
    k: usize,
    r: usize,
    tb: bool,
) {
    if let Some(ga) = ga {
        for i in 0..n {
            let gr = &g[i * r..(i + 1) * r];
            let gar = &mut ga[i * k..(i + 1) * k];
            if tb {
                // b is r×k: ga[i,:] += Σ_j g[i,j]·b[j,:]
                for (j, &gv) in gr.iter().enumerate() {
                    let br = &b[j * k..(j + 1) * k];
                    for (x, y) in gar.iter_mut().zip(br) {
                        *x += gv * y;
                    }
                }
            } else {
                // b is k×r: ga[i,kk] += g[i,:]·b[kk,:]
                for (kk, x) in gar.iter_mut().enumerate() {
                    let br = &b[kk * r..(kk + 1) * r];
                    *x += gr.iter().zip(br).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..n {
            let gr = &g[i * r..(i + 1) * r];
            let ar = &a[i * k..(i + 1) * k];
            if tb {
                // gb[j,:] += g[i,j]·a[i,:]
                for (j, &gv) in gr.iter().enumerate() {
                    let gbr = &mut gb[j * k..(j + 1) * k];
                    for (x, y) in gbr.iter_mut().zip(ar) {
                        *x += gv * y;
                    }
                }
            } else {
                // gb[kk,:] += a[i,kk]·g[i,:]
                for (kk, &av) in ar.iter().enumerate() {
                    let gbr = &mut gb[kk * r..(kk + 1) * r];
                    for (x, y) in gbr.iter_mut().zip(gr) {
                        *x += av * y;
                    }
                }
            }
        }
    }
}

struct MatMulPlan {
    out_shape: Vec<usize>,
    /// (a offset, b offset) per output matrix, in output order.
    offsets: Vec<(usize, usize)>,
    n: usize,
    k: usize,
    r: usize,
}

fn matmul_plan(a: &[usize], b: &[usize], transpose_b: bool) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs operands of rank >= 2, got {a:?} and {b:?}"
        )));
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, r) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {a:?} x {b:?}{}",
            if transpose_b { "ᵀ" } else { "" }
        )));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let (batch, sa, sb) = broadcast_shapes(a_batch, b_batch).ok_or_else(|| {
        Error::shape(format!("matmul batch dimensions incompatible: {a:?} x {b:?}"))
    })?;
    let count: usize = batch.iter().product();
    let mut offsets = Vec::with_capacity(count);
    let (ma, mb) = (n * k, k * r);
    for_each_strided2(&batch, &sa, &sb, |_, ia, ib| offsets.push((ia * ma, ib * mb)));
    let mut out_shape = batch;
    out_shape.push(n);
    out_shape.push(r);
    Ok(MatMulPlan {
        out_shape,
        offsets,
        n,
        k,
        r,
    })
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        let (shape, data) = if sa == sb {
            (
                sa.to_vec(),
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else {
            let (out, a_str, b_str) = broadcast_shapes(sa, sb).ok_or_else(|| {
                Error::shape(format!("{name}: cannot broadcast {sa:?} with {sb:?}"))
            })?;
            let len: usize = out.iter().product();
            let mut data = vec![0.0; len];
            for_each_strided2(&out, &a_str, &b_str, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            (out, data)
        };
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            "mul" => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(t.shape(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
        }
    }

    /// Elementwise product with a constant factor of the same length
    /// (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if factor.len() != t.len() {
            return Err(Error::shape(format!(
                "mul_const: factor of length {} for tensor of length {}",
                factor.len(),
                t.len()
            )));
        }
        let data = t.data().iter().zip(&factor).map(|(v, f)| v * f).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst(x, factor), rg))
    }

    /// Batched matrix product `[.., n, k] · [.., k, r]` with broadcast batch
    /// dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two dimensions of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b), transpose_b)?;
        let (da, db) = (self.data(a), self.data(b));
        let (n, k, r) = (plan.n, plan.k, plan.r);
        let mut out = vec![0.0; plan.offsets.len() * n * r];
        for (m, &(oa, ob)) in plan.offsets.iter().enumerate() {
            matmul_kernel(
                &da[oa..oa + n * k],
                &db[ob..ob + k * r],
                &mut out[m * n * r..(m + 1) * n * r],
                n,
                k,
                r,
                transpose_b,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&plan.out_shape, out)?,
            Op::MatMul { a, b, transpose_b },
            rg,
        ))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                for j in 0..dim {
                    out[at(j)] = (src[at(j)] - max).exp();
                }
                let total = compensated_sum((0..dim).map(|j| out[at(j)]));
                let mut arg_max = 0;
                for j in 0..dim {
                    out[at(j)] /= total;
                    if out[at(j)] > out[at(arg_max)] {
                        arg_max = j;
                    }
                }
                // Fold the rounding residual into the largest entry so each
                // slice sums to one up to a fraction of an ulp.
                let residual = 1.0 - compensated_sum((0..dim).map(|j| out[at(j)]));
                out[at(arg_max)] += residual;
            }
        }
        let value = Tensor::from_vec(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalises every slice along `axis` to zero mean and unit population
    /// variance (`eps` added to the variance), then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let (g, b) = (self.data(gamma), self.data(beta));
        if g.len() != dim || b.len() != dim {
            return Err(Error::shape(format!(
                "layer_norm: gamma/beta lengths {}/{} but axis size is {dim}",
                g.len(),
                b.len()
            )));
        }
        let src = t.data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let mean = compensated_sum((0..dim).map(|j| src[at(j)])) / dim as f64;
                let var = compensated_sum((0..dim).map(|j| (src[at(j)] - mean).powi(2))) / dim as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..dim {
                    let xh = (src[at(j)] - mean) * is;
                    xhat[at(j)] = xh;
                    out[at(j)] = g[j] * xh + b[j];
                }
            }
        }
        let value = Tensor::from_vec(t.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders dimensions: output dimension `d` is input dimension `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let in_str = row_major_strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for_each_strided2(&out_shape, &src_str, &src_str, |o, i, _| out[o] = src[i]);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `out[j] = x[index[j]]`, reshaped to `shape`. Indices may repeat; the
    /// backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        let src = self.data(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!(
                "gather: index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Gather { x, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = compensated_sum(self.data(x).iter().copied());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = compensated_sum(d.iter().copied()) / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Propagates d(loss)/d(node) back through the tape and accumulates the
    /// result into every reachable leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((id, g));
            }
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! buf {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) | &Op::Div(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let same = va.shape() == vb.shape();
                let (out_shape, a_str, b_str) = if same {
                    (node.value.shape().to_vec(), Vec::new(), Vec::new())
                } else {
                    broadcast_shapes(va.shape(), vb.shape()).expect("checked in forward")
                };
                let (da, db) = (va.data(), vb.data());
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    if same {
                        (0..g.len()).for_each(|o| f(o, o, o));
                    } else {
                        for_each_strided2(&out_shape, &a_str, &b_str, f);
                    }
                };
                let kind = &node.op;
                if wants(a) {
                    let ga = buf!(a);
                    match kind {
                        Op::Add(..) | Op::Sub(..) => visit(&mut |o, ia, _| ga[ia] += g[o]),
                        Op::Mul(..) => visit(&mut |o, ia, ib| ga[ia] += g[o] * db[ib]),
                        _ => visit(&mut |o, ia, ib| ga[ia] += g[o] / db[ib]),
                    }
                }
                if wants(b) {
                    let gb = buf!(b);
                    match kind {
                        Op::Add(..) => visit(&mut |o, _, ib| gb[ib] += g[o]),
                        Op::Sub(..) => visit(&mut |o, _, ib| gb[ib] -= g[o]),
                        Op::Mul(..) => visit(&mut |o, ia, ib| gb[ib] += g[o] * da[ia]),
                        _ => visit(&mut |o, ia, ib| gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib])),
                    }
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    buf!(x).iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c);
                }
            }
            Op::MulConst(x, factor) => {
                if wants(*x) {
                    let gx = buf!(*x);
                    for ((d, gv), f) in gx.iter_mut().zip(g).zip(factor) {
                        *d += gv * f;
                    }
                }
            }
            &Op::Relu(x) => {
                if wants(x) {
                    let src = nodes[x.0].value.data();
                    for ((d, gv), v) in buf!(x).iter_mut().zip(g).zip(src) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if wants(x) {
                    let src = nodes[x.0].value.data();
                    for ((d, gv), &v) in buf!(x).iter_mut().zip(g).zip(src) {
                        *d += gv * gelu_grad(v);
                    }
                }
            }
            &Op::MatMul { a, b, transpose_b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let plan = matmul_plan(va.shape(), vb.shape(), transpose_b).expect("checked in forward");
                let (n, k, r) = (plan.n, plan.k, plan.r);
                // Accumulate into local buffers so a == b stays sound.
                let mut ga = wants(a).then(|| vec![0.0; va.len()]);
                let mut gb = wants(b).then(|| vec![0.0; vb.len()]);
                for (m, &(oa, ob)) in plan.offsets.iter().enumerate() {
                    matmul_kernel_backward(
                        &g[m * n * r..(m + 1) * n * r],
                        &va.data()[oa..oa + n * k],
                        &vb.data()[ob..ob + k * r],
                        ga.as_mut().map(|v| &mut v[oa..oa + n * k]),
                        gb.as_mut().map(|v| &mut v[ob..ob + k * r]),
                        n,
                        k,
                        r,
                        transpose_b,
                    );
                }
                if let Some(ga) = ga {
                    buf!(a).iter_mut().zip(&ga).for_each(|(d, v)| *d += v);
                }
                if let Some(gb) = gb {
                    buf!(b).iter_mut().zip(&gb).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Softmax { x, axis } => {
                if wants(x) {
                    let y = node.value.data();
                    let (outer, dim, inner) = axis_split(node.value.shape(), axis);
                    let gx = buf!(x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * dim + j) * inner + i;
                            let dot: f64 = (0..dim).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..dim {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (outer, dim, inner) = axis_split(node.value.shape(), *axis);
                let gam = nodes[gamma.0].value.data();
                if wants(gamma) {
                    let gg = buf!(gamma);
                    for (idx, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[(idx / inner) % dim] += gv * xh;
                    }
                }
                if wants(beta) {
                    let gb = buf!(beta);
                    for (idx, gv) in g.iter().enumerate() {
                        gb[(idx / inner) % dim] += gv;
                    }
                }
                if wants(x) {
                    let gx = buf!(x);
                    let nf = dim as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * dim + j) * inner + i;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..dim {
                                let d = g[at(j)] * gam[j];
                                mean_d += d;
                                mean_dx += d * xhat[at(j)];
                            }
                            mean_d /= nf;
                            mean_dx /= nf;
                            let is = inv_std[o * inner + i];
                            for j in 0..dim {
                                let d = g[at(j)] * gam[j];
                                gx[at(j)] += is * (d - mean_d - xhat[at(j)] * mean_dx);
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    buf!(x).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Permute { x, perm } => {
                if wants(*x) {
                    let shape = nodes[x.0].value.shape();
                    let in_str = row_major_strides(shape);
                    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
                    let gx = buf!(*x);
                    for_each_strided2(node.value.shape(), &src_str, &src_str, |o, i, _| gx[i] += g[o]);
                }
            }
            Op::Gather { x, index } => {
                if wants(*x) {
                    let gx = buf!(*x);
                    for (gv, &i) in g.iter().zip(index.iter()) {
                        gx[i] += gv;
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    buf!(x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let gx = buf!(x);
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}
