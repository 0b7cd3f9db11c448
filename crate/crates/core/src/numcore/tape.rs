//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated. Handles of type
//! [`Var`] index into the tape, so recording order is a topological order
//! by construction and [`Tape::backward`] only has to walk the nodes once,
//! newest first.
//!
//! ```
//! use subword_lm::numcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use std::sync::Arc;

use super::gemm::{gemm, MatRef};
use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros when `v` is not on a path to the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (with `shape`) into axis order `perm`; `scatter` runs the
/// inverse direction, accumulating into `dst`.
fn permute_copy(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64], scatter: bool) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let mut counter = vec![0usize; nd];
    let mut src_off = 0usize;
    for out_i in 0..src.len() {
        if scatter {
            dst[src_off] += src[out_i];
        } else {
            dst[out_i] = src[src_off];
        }
        for d in (0..nd).rev() {
            counter[d] += 1;
            src_off += mapped[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src_off -= mapped[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    (m, k, n): (usize, usize, usize),
    ta: bool,
    tb: bool,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(da) = da {
        if !ta {
            gemm(MatRef::new(dc, m, n, false), MatRef::new(b, n, k, !tb), 1.0, da);
        } else {
            gemm(MatRef::new(b, k, n, tb), MatRef::new(dc, n, m, true), 1.0, da);
        }
    }
    if let Some(db) = db {
        if !tb {
            gemm(MatRef::new(a, k, m, !ta), MatRef::new(dc, m, n, false), 1.0, db);
        } else {
            gemm(MatRef::new(dc, n, m, true), MatRef::new(a, m, k, ta), 1.0, db);
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a leaf that shares storage with the caller.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records every tensor of `params` as a leaf, in order.
    pub fn params(&mut self, params: &Params, requires_grad: bool) -> Vec<Var> {
        params
            .shared()
            .iter()
            .map(|t| self.leaf_shared(Arc::clone(t), requires_grad))
            .collect()
    }

    /// Two-dimensional product of `op(a)` and `op(b)`, where `op` optionally
    /// transposes its operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects matrices, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k) = if ta {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if tb {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents {k} and {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(av.data(), m, k, ta),
            MatRef::new(bv.data(), k, n, tb),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb },
            rg,
            "matmul",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `a [N, m, k]` with `b [Nb, k, n]` (or
    /// `b [Nb, n, k]` when `tb`). `Nb` must divide `N`; batch `i` of `a`
    /// pairs with batch `i % Nb` of `b`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 3 || bv.ndim() != 3 {
            return Err(Error::Shape(format!(
                "bmm expects rank-3 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (na, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let nb = bv.shape()[0];
        let (k2, n) = if tb {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if k != k2 || na % nb != 0 {
            return Err(Error::Shape(format!(
                "bmm operands {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; na * m * n];
        for i in 0..na {
            let j = i % nb;
            gemm(
                MatRef::new(&av.data()[i * m * k..(i + 1) * m * k], m, k, false),
                MatRef::new(&bv.data()[j * k * n..(j + 1) * k * n], k, n, tb),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(vec![na, m, n], out),
            Op::BatchMatMul { a, b, tb },
            rg,
            "bmm",
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op} operands {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg, "mul")
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::Shape(format!(
                "bias of {} for last axis {d}",
                self.value(bias).numel()
            )));
        }
        let bv = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::from_parts(shape, out), Op::AddRow { x, bias }, rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), rg, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), rg, "gelu")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(super::tensor::softmax_row)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg, "softmax")
    }

    /// Normalizes each row of the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm gamma/beta must have {d} entries"
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = self.value(x).numel() / d;
        let mut out = Vec::with_capacity(rows * d);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (i, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Gathers rows of `table [V, H]`, producing `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::Shape("embedding table must be a matrix".into()));
        }
        let (v, h) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Shape("embedding of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::VocabOverflow { id, vocab: v });
            }
            out.extend_from_slice(&tv.data()[id * h..(id + 1) * h]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::from_parts(vec![ids.len(), h], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        permute_copy(self.value(x).data(), &shape, perm, &mut out, false);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
            "permute",
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(Error::EmptyInput)?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat of {first:?} and {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// For `x [N, S, L]` and an index table `idx [S, K]` (flattened), returns
    /// `out [N, S, K]` with `out[n, s, j] = x[n, s, idx[s * K + j]]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || idx.len() != shape[1] * k || idx.iter().any(|&i| i >= shape[2]) {
            return Err(Error::Shape(format!(
                "gather_last index table of {} entries for {shape:?}",
                idx.len()
            )));
        }
        let (n, s, l) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * s * k);
        for b in 0..n {
            for i in 0..s {
                let row = &xv[(b * s + i) * l..(b * s + i + 1) * l];
                out.extend(idx[i * k..(i + 1) * k].iter().map(|&j| row[j]));
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![n, s, k], out),
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
            rg,
            "gather_last",
        )
    }

    /// Mean negative log-likelihood (natural log) of `targets` under
    /// `softmax(logits)`, skipping positions whose target is `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} for {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        let v = lv.shape()[1];
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = 0.0;
        let mut count = 0;
        for (row, &t) in lv.data().chunks(v).zip(targets) {
            if t == ignore {
                probs.extend(std::iter::repeat_n(0.0, v));
                continue;
            }
            if t >= v {
                return Err(Error::VocabOverflow { id: t, vocab: v });
            }
            let ls = super::tensor::log_softmax_row(row);
            total -= ls[t];
            count += 1;
            probs.extend(ls.iter().map(|x| x.exp()));
        }
        if count == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// recorded with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes[..n])
            .map(|(g, nd)| g.map(|g| Tensor::from_parts(nd.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = if *ta {
                    (av.shape()[1], av.shape()[0])
                } else {
                    (av.shape()[0], av.shape()[1])
                };
                let n = node.value.shape()[1];
                let mut da = wants(*a).then(|| grads[a.0].take().unwrap_or_else(|| vec![0.0; len(*a)]));
                let mut db = wants(*b).then(|| grads[b.0].take().unwrap_or_else(|| vec![0.0; len(*b)]));
                matmul_backward(
                    av.data(),
                    bv.data(),
                    g,
                    (m, k, n),
                    *ta,
                    *tb,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if a == b {
                    // Same operand on both sides: merge the two contributions.
                    if let (Some(mut x), Some(y)) = (da, db) {
                        x.iter_mut().zip(&y).for_each(|(p, q)| *p += q);
                        grads[a.0] = Some(x);
                    }
                } else {
                    if let Some(x) = da {
                        grads[a.0] = Some(x);
                    }
                    if let Some(y) = db {
                        grads[b.0] = Some(y);
                    }
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let nb = bv.shape()[0];
                let n = node.value.shape()[2];
                let mut da = wants(*a).then(|| grads[a.0].take().unwrap_or_else(|| vec![0.0; len(*a)]));
                let mut db = wants(*b).then(|| grads[b.0].take().unwrap_or_else(|| vec![0.0; len(*b)]));
                for i in 0..na {
                    let j = i % nb;
                    matmul_backward(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &bv.data()[j * k * n..(j + 1) * k * n],
                        &g[i * m * n..(i + 1) * m * n],
                        (m, k, n),
                        false,
                        *tb,
                        da.as_mut().map(|d| &mut d[i * m * k..(i + 1) * m * k]),
                        db.as_mut().map(|d| &mut d[j * k * n..(j + 1) * k * n]),
                    );
                }
                if a == b {
                    if let (Some(mut x), Some(y)) = (da, db) {
                        x.iter_mut().zip(&y).for_each(|(p, q)| *p += q);
                        grads[a.0] = Some(x);
                    }
                } else {
                    if let Some(x) = da {
                        grads[a.0] = Some(x);
                    }
                    if let Some(y) = db {
                        grads[b.0] = Some(y);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let s = grad_slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let s = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let s = grad_slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let d = len(*bias);
                if wants(*x) {
                    let s = grad_slot(grads, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if wants(*bias) {
                    let s = grad_slot(grads, *bias, d);
                    for row in g.chunks(d) {
                        s.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Scale(x, f) => {
                let s = grad_slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(p, q)| *p += q * f);
            }
            Op::Sum(x) => {
                let n = len(*x);
                let s = grad_slot(grads, *x, n);
                s.iter_mut().for_each(|p| *p += g[0]);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let s = grad_slot(grads, *x, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * gelu_grad_scalar(xv[i]);
                }
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let y = node.value.data();
                let s = grad_slot(grads, *x, g.len());
                for ((sr, yr), gr) in s.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        sr[j] += yr[j] * (gr[j] - dot);
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
                let d = len(*gamma);
                let gv = self.value(*gamma).data();
                if wants(*gamma) {
                    let s = grad_slot(grads, *gamma, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let s = grad_slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        s.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                }
                if wants(*x) {
                    let s = grad_slot(grads, *x, g.len());
                    for (r, ((sr, gr), hr)) in s
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            sr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = self.value(*table).shape()[1];
                let s = grad_slot(grads, *table, len(*table));
                for (row, &id) in g.chunks(h).zip(ids) {
                    s[id * h..(id + 1) * h]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(p, q)| *p += q);
                }
            }
            Op::Reshape(x) => {
                let s = grad_slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(p, q)| *p += q);
            }
            Op::Permute { x, perm } => {
                let in_shape = self.value(*x).shape().to_vec();
                let s = grad_slot(grads, *x, g.len());
                permute_copy(g, &in_shape, perm, s, true);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if wants(p) {
                        let s = grad_slot(grads, p, len(p));
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            s[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += block;
                }
            }
            Op::GatherLast { x, idx } => {
                let shape = self.shape(*x);
                let (n, sl, l) = (shape[0], shape[1], shape[2]);
                let k = idx.len() / sl;
                let s = grad_slot(grads, *x, n * sl * l);
                for b in 0..n {
                    for i in 0..sl {
                        let base = (b * sl + i) * l;
                        let gr = &g[(b * sl + i) * k..(b * sl + i + 1) * k];
                        for (j, &col) in idx[i * k..(i + 1) * k].iter().enumerate() {
                            s[base + col] += gr[j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = self.value(*logits).shape()[1];
                let scale = g[0] / *count as f64;
                let s = grad_slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let row = &mut s[r * v..(r + 1) * v];
                    for j in 0..v {
                        row[j] += scale * probs[r * v + j];
                    }
                    row[t] -= scale;
                }
            }
        }
    }
}

/// Exact GELU value used by the tape, exposed for reference checks.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}
