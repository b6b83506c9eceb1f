//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops append nodes to a [`Tape`]; [`Tape::backward`] walks the tape
//! once in reverse and returns gradients for every leaf created with
//! `requires_grad = true`. Nodes whose inputs need no gradient keep their value
//! but drop the saved state their backward rule would need.

use std::cell::{Cell, RefCell};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, axpy, dot};
use crate::numerics::tensor::{Float, Tensor};

/// Geometry of one multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// For each query row, how many leading key rows it may attend to.
    pub visible: Vec<usize>,
}

enum Op<S> {
    Leaf,
    Const,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: S,
    },
    Silu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<S>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Rope {
        a: usize,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        range: Range<usize>,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        count: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: AttnSpec,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    label: Option<String>,
}

/// Operation recorder. Single-writer: one tape per forward/backward pass.
pub struct Tape<S: Float> {
    nodes: RefCell<Vec<Node<S>>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Float> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Float> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Float> Gradients<S> {
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<S: Float> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Float> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input tensor.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        self.leaf_labeled(value, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    pub fn leaf_labeled(
        &self,
        value: Tensor<S>,
        requires_grad: bool,
        label: Option<String>,
    ) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            label,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<S> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Result<Var<'_, S>> {
        if !value.is_finite() {
            let nodes = self.nodes.borrow();
            let labels: Vec<String> = inputs
                .iter()
                .map(|&i| match &nodes[i].label {
                    Some(l) => l.clone(),
                    None => format!("#{i}{:?}", nodes[i].value.shape()),
                })
                .collect();
            return Err(Error::NonFinite {
                op: name,
                shape: value.shape().to_vec(),
                context: format!(", inputs [{}]", labels.join(", ")),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        let op = if requires_grad { op } else { Op::Const };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub fn concat(&self, parts: &[Var<'_, S>], axis: usize) -> Result<Var<'_, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        let values: Vec<Tensor<S>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, id, &g, &mut grads)?;
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn acc<S: Float>(
    grads: &mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    id: usize,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let numel = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![S::zero(); numel]);
    f(slot);
}

/// Leading-dimension batching for matmul: (batch, m, k, n, a_stride, b_stride).
fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Option<(usize, usize, usize, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (bk, bn) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    let k = a[a.len() - 1];
    if k != bk {
        return None;
    }
    if b.len() == 2 {
        let m = a[..a.len() - 1].iter().product();
        Some((1, m, k, bn, 0, 0))
    } else {
        if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return None;
        }
        let batch = a[..a.len() - 2].iter().product();
        let m = a[a.len() - 2];
        Some((batch, m, k, bn, m * k, k * bn))
    }
}

fn backward_node<S: Float>(
    nodes: &[Node<S>],
    id: usize,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) -> Result<()> {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (batch, m, k, n, _, sb) = matmul_dims(av.shape(), bv.shape(), *trans_b)
                .expect("validated in forward");
            let (ki, ni) = (k as isize, n as isize);
            acc(grads, nodes, *a, |da| {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let bs = &bv.data()[bi * sb..];
                    let das = &mut da[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        // b: [n, k]; da = g · b
                        S::gemm(m, n, k, S::one(), gs, ni, 1, bs, ki, 1, S::one(), das, ki, 1);
                    } else {
                        // b: [k, n]; da = g · bᵀ
                        S::gemm(m, n, k, S::one(), gs, ni, 1, bs, 1, ni, S::one(), das, ki, 1);
                    }
                }
            });
            acc(grads, nodes, *b, |db| {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let dbs = &mut db[bi * sb..bi * sb + k * n];
                    if *trans_b {
                        // db: [n, k] = gᵀ · a
                        S::gemm(n, m, k, S::one(), gs, 1, ni, as_, ki, 1, S::one(), dbs, ki, 1);
                    } else {
                        // db: [k, n] = aᵀ · g
                        S::gemm(k, m, n, S::one(), as_, 1, ki, gs, ni, 1, S::one(), dbs, ni, 1);
                    }
                }
            });
        }
        Op::Add { a, b } => {
            acc(grads, nodes, *a, |da| axpy(S::one(), g, da));
            let bn = nodes[*b].value.numel();
            acc(grads, nodes, *b, |db| {
                for chunk in g.chunks_exact(bn) {
                    axpy(S::one(), chunk, db);
                }
            });
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let bn = bv.len();
            acc(grads, nodes, *a, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * bv[i % bn];
                }
            });
            acc(grads, nodes, *b, |db| {
                for (i, (&gi, &ai)) in g.iter().zip(av).enumerate() {
                    db[i % bn] += gi * ai;
                }
            });
        }
        Op::Scale { a, c } => {
            acc(grads, nodes, *a, |da| axpy(*c, g, da));
        }
        Op::Silu { a } => {
            let x = nodes[*a].value.data();
            acc(grads, nodes, *a, |da| {
                for i in 0..da.len() {
                    let s = kernels::sigmoid(x[i]);
                    da[i] += g[i] * s * (S::one() + x[i] * (S::one() - s));
                }
            });
        }
        Op::Softmax { a } => {
            let y = &node.value;
            let w = y.last_dim();
            acc(grads, nodes, *a, |da| {
                for r in 0..y.rows() {
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let s = dot(yr, gr);
                    for j in 0..w {
                        da[r * w + j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xv = &nodes[*x].value;
            let gv = nodes[*gain].value.data();
            let d = xv.last_dim();
            let rows = xv.rows();
            let d_s = S::from_usize(d).expect("dim fits");
            acc(grads, nodes, *gain, |dg| {
                for r in 0..rows {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xr[j] * inv_rms[r];
                    }
                }
            });
            acc(grads, nodes, *x, |dx| {
                let mut dn = vec![S::zero(); d];
                for r in 0..rows {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let ir = inv_rms[r];
                    let mut proj = S::zero();
                    for j in 0..d {
                        dn[j] = g[r * d + j] * gv[j];
                        proj += dn[j] * xr[j] * ir;
                    }
                    proj /= d_s;
                    for j in 0..d {
                        dx[r * d + j] += ir * (dn[j] - xr[j] * ir * proj);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].value.last_dim();
            acc(grads, nodes, *table, |dt| {
                for (r, &tok) in ids.iter().enumerate() {
                    axpy(S::one(), &g[r * d..(r + 1) * d], &mut dt[tok * d..(tok + 1) * d]);
                }
            });
        }
        Op::Rope {
            a,
            positions,
            head_dim,
            base,
        } => {
            let w = node.value.last_dim();
            acc(grads, nodes, *a, |da| {
                let mut row = vec![S::zero(); w];
                for (r, &p) in positions.iter().enumerate() {
                    row.copy_from_slice(&g[r * w..(r + 1) * w]);
                    kernels::rope_row(&mut row, p, *head_dim, *base, -1.0);
                    axpy(S::one(), &row, &mut da[r * w..(r + 1) * w]);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let chunk = nodes[inp].value.shape()[*axis] * inner;
                acc(grads, nodes, inp, |di| {
                    for o in 0..outer {
                        axpy(
                            S::one(),
                            &g[o * total + offset..o * total + offset + chunk],
                            &mut di[o * chunk..(o + 1) * chunk],
                        );
                    }
                });
                offset += chunk;
            }
        }
        Op::Slice { a, axis, range } => {
            let ishape = nodes[*a].value.shape();
            let outer: usize = ishape[..*axis].iter().product();
            let inner: usize = ishape[axis + 1..].iter().product();
            let full = ishape[*axis] * inner;
            let chunk = range.len() * inner;
            acc(grads, nodes, *a, |da| {
                for o in 0..outer {
                    axpy(
                        S::one(),
                        &g[o * chunk..(o + 1) * chunk],
                        &mut da[o * full + range.start * inner..o * full + range.start * inner + chunk],
                    );
                }
            });
        }
        Op::Reshape { a } => {
            acc(grads, nodes, *a, |da| axpy(S::one(), g, da));
        }
        Op::Transpose { a } => {
            let s = nodes[*a].value.shape();
            let (r, c) = (s[0], s[1]);
            acc(grads, nodes, *a, |da| {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Sum { a } => {
            let gs = g[0];
            acc(grads, nodes, *a, |da| {
                for d in da.iter_mut() {
                    *d += gs;
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let v = nodes[*logits].value.last_dim();
            let scale = g[0] / S::from_usize(*count).expect("count fits");
            acc(grads, nodes, *logits, |dl| {
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let pr = &probs[r * v..(r + 1) * v];
                    for j in 0..v {
                        dl[r * v + j] += scale * pr[j];
                    }
                    dl[r * v + t] -= scale;
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            spec,
            probs,
        } => {
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let hd = spec.head_dim;
            let qw = spec.n_heads * hd;
            let kw = spec.n_kv_heads * hd;
            let group = spec.n_heads / spec.n_kv_heads;
            let scale = S::one() / S::from_usize(hd).expect("hd fits").sqrt();
            let mut dq = vec![S::zero(); qv.numel()];
            let mut dk = vec![S::zero(); kv.numel()];
            let mut dv = vec![S::zero(); vv.numel()];
            let need_v = nodes[*v].requires_grad;
            let need_k = nodes[*k].requires_grad;
            let need_q = nodes[*q].requires_grad;
            let mut dp = Vec::new();
            let mut off = 0;
            for h in 0..spec.n_heads {
                let kvh = h / group;
                for (i, &n) in spec.visible.iter().enumerate() {
                    let p = &probs[off..off + n];
                    off += n;
                    let go = &g[i * qw + h * hd..i * qw + h * hd + hd];
                    dp.clear();
                    for j in 0..n {
                        let vr = &vv.data()[j * kw + kvh * hd..j * kw + kvh * hd + hd];
                        dp.push(dot(go, vr));
                        if need_v {
                            axpy(p[j], go, &mut dv[j * kw + kvh * hd..j * kw + kvh * hd + hd]);
                        }
                    }
                    let s = dot(p, &dp);
                    let qr = &qv.data()[i * qw + h * hd..i * qw + h * hd + hd];
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if need_q {
                            let kr = &kv.data()[j * kw + kvh * hd..j * kw + kvh * hd + hd];
                            axpy(ds, kr, &mut dq[i * qw + h * hd..i * qw + h * hd + hd]);
                        }
                        if need_k {
                            axpy(ds, qr, &mut dk[j * kw + kvh * hd..j * kw + kvh * hd + hd]);
                        }
                    }
                }
            }
            acc(grads, nodes, *q, |d| axpy(S::one(), &dq, d));
            acc(grads, nodes, *k, |d| axpy(S::one(), &dk, d));
            acc(grads, nodes, *v, |d| axpy(S::one(), &dv, d));
        }
    }
    Ok(())
}

impl<'t, S: Float> Var<'t, S> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(self) -> Tensor<S> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.needs(self.id)
    }

    /// `self · rhs`; `rhs` is 2-D (shared across leading dims of `self`) or
    /// batched with identical leading dims.
    pub fn matmul(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'t, S>, trans_b: bool) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), rhs.value());
        let (batch, m, k, n, sa, sb) = matmul_dims(a.shape(), b.shape(), trans_b).ok_or_else(|| {
            Error::shape(
                "matmul",
                format!("{:?} x {:?}{}", a.shape(), b.shape(), if trans_b { "ᵀ" } else { "" }),
            )
        })?;
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            let asl = &a.data()[bi * sa..];
            let bsl = &b.data()[bi * sb..];
            let csl = &mut out[bi * m * n..(bi + 1) * m * n];
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            S::gemm(m, k, n, S::one(), asl, k as isize, 1, bsl, rsb, csb, S::zero(), csl, n as isize, 1);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        self.tape.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                trans_b,
            },
            &[self.id, rhs.id],
        )
    }

    fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
        if b.len() > a.len() || a[a.len() - b.len()..] != *b {
            return Err(Error::shape(op, format!("{a:?} with {b:?}")));
        }
        Ok(())
    }

    /// Elementwise sum; `rhs` may be a trailing-shape broadcast of `self`.
    pub fn add(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), rhs.value());
        Self::check_suffix("add", a.shape(), b.shape())?;
        let bn = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[i % bn])
            .collect();
        self.tape.push(
            "add",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
            &[self.id, rhs.id],
        )
    }

    /// Elementwise product; `rhs` may be a trailing-shape broadcast of `self`.
    pub fn mul(self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), rhs.value());
        Self::check_suffix("mul", a.shape(), b.shape())?;
        let bn = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data()[i % bn])
            .collect();
        self.tape.push(
            "mul",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
            &[self.id, rhs.id],
        )
    }

    pub fn scale(self, c: S) -> Result<Var<'t, S>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * c).collect();
        self.tape.push(
            "scale",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Scale { a: self.id, c },
            &[self.id],
        )
    }

    pub fn silu(self) -> Result<Var<'t, S>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| kernels::silu(x)).collect();
        self.tape.push(
            "silu",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Silu { a: self.id },
            &[self.id],
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(self) -> Result<Var<'t, S>> {
        let a = self.value();
        let w = a.last_dim();
        if w == 0 {
            return Err(Error::shape("softmax", "empty last dimension"));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            kernels::softmax_row(row);
        }
        self.tape.push(
            "softmax",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Softmax { a: self.id },
            &[self.id],
        )
    }

    /// `x / sqrt(mean(x²) + eps) * gain` over the last dimension.
    pub fn rmsnorm(self, gain: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        if eps <= S::zero() {
            return Err(Error::Invalid("rmsnorm eps must be positive".into()));
        }
        let (x, gv) = (self.value(), gain.value());
        let d = x.last_dim();
        if gv.shape() != [d] {
            return Err(Error::shape("rmsnorm", format!("{:?} gain {:?}", x.shape(), gv.shape())));
        }
        let d_s = S::from_usize(d).expect("dim fits");
        let mut data = Vec::with_capacity(x.numel());
        let mut inv = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = &x.data()[r * d..(r + 1) * d];
            let ms = dot(row, row) / d_s;
            let ir = S::one() / (ms + eps).sqrt();
            inv.push(ir);
            data.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * ir * g));
        }
        self.tape.push(
            "rmsnorm",
            Tensor::new(x.shape().to_vec(), data)?,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms: inv,
            },
            &[self.id, gain.id],
        )
    }

    /// Rows of the `[V, d]` table selected by `ids`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, S>> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Invalid(format!("token id {id} outside vocabulary {v}")));
            }
            data.extend_from_slice(t.row(id));
        }
        self.tape.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        )
    }

    /// Rotary position encoding of a `[seq, heads*head_dim]` (or
    /// `[seq, heads, head_dim]`) tensor; pairs are adjacent channels.
    pub fn rope(self, positions: &[usize], head_dim: usize, base: f64) -> Result<Var<'t, S>> {
        let a = self.value();
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::shape("rope", format!("head_dim {head_dim} must be even")));
        }
        let seq = a.shape().first().copied().unwrap_or(0);
        if positions.len() != seq {
            return Err(Error::shape(
                "rope",
                format!("{} positions for sequence of {seq}", positions.len()),
            ));
        }
        let w = a.numel() / seq.max(1);
        if w % head_dim != 0 {
            return Err(Error::shape("rope", format!("row width {w} vs head_dim {head_dim}")));
        }
        let mut data = a.data().to_vec();
        for (r, &p) in positions.iter().enumerate() {
            kernels::rope_row(&mut data[r * w..(r + 1) * w], p, head_dim, base, 1.0);
        }
        self.tape.push(
            "rope",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Rope {
                a: self.id,
                positions: positions.to_vec(),
                head_dim,
                base,
            },
            &[self.id],
        )
    }

    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Var<'t, S>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || range.end > shape[axis] || range.start > range.end {
            return Err(Error::shape("slice", format!("{shape:?} axis {axis} range {range:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * range.len() * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &a.data()[o * full + range.start * inner..o * full + range.end * inner],
            );
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = range.len();
        self.tape.push(
            "slice",
            Tensor::new(out_shape, data)?,
            Op::Slice {
                a: self.id,
                axis,
                range,
            },
            &[self.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value().reshape(shape.to_vec())?;
        self.tape.push("reshape", v, Op::Reshape { a: self.id }, &[self.id])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", a.shape())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        self.tape.push(
            "transpose",
            Tensor::new(vec![c, r], data)?,
            Op::Transpose { a: self.id },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Var<'t, S>> {
        let a = self.value();
        let s = a.data().iter().copied().sum();
        self.tape
            .push("sum", Tensor::scalar(s), Op::Sum { a: self.id }, &[self.id])
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(self, targets: &[usize], mask: &[bool]) -> Result<Var<'t, S>> {
        let logits = self.value();
        if logits.rank() != 2 || targets.len() != logits.shape()[0] || mask.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} targets, {} mask", logits.shape(), targets.len(), mask.len()),
            ));
        }
        let v = logits.shape()[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy mask selects no position".into()));
        }
        let mut probs = vec![S::zero(); logits.numel()];
        let mut total = S::zero();
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= v {
                return Err(Error::Invalid(format!("target {t} outside vocabulary {v}")));
            }
            let row = logits.row(r);
            let pr = &mut probs[r * v..(r + 1) * v];
            pr.copy_from_slice(row);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for p in pr.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            let lse = max + sum.ln();
            total += lse - row[t];
            let inv = S::one() / sum;
            for p in pr.iter_mut() {
                *p *= inv;
            }
        }
        let loss = total / S::from_usize(count).expect("count fits");
        self.tape.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[self.id],
        )
    }

    /// Scaled dot-product attention of `self` (queries `[Tq, H*hd]`) over
    /// keys/values `[Nk, Hkv*hd]`. Query `i` sees key rows `0..visible[i]`.
    pub fn attention(self, k: Var<'t, S>, v: Var<'t, S>, spec: &AttnSpec) -> Result<Var<'t, S>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let hd = spec.head_dim;
        if spec.n_kv_heads == 0 || spec.n_heads % spec.n_kv_heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{} heads over {} kv heads", spec.n_heads, spec.n_kv_heads),
            ));
        }
        let qw = spec.n_heads * hd;
        let kw = spec.n_kv_heads * hd;
        let tq = qv.shape()[0];
        let nk = kv.shape()[0];
        if qv.rank() != 2
            || kv.rank() != 2
            || qv.shape()[1] != qw
            || kv.shape()[1] != kw
            || vv.shape() != kv.shape()
            || spec.visible.len() != tq
        {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?} visible {}", qv.shape(), kv.shape(), vv.shape(), spec.visible.len()),
            ));
        }
        if let Some(&bad) = spec.visible.iter().find(|&&n| n == 0 || n > nk) {
            return Err(Error::shape(
                "attention",
                format!("query sees {bad} of {nk} keys"),
            ));
        }
        let group = spec.n_heads / spec.n_kv_heads;
        let scale = S::one() / S::from_usize(hd).expect("hd fits").sqrt();
        let total: usize = spec.visible.iter().sum::<usize>() * spec.n_heads;
        let mut probs = Vec::with_capacity(total);
        let mut out = vec![S::zero(); tq * qw];
        for h in 0..spec.n_heads {
            let kvh = h / group;
            for (i, &n) in spec.visible.iter().enumerate() {
                let qr = &qv.data()[i * qw + h * hd..i * qw + h * hd + hd];
                let start = probs.len();
                for j in 0..n {
                    let kr = &kv.data()[j * kw + kvh * hd..j * kw + kvh * hd + hd];
                    probs.push(dot(qr, kr) * scale);
                }
                let p = &mut probs[start..];
                kernels::softmax_row(p);
                let o = &mut out[i * qw + h * hd..i * qw + h * hd + hd];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &vv.data()[j * kw + kvh * hd..j * kw + kvh * hd + hd], o);
                }
            }
        }
        self.tape.push(
            "attention",
            Tensor::new(vec![tq, qw], out)?,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                spec: spec.clone(),
                probs,
            },
            &[self.id, k.id, v.id],
        )
    }
}
