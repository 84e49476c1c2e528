//! Reverse-mode differentiation over a per-forward tape.
//!
//! Every op appends a node holding its value and enough saved state to run
//! its vector-Jacobian product. A [`Tape`] is built for one forward pass and
//! dropped afterwards; parameters enter it as leaves tagged with their
//! [`ParamId`] so [`Gradients`] can be routed back into a [`ParamStore`].

use std::cell::{Ref, RefCell};

use super::param::{ParamId, ParamStore};
use super::tensor::{
    matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_in_place, Real, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MulConst(usize, Tensor<T>),
    AddConst(usize),
    AddRowBias(usize, usize),
    MulCol(usize, usize),
    RowDot(usize, usize),
    Softmax { x: usize, scale: T },
    LogSoftmax(usize),
    Exp(usize),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    NormalizeRows { x: usize, norms: Vec<T>, eps: T },
    SelectRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    PickPerRow { x: usize, idx: Vec<usize> },
    Sum(usize),
    Transpose(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Recording context for one forward pass. Not `Sync`: a tape lives on one
/// thread at a time.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, &[])
    }

    /// A leaf that receives gradients but is not tied to a stored parameter.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes.borrow_mut()[v.id].needs_grad = true;
        v
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let v = self.variable(store.get(id).value.clone());
        self.nodes.borrow_mut()[v.id].param = Some(id);
        v
    }

    /// Binds every parameter in `store`, indexed by `ParamId`.
    pub fn bind_all(&self, store: &ParamStore<T>) -> Vec<Var<'_, T>> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in vjp(&nodes, node, &g) {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`, or `None` if unreachable.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Parameter leaves with their gradients. A parameter bound more than
    /// once appears once per binding.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params
            .iter()
            .map(|&(node, p)| (p, self.grads.get(node).and_then(Option::as_ref)))
    }
}

fn vjp<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &nodes[i].value;
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data).unwrap();
    let gd = g.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, p) = (va.rows(), va.cols(), vb.cols());
            vec![
                (*a, like(va, matmul_nt_raw(gd, vb.data(), m, p, k))),
                (*b, like(vb, matmul_tn_raw(va.data(), gd, m, k, p))),
            ]
        }
        Op::MatMulNT(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, p) = (va.rows(), va.cols(), vb.rows());
            vec![
                (*a, like(va, matmul_raw(gd, vb.data(), m, p, k))),
                (*b, like(vb, matmul_tn_raw(gd, va.data(), m, p, k))),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = gd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
            let gb = gd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
            vec![(*a, like(va, ga)), (*b, like(vb, gb))]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
        Op::MulConst(a, c) => {
            let ga = gd.iter().zip(c.data()).map(|(&g, &y)| g * y).collect();
            vec![(*a, like(val(*a), ga))]
        }
        Op::AddConst(a) => vec![(*a, g.clone())],
        Op::AddRowBias(a, b) => {
            let vb = val(*b);
            let p = vb.len();
            let mut gb = vec![T::zero(); p];
            for row in gd.chunks(p) {
                for (acc, &x) in gb.iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
            vec![(*a, g.clone()), (*b, like(vb, gb))]
        }
        Op::MulCol(a, c) => {
            let (va, vc) = (val(*a), val(*c));
            let p = va.cols();
            let mut ga = vec![T::zero(); va.len()];
            let mut gc = vec![T::zero(); vc.len()];
            for i in 0..va.rows() {
                let ci = vc.data()[i];
                let mut acc = T::zero();
                for j in 0..p {
                    let k = i * p + j;
                    ga[k] = gd[k] * ci;
                    acc = acc + gd[k] * va.data()[k];
                }
                gc[i] = acc;
            }
            vec![(*a, like(va, ga)), (*c, like(vc, gc))]
        }
        Op::RowDot(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let p = va.cols();
            let mut ga = vec![T::zero(); va.len()];
            let mut gb = vec![T::zero(); vb.len()];
            for i in 0..va.rows() {
                for j in 0..p {
                    let k = i * p + j;
                    ga[k] = gd[i] * vb.data()[k];
                    gb[k] = gd[i] * va.data()[k];
                }
            }
            vec![(*a, like(va, ga)), (*b, like(vb, gb))]
        }
        Op::Softmax { x, scale } => {
            let y = &node.value;
            let p = y.cols();
            let mut gx = vec![T::zero(); y.len()];
            for i in 0..y.rows() {
                let yr = &y.data()[i * p..(i + 1) * p];
                let gr = &gd[i * p..(i + 1) * p];
                let s = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                for j in 0..p {
                    gx[i * p + j] = *scale * yr[j] * (gr[j] - s);
                }
            }
            vec![(*x, like(y, gx))]
        }
        Op::LogSoftmax(x) => {
            let y = &node.value;
            let p = y.cols();
            let mut gx = vec![T::zero(); y.len()];
            for i in 0..y.rows() {
                let gr = &gd[i * p..(i + 1) * p];
                let s = gr.iter().fold(T::zero(), |a, &g| a + g);
                for j in 0..p {
                    gx[i * p + j] = gr[j] - y.data()[i * p + j].exp() * s;
                }
            }
            vec![(*x, like(y, gx))]
        }
        Op::Exp(x) => {
            let gx = gd.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect();
            vec![(*x, like(&node.value, gx))]
        }
        Op::Gelu(x) => {
            let vx = val(*x);
            let gx = gd
                .iter()
                .zip(vx.data())
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect();
            vec![(*x, like(vx, gx))]
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (vx, vg) = (val(*x), val(*gamma));
            let p = vx.cols();
            let pf = T::of(p as f64);
            let mut gx = vec![T::zero(); vx.len()];
            let mut ggamma = vec![T::zero(); p];
            let mut gbeta = vec![T::zero(); p];
            for i in 0..vx.rows() {
                let r = i * p..(i + 1) * p;
                let (xh, gr) = (&xhat[r.clone()], &gd[r.clone()]);
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for j in 0..p {
                    ggamma[j] = ggamma[j] + gr[j] * xh[j];
                    gbeta[j] = gbeta[j] + gr[j];
                    let dxh = gr[j] * vg.data()[j];
                    mean_dxh = mean_dxh + dxh;
                    mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                }
                mean_dxh = mean_dxh / pf;
                mean_dxh_xh = mean_dxh_xh / pf;
                for j in 0..p {
                    let dxh = gr[j] * vg.data()[j];
                    gx[i * p + j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
            vec![
                (*x, like(vx, gx)),
                (*gamma, like(vg, ggamma)),
                (*beta, like(val(*beta), gbeta)),
            ]
        }
        Op::NormalizeRows { x, norms, eps } => {
            let y = &node.value;
            let p = y.cols();
            let mut gx = vec![T::zero(); y.len()];
            for (i, &n) in norms.iter().enumerate() {
                let r = i * p..(i + 1) * p;
                let (yr, gr) = (&y.data()[r.clone()], &gd[r]);
                if n > *eps {
                    let yg = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
                    for j in 0..p {
                        gx[i * p + j] = (gr[j] - yr[j] * yg) / n;
                    }
                } else {
                    for j in 0..p {
                        gx[i * p + j] = gr[j] / *eps;
                    }
                }
            }
            vec![(*x, like(y, gx))]
        }
        Op::SelectRows { x, idx } => {
            let vx = val(*x);
            let p = vx.cols();
            let mut gx = vec![T::zero(); vx.len()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..p {
                    gx[src * p + j] = gx[src * p + j] + gd[r * p + j];
                }
            }
            vec![(*x, like(vx, gx))]
        }
        Op::SliceCols { x, start } => {
            let vx = val(*x);
            let (p, w) = (vx.cols(), g.cols());
            let mut gx = vec![T::zero(); vx.len()];
            for i in 0..vx.rows() {
                gx[i * p + start..i * p + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            vec![(*x, like(vx, gx))]
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut off = 0;
            parts
                .iter()
                .map(|&part| {
                    let vp = val(part);
                    let w = vp.cols();
                    let mut gp = Vec::with_capacity(vp.len());
                    for i in 0..vp.rows() {
                        gp.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    off += w;
                    (part, like(vp, gp))
                })
                .collect()
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            parts
                .iter()
                .map(|&part| {
                    let vp = val(part);
                    let n = vp.len();
                    let gp = gd[off..off + n].to_vec();
                    off += n;
                    (part, like(vp, gp))
                })
                .collect()
        }
        Op::PickPerRow { x, idx } => {
            let vx = val(*x);
            let p = vx.cols();
            let mut gx = vec![T::zero(); vx.len()];
            for (i, &j) in idx.iter().enumerate() {
                gx[i * p + j] = gd[i];
            }
            vec![(*x, like(vx, gx))]
        }
        Op::Sum(x) => {
            let vx = val(*x);
            vec![(*x, Tensor::full(vx.shape(), gd[0]))]
        }
        Op::Transpose(x) => vec![(*x, g.transpose().reshape(val(*x).shape().to_vec()).unwrap())],
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of the current value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, &[self.id, other.id])
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(op, &a, &b));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<'t, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
                return Err(shape_err("matmul_t", a.shape(), b.shape()));
            }
            let (m, k, p) = (a.rows(), a.cols(), b.rows());
            Tensor::new(vec![m, p], matmul_nt_raw(a.data(), b.data(), m, k, p))?
        };
        Ok(self.binary(other, value, Op::MatMulNT(self.id, other.id)))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&other, "add")?;
        let value = self.zip_with(&other, |a, b| a + b);
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&other, "sub")?;
        let value = self.zip_with(&other, |a, b| a - b);
        Ok(self.binary(other, value, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&other, "mul")?;
        let value = self.zip_with(&other, |a, b| a * b);
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let value = self.value().map(|x| x * c);
        self.unary(value, Op::Scale(self.id, c))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if a.shape() != c.shape() {
                return Err(shape_err("mul_const", a.shape(), c.shape()));
            }
            let data = a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(value, Op::MulConst(self.id, c.clone())))
    }

    pub fn add_const(self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if a.shape() != c.shape() {
                return Err(shape_err("add_const", a.shape(), c.shape()));
            }
            let data = a.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(value, Op::AddConst(self.id)))
    }

    /// Adds a length-`p` bias to every row of an `m×p` value.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), bias.value());
            if a.cols() != b.len() {
                return Err(shape_err("add_row_bias", a.shape(), b.shape()));
            }
            let p = b.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| x + b.data()[k % p])
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(bias, value, Op::AddRowBias(self.id, bias.id)))
    }

    /// Scales row `i` of an `m×p` value by `col[i]` (`col` has `m` entries).
    pub fn mul_col(self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, c) = (self.value(), col.value());
            if a.rows() != c.len() {
                return Err(shape_err("mul_col", a.shape(), c.shape()));
            }
            let p = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| x * c.data()[k / p])
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(col, value, Op::MulCol(self.id, col.id)))
    }

    /// Per-row dot products of two `m×p` values, as `m×1`.
    pub fn row_dot(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&other, "row_dot")?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let p = a.cols();
            let data: Vec<T> = a
                .data()
                .chunks(p)
                .zip(b.data().chunks(p))
                .map(|(x, y)| super::tensor::dot(x, y))
                .collect();
            Tensor::new(vec![a.rows(), 1], data)?
        };
        Ok(self.binary(other, value, Op::RowDot(self.id, other.id)))
    }

    /// Row-wise softmax of `scale · x`.
    pub fn softmax_rows(self, scale: T) -> Result<Var<'t, T>> {
        self.masked_softmax_rows(scale, None)
    }

    /// Row-wise softmax where columns with `mask[j] == false` are excluded
    /// (treated as −∞ before normalization, exactly 0 after).
    pub fn masked_softmax_rows(self, scale: T, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        if !(scale > T::zero()) {
            return Err(Error::Contract(format!("softmax scale must be > 0, got {scale}")));
        }
        let value = {
            let x = self.value();
            x.ensure_finite("softmax input")?;
            if let Some(m) = mask {
                if m.len() != x.cols() {
                    return Err(Error::Shape(format!(
                        "mask of length {} for {} columns",
                        m.len(),
                        x.cols()
                    )));
                }
                if !m.iter().any(|&b| b) {
                    return Err(Error::Contract("mask has no valid column".into()));
                }
            }
            let mut out = x.clone();
            let p = out.cols();
            for row in out.data_mut().chunks_mut(p) {
                softmax_in_place(row, scale, mask);
            }
            out
        };
        Ok(self.unary(value, Op::Softmax { x: self.id, scale }))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            x.ensure_finite("log_softmax input")?;
            let mut out = x.clone();
            let p = out.cols();
            for row in out.data_mut().chunks_mut(p) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            out
        };
        Ok(self.unary(value, Op::LogSoftmax(self.id)))
    }

    pub fn exp(self) -> Var<'t, T> {
        let value = self.value().map(|x| x.exp());
        self.unary(value, Op::Exp(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let value = self.value().map(gelu);
        self.unary(value, Op::Gelu(self.id))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `p`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (value, xhat, rstd) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let p = x.cols();
            if g.len() != p || b.len() != p {
                return Err(shape_err("layer_norm", x.shape(), g.shape()));
            }
            let pf = T::of(p as f64);
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(x.rows());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(p) {
                let mean = row.iter().fold(T::zero(), |a, &v| a + v) / pf;
                let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / pf;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(value, op, &[self.id, gamma.id, beta.id]))
    }

    /// Each row divided by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(self, eps: T) -> Var<'t, T> {
        let (value, norms) = {
            let x = self.value();
            let p = x.cols();
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for row in out.data_mut().chunks_mut(p) {
                let n = super::tensor::norm(row);
                let d = n.max(eps);
                for v in row.iter_mut() {
                    *v = *v / d;
                }
                norms.push(n);
            }
            (out, norms)
        };
        self.unary(value, Op::NormalizeRows { x: self.id, norms, eps })
    }

    /// Gathers rows by index (repeats allowed); output is `idx.len() × p`.
    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let (r, p) = (x.rows(), x.cols());
            let mut data = Vec::with_capacity(idx.len() * p);
            for &i in idx {
                if i >= r {
                    return Err(Error::Shape(format!("row {i} out of range for {r} rows")));
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![idx.len(), p], data)?
        };
        Ok(self.unary(value, Op::SelectRows { x: self.id, idx: idx.to_vec() }))
    }

    pub fn row(self, i: usize) -> Result<Var<'t, T>> {
        self.select_rows(&[i])
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let p = x.cols();
            if start + width > p || width == 0 {
                return Err(Error::Shape(format!(
                    "column slice {start}..{} of {p} columns",
                    start + width
                )));
            }
            let data = x
                .data()
                .chunks(p)
                .flat_map(|row| row[start..start + width].iter().copied())
                .collect();
            Tensor::new(vec![x.rows(), width], data)?
        };
        Ok(self.unary(value, Op::SliceCols { x: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let value = {
            let vals: Vec<_> = parts.iter().map(|v| v.value()).collect();
            let r = vals[0].rows();
            if vals.iter().any(|v| v.rows() != r) {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for v in &vals {
                    data.extend_from_slice(v.row(i));
                }
            }
            Tensor::new(vec![r, total], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        Ok(first.tape.push(value, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let value = {
            let vals: Vec<_> = parts.iter().map(|v| v.value()).collect();
            let p = vals[0].cols();
            if vals.iter().any(|v| v.cols() != p) {
                return Err(Error::Shape("concat_rows: column counts differ".into()));
            }
            let r: usize = vals.iter().map(|v| v.rows()).sum();
            let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
            Tensor::new(vec![r, p], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        Ok(first.tape.push(value, Op::ConcatRows(ids.clone()), &ids))
    }

    /// `out[i] = x[i][idx[i]]`, as `m×1`.
    pub fn pick_per_row(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if idx.len() != x.rows() {
                return Err(Error::Shape(format!(
                    "pick_per_row: {} indices for {} rows",
                    idx.len(),
                    x.rows()
                )));
            }
            let mut data = Vec::with_capacity(idx.len());
            for (i, &j) in idx.iter().enumerate() {
                if j >= x.cols() {
                    return Err(Error::Data(format!(
                        "index {j} out of range for {} columns",
                        x.cols()
                    )));
                }
                data.push(x.at(i, j));
            }
            Tensor::new(vec![idx.len(), 1], data)?
        };
        Ok(self.unary(value, Op::PickPerRow { x: self.id, idx: idx.to_vec() }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().fold(T::zero(), |a, &v| a + v);
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::of(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn transpose(self) -> Var<'t, T> {
        let value = self.value().transpose();
        self.unary(value, Op::Transpose(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl for<'a> Fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64>, x: Tensor<f64>) {
        let tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = build(&tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let t = Tape::new();
                let v = t.variable(xp);
                build(&t, v).item()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-5 || (a - num).abs() < 1e-9, "elem {i}: analytic {a} numeric {num}");
        }
    }

    fn sample(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        let data = (0..r * c)
            .map(|i| ((i as f64 + 1.0) * 0.7 + seed as f64).sin() * 1.3)
            .collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let tape = Tape::<f32>::new();
        let w = tape.variable(Tensor::zeros(&[2, 3]));
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let tape = Tape::<f32>::new();
        let w = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let tape = Tape::<f32>::new();
        let a = tape.variable(Tensor::full(&[2], 1.0));
        let b = tape.variable(Tensor::full(&[2], 1.0));
        let g = tape.backward(a.sum()).unwrap();
        assert!(g.wrt(b).is_none());
    }

    #[test]
    fn matmul_grads() {
        let b = sample(3, 2, 5);
        fd_check(
            |t, v| {
                let bv = t.constant(b.clone());
                v.matmul(bv).unwrap().exp().sum()
            },
            sample(4, 3, 1),
        );
        fd_check(
            |t, v| {
                let a = t.constant(sample(2, 4, 9));
                a.matmul(v).unwrap().gelu().sum()
            },
            sample(4, 3, 2),
        );
        fd_check(
            |t, v| {
                let a = t.constant(sample(2, 3, 9));
                v.matmul_t(a).unwrap().exp().sum()
            },
            sample(4, 3, 2),
        );
        fd_check(
            |t, v| {
                let a = t.constant(sample(2, 3, 9));
                a.matmul_t(v).unwrap().exp().sum()
            },
            sample(4, 3, 2),
        );
    }

    #[test]
    fn softmax_family_grads() {
        let w = sample(3, 4, 3);
        fd_check(
            |_, v| v.softmax_rows(0.7).unwrap().mul_const(&w).unwrap().sum(),
            sample(3, 4, 1),
        );
        let mask = [true, false, true, true];
        fd_check(
            |t, v| {
                let _ = t;
                v.masked_softmax_rows(1.3, Some(&mask))
                    .unwrap()
                    .mul_const(&w)
                    .unwrap()
                    .sum()
            },
            sample(3, 4, 2),
        );
        fd_check(
            |_, v| v.log_softmax_rows().unwrap().mul_const(&w).unwrap().sum(),
            sample(3, 4, 4),
        );
        fd_check(
            |_, v| v.log_softmax_rows().unwrap().pick_per_row(&[0, 3, 1]).unwrap().sum(),
            sample(3, 4, 5),
        );
    }

    #[test]
    fn norm_family_grads() {
        let w = sample(3, 5, 7);
        fd_check(
            |t, v| {
                let g = t.constant(Tensor::vector(vec![0.5, 1.0, -1.2, 2.0, 0.3]));
                let b = t.constant(Tensor::vector(vec![0.1, 0.0, 0.2, -0.3, 0.4]));
                v.layer_norm(g, b, 1e-5).unwrap().mul_const(&w).unwrap().sum()
            },
            sample(3, 5, 1),
        );
        fd_check(
            |t, g| {
                let x = t.constant(sample(3, 5, 2));
                let b = t.constant(Tensor::vector(vec![0.1, 0.0, 0.2, -0.3, 0.4]));
                x.layer_norm(g, b, 1e-5).unwrap().mul_const(&w).unwrap().sum()
            },
            Tensor::vector(vec![0.5, 1.0, -1.2, 2.0, 0.3]),
        );
        fd_check(
            |_, v| v.normalize_rows(1e-12).mul_const(&w).unwrap().sum(),
            sample(3, 5, 3),
        );
    }

    #[test]
    fn structural_grads() {
        let w = sample(4, 3, 8);
        fd_check(
            |t, v| {
                let a = v.slice_cols(0, 1).unwrap();
                let b = v.slice_cols(1, 2).unwrap();
                let c = Var::concat_cols(&[b, a]).unwrap();
                let rows = c.select_rows(&[2, 0, 2, 1]).unwrap();
                let _ = t;
                rows.mul_const(&w).unwrap().exp().sum()
            },
            sample(3, 3, 1),
        );
        fd_check(
            |t, v| {
                let other = t.constant(sample(2, 3, 3));
                let both = Var::concat_rows(&[v, other, v]).unwrap();
                both.transpose().exp().sum()
            },
            sample(2, 3, 2),
        );
        fd_check(
            |t, v| {
                let other = t.constant(sample(3, 4, 3));
                let d = v.row_dot(other).unwrap();
                v.mul_col(d).unwrap().sub(other).unwrap().mul(v).unwrap().sum()
            },
            sample(3, 4, 2),
        );
        fd_check(
            |t, v| {
                let m = t.constant(sample(5, 4, 3));
                let b = v.row(1).unwrap();
                m.add_row_bias(b).unwrap().add(m).unwrap().scale(0.3).exp().mean()
            },
            sample(2, 4, 2),
        );
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::vector(vec![2.0]));
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[5.0]);
    }
}
