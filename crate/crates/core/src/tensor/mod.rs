//! Dense tensors recorded on a reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! on [`Tensor`] handles append nodes to the tape; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients into every leaf created
//! with `requires_grad`. The tape is dynamic: build a new one per forward
//! pass. A tape is single-threaded; parallel workers each own their own.
//!
//! Broadcasting is limited to operands of equal rank whose differing
//! dimensions are 1 on one side.

mod adam;
mod gemm;
pub mod gradcheck;
mod params;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use params::{load_checkpoint, save_checkpoint, Bound, Checkpoint, ParamId, ParamStore};

pub(crate) use gemm::{gemm, Layout};

/// Negative slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    RecipScaled(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    ClampMin(usize, f64),
    Sum { a: usize, axis: usize },
    Mean { a: usize, axis: usize },
    Std { a: usize, axis: usize },
    LogSumExp { a: usize, axis: usize },
    SumAll(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv1x1 { x: usize, w: usize, b: Option<usize> },
    Gather { a: usize, idx: Rc<[usize]> },
    GroupMax { a: usize, argmax: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape(usize),
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    checked: bool,
    /// Non-leaf nodes whose gradient survives the reverse pass.
    retained: Vec<usize>,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, len, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<isize> {
    let mut strides = vec![0isize; shape.len()];
    let mut s = 1isize;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { s };
        s *= shape[d] as isize;
    }
    strides
}

/// Visits every output element with the matching operand offsets.
fn for_each_broadcast(
    out: &[usize],
    sa: &[isize],
    sb: &[isize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0isize, 0isize);
    for i in 0..total {
        f(i, ao as usize, bo as usize);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ao -= sa[d] * out[d] as isize;
            bo -= sb[d] * out[d] as isize;
            idx[d] = 0;
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose divisions and exponentials reject non-finite results.
    pub fn checked() -> Self {
        let t = Self::default();
        t.inner.borrow_mut().checked = true;
        t
    }

    pub fn is_checked(&self) -> bool {
        self.inner.borrow().checked
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            requires_grad,
        });
        inner.grads.push(None);
        Tensor {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn check_finite(&self, what: &'static str, v: &[f64]) -> Result<()> {
        if self.is_checked() && v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    /// A leaf value. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_>> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(data, shape, false)
    }

    pub fn variable(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(data, shape, true)
    }

    pub fn scalar(&self, x: f64) -> Tensor<'_> {
        self.push(vec![], vec![x], Op::Leaf, false)
    }

    pub fn full(&self, x: f64, shape: &[usize]) -> Tensor<'_> {
        self.push(shape.to_vec(), vec![x; numel(shape)], Op::Leaf, false)
    }

    /// Keeps the gradient of a non-leaf `t` readable after `backward`.
    pub fn retain_grad(&self, t: Tensor<'_>) {
        self.inner.borrow_mut().retained.push(t.id);
    }

    /// Gradient of the last backward pass with respect to `t`, if `t`
    /// requires gradients and is a leaf or was passed to
    /// [`Tape::retain_grad`].
    pub fn grad(&self, t: Tensor<'_>) -> Option<Vec<f64>> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[t.id];
        let kept = matches!(node.op, Op::Leaf) || inner.retained.contains(&t.id);
        if !node.requires_grad || !kept {
            return None;
        }
        match &inner.grads[t.id] {
            Some(g) => Some(g.clone()),
            None if inner.consumed => Some(vec![0.0; node.value.len()]),
            None => None,
        }
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: a second call
    /// fails with [`Error::TapeConsumed`].
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        if guard.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = guard.nodes[loss.id].shape.clone();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        guard.consumed = true;
        if !guard.nodes[loss.id].requires_grad {
            return Ok(());
        }
        let Inner { nodes, grads, retained, .. } = &mut *guard;
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = if retained.contains(&id) {
                grads[id].clone()
            } else {
                grads[id].take()
            };
            let Some(g) = g else {
                continue;
            };
            backward_node(nodes, grads, node, &g);
        }
        Ok(())
    }
}

fn acc_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backward_unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    if let Some(ga) = acc_slot(nodes, grads, a) {
        for (i, (dst, gi)) in ga.iter_mut().zip(g).enumerate() {
            *dst += gi * local(i);
        }
    }
}

fn backward_binary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    out_shape: &[usize],
    (a, b): (usize, usize),
    g: &[f64],
    da: impl Fn(usize, usize, usize) -> f64,
    db: impl Fn(usize, usize, usize) -> f64,
) {
    let sa = strides_for(&nodes[a].shape, out_shape);
    let sb = strides_for(&nodes[b].shape, out_shape);
    if let Some(ga) = acc_slot(nodes, grads, a) {
        for_each_broadcast(out_shape, &sa, &sb, |i, ao, bo| ga[ao] += g[i] * da(i, ao, bo));
    }
    if let Some(gb) = acc_slot(nodes, grads, b) {
        for_each_broadcast(out_shape, &sa, &sb, |i, ao, bo| gb[bo] += g[i] * db(i, ao, bo));
    }
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => backward_binary(nodes, grads, &node.shape, (a, b), g, |_, _, _| 1.0, |_, _, _| 1.0),
        &Op::Sub(a, b) => backward_binary(nodes, grads, &node.shape, (a, b), g, |_, _, _| 1.0, |_, _, _| -1.0),
        &Op::Mul(a, b) => {
            let (va, vb) = (nodes[a].value.clone(), nodes[b].value.clone());
            backward_binary(nodes, grads, &node.shape, (a, b), g, |_, _, bo| vb[bo], |_, ao, _| va[ao]);
        }
        &Op::Div(a, b) => {
            let vb = nodes[b].value.clone();
            backward_binary(
                nodes,
                grads,
                &node.shape,
                (a, b),
                g,
                |_, _, bo| 1.0 / vb[bo],
                |i, _, bo| -out[i] / vb[bo],
            );
        }
        &Op::Scale(a, c) => backward_unary(nodes, grads, a, g, |_| c),
        &Op::AddScalar(a) | &Op::StraightThrough(a) | &Op::Reshape(a) => {
            backward_unary(nodes, grads, a, g, |_| 1.0)
        }
        &Op::RecipScaled(a) => {
            let va = nodes[a].value.clone();
            backward_unary(nodes, grads, a, g, |i| -out[i] / va[i]);
        }
        &Op::Exp(a) => backward_unary(nodes, grads, a, g, |i| out[i]),
        &Op::Log(a) => {
            let va = nodes[a].value.clone();
            backward_unary(nodes, grads, a, g, |i| 1.0 / va[i]);
        }
        &Op::Sqrt(a) => backward_unary(nodes, grads, a, g, |i| 0.5 / out[i]),
        &Op::Square(a) => {
            let va = nodes[a].value.clone();
            backward_unary(nodes, grads, a, g, |i| 2.0 * va[i]);
        }
        &Op::LeakyRelu(a, slope) => {
            let va = nodes[a].value.clone();
            backward_unary(nodes, grads, a, g, |i| if va[i] > 0.0 { 1.0 } else { slope });
        }
        &Op::Sigmoid(a) => backward_unary(nodes, grads, a, g, |i| out[i] * (1.0 - out[i])),
        &Op::ClampMin(a, lo) => {
            let va = nodes[a].value.clone();
            backward_unary(nodes, grads, a, g, |i| if va[i] > lo { 1.0 } else { 0.0 });
        }
        &Op::Sum { a, axis } | &Op::Mean { a, axis } => {
            let (outer, len, inner) = split_axis(&nodes[a].shape, axis);
            let factor = if matches!(node.op, Op::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            if let Some(ga) = acc_slot(nodes, grads, a) {
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            ga[(o * len + l) * inner + k] += factor * g[o * inner + k];
                        }
                    }
                }
            }
        }
        &Op::Std { a, axis } => {
            let (outer, len, inner) = split_axis(&nodes[a].shape, axis);
            let va = nodes[a].value.clone();
            if let Some(ga) = acc_slot(nodes, grads, a) {
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + k;
                        let mu = (0..len).map(|l| va[at(l)]).sum::<f64>() / len as f64;
                        let s = out[o * inner + k];
                        let go = g[o * inner + k];
                        for l in 0..len {
                            ga[at(l)] += go * (va[at(l)] - mu) / (len as f64 * s);
                        }
                    }
                }
            }
        }
        &Op::LogSumExp { a, axis } => {
            let (outer, len, inner) = split_axis(&nodes[a].shape, axis);
            let va = nodes[a].value.clone();
            if let Some(ga) = acc_slot(nodes, grads, a) {
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            let i = (o * len + l) * inner + k;
                            ga[i] += g[o * inner + k] * (va[i] - out[o * inner + k]).exp();
                        }
                    }
                }
            }
        }
        &Op::SumAll(a) => {
            if let Some(ga) = acc_slot(nodes, grads, a) {
                for dst in ga.iter_mut() {
                    *dst += g[0];
                }
            }
        }
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let p = nodes[b].shape[1];
            let (va, vb) = (nodes[a].value.clone(), nodes[b].value.clone());
            if let Some(ga) = acc_slot(nodes, grads, a) {
                gemm(m, p, k, g, Layout::row_major(p), &vb, Layout::transposed(p), 1.0, ga);
            }
            if let Some(gb) = acc_slot(nodes, grads, b) {
                gemm(k, m, p, &va, Layout::transposed(k), g, Layout::row_major(p), 1.0, gb);
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
            if let Some(ga) = acc_slot(nodes, grads, a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        &Op::Conv1x1 { x, w, b } => {
            let (s, din, n) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
            let dout = nodes[w].shape[0];
            let (vx, vw) = (nodes[x].value.clone(), nodes[w].value.clone());
            if let Some(gx) = acc_slot(nodes, grads, x) {
                for si in 0..s {
                    let go = &g[si * dout * n..(si + 1) * dout * n];
                    let dst = &mut gx[si * din * n..(si + 1) * din * n];
                    gemm(din, dout, n, &vw, Layout::transposed(din), go, Layout::row_major(n), 1.0, dst);
                }
            }
            if let Some(gw) = acc_slot(nodes, grads, w) {
                for si in 0..s {
                    let go = &g[si * dout * n..(si + 1) * dout * n];
                    let xs = &vx[si * din * n..(si + 1) * din * n];
                    gemm(dout, n, din, go, Layout::row_major(n), xs, Layout::transposed(n), 1.0, gw);
                }
            }
            if let Some(b) = b {
                if let Some(gb) = acc_slot(nodes, grads, b) {
                    for si in 0..s {
                        for (o, dst) in gb.iter_mut().enumerate() {
                            let row = &g[(si * dout + o) * n..(si * dout + o + 1) * n];
                            *dst += row.iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::Gather { a, idx } => {
            let n = *nodes[*a].shape.last().unwrap();
            let m = idx.len();
            if let Some(ga) = acc_slot(nodes, grads, *a) {
                let rows = ga.len() / n.max(1);
                for r in 0..rows {
                    for (j, &src) in idx.iter().enumerate() {
                        ga[r * n + src] += g[r * m + j];
                    }
                }
            }
        }
        Op::GroupMax { a, argmax } => {
            if let Some(ga) = acc_slot(nodes, grads, *a) {
                for (i, &src) in argmax.iter().enumerate() {
                    ga[src] += g[i];
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_len = node.shape[*axis];
            let (outer, _, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let plen = nodes[p].shape[*axis];
                if let Some(gp) = acc_slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * out_len + offset) * inner..(o * out_len + offset + plen) * inner];
                        let dst = &mut gp[o * plen * inner..(o + 1) * plen * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += plen;
            }
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().as_ref().clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    fn same_tape(&self, other: &Tensor<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "tensors from different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor<'t> {
        let v = self.value();
        let out: Vec<f64> = v.iter().map(|&x| f(x)).collect();
        self.tape.push(self.shape(), out, op, self.rg())
    }

    fn binary(
        &self,
        other: Tensor<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor<'t>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("{sa:?} vs {sb:?}")))?;
        let (va, vb) = (self.value(), other.value());
        let out = if sa == sb {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; numel(&out_shape)];
            for_each_broadcast(
                &out_shape,
                &strides_for(&sa, &out_shape),
                &strides_for(&sb, &out_shape),
                |i, ao, bo| out[i] = f(va[ao], vb[bo]),
            );
            out
        };
        Ok(self
            .tape
            .push(out_shape, out, op, self.rg() || other.rg()))
    }

    pub fn add(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let out = self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)?;
        self.tape.check_finite("div", &out.value())?;
        Ok(out)
    }

    pub fn neg(&self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// `c / x` elementwise.
    pub fn recip_scaled(&self, c: f64) -> Result<Tensor<'t>> {
        let out = self.unary(Op::RecipScaled(self.id), |x| c / x);
        self.tape.check_finite("recip", &out.value())?;
        Ok(out)
    }

    pub fn exp(&self) -> Tensor<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Tensor<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Tensor<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Tensor<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.leaky_relu(0.0)
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor<'t> {
        self.unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    fn check_axis(&self, name: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(name, format!("axis {axis} for shape {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Error::shape(name, format!("reducing empty axis {axis}")));
        }
        Ok(shape)
    }

    fn reduce(
        &self,
        name: &'static str,
        axis: usize,
        op: Op,
        f: impl Fn(&mut dyn Iterator<Item = f64>, usize) -> f64,
    ) -> Result<Tensor<'t>> {
        let mut shape = self.check_axis(name, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for k in 0..inner {
                let mut it = (0..len).map(|l| v[(o * len + l) * inner + k]);
                out.push(f(&mut it, len));
            }
        }
        shape[axis] = 1;
        Ok(self.tape.push(shape, out, op, self.rg()))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum(&self, axis: usize) -> Result<Tensor<'t>> {
        self.reduce("sum", axis, Op::Sum { a: self.id, axis }, |it, _| it.sum())
    }

    pub fn mean(&self, axis: usize) -> Result<Tensor<'t>> {
        self.reduce("mean", axis, Op::Mean { a: self.id, axis }, |it, n| {
            it.sum::<f64>() / n as f64
        })
    }

    /// `sqrt(biased variance + eps)` over `axis`.
    pub fn std(&self, axis: usize, eps: f64) -> Result<Tensor<'t>> {
        self.reduce("std", axis, Op::Std { a: self.id, axis }, |it, n| {
            let xs: Vec<f64> = it.collect();
            let mu = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            (var + eps).sqrt()
        })
    }

    pub fn logsumexp(&self, axis: usize) -> Result<Tensor<'t>> {
        self.reduce("logsumexp", axis, Op::LogSumExp { a: self.id, axis }, |it, _| {
            let xs: Vec<f64> = it.collect();
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        })
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self) -> Tensor<'t> {
        let s = self.value().iter().sum();
        self.tape.push(vec![], vec![s], Op::SumAll(self.id), self.rg())
    }

    pub fn mean_all(&self) -> Tensor<'t> {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn matmul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        gemm(
            m,
            k,
            p,
            &self.value(),
            Layout::row_major(k),
            &other.value(),
            Layout::row_major(p),
            0.0,
            &mut out,
        );
        Ok(self.tape.push(
            vec![m, p],
            out,
            Op::MatMul(self.id, other.id),
            self.rg() || other.rg(),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.tape.push(vec![c, r], out, Op::Transpose(self.id), self.rg()))
    }

    /// Per-position affine map: `x: [S, D_in, N]`, `weight: [D_out, D_in]`,
    /// `bias: [D_out]` gives `[S, D_out, N]`.
    pub fn conv1x1(&self, weight: Tensor<'t>, bias: Option<Tensor<'t>>) -> Result<Tensor<'t>> {
        self.same_tape(&weight);
        let sx = self.shape();
        let sw = weight.shape();
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(Error::shape("conv1x1", format!("input {sx:?}, weight {sw:?}")));
        }
        let (s, din, n) = (sx[0], sx[1], sx[2]);
        let dout = sw[0];
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::shape("conv1x1", format!("bias {:?} for {dout} outputs", b.shape())));
            }
        }
        let (vx, vw) = (self.value(), weight.value());
        let mut out = vec![0.0; s * dout * n];
        for si in 0..s {
            let dst = &mut out[si * dout * n..(si + 1) * dout * n];
            if let Some(b) = bias {
                let vb = b.value();
                for o in 0..dout {
                    dst[o * n..(o + 1) * n].fill(vb[o]);
                }
            }
            gemm(
                dout,
                din,
                n,
                &vw,
                Layout::row_major(din),
                &vx[si * din * n..(si + 1) * din * n],
                Layout::row_major(n),
                if bias.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        }
        let rg = self.rg() || weight.rg() || bias.map(|b| b.rg()).unwrap_or(false);
        Ok(self.tape.push(
            vec![s, dout, n],
            out,
            Op::Conv1x1 {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            rg,
        ))
    }

    /// Selects positions along the last axis: output `[..., idx.len()]`.
    pub fn gather_last(&self, idx: Rc<[usize]>) -> Result<Tensor<'t>> {
        let mut shape = self.shape();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("gather", "scalar input"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} >= {n}")));
        }
        let v = self.value();
        let rows = v.len() / n.max(1);
        let m = idx.len();
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            out.extend(idx.iter().map(|&i| row[i]));
        }
        *shape.last_mut().unwrap() = m;
        Ok(self
            .tape
            .push(shape, out, Op::Gather { a: self.id, idx }, self.rg()))
    }

    /// Max over consecutive groups of `k` along the last axis.
    pub fn group_max_last(&self, k: usize) -> Result<Tensor<'t>> {
        let mut shape = self.shape();
        let len = *shape
            .last()
            .ok_or_else(|| Error::shape("group_max", "scalar input"))?;
        if k == 0 || len % k != 0 {
            return Err(Error::shape("group_max", format!("last axis {len} not divisible by {k}")));
        }
        let v = self.value();
        let groups = v.len() / k;
        let mut out = Vec::with_capacity(groups);
        let mut argmax = Vec::with_capacity(groups);
        for gi in 0..groups {
            let base = gi * k;
            let mut best = base;
            for j in base + 1..base + k {
                if v[j] > v[best] {
                    best = j;
                }
            }
            out.push(v[best]);
            argmax.push(best);
        }
        *shape.last_mut().unwrap() = len / k;
        Ok(self
            .tape
            .push(shape, out, Op::GroupMax { a: self.id, argmax }, self.rg()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(self.tape.push(
            shape.to_vec(),
            self.value().as_ref().clone(),
            Op::Reshape(self.id),
            self.rg(),
        ))
    }

    /// Same value, excluded from differentiation.
    pub fn detach(&self) -> Tensor<'t> {
        self.tape
            .push(self.shape(), self.value().as_ref().clone(), Op::Leaf, false)
    }

    /// Same value, backward passes gradients through unchanged.
    pub fn straight_through(&self) -> Tensor<'t> {
        self.tape.push(
            self.shape(),
            self.value().as_ref().clone(),
            Op::StraightThrough(self.id),
            self.rg(),
        )
    }

    /// `stop_gradient` with a mode flag: a constant, or identity in the
    /// backward pass when `straight_through` is set.
    pub fn stop_gradient(&self, straight_through: bool) -> Tensor<'t> {
        if straight_through {
            self.straight_through()
        } else {
            self.detach()
        }
    }

    /// Forward value replaced by `value`; the backward pass treats the
    /// replacement as identity.
    pub fn replace_value(&self, value: Vec<f64>) -> Result<Tensor<'t>> {
        if value.len() != self.len() {
            return Err(Error::shape(
                "replace_value",
                format!("{} values for {:?}", value.len(), self.shape()),
            ));
        }
        Ok(self
            .tape
            .push(self.shape(), value, Op::StraightThrough(self.id), self.rg()))
    }
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let tape = first.tape;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
    }
    let mut total = 0;
    for p in parts {
        first.same_tape(p);
        let s = p.shape();
        let ok = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
        }
        total += s[axis];
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = vec![0.0; numel(&shape)];
    let mut offset = 0;
    for p in parts {
        let plen = p.shape()[axis];
        let v = p.value();
        for o in 0..outer {
            out[(o * total + offset) * inner..(o * total + offset + plen) * inner]
                .copy_from_slice(&v[o * plen * inner..(o + 1) * plen * inner]);
        }
        offset += plen;
    }
    let rg = parts.iter().any(|p| p.rg());
    Ok(tape.push(
        shape,
        out,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
    ))
}

#[cfg(test)]
mod tests;
