//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every primitive applied to a [`Var`]
//! appends one node; a node only ever references earlier nodes, so the
//! append order is a topological order and [`Graph::backward`] is a single
//! reverse sweep. Nodes whose inputs do not require gradients keep their
//! value but no backward record.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::scan::{scan_backward, scan_forward, ScanOperands, ScanTrace};
use super::tensor::{
    gemm, gemm_nt, gemm_tn, log_softmax_rows, rms_norm_rows, sigmoid, silu, softmax_rows, softplus,
    transpose2, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Silu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Tanh(usize),
    Scale(usize, f64),
    AddScalar(usize),
    RmsNorm { x: usize, gain: usize, eps: f64 },
    Softmax(usize),
    LogSoftmax(usize),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Reshape(usize),
    Transpose(usize),
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    GatherRows { x: usize, idx: Rc<Vec<usize>> },
    Scan {
        u: usize,
        delta: usize,
        a: usize,
        b: usize,
        c: usize,
        d_skip: usize,
        trace: Rc<ScanTrace>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// The tape. Rebuilt for every training step.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Accumulated gradients of the `requires_grad` leaves, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.map.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Shape of the broadcast result when one operand's shape is a suffix of the other's.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if big[big.len() - small.len()..] != *small {
        return Err(Error::shape(op, format!("{a:?} vs {b:?} (leading-axis broadcast only)")));
    }
    Ok(big.to_vec())
}

/// Sums `g` (shaped like the broadcast output) down to `n` trailing elements.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Const
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf whose gradient is accumulated when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears the gradient accumulators of every leaf.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let seed_shape = self.value(loss.id);
        if seed_shape.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed_shape.shape()
            )));
        }
        let seed = Tensor::full(seed_shape.shape(), 1.0);
        self.backward_from(loss, seed)
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_from(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let mut nodes = self.nodes.borrow_mut();
        if seed.shape() != nodes[output.id].value.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), nodes[output.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        if nodes[output.id].requires_grad {
            grads[output.id] = Some(seed.into_data());
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                let t = Tensor::new(shape, g).expect("gradient shaped like leaf");
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => node.grad = Some(t),
                }
                continue;
            }
            let contributions = backward_rule(&nodes, id, &g);
            for (input, ginput) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ginput) {
                            *a += b;
                        }
                    }
                    None => grads[input] = Some(ginput),
                }
            }
        }
        let mut out = Gradients::default();
        for (id, n) in nodes.iter().enumerate() {
            if let (Op::Leaf, Some(gr)) = (&n.op, &n.grad) {
                out.map.insert(id, gr.clone());
            }
        }
        Ok(out)
    }

    /// Current accumulated gradient of a leaf.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[var.id].grad.clone()
    }
}

fn backward_rule(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Const => Vec::new(),
        Op::Add(a, b) => vec![
            (*a, reduce_to(g, val(*a).len())),
            (*b, reduce_to(g, val(*b).len())),
        ],
        Op::Sub(a, b) => {
            let gb: Vec<f64> = reduce_to(g, val(*b).len()).into_iter().map(|v| -v).collect();
            vec![(*a, reduce_to(g, val(*a).len())), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bv[i % bv.len()]).collect();
            let gb: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * av[i % av.len()]).collect();
            vec![(*a, reduce_to(&ga, av.len())), (*b, reduce_to(&gb, bv.len()))]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi / bv[i % bv.len()]).collect();
            let gb: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, gi)| {
                    let bi = bv[i % bv.len()];
                    -gi * av[i % av.len()] / (bi * bi)
                })
                .collect();
            vec![(*a, reduce_to(&ga, av.len())), (*b, reduce_to(&gb, bv.len()))]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let mut ga = vec![0.0; m * k];
            gemm_nt(m, n, k, g, bv.data(), &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm_tn(k, m, n, av.data(), g, &mut gb);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Exp(a) => vec![(*a, g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect())],
        Op::Log(a) => vec![(*a, g.iter().zip(val(*a).data()).map(|(gi, x)| gi / x).collect())],
        Op::Sqrt(a) => vec![(*a, g.iter().zip(out.data()).map(|(gi, y)| gi * 0.5 / y).collect())],
        Op::Silu(a) => vec![(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(gi, &x)| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                })
                .collect(),
        )],
        Op::Sigmoid(a) => vec![(*a, g.iter().zip(out.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect())],
        Op::Softplus(a) => vec![(*a, g.iter().zip(val(*a).data()).map(|(gi, &x)| gi * sigmoid(x)).collect())],
        Op::Tanh(a) => vec![(*a, g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect())],
        Op::Scale(a, s) => vec![(*a, g.iter().map(|gi| gi * s).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::RmsNorm { x, gain, eps } => {
            let xv = val(*x);
            let gv = val(*gain).data();
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            let mut ggain = vec![0.0; c];
            for ((xr, gr), gxr) in xv
                .data()
                .chunks_exact(c)
                .zip(g.chunks_exact(c))
                .zip(gx.chunks_exact_mut(c))
            {
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                // d/dx of x*inv*gain: inv*(gain*g) - x*inv^3/c * sum(x*gain*g)
                let mut dot = 0.0;
                for j in 0..c {
                    ggain[j] += gr[j] * xr[j] * inv;
                    dot += xr[j] * gv[j] * gr[j];
                }
                let k = inv * inv * inv * dot / c as f64;
                for j in 0..c {
                    gxr[j] = inv * gv[j] * gr[j] - xr[j] * k;
                }
            }
            vec![(*x, gx), (*gain, ggain)]
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut ga = vec![0.0; g.len()];
            for ((yr, gr), gar) in out.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                for j in 0..c {
                    gar[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*a, ga)]
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut ga = vec![0.0; g.len()];
            for ((yr, gr), gar) in out.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    gar[j] = gr[j] - yr[j].exp() * total;
                }
            }
            vec![(*a, ga)]
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, n, inner) = split_axis(xs, *axis);
            let m = out.shape()[*axis];
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = &mut gx[(o * n + start) * inner..(o * n + start + m) * inner];
                dst.copy_from_slice(&g[o * m * inner..(o + 1) * m * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(xs.len());
            for &x in xs {
                let m = val(x).shape()[*axis];
                let mut gx = Vec::with_capacity(outer * m * inner);
                for o in 0..outer {
                    gx.extend_from_slice(&g[(o * total + offset) * inner..(o * total + offset + m) * inner]);
                }
                offset += m;
                res.push((x, gx));
            }
            res
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let gt = Tensor::new(vec![r, c], g.to_vec()).expect("transpose grad");
            vec![(*a, transpose2(&gt).expect("2-D").into_data())]
        }
        Op::SumAll(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::SumAxis { x, axis } => {
            let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    gx[(o * n + i) * inner..(o * n + i + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*x, gx)]
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[src * c + j] += g[r * c + j];
                }
            }
            vec![(*x, gx)]
        }
        Op::Scan {
            u,
            delta,
            a,
            b,
            c,
            d_skip,
            trace,
        } => {
            let (uv, dv, av, bv, cv, sv) = (val(*u), val(*delta), val(*a), val(*b), val(*c), val(*d_skip));
            let operands = ScanOperands {
                len: uv.shape()[0],
                width: uv.shape()[1],
                state: av.shape()[1],
                u: uv.data(),
                delta: dv.data(),
                a: av.data(),
                b: bv.data(),
                c: cv.data(),
                d_skip: sv.data(),
            };
            let gr = scan_backward(operands, trace, g);
            vec![
                (*u, gr.u),
                (*delta, gr.delta),
                (*a, gr.a),
                (*b, gr.b),
                (*c, gr.c),
                (*d_skip, gr.d_skip),
            ]
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Gradient accumulated on this leaf by previous backward calls.
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn same_graph(&self, other: Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'g>,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Tensor::new(shape, data)?, make(self.id, other.id), rg))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        if other.value().data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    /// `[.., k] x [k, n]`, leading axes of `self` flattened into rows.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() < 2 || b.rank() != 2 || a.cols() != b.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), b.data(), &mut out, false);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Tensor::new(shape, out)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn exp(&self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(Op::Log(self.id), x.map(f64::ln)))
    }

    pub fn sqrt(&self) -> Result<Var<'g>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("sqrt", format!("non-positive input {bad}")));
        }
        Ok(self.unary(Op::Sqrt(self.id), x.map(f64::sqrt)))
    }

    pub fn silu(&self) -> Var<'g> {
        let v = self.value().map(silu);
        self.unary(Op::Silu(self.id), v)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn softplus(&self) -> Var<'g> {
        let v = self.value().map(softplus);
        self.unary(Op::Softplus(self.id), v)
    }

    pub fn tanh(&self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x * s);
        self.unary(Op::Scale(self.id, s), v)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self).expect("same shape")
    }

    /// RMS normalization over the last axis with a `[last]` gain.
    pub fn rms_norm(&self, gain: Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(gain);
        let (x, gv) = (self.value(), gain.value());
        if gv.rank() != 1 || gv.len() != x.cols() {
            return Err(Error::shape("rms_norm", format!("{:?} with gain {:?}", x.shape(), gv.shape())));
        }
        let v = rms_norm_rows(&x, gv.data(), eps);
        let rg = self.requires_grad() || gain.requires_grad();
        Ok(self.graph.push(v, Op::RmsNorm { x: self.id, gain: gain.id, eps }, rg))
    }

    pub fn softmax(&self) -> Var<'g> {
        let v = softmax_rows(&self.value());
        self.unary(Op::Softmax(self.id), v)
    }

    pub fn log_softmax(&self) -> Var<'g> {
        let v = log_softmax_rows(&self.value());
        self.unary(Op::LogSoftmax(self.id), v)
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {:?}", x.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let m = end - start;
        let mut data = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        Ok(self.unary(Op::Slice { x: self.id, axis, start }, Tensor::new(shape, data)?))
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let conform = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !conform {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let m = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * m * inner..(o + 1) * m * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let rg = parts.iter().any(Var::requires_grad);
        let graph = first.graph;
        for p in parts {
            first.same_graph(*p);
        }
        Ok(graph.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                xs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let v = transpose2(&self.value())?;
        Ok(self.unary(Op::Transpose(self.id), v))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::SumAll(self.id), v)
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("reduce_sum", format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &x.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Op::SumAxis { x: self.id, axis }, Tensor::new(shape, data)?))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Rows of a `[R, C]` tensor selected (with repetition) by `idx`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?} is not 2-D", x.shape())));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(x.row(i));
        }
        Ok(self.unary(
            Op::GatherRows {
                x: self.id,
                idx: Rc::new(idx.to_vec()),
            },
            Tensor::new(vec![idx.len(), c], data)?,
        ))
    }

    /// Selective scan with `self` as the input `u: [L, D]`; see [`super::scan`].
    pub fn selective_scan(
        &self,
        delta: Var<'g>,
        a: Var<'g>,
        b: Var<'g>,
        c: Var<'g>,
        d_skip: Var<'g>,
    ) -> Result<Var<'g>> {
        let (uv, dv, av, bv, cv, sv) = (
            self.value(),
            delta.value(),
            a.value(),
            b.value(),
            c.value(),
            d_skip.value(),
        );
        let conform = uv.rank() == 2
            && dv.shape() == uv.shape()
            && av.rank() == 2
            && av.shape()[0] == uv.shape()[1]
            && bv.rank() == 2
            && bv.shape() == [uv.shape()[0], av.shape()[1]]
            && cv.shape() == bv.shape()
            && sv.shape() == [uv.shape()[1]];
        if !conform {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
                    uv.shape(),
                    dv.shape(),
                    av.shape(),
                    bv.shape(),
                    cv.shape(),
                    sv.shape()
                ),
            ));
        }
        let operands = ScanOperands {
            len: uv.shape()[0],
            width: uv.shape()[1],
            state: av.shape()[1],
            u: uv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            d_skip: sv.data(),
        };
        let rg = [*self, delta, a, b, c, d_skip].iter().any(Var::requires_grad);
        let (y, trace) = scan_forward(operands, rg);
        let value = Tensor::new(uv.shape().to_vec(), y)?;
        let op = Op::Scan {
            u: self.id,
            delta: delta.id,
            a: a.id,
            b: b.id,
            c: c.id,
            d_skip: d_skip.id,
            trace: Rc::new(trace.unwrap_or(ScanTrace {
                states: Vec::new(),
                decay: Vec::new(),
            })),
        };
        Ok(self.graph.push(value, op, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let loss = x.square().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), false);
        let grads = g.backward(x.exp().sum()).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0]), true);
        let loss = x.square().sum();
        g.backward(loss).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[12.0]);
        g.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_sums_both_paths() {
        // y = exp(x) * sin-free second branch 3x: loss = sum(exp(x) * 3x)
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.5, -1.0]), true);
        let loss = x.exp().mul(x.scale(3.0)).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        for (i, &xv) in [0.5f64, -1.0].iter().enumerate() {
            let expected = 3.0 * xv.exp() + 3.0 * xv * xv.exp();
            assert!((grads.get(x).unwrap().data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn domain_errors_name_the_primitive() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -1.0]), true);
        let err = x.log().unwrap_err();
        assert!(err.to_string().starts_with("log"));
        let err = x.sqrt().unwrap_err();
        assert!(err.to_string().starts_with("sqrt"));
    }

    #[test]
    fn broadcasting_is_leading_axis_only() {
        let g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1.0; 6]), true);
        let row = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let col = g.leaf(t(&[2, 1], &[1.0, 2.0]), true);
        let s = a.add(row).unwrap();
        assert_eq!(s.value().data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        assert!(matches!(a.add(col), Err(Error::Shape { .. })));
        let grads = g.backward(s.sum()).unwrap();
        assert_eq!(grads.get(row).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(a.matmul(b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn slice_concat_and_gather() {
        let g = Graph::new();
        let x = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let top = x.slice(0, 0, 1).unwrap();
        let right = x.slice(1, 1, 2).unwrap();
        assert_eq!(top.value().data(), &[1.0, 2.0]);
        assert_eq!(right.value().data(), &[2.0, 4.0, 6.0]);
        let joined = Var::concat(&[x, top], 0).unwrap();
        assert_eq!(joined.shape(), vec![4, 2]);
        let cols = Var::concat(&[x, right], 1).unwrap();
        assert_eq!(cols.value().data(), &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 6.0, 6.0]);
        let gathered = x.gather_rows(&[2, 2, 0]).unwrap();
        assert_eq!(gathered.value().data(), &[5.0, 6.0, 5.0, 6.0, 1.0, 2.0]);
        let grads = g.backward(gathered.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn reductions() {
        let g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().value().data(), &[6.0, 15.0]);
        assert_eq!(x.mean_axis(0).unwrap().value().data(), &[2.5, 3.5, 4.5]);
        assert_eq!(x.mean().value().item().unwrap(), 3.5);
    }
}
