//! Vector-valued reverse-mode differentiation tape.
//!
//! Every node holds a dense vector; parameters live outside the tape in a
//! `&[Matrix]` store and are referenced by index, so a tape can be replayed
//! backwards against the same store it was recorded with. Values are
//! computed eagerly when a node is recorded.

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// Derivative at exactly zero is taken as 1 (see [`relu_grad`]).
    Relu,
    Tanh,
    Softplus,
    /// Standard normal CDF.
    NormCdf,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    ParamRow(usize, usize),
    MatVec(usize, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Scatter(NodeId, Vec<usize>),
    Broadcast(NodeId),
    Sum(NodeId),
    SumNodes(Vec<NodeId>),
    Unary(NodeId, Unary),
    Softmax(NodeId),
    Dot(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// Subgradient of ReLU: 1 on `z >= 0`.
pub fn relu_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Unary {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Unary::Relu => relu(z),
            Unary::Tanh => z.tanh(),
            Unary::Softplus => softplus(z),
            Unary::NormCdf => norm_cdf(z),
            Unary::Square => z * z,
        }
    }

    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => relu_grad(z),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(z),
            Unary::NormCdf => norm_pdf(z),
            Unary::Square => 2.0 * z,
        }
    }
}

fn softmax_values(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    /// Whole parameter tensor, row-major, as a vector.
    pub fn param(&mut self, params: &[Matrix], id: usize) -> NodeId {
        self.push(params[id].as_slice().to_vec(), Op::Param(id))
    }

    pub fn param_row(&mut self, params: &[Matrix], id: usize, row: usize) -> NodeId {
        self.push(params[id].row(row).to_vec(), Op::ParamRow(id, row))
    }

    pub fn matvec(&mut self, params: &[Matrix], id: usize, x: NodeId) -> NodeId {
        let v = params[id].matvec(self.value(x));
        self.push(v, Op::MatVec(id, x))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise op on lengths {} and {}", va.len(), vb.len());
        va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// `x * s` with `s` a length-1 node.
    pub fn scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = self.value(x).iter().map(|a| a * sv).collect();
        self.push(v, Op::Scale(x, s))
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).iter().map(|a| a * c).collect();
        self.push(v, Op::ScaleConst(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).iter().map(|a| a + c).collect();
        self.push(v, Op::AddConst(x))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let src = self.value(x);
        let v = idx.iter().map(|&i| src[i]).collect();
        self.push(v, Op::Gather(x, idx.to_vec()))
    }

    /// Length-`len` vector with `x[k]` added at position `idx[k]`.
    pub fn scatter(&mut self, x: NodeId, idx: &[usize], len: usize) -> NodeId {
        let mut v = vec![0.0; len];
        for (k, &i) in idx.iter().enumerate() {
            v[i] += self.value(x)[k];
        }
        self.push(v, Op::Scatter(x, idx.to_vec()))
    }

    pub fn broadcast(&mut self, s: NodeId, len: usize) -> NodeId {
        let v = vec![self.scalar(s); len];
        self.push(v, Op::Broadcast(s))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = vec![self.value(x).iter().sum()];
        self.push(v, Op::Sum(x))
    }

    /// Elementwise sum of equal-length nodes, accumulated in slice order.
    pub fn sum_nodes(&mut self, parts: &[NodeId], len: usize) -> NodeId {
        let mut v = vec![0.0; len];
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.len(), len, "sum_nodes length");
            for (a, b) in v.iter_mut().zip(pv) {
                *a += b;
            }
        }
        self.push(v, Op::SumNodes(parts.to_vec()))
    }

    pub fn unary(&mut self, x: NodeId, f: Unary) -> NodeId {
        let v = self.value(x).iter().map(|z| f.apply(*z)).collect();
        self.push(v, Op::Unary(x, f))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = softmax_values(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = vec![self.zip(a, b, |x, y| x * y).iter().sum()];
        self.push(v, Op::Dot(a, b))
    }

    /// Reverse sweep. `seeds` are `(node, d loss / d node)` pairs; returns one
    /// gradient matrix per entry of `params`, shaped like it.
    pub fn backward(&self, params: &[Matrix], seeds: &[(NodeId, Vec<f64>)]) -> Vec<Matrix> {
        let mut grads: Vec<Matrix> = params.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (id, g) in seeds {
            assert_eq!(g.len(), self.value(*id).len(), "seed length");
            accumulate(&mut adj, *id, g);
            start = start.max(id.0 + 1);
        }
        for k in (0..start).rev() {
            let Some(g) = adj[k].take() else { continue };
            let node = &self.nodes[k];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => {
                    for (a, b) in grads[*p].as_mut_slice().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::ParamRow(p, r) => {
                    let cols = grads[*p].cols();
                    let row = &mut grads[*p].as_mut_slice()[r * cols..(r + 1) * cols];
                    for (a, b) in row.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatVec(p, x) => {
                    grads[*p].add_outer(&g, self.value(*x), 1.0);
                    let gx = params[*p].t_matvec(&g);
                    accumulate(&mut adj, *x, &gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x / y).collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .zip(vb)
                        .map(|((x, q), y)| -x * q / y)
                        .collect();
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::Scale(x, s) => {
                    let sv = self.scalar(*s);
                    let gx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    let gs: f64 = g.iter().zip(self.value(*x)).map(|(a, b)| a * b).sum();
                    accumulate(&mut adj, *x, &gx);
                    accumulate(&mut adj, *s, &[gs]);
                }
                Op::ScaleConst(x, c) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut adj, *x, &gx);
                }
                Op::AddConst(x) => accumulate(&mut adj, *x, &g),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut adj, *p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Gather(x, idx) => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                    accumulate(&mut adj, *x, &gx);
                }
                Op::Scatter(x, idx) => {
                    let gx: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
                    accumulate(&mut adj, *x, &gx);
                }
                Op::Broadcast(s) => {
                    let total: f64 = g.iter().sum();
                    accumulate(&mut adj, *s, &[total]);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; self.value(*x).len()];
                    accumulate(&mut adj, *x, &gx);
                }
                Op::SumNodes(parts) => {
                    for p in parts {
                        accumulate(&mut adj, *p, &g);
                    }
                }
                Op::Unary(x, f) => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .zip(&node.value)
                        .map(|((gv, z), y)| gv * f.derivative(*z, *y))
                        .collect();
                    accumulate(&mut adj, *x, &gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| yv * (gv - inner)).collect();
                    accumulate(&mut adj, *x, &gx);
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = self.value(*b).iter().map(|v| v * g[0]).collect();
                    let gb: Vec<f64> = self.value(*a).iter().map(|v| v * g[0]).collect();
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
            }
        }
        grads
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut adj[id.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
