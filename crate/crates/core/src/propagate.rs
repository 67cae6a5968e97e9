//! Bottom-up forward passes, the final projection, reverse-mode gradients
//! and the identity-activation collapse.

use std::collections::HashMap;

use serde::Serialize;

use crate::config::{Activation, Gate, RoutingDirection, Variant};
use crate::error::{Error, Result};
use crate::experts::{BaselineParams, ExpertBank, LowRankPair, Role};
use crate::numerics::tape::{NodeId, Tape, Unary};
use crate::numerics::{Matrix, RngState, Vector};
use crate::router::{self, GateStats, Mode, PoolAux, RoutingTree};

/// Where the activation sits in a node update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// `sigma(B A x + W h + b)`.
    Inner,
    /// `B A x + W sigma(h) + b`.
    Outer,
}

impl Placement {
    pub fn of(variant: Variant) -> Placement {
        match variant {
            Variant::SmoreStar => Placement::Outer,
            _ => Placement::Inner,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NodeTrace {
    /// Aggregate of the node's children (`d_l` long); `None` in pool 0.
    input: Option<NodeId>,
    /// Activation input.
    pre: NodeId,
    /// Unweighted contribution to the parent (`d_{l+1}` long).
    term: NodeId,
}

/// Recorded forward pass of one token.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    tape: Tape,
    stamp: u64,
    x_l: NodeId,
    out: NodeId,
    tree: RoutingTree,
    nodes: Vec<NodeTrace>,
    stats: Option<GateStats>,
    aux: Option<NodeId>,
    min_kink: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeTraceJson {
    pub path: Vec<(usize, usize)>,
    pub expert: usize,
    pub weight: f64,
    pub embedding: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub term: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceJson {
    pub truncated: bool,
    pub x_l: Vec<f64>,
    pub output: Vec<f64>,
    pub aux_loss: Option<f64>,
    pub nodes: Vec<NodeTraceJson>,
}

/// Values kept per vector in truncated trace exports.
pub const TRACE_PREVIEW: usize = 8;

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.tape.value(self.out)
    }

    pub fn x_l(&self) -> &[f64] {
        self.tape.value(self.x_l)
    }

    pub fn tree(&self) -> &RoutingTree {
        &self.tree
    }

    pub fn stats(&self) -> Option<&GateStats> {
        self.stats.as_ref()
    }

    /// Aggregate of node `id`'s children (empty for pool-0 nodes).
    pub fn embedding(&self, id: usize) -> &[f64] {
        match self.nodes[id].input {
            Some(n) => self.tape.value(n),
            None => &[],
        }
    }

    pub fn pre_activation(&self, id: usize) -> &[f64] {
        self.tape.value(self.nodes[id].pre)
    }

    pub fn term(&self, id: usize) -> &[f64] {
        self.tape.value(self.nodes[id].term)
    }

    /// Recorded balance loss (already multiplied by gamma).
    pub fn aux_loss(&self) -> Option<f64> {
        self.aux.map(|a| self.tape.scalar(a))
    }

    /// Smallest `|z|` fed into a ReLU during the pass (infinite without ReLU).
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink
    }

    pub fn to_json(&self, full: bool) -> TraceJson {
        let cut = |v: &[f64]| -> Vec<f64> {
            if full {
                v.to_vec()
            } else {
                v.iter().take(TRACE_PREVIEW).copied().collect()
            }
        };
        TraceJson {
            truncated: !full,
            x_l: cut(self.x_l()),
            output: cut(self.output()),
            aux_loss: self.aux_loss(),
            nodes: (0..self.nodes.len())
                .map(|k| NodeTraceJson {
                    path: self.tree.path(k),
                    expert: self.tree.node(k).expert,
                    weight: self.tree.node(k).weight,
                    embedding: cut(self.embedding(k)),
                    pre_activation: cut(self.pre_activation(k)),
                    term: cut(self.term(k)),
                })
                .collect(),
        }
    }
}

/// Records node updates for one bank, caching `B A x` per stored expert.
pub(crate) struct Propagator<'a> {
    bank: &'a ExpertBank,
    placement: Placement,
    codes: HashMap<usize, NodeId>,
    min_kink: f64,
}

impl<'a> Propagator<'a> {
    pub(crate) fn new(bank: &'a ExpertBank, placement: Placement) -> Result<Self> {
        let spec = bank.spec();
        if matches!(spec.activation, Activation::Mlp { .. }) && placement != Placement::of(spec.variant) {
            return Err(Error::Unsupported(
                "sigma perceptron was sized for the other activation placement".into(),
            ));
        }
        Ok(Propagator {
            bank,
            placement,
            codes: HashMap::new(),
            min_kink: f64::INFINITY,
        })
    }

    /// Starts a new token: the `B A x` cache is per token.
    pub(crate) fn reset(&mut self) {
        self.codes.clear();
    }

    fn code(&mut self, tape: &mut Tape, pool: usize, expert: usize, x: NodeId) -> NodeId {
        let up = self.bank.slot_of(Role::Up { layer: pool, expert });
        if let Some(&n) = self.codes.get(&up) {
            return n;
        }
        let params = self.bank.params();
        let a = tape.matvec(params, self.bank.slot_of(Role::Down { layer: pool, expert }), x);
        let n = tape.matvec(params, up, a);
        self.codes.insert(up, n);
        n
    }

    fn sigma(&mut self, tape: &mut Tape, pool: usize, z: NodeId) -> NodeId {
        match self.bank.spec().activation {
            Activation::Identity => z,
            Activation::Relu => {
                let m = tape.value(z).iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                self.min_kink = self.min_kink.min(m);
                tape.unary(z, Unary::Relu)
            }
            Activation::Mlp { .. } => {
                let params = self.bank.params();
                let h = tape.matvec(params, self.bank.slot_of(Role::SigmaIn { layer: pool }), z);
                let h = tape.unary(h, Unary::Tanh);
                tape.matvec(params, self.bank.slot_of(Role::SigmaOut { layer: pool }), h)
            }
        }
    }

    fn term(&mut self, tape: &mut Tape, pool: usize, expert: usize, x: NodeId, input: Option<NodeId>) -> Result<NodeTrace> {
        let bank = self.bank;
        let dims = bank.dims();
        let width = dims.get(pool + 1);
        if let Some(h) = input {
            let got = tape.value(h).len();
            if got != dims.get(pool) {
                return Err(Error::dim(format!("pool {pool} child aggregate"), dims.get(pool), got));
            }
        }
        let mixer = bank.slot_of(Role::Mixer { layer: pool });
        let code = self.code(tape, pool, expert, x);
        let (pre, mut term) = match self.placement {
            Placement::Inner => {
                let mut pre = code;
                if let (Some(h), true) = (input, dims.get(pool) > 0) {
                    let mixed = tape.matvec(bank.params(), mixer, h);
                    pre = tape.add(pre, mixed);
                }
                if bank.spec().bias {
                    let b = tape.param(bank.params(), bank.slot_of(Role::Bias { layer: pool, expert }));
                    pre = tape.add(pre, b);
                }
                (pre, None)
            }
            Placement::Outer => {
                let mut t = code;
                let mut pre = code;
                if let (Some(h), true) = (input, dims.get(pool) > 0) {
                    pre = h;
                    let s = self.sigma(tape, pool, h);
                    let mixed = tape.matvec(bank.params(), mixer, s);
                    t = tape.add(t, mixed);
                }
                if bank.spec().bias {
                    let b = tape.param(bank.params(), bank.slot_of(Role::Bias { layer: pool, expert }));
                    t = tape.add(t, b);
                }
                (pre, Some(t))
            }
        };
        if term.is_none() {
            term = Some(self.sigma(tape, pool, pre));
        }
        let term = term.expect("set above");
        let got = tape.value(term).len();
        if got != width {
            return Err(Error::dim(format!("pool {pool} node output"), width, got));
        }
        Ok(NodeTrace { input, pre, term })
    }

    /// `sum alpha * term`, accumulated in expert-index order so that child
    /// order never changes the floating-point result.
    fn aggregate(&self, tape: &mut Tape, mut parts: Vec<(usize, NodeId, NodeId)>, width: usize) -> NodeId {
        parts.sort_by_key(|p| p.0);
        let scaled: Vec<NodeId> = parts.iter().map(|&(_, t, w)| tape.scale(t, w)).collect();
        tape.sum_nodes(&scaled, width)
    }
}

struct TokenRecord {
    x_l: NodeId,
    out: NodeId,
    tree: RoutingTree,
    nodes: Vec<NodeTrace>,
}

/// Propagates `x` through a fixed tree whose weights are the given nodes.
fn record_tree(
    tape: &mut Tape,
    prop: &mut Propagator,
    x: NodeId,
    tree: &RoutingTree,
    weights: &[NodeId],
) -> Result<(NodeId, Vec<NodeTrace>)> {
    let bank = prop.bank;
    tree.check(bank.spec())?;
    let dims = bank.dims().clone();
    let mut order: Vec<usize> = (0..tree.nodes().len()).collect();
    order.sort_by_key(|&k| tree.node(k).pool);
    let mut traces: Vec<Option<NodeTrace>> = vec![None; tree.nodes().len()];
    for k in order {
        let node = tree.node(k);
        let input = if node.pool == 0 {
            None
        } else {
            let parts = node
                .children
                .iter()
                .map(|&c| (tree.node(c).expert, traces[c].expect("children first").term, weights[c]))
                .collect();
            Some(prop.aggregate(tape, parts, dims.get(node.pool)))
        };
        traces[k] = Some(prop.term(tape, node.pool, node.expert, x, input)?);
    }
    let traces: Vec<NodeTrace> = traces.into_iter().map(|t| t.expect("every node visited")).collect();
    let parts = tree
        .roots()
        .iter()
        .map(|&r| (tree.node(r).expert, traces[r].term, weights[r]))
        .collect();
    let x_l = prop.aggregate(tape, parts, dims.last());
    Ok((x_l, traces))
}

fn project(tape: &mut Tape, bank: &ExpertBank, x_l: NodeId) -> NodeId {
    tape.matvec(bank.params(), bank.slot_of(Role::Proj), x_l)
}

fn check_token(bank: &ExpertBank, x: &[f64]) -> Result<()> {
    if x.len() != bank.spec().d {
        return Err(Error::dim("token", bank.spec().d, x.len()));
    }
    Ok(())
}

fn forward_fixed(x: &[f64], tree: &RoutingTree, bank: &ExpertBank, placement: Placement) -> Result<(Vector, ForwardTrace)> {
    check_token(bank, x)?;
    let mut tape = Tape::new();
    let xn = tape.constant(x.to_vec());
    let weights: Vec<NodeId> = tree.nodes().iter().map(|n| tape.constant(vec![n.weight])).collect();
    let mut prop = Propagator::new(bank, placement)?;
    let (x_l, nodes) = record_tree(&mut tape, &mut prop, xn, tree, &weights)?;
    let out = project(&mut tape, bank, x_l);
    let trace = ForwardTrace {
        stamp: bank.stamp(),
        x_l,
        out,
        tree: tree.clone(),
        nodes,
        stats: None,
        aux: None,
        min_kink: prop.min_kink,
        tape,
    };
    Ok((trace.output().to_vec().into(), trace))
}

/// `x_{l+1}^i = sum_n alpha sigma(B_l^n A_l^n x + W_l x_l^{i->n} + b_l^n)`,
/// then `x' = W_proj x_L`, with `alpha` taken from the tree. Pass
/// [`RoutingTree::binary_mask`] for binary-mask evaluation.
pub fn forward_smore(x: &[f64], tree: &RoutingTree, bank: &ExpertBank) -> Result<(Vector, ForwardTrace)> {
    forward_fixed(x, tree, bank, Placement::Inner)
}

/// `x_{l+1}^i = sum_n alpha (B_l^n A_l^n x + W_l sigma(x_l^n) + b_l^n)`.
pub fn forward_smore_star(x: &[f64], tree: &RoutingTree, bank: &ExpertBank) -> Result<(Vector, ForwardTrace)> {
    forward_fixed(x, tree, bank, Placement::Outer)
}

/// Fixed-tree forward using the placement of the bank's variant.
pub fn forward(x: &[f64], tree: &RoutingTree, bank: &ExpertBank) -> Result<(Vector, ForwardTrace)> {
    forward_fixed(x, tree, bank, Placement::of(bank.spec().variant))
}

fn record_token(
    tape: &mut Tape,
    prop: &mut Propagator,
    x: &[f64],
    rng: &mut RngState,
    mode: Mode,
    stats: &mut GateStats,
    aux: &mut [PoolAux],
) -> Result<TokenRecord> {
    let bank = prop.bank;
    check_token(bank, x)?;
    prop.reset();
    let xn = tape.constant(x.to_vec());
    let (tree, x_l, nodes) = match bank.spec().routing {
        RoutingDirection::TopDown => {
            let routed = router::record_topdown(tape, bank, xn, rng, mode, stats, aux)?;
            let (x_l, nodes) = record_tree(tape, prop, xn, &routed.tree, &routed.weights)?;
            (routed.tree, x_l, nodes)
        }
        RoutingDirection::BottomUp => record_bottomup(tape, prop, xn, rng, mode, stats, aux)?,
    };
    let out = project(tape, bank, x_l);
    Ok(TokenRecord { x_l, out, tree, nodes })
}

/// Routes and propagates one token on a single tape, so gradients reach the
/// router through the selected experts' gate weights.
pub fn forward_routed(x: &[f64], bank: &ExpertBank, rng: &mut RngState, mode: Mode) -> Result<(Vector, ForwardTrace)> {
    let spec = bank.spec();
    let mut tape = Tape::new();
    let mut stats = GateStats::new(spec);
    let mut aux = vec![PoolAux::default(); spec.depth];
    let mut prop = Propagator::new(bank, Placement::of(spec.variant))?;
    let rec = record_token(&mut tape, &mut prop, x, rng, mode, &mut stats, &mut aux)?;
    let aux_node = router::record_aux(&mut tape, &aux, &stats, spec.gamma);
    let trace = ForwardTrace {
        stamp: bank.stamp(),
        x_l: rec.x_l,
        out: rec.out,
        tree: rec.tree,
        nodes: rec.nodes,
        stats: Some(stats),
        aux: aux_node,
        min_kink: prop.min_kink,
        tape,
    };
    Ok((trace.output().to_vec().into(), trace))
}

/// Greedy distinct assignment for one bottom-up group: positions in order
/// take their best expert not already taken by an earlier sibling.
#[allow(clippy::too_many_arguments)]
fn record_group(
    tape: &mut Tape,
    scores: &[NodeId],
    noise: &[Option<NodeId>],
    gate: Gate,
    rng: &mut RngState,
    mode: Mode,
    stats: &mut router::PoolStats,
    aux: &mut PoolAux,
) -> (Vec<usize>, Vec<NodeId>) {
    let s = stats.experts;
    let mut values = Vec::with_capacity(scores.len());
    for (k, &sc) in scores.iter().enumerate() {
        stats.scores.push(tape.value(sc).to_vec());
        let v = match (gate, mode, noise[k]) {
            (Gate::NoisyTopk, Mode::Train, Some(logits)) => {
                let std = tape.unary(logits, Unary::Softplus);
                let eps: Vec<f64> = (0..s).map(|_| rng.normal()).collect();
                let eps = tape.constant(eps);
                let jitter = tape.mul(std, eps);
                tape.add(sc, jitter)
            }
            (Gate::Switch, _, _) => tape.softmax(sc),
            _ => sc,
        };
        values.push(v);
    }
    let mut taken = vec![false; s];
    let mut experts = Vec::with_capacity(scores.len());
    for &v in &values {
        let vals = tape.value(v);
        let order = router::ranking(vals);
        let mut free = order.iter().copied().filter(|&i| !taken[i]);
        let e = free.next().expect("fanout never exceeds pool size");
        if let Some(next) = free.next() {
            stats.min_gap = stats.min_gap.min(vals[e] - vals[next]);
        }
        taken[e] = true;
        experts.push(e);
    }
    let weights: Vec<NodeId> = match gate {
        Gate::Switch => experts
            .iter()
            .zip(&values)
            .map(|(&e, &p)| tape.gather(p, &[e]))
            .collect(),
        _ => {
            let chosen: Vec<NodeId> = experts
                .iter()
                .zip(&values)
                .map(|(&e, &v)| tape.gather(v, &[e]))
                .collect();
            let cat = tape.concat(&chosen);
            let w = tape.softmax(cat);
            (0..experts.len()).map(|k| tape.gather(w, &[k])).collect()
        }
    };
    stats.events += 1;
    let mut imp_parts = Vec::new();
    let mut load = vec![0.0; s];
    for (&e, &w) in experts.iter().zip(&weights) {
        stats.counts[e] += 1;
        stats.importance[e] += tape.scalar(w);
        stats.load[e] += 1.0;
        load[e] += 1.0;
        imp_parts.push(tape.scatter(w, &[e], s));
    }
    if gate == Gate::Switch {
        for &p in &values {
            for (i, v) in tape.value(p).iter().enumerate() {
                stats.prob_sum[i] += v;
            }
            stats.prob_rows += 1;
            aux.probs.push(p);
        }
    }
    let imp = tape.sum_nodes(&imp_parts, s);
    aux.importance.push(imp);
    aux.load.push(tape.constant(load));
    (experts, weights)
}

struct Position {
    expert: usize,
    weight: NodeId,
    trace: NodeTrace,
}

/// Bottom-up routing interleaved with propagation.
///
/// Pool 0 scores each group of siblings with its own position-key block
/// against `x_down`. A pool `l >= 1` position scores the experts from the
/// aggregate of its children concatenated with its position key.
fn record_bottomup(
    tape: &mut Tape,
    prop: &mut Propagator,
    x: NodeId,
    rng: &mut RngState,
    mode: Mode,
    stats: &mut GateStats,
    aux: &mut [PoolAux],
) -> Result<(RoutingTree, NodeId, Vec<NodeTrace>)> {
    let bank = prop.bank;
    let spec = bank.spec().clone();
    if spec.gate == Gate::Dense {
        return Err(Error::Unsupported("bottom-up routing is undefined for the dense gate".into()));
    }
    let params = bank.params();
    let dims = bank.dims().clone();
    let big_f = spec.total_fanouts();
    let noisy = spec.gate == Gate::NoisyTopk;
    let x_down = tape.matvec(params, bank.slot_of(Role::TokenDown), x);

    let s0 = spec.expert_counts[0];
    let f0 = spec.fanouts[0];
    let all_scores = tape.matvec(params, bank.slot_of(Role::PosKeys { layer: 0 }), x_down);
    let noise0 = noisy.then(|| tape.matvec(params, bank.slot_of(Role::BuNoise { layer: 0 }), x_down));
    let mut levels: Vec<Vec<Position>> = Vec::with_capacity(spec.depth);
    let mut level = Vec::with_capacity(big_f[0]);
    let mut inputs = Vec::with_capacity(big_f[1]);
    for g in 0..big_f[1] {
        let idx: Vec<usize> = (g * s0..(g + 1) * s0).collect();
        let scores = tape.gather(all_scores, &idx);
        let out = router::record_gate(tape, scores, noise0, spec.gate, f0, rng, mode, false, &mut stats.pools[0], &mut aux[0]);
        let mut parts = Vec::with_capacity(f0);
        for (k, &e) in out.indices.iter().enumerate() {
            let weight = tape.gather(out.weights, &[k]);
            let trace = prop.term(tape, 0, e, x, None)?;
            parts.push((e, trace.term, weight));
            level.push(Position { expert: e, weight, trace });
        }
        inputs.push(prop.aggregate(tape, parts, dims.get(1)));
    }
    levels.push(level);

    for pool in 1..spec.depth {
        let f = spec.fanouts[pool];
        let q1 = bank.slot_of(Role::BuQuery1 { layer: pool });
        let q2 = bank.slot_of(Role::BuQuery2 { layer: pool });
        let keys = bank.slot_of(Role::PosKeys { layer: pool });
        let mut scores = Vec::with_capacity(big_f[pool]);
        let mut noise = Vec::with_capacity(big_f[pool]);
        for (p, &h) in inputs.iter().enumerate() {
            let key = tape.param_row(params, keys, p);
            let cat = tape.concat(&[h, key]);
            let hid = tape.matvec(params, q1, cat);
            let hid = tape.unary(hid, Unary::Tanh);
            scores.push(tape.matvec(params, q2, hid));
            noise.push(noisy.then(|| tape.matvec(params, bank.slot_of(Role::BuNoise { layer: pool }), hid)));
        }
        let mut level = Vec::with_capacity(big_f[pool]);
        let mut next = Vec::with_capacity(big_f[pool + 1]);
        for g in 0..big_f[pool + 1] {
            let range = g * f..(g + 1) * f;
            let (experts, weights) = record_group(
                tape,
                &scores[range.clone()],
                &noise[range.clone()],
                spec.gate,
                rng,
                mode,
                &mut stats.pools[pool],
                &mut aux[pool],
            );
            let mut parts = Vec::with_capacity(f);
            for (k, p) in range.enumerate() {
                let trace = prop.term(tape, pool, experts[k], x, Some(inputs[p]))?;
                parts.push((experts[k], trace.term, weights[k]));
                level.push(Position {
                    expert: experts[k],
                    weight: weights[k],
                    trace,
                });
            }
            next.push(prop.aggregate(tape, parts, dims.get(pool + 1)));
        }
        levels.push(level);
        inputs = next;
    }
    stats.tokens += 1;

    // position p of pool l hangs under position p / f_l of pool l + 1
    let mut tree = RoutingTree::new(spec.depth);
    let mut traces = Vec::new();
    let mut ids_above: Vec<usize> = Vec::new();
    for pool in (0..spec.depth).rev() {
        let f = spec.fanouts[pool];
        let mut ids = Vec::with_capacity(levels[pool].len());
        for (p, pos) in levels[pool].iter().enumerate() {
            let parent = (pool + 1 < spec.depth).then(|| ids_above[p / f]);
            ids.push(tree.add(parent, pos.expert, tape.scalar(pos.weight)));
            traces.push(pos.trace);
        }
        ids_above = ids;
    }
    Ok((tree, inputs[0], traces))
}

/// One batch recorded on a single tape.
pub(crate) struct BatchRecord {
    pub tape: Tape,
    pub outs: Vec<NodeId>,
    pub stats: GateStats,
    pub aux: Option<NodeId>,
}

/// Records a batch; token `t` draws from `rng.substream(stream_base + t)`.
pub(crate) fn record_batch(
    bank: &ExpertBank,
    xs: &[&[f64]],
    rng: &RngState,
    stream_base: u64,
    mode: Mode,
) -> Result<BatchRecord> {
    let spec = bank.spec();
    let mut tape = Tape::new();
    let mut stats = GateStats::new(spec);
    let mut aux = vec![PoolAux::default(); spec.depth];
    let mut prop = Propagator::new(bank, Placement::of(spec.variant))?;
    let mut outs = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        let mut sub = rng.substream(stream_base + t as u64);
        let rec = record_token(&mut tape, &mut prop, x, &mut sub, mode, &mut stats, &mut aux)?;
        outs.push(rec.out);
    }
    let aux_node = router::record_aux(&mut tape, &aux, &stats, spec.gamma);
    Ok(BatchRecord {
        tape,
        outs,
        stats,
        aux: aux_node,
    })
}

/// Gradients of `grad_out . x'` with respect to every bank tensor, returned
/// as a bank of the same layout. Gate weights carry gradient into the
/// router; the discrete selection does not.
pub fn backward(trace: &ForwardTrace, grad_out: &[f64], bank: &ExpertBank) -> Result<ExpertBank> {
    backward_with_aux(trace, grad_out, false, bank)
}

/// Like [`backward`], optionally adding the gradient of the recorded
/// balance loss.
pub fn backward_with_aux(trace: &ForwardTrace, grad_out: &[f64], include_aux: bool, bank: &ExpertBank) -> Result<ExpertBank> {
    if trace.stamp != bank.stamp() {
        return Err(Error::StaleTrace);
    }
    let d_out = trace.output().len();
    if grad_out.len() != d_out {
        return Err(Error::dim("output gradient", d_out, grad_out.len()));
    }
    let mut seeds = vec![(trace.out, grad_out.to_vec())];
    if let (true, Some(a)) = (include_aux, trace.aux) {
        seeds.push((a, vec![1.0]));
    }
    Ok(bank.with_params(trace.tape.backward(bank.params(), &seeds)))
}

/// `x' = sum_i alpha_i B^i A^i x`.
pub fn forward_molre(x: &[f64], alphas: &[f64], base: &BaselineParams) -> Result<Vector> {
    if base.depth() != 1 {
        return Err(Error::Unsupported("expected a single-order baseline".into()));
    }
    forward_momor(x, &[alphas.to_vec()], base)
}

/// `x' = sum_l sum_i alpha_l^i B_l^i A_l^i x`.
pub fn forward_momor(x: &[f64], alphas: &[Vec<f64>], base: &BaselineParams) -> Result<Vector> {
    if x.len() != base.d {
        return Err(Error::dim("token", base.d, x.len()));
    }
    if alphas.len() != base.depth() {
        return Err(Error::dim("coefficient orders", base.depth(), alphas.len()));
    }
    let mut out = vec![0.0; base.d_out];
    for (pool, coeffs) in base.orders.iter().zip(alphas) {
        if coeffs.len() != pool.len() {
            return Err(Error::dim("coefficients per order", pool.len(), coeffs.len()));
        }
        for (pair, &a) in pool.iter().zip(coeffs) {
            if a == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(pair.apply(x)) {
                *o += a * v;
            }
        }
    }
    Ok(out.into())
}

/// Multi-order equivalent of an identity-activation tree pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Collapsed {
    /// `A_l^i` paired with `W_proj W_{L-1} .. W_{l+1} B_l^i`.
    pub base: BaselineParams,
    /// Sum over nodes `(l, i)` of the product of weights up to the root.
    pub alpha_hat: Vec<Vec<f64>>,
}

pub fn collapse_to_single_layer(bank: &ExpertBank, tree: &RoutingTree) -> Result<Collapsed> {
    let spec = bank.spec();
    if spec.activation != Activation::Identity {
        return Err(Error::Unsupported("collapse defined only for identity activation".into()));
    }
    if spec.bias {
        return Err(Error::Unsupported("collapse defined only without biases".into()));
    }
    tree.check(spec)?;
    let depth = spec.depth;
    // lift[l] = W_proj W_{L-1} .. W_{l+1}
    let mut lift = vec![Matrix::zeros(0, 0); depth];
    lift[depth - 1] = bank.tensor(Role::Proj).clone();
    for l in (0..depth - 1).rev() {
        lift[l] = lift[l + 1].matmul(bank.tensor(Role::Mixer { layer: l + 1 }));
    }
    let orders = (0..depth)
        .map(|l| {
            (0..spec.expert_counts[l])
                .map(|i| LowRankPair {
                    down: bank.tensor(Role::Down { layer: l, expert: i }).clone(),
                    up: lift[l].matmul(bank.tensor(Role::Up { layer: l, expert: i })),
                })
                .collect()
        })
        .collect();
    let mut alpha_hat: Vec<Vec<f64>> = spec.expert_counts.iter().map(|&s| vec![0.0; s]).collect();
    for n in tree.nodes() {
        let mut coeff = n.weight;
        let mut cur = n.parent;
        while let Some(p) = cur {
            coeff *= tree.node(p).weight;
            cur = tree.node(p).parent;
        }
        alpha_hat[n.pool][n.expert] += coeff;
    }
    Ok(Collapsed {
        base: BaselineParams {
            d: spec.d,
            d_out: spec.d_out(),
            orders,
        },
        alpha_hat,
    })
}

/// Tree whose collapsed coefficients are exactly `alphas[l][i]`.
///
/// Every nonzero coefficient becomes one node. Pool `l` hangs below the
/// first node of pool `l + 1`, its edge weights divided by that spine
/// node's path product. Each pool below the top needs a nonzero spine
/// above it.
pub fn realize_coefficients(alphas: &[Vec<f64>]) -> Result<RoutingTree> {
    let depth = alphas.len();
    if depth == 0 {
        return Err(Error::Unsupported("no coefficient orders".into()));
    }
    let mut tree = RoutingTree::new(depth);
    let mut spine: Option<(usize, f64)> = None;
    for pool in (0..depth).rev() {
        let (parent, above) = match spine {
            Some((id, prod)) => (Some(id), prod),
            None if pool == depth - 1 => (None, 1.0),
            None => {
                return Err(Error::Unsupported(format!(
                    "coefficients of pool {pool} need a nonzero coefficient in pool {}",
                    pool + 1
                )))
            }
        };
        let mut first = None;
        for (i, &a) in alphas[pool].iter().enumerate() {
            if a != 0.0 {
                let id = tree.add(parent, i, a / above);
                first.get_or_insert((id, a));
            }
        }
        spine = first;
        if spine.is_none() && alphas[..pool].iter().flatten().any(|&a| a != 0.0) {
            return Err(Error::Unsupported(format!(
                "coefficients below pool {pool} need a nonzero coefficient in pool {pool}"
            )));
        }
        if spine.is_none() {
            break;
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchitectureSpec;
    use crate::numerics::{finite_diff_grad, max_abs_diff};

    fn randomize(bank: &mut ExpertBank, rng: &mut RngState, scale: f64) {
        bank.randomize(rng, scale);
    }

    fn fig5() -> [RoutingTree; 3] {
        [
            RoutingTree::from_leaf_paths(2, &[vec![0, 0], vec![0, 2], vec![1, 1], vec![1, 3]]),
            RoutingTree::from_leaf_paths(2, &[vec![0, 0], vec![0, 1], vec![1, 2], vec![1, 3]]),
            RoutingTree::from_leaf_paths(2, &[vec![1, 0], vec![1, 1], vec![0, 2], vec![0, 3]]),
        ]
    }

    fn spec442(activation: Activation) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::uniform(2, 4, 2, 2, 6);
        spec.activation = activation;
        spec.d_down = 3;
        spec.m = 4;
        spec
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut bank = ExpertBank::init(&spec442(Activation::Relu), &mut RngState::new(0)).unwrap();
        randomize(&mut bank, &mut RngState::new(1), 0.5);
        let (out, _) = forward_smore(&[0.0; 6], &fig5()[0], &bank).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_sigma_fig5_outputs_agree() {
        let mut bank = ExpertBank::init(&spec442(Activation::Identity), &mut RngState::new(0)).unwrap();
        randomize(&mut bank, &mut RngState::new(2), 0.5);
        let x = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
        let outs: Vec<Vector> = fig5().iter().map(|t| forward_smore(&x, t, &bank).unwrap().0).collect();
        assert!(max_abs_diff(&outs[0], &outs[1]) <= 1e-12);
        assert!(max_abs_diff(&outs[1], &outs[2]) <= 1e-12);
    }

    #[test]
    fn star_separates_a_from_b_only() {
        let mut spec = spec442(Activation::Relu);
        spec.variant = Variant::SmoreStar;
        let mut bank = ExpertBank::init(&spec, &mut RngState::new(0)).unwrap();
        randomize(&mut bank, &mut RngState::new(3), 0.8);
        let x = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
        let t = fig5();
        let outs: Vec<Vector> = t.iter().map(|t| forward_smore_star(&x, t, &bank).unwrap().0).collect();
        assert!(max_abs_diff(&outs[1], &outs[2]) <= 1e-12);
        assert!(max_abs_diff(&outs[0], &outs[1]) > 1e-6);
    }

    #[test]
    fn star_with_identity_matches_inner() {
        let mut bank = ExpertBank::init(&spec442(Activation::Identity), &mut RngState::new(0)).unwrap();
        randomize(&mut bank, &mut RngState::new(4), 0.5);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        for t in fig5() {
            let a = forward_smore(&x, &t, &bank).unwrap().0;
            let b = forward_smore_star(&x, &t, &bank).unwrap().0;
            assert!(max_abs_diff(&a, &b) <= 1e-12);
        }
    }

    #[test]
    fn permuted_children_are_bit_identical() {
        let mut bank = ExpertBank::init(&spec442(Activation::Relu), &mut RngState::new(0)).unwrap();
        randomize(&mut bank, &mut RngState::new(5), 0.5);
        let x = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
        let mut rng = RngState::new(6);
        for t in fig5() {
            let base = forward_smore(&x, &t, &bank).unwrap().0;
            for _ in 0..5 {
                let p = t.permuted(&mut rng);
                assert_eq!(forward_smore(&x, &p, &bank).unwrap().0, base);
            }
        }
    }

    #[test]
    fn tree_spec_mismatch() {
        let bank = ExpertBank::init(&spec442(Activation::Relu), &mut RngState::new(0)).unwrap();
        let bad = RoutingTree::from_leaf_paths(2, &[vec![0, 7]]);
        assert!(matches!(forward_smore(&[0.0; 6], &bad, &bank), Err(Error::TreeMismatch(_))));
        let shallow = RoutingTree::from_leaf_paths(1, &[vec![0]]);
        assert!(matches!(forward_smore(&[0.0; 6], &shallow, &bank), Err(Error::TreeMismatch(_))));
    }

    #[test]
    fn backward_examples() {
        let bank = ExpertBank::init(&spec442(Activation::Relu), &mut RngState::new(0)).unwrap();
        let x = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
        let (_, trace) = forward_smore(&x, &fig5()[0], &bank).unwrap();
        let zero = backward(&trace, &[0.0; 6], &bank).unwrap();
        assert!(zero.params().iter().all(|g| g.max_abs() == 0.0));
        // B = 0: output does not depend on A
        let g = backward(&trace, &[1.0; 6], &bank).unwrap();
        for (role, m) in g.roles().iter().zip(g.params()) {
            if matches!(role, Role::Down { .. }) {
                assert_eq!(m.max_abs(), 0.0);
            }
        }
        let mut moved = bank.clone();
        moved.update(|_, _| {});
        assert!(matches!(backward(&trace, &[1.0; 6], &moved), Err(Error::StaleTrace)));
    }

    #[test]
    fn fixed_tree_gradient_matches_differences() {
        let spec = spec442(Activation::Relu);
        let mut bank = ExpertBank::init(&spec, &mut RngState::new(0)).unwrap();
        randomize(&mut bank, &mut RngState::new(7), 0.6);
        let x = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
        let tree = fig5()[0].clone();
        let (out, trace) = forward_smore(&x, &tree, &bank).unwrap();
        assert!(trace.min_kink_distance() > 1e-3);
        let g_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let grads = backward(&trace, &g_out, &bank).unwrap().flatten(false);
        let theta = bank.flatten(false);
        let fd = finite_diff_grad(
            |t| {
                let b = bank.unflatten(t, false).unwrap();
                forward_smore(&x, &tree, &b).unwrap().0.iter().map(|v| v * v).sum()
            },
            &theta,
            1e-5,
        )
        .unwrap();
        for (a, b) in grads.iter().zip(fd.iter()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn routed_forward_matches_fixed_forward() {
        for gate in [Gate::NoisyTopk, Gate::Switch, Gate::Dense] {
            let mut spec = spec442(Activation::Relu);
            spec.gate = gate;
            let mut bank = ExpertBank::init(&spec, &mut RngState::new(0)).unwrap();
            randomize(&mut bank, &mut RngState::new(8), 0.5);
            let x = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
            let (out, trace) = forward_routed(&x, &bank, &mut RngState::new(1), Mode::Train).unwrap();
            let (fixed, _) = forward_smore(&x, trace.tree(), &bank).unwrap();
            assert!(max_abs_diff(&out, &fixed) <= 1e-12);
        }
    }

    #[test]
    fn bottom_up_tree_shape() {
        for gate in [Gate::NoisyTopk, Gate::Switch] {
            let mut spec = ArchitectureSpec::uniform(3, 4, 2, 2, 6);
            spec.gate = gate;
            spec.routing = RoutingDirection::BottomUp;
            let mut bank = ExpertBank::init(&spec, &mut RngState::new(0)).unwrap();
            randomize(&mut bank, &mut RngState::new(9), 0.5);
            let x = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
            let (tree, stats) = router::route_bottomup(&x, &bank, &mut RngState::new(2), Mode::Train).unwrap();
            tree.check(&spec).unwrap();
            assert_eq!(tree.level_counts(), vec![8, 4, 2]);
            let again = router::route_bottomup(&x, &bank, &mut RngState::new(2), Mode::Train).unwrap();
            assert_eq!(again.0, tree);
            assert_eq!(stats.pools[0].events, 4);
            let (out, trace) = forward_routed(&x, &bank, &mut RngState::new(2), Mode::Train).unwrap();
            let (fixed, _) = forward_smore(&x, trace.tree(), &bank).unwrap();
            assert!(max_abs_diff(&out, &fixed) <= 1e-12);
        }
    }

    #[test]
    fn bottom_up_single_path() {
        let mut spec = ArchitectureSpec::uniform(2, 3, 2, 1, 6);
        spec.routing = RoutingDirection::BottomUp;
        let bank = ExpertBank::init(&spec, &mut RngState::new(0)).unwrap();
        let (tree, _) = router::route_bottomup(&[0.5; 6], &bank, &mut RngState::new(0), Mode::Eval).unwrap();
        assert_eq!(tree.level_counts(), vec![1, 1]);
        assert_eq!(tree.leaves().count(), 1);
    }

    #[test]
    fn momor_collapse_round_trip() {
        let mut bank = ExpertBank::init(&spec442(Activation::Identity), &mut RngState::new(0)).unwrap();
        randomize(&mut bank, &mut RngState::new(10), 0.5);
        let mut tree = fig5()[0].clone();
        let mut rng = RngState::new(11);
        let ws: Vec<f64> = (0..tree.nodes().len()).map(|_| rng.uniform()).collect();
        tree = reweight(&tree, &ws);
        let c = collapse_to_single_layer(&bank, &tree).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let a = forward_smore(&x, &tree, &bank).unwrap().0;
            let b = forward_momor(&x, &c.alpha_hat, &c.base).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-12);
        }
        let empty = RoutingTree::new(2);
        let c = collapse_to_single_layer(&bank, &empty).unwrap();
        assert!(c.alpha_hat.iter().flatten().all(|a| *a == 0.0));
        let relu = ExpertBank::init(&spec442(Activation::Relu), &mut RngState::new(0)).unwrap();
        let err = collapse_to_single_layer(&relu, &tree).unwrap_err();
        assert_eq!(err.to_string(), "collapse defined only for identity activation");
    }

    #[test]
    fn realized_coefficients_collapse_back() {
        let alphas = vec![vec![0.5, 0.0, 0.25, 2.0], vec![0.0, 0.8, 0.3, 0.0]];
        let tree = realize_coefficients(&alphas).unwrap();
        let bank = ExpertBank::init(&spec442(Activation::Identity), &mut RngState::new(0)).unwrap();
        let c = collapse_to_single_layer(&bank, &tree).unwrap();
        for (got, want) in c.alpha_hat.iter().flatten().zip(alphas.iter().flatten()) {
            assert!((got - want).abs() <= 1e-15);
        }
        assert!(realize_coefficients(&[vec![1.0], vec![0.0]]).is_err());
        assert_eq!(realize_coefficients(&[vec![0.0], vec![0.0]]).unwrap().nodes().len(), 0);
    }

    fn reweight(tree: &RoutingTree, ws: &[f64]) -> RoutingTree {
        let mut t = RoutingTree::new(tree.depth());
        let mut map = vec![0; tree.nodes().len()];
        for (k, n) in tree.nodes().iter().enumerate() {
            map[k] = t.add(n.parent.map(|p| map[p]), n.expert, ws[k]);
        }
        t
    }

    #[test]
    fn baseline_examples() {
        let base = BaselineParams::random(5, 5, &[2], &[2], &mut RngState::new(0));
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        let one = forward_molre(&x, &[1.0, 0.0], &base).unwrap();
        assert_eq!(&*one, &base.orders[0][0].apply(&x)[..]);
        assert!(forward_molre(&x, &[0.0, 0.0], &base).unwrap().iter().all(|v| *v == 0.0));
        let mut cancel = base.clone();
        let neg = Matrix::from_fn(5, 2, |i, j| -base.orders[0][0].up.get(i, j));
        cancel.orders[0][1] = LowRankPair {
            down: base.orders[0][0].down.clone(),
            up: neg,
        };
        assert!(forward_molre(&x, &[1.0, 1.0], &cancel).unwrap().norm_inf() <= 1e-15);
    }

    #[test]
    fn trace_json_truncates() {
        let mut spec = ArchitectureSpec::uniform(2, 2, 6, 1, 12);
        spec.activation = Activation::Relu;
        let bank = ExpertBank::init(&spec, &mut RngState::new(0)).unwrap();
        let (_, trace) = forward_routed(&[0.0; 12], &bank, &mut RngState::new(0), Mode::Eval).unwrap();
        let js = trace.to_json(false);
        assert!(js.nodes.iter().all(|n| n.term.len() <= TRACE_PREVIEW));
        assert!(js.nodes.iter().all(|n| n.term.iter().all(|v| *v == 0.0)));
        assert_eq!(trace.to_json(true).x_l.len(), 24);
    }
}
