//! Routing trees, gates, load statistics and auxiliary balance losses.

use serde::{Deserialize, Serialize};

use crate::config::{ArchitectureSpec, Gate, RoutingDirection};
use crate::error::{Error, Result};
use crate::experts::{ExpertBank, Role};
use crate::numerics::tape::{NodeId, Tape, Unary};
use crate::numerics::{Matrix, RngState};

/// Added to the squared mean in the coefficient of variation.
pub const CV_EPS: f64 = 1e-10;
/// Multiplicative jitter half-width of the switch gate in train mode.
pub const SWITCH_JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub pool: usize,
    pub expert: usize,
    pub weight: f64,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Token-specific activated tree. The root is virtual; its children come
/// from pool `depth - 1` and leaves from pool 0. A node's identity is its
/// ancestral path, so one expert may appear under several parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTree {
    depth: usize,
    nodes: Vec<TreeNode>,
    roots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathNodeJson {
    /// `(pool, expert)` pairs from the top pool down to this node.
    pub path: Vec<(usize, usize)>,
    pub expert: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub depth: usize,
    pub nodes: Vec<PathNodeJson>,
}

impl RoutingTree {
    pub fn new(depth: usize) -> Self {
        RoutingTree {
            depth,
            nodes: Vec::new(),
            roots: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn children_of(&self, parent: Option<usize>) -> &[usize] {
        match parent {
            None => &self.roots,
            Some(p) => &self.nodes[p].children,
        }
    }

    /// Appends a child of `parent` (the virtual root when `None`).
    pub fn add(&mut self, parent: Option<usize>, expert: usize, weight: f64) -> usize {
        let pool = match parent {
            None => self.depth - 1,
            Some(p) => self.nodes[p]
                .pool
                .checked_sub(1)
                .expect("pool-0 nodes cannot have children"),
        };
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            pool,
            expert,
            weight,
            parent,
            children: Vec::new(),
        });
        match parent {
            None => self.roots.push(id),
            Some(p) => self.nodes[p].children.push(id),
        }
        id
    }

    /// Tree with unit weights whose leaves have exactly the given paths
    /// (experts listed from the top pool down to pool 0).
    pub fn from_leaf_paths(depth: usize, paths: &[Vec<usize>]) -> Self {
        let mut tree = RoutingTree::new(depth);
        for path in paths {
            assert_eq!(path.len(), depth, "leaf path length");
            let mut parent = None;
            for &e in path {
                let existing = tree.children_of(parent).iter().copied().find(|&c| tree.nodes[c].expert == e);
                parent = Some(match existing {
                    Some(c) => c,
                    None => tree.add(parent, e, 1.0),
                });
            }
        }
        tree
    }

    /// `(pool, expert)` pairs from the top pool down to `id`.
    pub fn path(&self, id: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(k) = cur {
            out.push((self.nodes[k].pool, self.nodes[k].expert));
            cur = self.nodes[k].parent;
        }
        out.reverse();
        out
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&k| self.nodes[k].pool == 0)
    }

    /// Node count per pool.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.depth];
        for n in &self.nodes {
            counts[n.pool] += 1;
        }
        counts
    }

    /// Copy with every weight set to 1 (binary-mask evaluation).
    pub fn binary_mask(&self) -> Self {
        let mut t = self.clone();
        for n in &mut t.nodes {
            n.weight = 1.0;
        }
        t
    }

    /// Copy with every child list shuffled.
    pub fn permuted(&self, rng: &mut RngState) -> Self {
        let mut t = self.clone();
        rng.shuffle(&mut t.roots);
        for n in &mut t.nodes {
            rng.shuffle(&mut n.children);
        }
        t
    }

    /// Checks depth, pool consistency, expert ranges and sibling distinctness.
    pub fn check(&self, spec: &ArchitectureSpec) -> Result<()> {
        if self.depth != spec.depth {
            return Err(Error::TreeMismatch(format!(
                "tree depth {} vs spec depth {}",
                self.depth, spec.depth
            )));
        }
        let check_siblings = |ids: &[usize]| -> Result<()> {
            let mut seen: Vec<usize> = ids.iter().map(|&c| self.nodes[c].expert).collect();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::TreeMismatch("repeated expert under one parent".into()));
            }
            Ok(())
        };
        check_siblings(&self.roots)?;
        for (k, n) in self.nodes.iter().enumerate() {
            if n.expert >= spec.expert_counts[n.pool] {
                return Err(Error::TreeMismatch(format!(
                    "node {k}: expert {} outside pool {} of size {}",
                    n.expert, n.pool, spec.expert_counts[n.pool]
                )));
            }
            let expected = match n.parent {
                None => spec.depth - 1,
                Some(p) => self.nodes[p].pool.wrapping_sub(1),
            };
            if n.pool != expected {
                return Err(Error::TreeMismatch(format!("node {k} sits in the wrong pool")));
            }
            check_siblings(&n.children)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> TreeJson {
        TreeJson {
            depth: self.depth,
            nodes: (0..self.nodes.len())
                .map(|k| PathNodeJson {
                    path: self.path(k),
                    expert: self.nodes[k].expert,
                    weight: self.nodes[k].weight,
                })
                .collect(),
        }
    }
}

/// Per-pool routing statistics, summed over gate events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub gate: Gate,
    pub experts: usize,
    pub fanout: usize,
    /// Gate decisions (one per parent, or per bottom-up group).
    pub events: u64,
    pub counts: Vec<u64>,
    /// Summed gate weights.
    pub importance: Vec<f64>,
    /// Smooth load estimate in noisy train mode, selection counts otherwise.
    pub load: Vec<f64>,
    /// Summed full-pool probabilities (switch gate).
    pub prob_sum: Vec<f64>,
    pub prob_rows: u64,
    /// Smallest gap between the last selected and first rejected score.
    pub min_gap: f64,
    pub scores: Vec<Vec<f64>>,
}

impl PoolStats {
    pub fn new(gate: Gate, experts: usize, fanout: usize) -> Self {
        PoolStats {
            gate,
            experts,
            fanout,
            events: 0,
            counts: vec![0; experts],
            importance: vec![0.0; experts],
            load: vec![0.0; experts],
            prob_sum: vec![0.0; experts],
            prob_rows: 0,
            min_gap: f64::INFINITY,
            scores: Vec::new(),
        }
    }

    fn merge(&mut self, other: &PoolStats) {
        self.events += other.events;
        for i in 0..self.experts {
            self.counts[i] += other.counts[i];
            self.importance[i] += other.importance[i];
            self.load[i] += other.load[i];
            self.prob_sum[i] += other.prob_sum[i];
        }
        self.prob_rows += other.prob_rows;
        self.min_gap = self.min_gap.min(other.min_gap);
        self.scores.extend(other.scores.iter().cloned());
    }

    /// Per-expert selection frequency per gate event; sums to the fanout.
    pub fn utilization(&self) -> Vec<f64> {
        if self.events == 0 {
            return vec![0.0; self.experts];
        }
        self.counts.iter().map(|&c| c as f64 / self.events as f64).collect()
    }

    fn aux(&self) -> f64 {
        match self.gate {
            Gate::Dense => 0.0,
            Gate::NoisyTopk => cv_squared(&self.importance) + cv_squared(&self.load),
            Gate::Switch => {
                let total: u64 = self.counts.iter().sum();
                if total == 0 || self.prob_rows == 0 {
                    return 0.0;
                }
                let s = self.experts as f64;
                s * self
                    .counts
                    .iter()
                    .zip(&self.prob_sum)
                    .map(|(&c, &p)| (c as f64 / total as f64) * (p / self.prob_rows as f64))
                    .sum::<f64>()
            }
        }
    }
}

/// Mergeable statistics of one or more routed tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub tokens: u64,
    pub pools: Vec<PoolStats>,
}

impl GateStats {
    pub fn new(spec: &ArchitectureSpec) -> Self {
        GateStats {
            tokens: 0,
            pools: (0..spec.depth)
                .map(|l| PoolStats::new(spec.gate, spec.expert_counts[l], spec.effective_fanout(l)))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &GateStats) {
        assert_eq!(self.pools.len(), other.pools.len(), "merging stats of different depths");
        self.tokens += other.tokens;
        for (a, b) in self.pools.iter_mut().zip(&other.pools) {
            a.merge(b);
        }
    }

    pub fn merged(mut self, other: &GateStats) -> GateStats {
        self.merge(other);
        self
    }

    pub fn min_gap(&self) -> f64 {
        self.pools.iter().map(|p| p.min_gap).fold(f64::INFINITY, f64::min)
    }
}

/// Population coefficient of variation squared, `var / (mean^2 + eps)`.
pub fn cv_squared(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var / (mean * mean + CV_EPS)
}

/// `gamma * sum over pools` of each pool's balance term: importance plus
/// load coefficient of variation squared for noisy top-k, the
/// fraction-times-probability product for switch, nothing for dense.
pub fn aux_losses(stats: &GateStats, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    gamma * stats.pools.iter().map(PoolStats::aux).sum::<f64>()
}

/// Ranking by value descending, lowest index first on ties.
pub(crate) fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn gap_at(values: &[f64], order: &[usize], f: usize) -> f64 {
    if f < order.len() {
        values[order[f - 1]] - values[order[f]]
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateChoice {
    /// Selected experts, best first.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Scores after noise (equal to the input outside noisy train mode).
    pub noisy: Vec<f64>,
    /// Per-expert load contribution of this decision.
    pub load: Vec<f64>,
    pub stats: PoolStats,
}

/// One gate decision on plain values.
///
/// `noise_logits` are the learned noise scores of the noisy top-k gate; noise
/// `N(0,1) * softplus(logit)` is added in train mode only.
pub fn gate_select(
    scores: &[f64],
    noise_logits: Option<&[f64]>,
    gate: Gate,
    f: usize,
    rng: &mut RngState,
    mode: Mode,
) -> Result<GateChoice> {
    let s = scores.len();
    if s == 0 {
        return Err(Error::EmptyVector);
    }
    if f > s || f == 0 {
        return Err(Error::FanoutExceedsPool { fanout: f, pool: s });
    }
    let mut tape = Tape::new();
    let scores_node = tape.constant(scores.to_vec());
    let noise_node = noise_logits.map(|n| tape.constant(n.to_vec()));
    let mut stats = PoolStats::new(gate, s, f);
    let mut aux = PoolAux::default();
    let out = record_gate(&mut tape, scores_node, noise_node, gate, f, rng, mode, true, &mut stats, &mut aux);
    let weights = tape.value(out.weights).to_vec();
    let noisy = tape.value(out.noisy).to_vec();
    let load = stats.load.clone();
    Ok(GateChoice {
        indices: out.indices,
        weights,
        noisy,
        load,
        stats,
    })
}

/// Differentiable handles accumulated for one pool's balance loss.
#[derive(Debug, Clone, Default)]
pub(crate) struct PoolAux {
    pub importance: Vec<NodeId>,
    pub load: Vec<NodeId>,
    pub probs: Vec<NodeId>,
}

pub(crate) struct GateOut {
    pub indices: Vec<usize>,
    /// Weights of `indices`, in the same order.
    pub weights: NodeId,
    pub noisy: NodeId,
}

/// Records one gate decision; selection itself is not differentiated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_gate(
    tape: &mut Tape,
    scores: NodeId,
    noise_logits: Option<NodeId>,
    gate: Gate,
    f: usize,
    rng: &mut RngState,
    mode: Mode,
    smooth_load: bool,
    stats: &mut PoolStats,
    aux: &mut PoolAux,
) -> GateOut {
    let s = tape.value(scores).len();
    stats.events += 1;
    stats.scores.push(tape.value(scores).to_vec());
    match gate {
        Gate::Dense => {
            let w = tape.softmax(scores);
            let indices: Vec<usize> = (0..s).collect();
            for i in 0..s {
                stats.counts[i] += 1;
                stats.load[i] += 1.0;
                stats.importance[i] += tape.value(w)[i];
                stats.prob_sum[i] += tape.value(w)[i];
            }
            stats.prob_rows += 1;
            aux.importance.push(w);
            GateOut {
                indices,
                weights: w,
                noisy: scores,
            }
        }
        Gate::NoisyTopk => {
            let noisy_train = mode == Mode::Train && noise_logits.is_some();
            let (noisy, std) = match (noisy_train, noise_logits) {
                (true, Some(logits)) => {
                    let std = tape.unary(logits, Unary::Softplus);
                    let eps: Vec<f64> = (0..s).map(|_| rng.normal()).collect();
                    let eps = tape.constant(eps);
                    let jitter = tape.mul(std, eps);
                    (tape.add(scores, jitter), Some(std))
                }
                _ => (scores, None),
            };
            let values = tape.value(noisy).to_vec();
            let order = ranking(&values);
            let indices = order[..f].to_vec();
            stats.min_gap = stats.min_gap.min(gap_at(&values, &order, f));
            let picked = tape.gather(noisy, &indices);
            let w = tape.softmax(picked);
            let imp = tape.scatter(w, &indices, s);
            for (k, &i) in indices.iter().enumerate() {
                stats.counts[i] += 1;
                stats.importance[i] += tape.value(w)[k];
            }
            aux.importance.push(imp);
            let load = match std {
                Some(std) if smooth_load && f < s => {
                    // P(expert i stays in the top f when only its own noise is redrawn)
                    let mut rank = vec![0; s];
                    for (r, &i) in order.iter().enumerate() {
                        rank[i] = r;
                    }
                    let thr_idx: Vec<usize> = (0..s)
                        .map(|i| if rank[i] < f { order[f] } else { order[f - 1] })
                        .collect();
                    let thr = tape.gather(noisy, &thr_idx);
                    let margin = tape.sub(scores, thr);
                    let z = tape.div(margin, std);
                    tape.unary(z, Unary::NormCdf)
                }
                _ => {
                    let mut ind = vec![0.0; s];
                    for &i in &indices {
                        ind[i] = 1.0;
                    }
                    tape.constant(ind)
                }
            };
            for i in 0..s {
                stats.load[i] += tape.value(load)[i];
            }
            aux.load.push(load);
            GateOut {
                indices,
                weights: w,
                noisy,
            }
        }
        Gate::Switch => {
            let p = tape.softmax(scores);
            let values = tape.value(p).to_vec();
            let order = ranking(&values);
            let indices = order[..f].to_vec();
            stats.min_gap = stats.min_gap.min(gap_at(&values, &order, f));
            let w = tape.gather(p, &indices);
            let imp = tape.scatter(w, &indices, s);
            for (k, &i) in indices.iter().enumerate() {
                stats.counts[i] += 1;
                stats.load[i] += 1.0;
                stats.importance[i] += tape.value(w)[k];
            }
            for (i, v) in values.iter().enumerate() {
                stats.prob_sum[i] += v;
            }
            stats.prob_rows += 1;
            aux.importance.push(imp);
            aux.probs.push(p);
            GateOut {
                indices,
                weights: w,
                noisy: scores,
            }
        }
    }
}

fn record_cv_squared(tape: &mut Tape, v: NodeId) -> NodeId {
    let n = tape.value(v).len() as f64;
    let total = tape.sum(v);
    let mean = tape.scale_const(total, 1.0 / n);
    let mean_b = tape.broadcast(mean, n as usize);
    let diff = tape.sub(v, mean_b);
    let sq = tape.unary(diff, Unary::Square);
    let sum_sq = tape.sum(sq);
    let var = tape.scale_const(sum_sq, 1.0 / n);
    let mean_sq = tape.unary(mean, Unary::Square);
    let den = tape.add_const(mean_sq, CV_EPS);
    tape.div(var, den)
}

/// Differentiable counterpart of [`aux_losses`]; `None` when no pool
/// contributes.
pub(crate) fn record_aux(tape: &mut Tape, aux: &[PoolAux], stats: &GateStats, gamma: f64) -> Option<NodeId> {
    if gamma == 0.0 {
        return None;
    }
    let mut terms = Vec::new();
    for (pa, ps) in aux.iter().zip(&stats.pools) {
        let s = ps.experts;
        match ps.gate {
            Gate::Dense => {}
            Gate::NoisyTopk => {
                if !pa.importance.is_empty() {
                    let imp = tape.sum_nodes(&pa.importance, s);
                    terms.push(record_cv_squared(tape, imp));
                }
                if !pa.load.is_empty() {
                    let load = tape.sum_nodes(&pa.load, s);
                    terms.push(record_cv_squared(tape, load));
                }
            }
            Gate::Switch => {
                let total: u64 = ps.counts.iter().sum();
                if pa.probs.is_empty() || total == 0 {
                    continue;
                }
                let frac: Vec<f64> = ps.counts.iter().map(|&c| c as f64 / total as f64).collect();
                let frac = tape.constant(frac);
                let probs = tape.sum_nodes(&pa.probs, s);
                let dot = tape.dot(frac, probs);
                terms.push(tape.scale_const(dot, s as f64 / ps.prob_rows as f64));
            }
        }
    }
    if terms.is_empty() {
        return None;
    }
    let total = tape.sum_nodes(&terms, 1);
    Some(tape.scale_const(total, gamma))
}

/// Routing decisions recorded on a tape, with a weight node per tree node.
pub(crate) struct RoutedTree {
    pub tree: RoutingTree,
    /// Length-1 weight node for each tree node.
    pub weights: Vec<NodeId>,
}

fn query(
    tape: &mut Tape,
    params: &[Matrix],
    bank: &ExpertBank,
    pool: usize,
    input: NodeId,
) -> (NodeId, Option<NodeId>) {
    let spec = bank.spec();
    let h = tape.matvec(params, bank.slot_of(Role::Query1 { layer: pool }), input);
    let h = tape.unary(h, Unary::Tanh);
    let q = tape.matvec(params, bank.slot_of(Role::Query2 { layer: pool }), h);
    let scores = tape.matvec(params, bank.slot_of(Role::Keys { layer: pool }), q);
    let noise = (spec.gate == Gate::NoisyTopk)
        .then(|| tape.matvec(params, bank.slot_of(Role::NoiseKeys { layer: pool }), q));
    (scores, noise)
}

/// Top-down routing of token node `x` on `tape`.
///
/// The top pool is scored from `x_down` alone; every deeper decision sees
/// `x_down` followed by the keys of all activated ancestors, nearest first.
pub(crate) fn record_topdown(
    tape: &mut Tape,
    bank: &ExpertBank,
    x: NodeId,
    rng: &mut RngState,
    mode: Mode,
    stats: &mut GateStats,
    aux: &mut [PoolAux],
) -> Result<RoutedTree> {
    let spec = bank.spec();
    if spec.routing != RoutingDirection::TopDown {
        return Err(Error::Unsupported("bank was built for bottom-up routing".into()));
    }
    let params = bank.params();
    let x_down = tape.matvec(params, bank.slot_of(Role::TokenDown), x);
    let mut tree = RoutingTree::new(spec.depth);
    let mut weights = Vec::new();
    // (parent node, ancestor keys nearest first)
    let mut frontier: Vec<(Option<usize>, Vec<NodeId>)> = vec![(None, Vec::new())];
    for pool in (0..spec.depth).rev() {
        let f = spec.effective_fanout(pool);
        let mut next = Vec::new();
        for (parent, chain) in frontier {
            let mut input = if chain.is_empty() {
                x_down
            } else {
                let mut parts = vec![x_down];
                parts.extend_from_slice(&chain);
                tape.concat(&parts)
            };
            if spec.gate == Gate::Switch && mode == Mode::Train {
                let n = tape.value(input).len();
                let jitter: Vec<f64> = (0..n)
                    .map(|_| rng.uniform_range(1.0 - SWITCH_JITTER, 1.0 + SWITCH_JITTER))
                    .collect();
                let jitter = tape.constant(jitter);
                input = tape.mul(input, jitter);
            }
            let (scores, noise) = query(tape, params, bank, pool, input);
            let out = record_gate(
                tape,
                scores,
                noise,
                spec.gate,
                f,
                rng,
                mode,
                true,
                &mut stats.pools[pool],
                &mut aux[pool],
            );
            for (k, &e) in out.indices.iter().enumerate() {
                let w = tape.gather(out.weights, &[k]);
                let id = tree.add(parent, e, tape.scalar(w));
                weights.push(w);
                if pool > 0 {
                    let key = tape.param_row(params, bank.slot_of(Role::Keys { layer: pool }), e);
                    let mut child_chain = vec![key];
                    child_chain.extend_from_slice(&chain);
                    next.push((Some(id), child_chain));
                }
            }
        }
        frontier = next;
    }
    stats.tokens += 1;
    Ok(RoutedTree { tree, weights })
}

/// Routes one token top-down and returns the tree with its statistics.
pub fn route_topdown(x: &[f64], bank: &ExpertBank, rng: &mut RngState, mode: Mode) -> Result<(RoutingTree, GateStats)> {
    let spec = bank.spec();
    if x.len() != spec.d {
        return Err(Error::dim("token", spec.d, x.len()));
    }
    let mut tape = Tape::new();
    let xn = tape.constant(x.to_vec());
    let mut stats = GateStats::new(spec);
    let mut aux = vec![PoolAux::default(); spec.depth];
    let routed = record_topdown(&mut tape, bank, xn, rng, mode, &mut stats, &mut aux)?;
    Ok((routed.tree, stats))
}

/// Routes one token bottom-up: children are chosen per tree position before
/// their parents, and each higher decision sees the aggregated embedding of
/// the children below it.
pub fn route_bottomup(x: &[f64], bank: &ExpertBank, rng: &mut RngState, mode: Mode) -> Result<(RoutingTree, GateStats)> {
    if bank.spec().routing != RoutingDirection::BottomUp {
        return Err(Error::Unsupported("bank was built for top-down routing".into()));
    }
    let (_, trace) = crate::propagate::forward_routed(x, bank, rng, mode)?;
    let stats = trace.stats().cloned().expect("routed trace carries stats");
    Ok((trace.tree().clone(), stats))
}
