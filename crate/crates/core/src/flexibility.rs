//! Structural flexibility: closed forms for every architecture and the
//! exhaustive enumeration oracles that certify them on small instances.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ArchitectureSpec, Variant};
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::numerics::{max_abs_diff, RngState};
use crate::propagate::{collapse_to_single_layer, forward, forward_momor};
use crate::router::RoutingTree;

pub type BigCount = BigUint;

/// Largest number of trees an oracle will enumerate.
pub const DEFAULT_CAP: u64 = 1_000_000;

/// Outputs closer than this (relative to their magnitude) count as equal.
pub const DISTINCT_TOL: f64 = 1e-9;

/// `C(n, k)` by the exact multiplicative recurrence.
pub fn binomial(n: &BigUint, k: usize) -> BigUint {
    let kb = BigUint::from(k);
    if &kb > n {
        return BigUint::zero();
    }
    let k = if BigUint::from(2 * k) > *n {
        (n - &kb).to_usize().expect("complement of a small k fits usize")
    } else {
        k
    };
    let mut acc = BigUint::one();
    for i in 1..=k {
        // acc * (n - k + i) is divisible by i: it is i * C(n - k + i, i).
        acc = acc * (n - BigUint::from(k) + BigUint::from(i)) / BigUint::from(i);
    }
    acc
}

fn binom(n: usize, k: usize) -> BigUint {
    binomial(&BigUint::from(n), k)
}

/// `F_l` per level without overflow: saturates at `usize::MAX`.
fn saturating_fanouts(spec: &ArchitectureSpec) -> Vec<usize> {
    let f = spec.effective_fanouts();
    let mut out = vec![1usize; spec.depth + 1];
    for l in (0..spec.depth).rev() {
        out[l] = out[l + 1].saturating_mul(f[l]);
    }
    out
}

fn check_fanouts(spec: &ArchitectureSpec) -> Result<()> {
    for l in 0..spec.depth {
        if spec.fanouts[l] > spec.expert_counts[l] {
            return Err(Error::FanoutExceedsPool {
                fanout: spec.fanouts[l],
                pool: spec.expert_counts[l],
            });
        }
    }
    Ok(())
}

/// `prod_l C(s_l, f_l)^{F_{l+1}}`.
pub fn gamma_smore(spec: &ArchitectureSpec) -> BigCount {
    let f = spec.effective_fanouts();
    let big_f = saturating_fanouts(spec);
    (0..spec.depth).fold(BigUint::one(), |acc, l| {
        acc * num_traits::pow::Pow::pow(binom(spec.expert_counts[l], f[l]), big_f[l + 1])
    })
}

/// `C(s_{L-1}, f_{L-1}) prod_{l <= L-2} sum_{i=f_l}^{min(F_l, s_l)} C(s_l, i)`.
pub fn gamma_momor_bound(spec: &ArchitectureSpec) -> BigCount {
    let f = spec.effective_fanouts();
    let big_f = saturating_fanouts(spec);
    let top = spec.depth - 1;
    let mut acc = binom(spec.expert_counts[top], f[top]);
    for l in 0..top {
        let s = spec.expert_counts[l];
        let hi = big_f[l].min(s);
        let sum = (f[l]..=hi).fold(BigUint::zero(), |a, i| a + binom(s, i));
        acc *= sum;
    }
    acc
}

/// `G^l = C(s_{l-1}, f_{l-1}) C(G^{l-1} + f_{l-1} - 1, f_{l-1})` from `G^0 = 1`.
pub fn gamma_smore_star(spec: &ArchitectureSpec) -> BigCount {
    let f = spec.effective_fanouts();
    let mut g = BigUint::one();
    for l in 0..spec.depth {
        let multisets = binomial(&(&g + BigUint::from(f[l]) - BigUint::one()), f[l]);
        g = binom(spec.expert_counts[l], f[l]) * multisets;
    }
    g
}

/// Shared-bank flexibility; defined for uniform `s` and `f` only.
pub fn gamma_smore_shared(spec: &ArchitectureSpec) -> Result<BigCount> {
    let uniform = |v: &[usize]| v.windows(2).all(|w| w[0] == w[1]);
    if !uniform(&spec.expert_counts) || !uniform(&spec.fanouts) {
        return Err(Error::Unsupported(
            "shared-bank flexibility requires uniform expert counts and fanouts".into(),
        ));
    }
    Ok(gamma_smore(spec))
}

/// Whether a parent's children are drawn as sets or as ordered tuples.
/// Ordered enumeration produces every child ordering of every tree, so
/// isomorphism classes have more than one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnumMode {
    Subsets,
    Ordered,
}

fn subsets(s: usize, f: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(f);
    fn rec(start: usize, s: usize, f: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == f {
            out.push(cur.clone());
            return;
        }
        for e in start..s {
            cur.push(e);
            rec(e + 1, s, f, cur, out);
            cur.pop();
        }
    }
    rec(0, s, f, &mut cur, &mut out);
    out
}

fn arrangements(s: usize, f: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(f);
    let mut used = vec![false; s];
    fn rec(s: usize, f: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == f {
            out.push(cur.clone());
            return;
        }
        for e in 0..s {
            if !used[e] {
                used[e] = true;
                cur.push(e);
                rec(s, f, cur, used, out);
                cur.pop();
                used[e] = false;
            }
        }
    }
    rec(s, f, &mut cur, &mut used, &mut out);
    out
}

/// Number of trees `enumerate_trees` would yield.
pub fn tree_count(spec: &ArchitectureSpec, mode: EnumMode) -> BigCount {
    let f = spec.effective_fanouts();
    let big_f = saturating_fanouts(spec);
    (0..spec.depth).fold(BigUint::one(), |acc, l| {
        let per_parent = match mode {
            EnumMode::Subsets => binom(spec.expert_counts[l], f[l]),
            EnumMode::Ordered => (0..f[l]).fold(BigUint::one(), |a, i| a * BigUint::from(spec.expert_counts[l] - i)),
        };
        acc * num_traits::pow::Pow::pow(per_parent, big_f[l + 1])
    })
}

/// Every tree reachable by some router, addressed by a mixed-radix index:
/// one digit per parent slot, slots in breadth-first order from the top.
#[derive(Debug, Clone)]
pub struct TreeEnumerator {
    depth: usize,
    /// Child choices for a parent whose children come from pool `l`.
    choices: Vec<Vec<Vec<usize>>>,
    total: u64,
}

impl TreeEnumerator {
    pub fn new(spec: &ArchitectureSpec, mode: EnumMode, cap: u64) -> Result<Self> {
        spec.validate()?;
        check_fanouts(spec)?;
        let count = tree_count(spec, mode);
        let total = match count.to_u64() {
            Some(c) if c <= cap => c,
            _ => {
                return Err(Error::CapExceeded {
                    count: count.to_string(),
                    cap,
                })
            }
        };
        let f = spec.effective_fanouts();
        let choices = (0..spec.depth)
            .map(|l| match mode {
                EnumMode::Subsets => subsets(spec.expert_counts[l], f[l]),
                EnumMode::Ordered => arrangements(spec.expert_counts[l], f[l]),
            })
            .collect();
        Ok(TreeEnumerator {
            depth: spec.depth,
            choices,
            total,
        })
    }

    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Tree number `index`, with unit weights.
    pub fn tree(&self, index: u64) -> RoutingTree {
        let mut tree = RoutingTree::new(self.depth);
        let mut rest = index;
        let mut frontier: Vec<Option<usize>> = vec![None];
        for pool in (0..self.depth).rev() {
            let radix = self.choices[pool].len() as u64;
            let mut next = Vec::with_capacity(frontier.len() * self.choices[pool][0].len());
            for parent in frontier {
                let digit = (rest % radix) as usize;
                rest /= radix;
                for &e in &self.choices[pool][digit] {
                    next.push(Some(tree.add(parent, e, 1.0)));
                }
            }
            frontier = next;
        }
        tree
    }

    pub fn iter(&self) -> impl Iterator<Item = RoutingTree> + '_ {
        (0..self.total).map(move |i| self.tree(i))
    }
}

/// Iterator over every reachable tree, or `CapExceeded` naming the count.
pub fn enumerate_trees(spec: &ArchitectureSpec, mode: EnumMode, cap: u64) -> Result<impl Iterator<Item = RoutingTree>> {
    let en = TreeEnumerator::new(spec, mode, cap)?;
    Ok((0..en.total).map(move |i| en.tree(i)))
}

/// Sorted set of leaf ancestral paths, experts listed from the top pool down.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CanonicalTree(pub Vec<Vec<usize>>);

impl CanonicalTree {
    pub fn leaf_count(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for CanonicalTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let paths: Vec<String> = self
            .0
            .iter()
            .map(|p| p.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        write!(f, "{{{}}}", paths.join(" "))
    }
}

pub fn canonicalize(tree: &RoutingTree) -> CanonicalTree {
    let mut paths: Vec<Vec<usize>> = tree
        .leaves()
        .map(|k| tree.path(k).into_iter().map(|(_, e)| e).collect())
        .collect();
    paths.sort_unstable();
    CanonicalTree(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountOptions {
    pub cap: u64,
    pub parallel: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        CountOptions {
            cap: DEFAULT_CAP,
            parallel: false,
        }
    }
}

/// Ordered enumeration when it fits under the cap, so that classes are
/// actually merged; subsets otherwise.
fn widest_enumerator(spec: &ArchitectureSpec, cap: u64) -> Result<TreeEnumerator> {
    TreeEnumerator::new(spec, EnumMode::Ordered, cap).or_else(|_| TreeEnumerator::new(spec, EnumMode::Subsets, cap))
}

fn collect_set<T, F>(en: &TreeEnumerator, parallel: bool, key: F) -> HashSet<T>
where
    T: Eq + std::hash::Hash + Send,
    F: Fn(&RoutingTree) -> T + Sync,
{
    if parallel {
        (0..en.len()).into_par_iter().map(|i| key(&en.tree(i))).collect()
    } else {
        en.iter().map(|t| key(&t)).collect()
    }
}

/// Distinct canonical forms over every reachable tree.
pub fn count_nonisomorphic(spec: &ArchitectureSpec, opts: CountOptions) -> Result<BigCount> {
    let en = widest_enumerator(spec, opts.cap)?;
    Ok(BigUint::from(collect_set(&en, opts.parallel, canonicalize).len()))
}

/// Interned signature of a node's aggregated child input under the
/// outer-activation variant: (child expert set, child class multiset).
struct StarClasses {
    ids: HashMap<(Vec<usize>, Vec<usize>), usize>,
}

impl StarClasses {
    fn class(&mut self, tree: &RoutingTree, children: &[usize]) -> usize {
        if children.is_empty() {
            return 0;
        }
        let mut experts: Vec<usize> = children.iter().map(|&c| tree.node(c).expert).collect();
        let mut classes: Vec<usize> = children.iter().map(|&c| self.class(tree, &tree.node(c).children)).collect();
        experts.sort_unstable();
        classes.sort_unstable();
        let next = self.ids.len() + 1;
        *self.ids.entry((experts, classes)).or_insert(next)
    }
}

/// Distinct root signatures under the outer-activation variant.
pub fn count_star_classes(spec: &ArchitectureSpec, opts: CountOptions) -> Result<BigCount> {
    let en = TreeEnumerator::new(spec, EnumMode::Subsets, opts.cap)?;
    let mut interner = StarClasses { ids: HashMap::new() };
    let mut roots = HashSet::new();
    for tree in en.iter() {
        roots.insert(interner.class(&tree, tree.roots()));
    }
    Ok(BigUint::from(roots.len()))
}

/// Distinct tuples of per-pool activated expert sets.
pub fn momor_selection_patterns(spec: &ArchitectureSpec, opts: CountOptions) -> Result<BigCount> {
    let en = TreeEnumerator::new(spec, EnumMode::Subsets, opts.cap)?;
    let depth = spec.depth;
    let patterns = collect_set(&en, opts.parallel, |t| {
        let mut sets = vec![BTreeSet::new(); depth];
        for n in t.nodes() {
            sets[n.pool].insert(n.expert);
        }
        sets
    });
    Ok(BigUint::from(patterns.len()))
}

/// Size of the single-linkage partition of `outputs` at `DISTINCT_TOL`.
pub fn count_distinct(outputs: &[Vec<f64>]) -> usize {
    let n = outputs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let scale = 1f64.max(max_abs(&outputs[i])).max(max_abs(&outputs[j]));
            if max_abs_diff(&outputs[i], &outputs[j]) <= DISTINCT_TOL * scale {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistinctnessReport {
    pub classes: usize,
    pub trees_evaluated: usize,
    /// Outputs after merging any two within `DISTINCT_TOL`.
    pub distinct_outputs: usize,
    /// Smallest infinity-norm gap between outputs of different classes.
    pub min_inter_class: f64,
    /// Largest infinity-norm gap between outputs of one class.
    pub max_intra_class: f64,
}

/// Evaluates the bank's forward pass on every reachable tree (every child
/// ordering when the ordered count fits under the cap) at one random probe.
pub fn distinctness_report(bank: &ExpertBank, rng: &mut RngState, opts: CountOptions) -> Result<DistinctnessReport> {
    let spec = bank.spec();
    let en = widest_enumerator(spec, opts.cap)?;
    let x: Vec<f64> = (0..spec.d).map(|_| rng.normal()).collect();
    let eval = |i: u64| -> Result<(CanonicalTree, Vec<f64>)> {
        let tree = en.tree(i);
        let (out, _) = forward(&x, &tree, bank)?;
        Ok((canonicalize(&tree), out.into_inner()))
    };
    let evaluated: Vec<(CanonicalTree, Vec<f64>)> = if opts.parallel {
        (0..en.len()).into_par_iter().map(eval).collect::<Result<_>>()?
    } else {
        (0..en.len()).map(eval).collect::<Result<_>>()?
    };
    let mut reps: HashMap<CanonicalTree, usize> = HashMap::new();
    let mut rep_order = Vec::new();
    let mut max_intra = 0.0f64;
    for (k, (class, out)) in evaluated.iter().enumerate() {
        match reps.get(class) {
            Some(&r) => max_intra = max_intra.max(max_abs_diff(&evaluated[r].1, out)),
            None => {
                reps.insert(class.clone(), k);
                rep_order.push(k);
            }
        }
    }
    let rep_outputs: Vec<Vec<f64>> = rep_order.iter().map(|&k| evaluated[k].1.clone()).collect();
    let mut min_inter = f64::INFINITY;
    for i in 0..rep_outputs.len() {
        for j in i + 1..rep_outputs.len() {
            min_inter = min_inter.min(max_abs_diff(&rep_outputs[i], &rep_outputs[j]));
        }
    }
    Ok(DistinctnessReport {
        classes: rep_order.len(),
        trees_evaluated: evaluated.len(),
        distinct_outputs: count_distinct(&rep_outputs),
        min_inter_class: min_inter,
        max_intra_class: max_intra,
    })
}

/// Distinct outputs of an identity-activation bank after collapsing each
/// tree to multi-order form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseCounts {
    pub classes: usize,
    /// Path-count coefficients, exactly what the tree pass computes.
    pub with_multiplicity: usize,
    /// Coefficients replaced by their activation indicator.
    pub binary_coefficients: usize,
}

pub fn collapsed_output_counts(bank: &ExpertBank, rng: &mut RngState, opts: CountOptions) -> Result<CollapseCounts> {
    let spec = bank.spec();
    let en = TreeEnumerator::new(spec, EnumMode::Subsets, opts.cap)?;
    let x: Vec<f64> = (0..spec.d).map(|_| rng.normal()).collect();
    let mut multi = Vec::with_capacity(en.len() as usize);
    let mut binary = Vec::with_capacity(en.len() as usize);
    for tree in en.iter() {
        let c = collapse_to_single_layer(bank, &tree)?;
        multi.push(forward_momor(&x, &c.alpha_hat, &c.base)?.into_inner());
        let mask: Vec<Vec<f64>> = c
            .alpha_hat
            .iter()
            .map(|row| row.iter().map(|&a| if a != 0.0 { 1.0 } else { 0.0 }).collect())
            .collect();
        binary.push(forward_momor(&x, &mask, &c.base)?.into_inner());
    }
    Ok(CollapseCounts {
        classes: multi.len(),
        with_multiplicity: count_distinct(&multi),
        binary_coefficients: count_distinct(&binary),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexRow {
    pub depth: usize,
    pub gamma_smore: BigCount,
    pub gamma_momor_bound: BigCount,
    pub gamma_star: BigCount,
    pub gamma_shared: BigCount,
}

pub const FLEX_CSV_HEADER: &str = "L,gamma_smore,gamma_momor_bound,gamma_star,gamma_shared";

/// Rows `L = 1..=l_max` for uniform pools of `s` experts with fanout `f`.
pub fn flexibility_table(s: usize, f: usize, l_max: usize) -> Result<Vec<FlexRow>> {
    if f > s {
        return Err(Error::FanoutExceedsPool { fanout: f, pool: s });
    }
    (1..=l_max)
        .map(|depth| {
            let mut spec = ArchitectureSpec::uniform(depth, s, 1, f, 1);
            spec.validate()?;
            let gamma_star = gamma_smore_star(&spec);
            spec.variant = Variant::SmoreShared;
            Ok(FlexRow {
                depth,
                gamma_smore: gamma_smore(&spec),
                gamma_momor_bound: gamma_momor_bound(&spec),
                gamma_star,
                gamma_shared: gamma_smore_shared(&spec)?,
            })
        })
        .collect()
}

pub fn flexibility_csv(rows: &[FlexRow]) -> String {
    let mut out = String::from(FLEX_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.depth, r.gamma_smore, r.gamma_momor_bound, r.gamma_star, r.gamma_shared
        ));
    }
    out
}
