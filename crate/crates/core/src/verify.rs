//! Self-checks behind `smore verify`: constructions, counting identities,
//! the three-tree discrimination example and gradient agreement.

use std::fmt;

use serde::Serialize;

use crate::config::{Activation, ArchitectureSpec, Gate, Variant};
use crate::error::Result;
use crate::experts::{construct_distinctness_params, construct_equivalent_molre, construct_equivalent_momor, BaselineParams, ExpertBank};
use crate::flexibility::{
    collapsed_output_counts, count_nonisomorphic, count_star_classes, distinctness_report, flexibility_table, gamma_momor_bound,
    gamma_smore, gamma_smore_shared, gamma_smore_star, momor_selection_patterns, CountOptions,
};
use crate::numerics::{finite_diff_grad, max_abs_diff, rel_diff, RngState};
use crate::propagate::{
    backward_with_aux, collapse_to_single_layer, forward, forward_molre, forward_momor, forward_routed, forward_smore,
    forward_smore_star, realize_coefficients,
};
use crate::router::{Mode, RoutingTree};

pub const EQUIV_TOL: f64 = 1e-10;
pub const FIG5_EQUAL_TOL: f64 = 1e-12;
pub const FIG5_DISTINCT_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// Evaluation points closer than this to a kink or a selection tie are
/// redrawn.
pub const GRAD_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Props,
    Theorems,
    Gradients,
    Fig5,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub tolerance: String,
    pub measured: String,
    pub pass: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "[{}] {}: {} {}", self.tolerance, self.name, self.measured, verdict)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn exact(&mut self, name: String, lhs: impl fmt::Display, rhs: impl fmt::Display, pass: bool, op: &str) {
        self.checks.push(Check {
            name,
            tolerance: "exact".into(),
            measured: format!("{lhs}{op}{rhs}"),
            pass,
        });
    }

    fn below(&mut self, name: impl Into<String>, measured: f64, tol: f64) {
        self.checks.push(Check {
            name: name.into(),
            tolerance: format!("<= {tol:e}"),
            measured: format!("{measured:e}"),
            pass: measured <= tol,
        });
    }

    fn above(&mut self, name: impl Into<String>, measured: f64, tol: f64) {
        self.checks.push(Check {
            name: name.into(),
            tolerance: format!("> {tol:e}"),
            measured: format!("{measured:e}"),
            pass: measured > tol,
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let passed = self.checks.iter().filter(|c| c.pass).count();
        write!(f, "{passed}/{} checks passed", self.checks.len())
    }
}

pub fn run(suite: Suite, seed: u64, parallel: bool) -> Result<Report> {
    let mut report = Report::default();
    if suite.includes(Suite::Props) {
        props(&mut report, seed)?;
    }
    if suite.includes(Suite::Theorems) {
        theorems(&mut report, seed, parallel)?;
    }
    if suite.includes(Suite::Gradients) {
        let g = gradient_sweep(seed, 20)?;
        report.below(
            format!("backward vs central differences, {} seeds, {} coordinates", g.seeds, g.coordinates),
            g.max_rel_err,
            GRAD_TOL,
        );
    }
    if suite.includes(Suite::Fig5) {
        fig5(&mut report, seed)?;
    }
    Ok(report)
}

fn random_vec(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Largest relative error between the constructed single-order bank and the
/// mixture it encodes, over `instances` random mixtures and `inputs` tokens.
pub fn molre_equivalence(seed: u64, instances: usize, inputs: usize) -> Result<f64> {
    let mut rng = RngState::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d = 4 + rng.below(13);
        let s = 1 + rng.below(4);
        let r = 1 + rng.below(3);
        let base = BaselineParams::random(d, d, &[s], &[r], &mut rng);
        let bank = construct_equivalent_molre(&base, &mut rng)?;
        let alphas: Vec<f64> = (0..s).map(|_| if rng.uniform() < 0.3 { 0.0 } else { rng.uniform() }).collect();
        let tree = realize_coefficients(std::slice::from_ref(&alphas))?;
        for _ in 0..inputs {
            let x = random_vec(&mut rng, d);
            let want = forward_molre(&x, &alphas, &base)?;
            let got = forward_smore(&x, &tree, &bank)?.0;
            worst = worst.max(rel_diff(&got, &want));
        }
    }
    Ok(worst)
}

/// As [`molre_equivalence`] for multi-order mixtures of depth 2 or 3.
pub fn momor_equivalence(seed: u64, instances: usize, inputs: usize) -> Result<f64> {
    let mut rng = RngState::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let depth = 2 + rng.below(2);
        let d = 4 + rng.below(13);
        let counts: Vec<usize> = (0..depth).map(|_| 1 + rng.below(3)).collect();
        let ranks: Vec<usize> = (0..depth).map(|_| 1 + rng.below(2)).collect();
        let base = BaselineParams::random(d, d, &counts, &ranks, &mut rng);
        let bank = construct_equivalent_momor(&base, &mut rng)?;
        let alphas: Vec<Vec<f64>> = counts
            .iter()
            .map(|&s| {
                let mut a: Vec<f64> = (0..s).map(|_| if rng.uniform() < 0.3 { 0.0 } else { 0.1 + rng.uniform() }).collect();
                let keep = rng.below(s);
                a[keep] = 0.1 + rng.uniform();
                a
            })
            .collect();
        let tree = realize_coefficients(&alphas)?;
        for _ in 0..inputs {
            let x = random_vec(&mut rng, d);
            let want = forward_momor(&x, &alphas, &base)?;
            let got = forward_smore(&x, &tree, &bank)?.0;
            worst = worst.max(rel_diff(&got, &want));
        }
    }
    Ok(worst)
}

fn props(report: &mut Report, seed: u64) -> Result<()> {
    report.below("molre construction, 50 instances x 100 inputs", molre_equivalence(seed, 50, 100)?, EQUIV_TOL);
    report.below("momor construction, 50 instances x 100 inputs", momor_equivalence(seed + 1, 50, 100)?, EQUIV_TOL);

    let mut rng = RngState::new(seed + 2);
    let mut spec = ArchitectureSpec::uniform(2, 4, 2, 2, 8);
    spec.activation = Activation::Identity;
    let mut bank = ExpertBank::init(&spec, &mut rng)?;
    bank.randomize(&mut rng, 0.5);
    let trees = fig5_trees();
    let mut collapse_err = 0.0f64;
    let mut linear_err = 0.0f64;
    for k in 0..100 {
        let tree = &trees[k % 3];
        let c = collapse_to_single_layer(&bank, tree)?;
        let x = random_vec(&mut rng, 8);
        let a = forward_smore(&x, tree, &bank)?.0;
        collapse_err = collapse_err.max(max_abs_diff(&a, &forward_momor(&x, &c.alpha_hat, &c.base)?));
        let y = random_vec(&mut rng, 8);
        let (p, q) = (rng.normal(), rng.normal());
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| p * u + q * v).collect();
        let lhs = forward_smore(&mix, tree, &bank)?.0;
        let b = forward_smore(&y, tree, &bank)?.0;
        let rhs: Vec<f64> = a.iter().zip(b.iter()).map(|(u, v)| p * u + q * v).collect();
        linear_err = linear_err.max(rel_diff(&lhs, &rhs));
    }
    report.below("identity activation collapse, 100 inputs", collapse_err, FIG5_EQUAL_TOL);
    report.below("identity activation linearity, 100 input pairs", linear_err, EQUIV_TOL);

    let mut relu = ArchitectureSpec::uniform(2, 4, 2, 2, 8);
    relu.bias = true;
    let mut bank = ExpertBank::init(&relu, &mut rng)?;
    bank.randomize(&mut rng, 0.5);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let tree = &trees[k % 3];
        let x = random_vec(&mut rng, 8);
        let a = forward_smore(&x, tree, &bank)?.0;
        let b = forward_smore(&x, &tree.permuted(&mut rng), &bank)?.0;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    report.exact("child permutation, 50 trees".into(), worst, 0, worst == 0.0, "==");

    let fresh = ExpertBank::init(&ArchitectureSpec::uniform(2, 4, 2, 2, 8), &mut rng)?;
    let mut largest = 0.0f64;
    for _ in 0..1000 {
        let x = random_vec(&mut rng, 8);
        let (out, _) = forward_routed(&x, &fresh, &mut rng, Mode::Train)?;
        largest = largest.max(out.norm_inf());
    }
    report.exact("no-op start, 1000 inputs, max |x'|".into(), largest, 0, largest == 0.0, "==");
    Ok(())
}

fn grid_spec(s: &[usize], f: &[usize]) -> ArchitectureSpec {
    let mut sp = ArchitectureSpec::uniform(s.len(), 1, 1, 1, 4);
    sp.expert_counts = s.to_vec();
    sp.ranks = vec![1; s.len()];
    sp.fanouts = f.to_vec();
    sp
}

fn theorems(report: &mut Report, seed: u64, parallel: bool) -> Result<()> {
    let opts = CountOptions {
        parallel,
        ..CountOptions::default()
    };
    for (s, f) in [(vec![4, 4], vec![2, 2]), (vec![2, 2], vec![1, 1]), (vec![3, 3], vec![2, 2]), (vec![3, 3, 3], vec![2, 1, 2])] {
        let sp = grid_spec(&s, &f);
        let (g, n) = (gamma_smore(&sp), count_nonisomorphic(&sp, opts)?);
        report.exact(format!("gamma_smore==count_nonisomorphic s={s:?} f={f:?}"), &g, &n, g == n, "==");
        let (g, n) = (gamma_smore_star(&sp), count_star_classes(&sp, opts)?);
        report.exact(format!("gamma_star==count_star_classes s={s:?} f={f:?}"), &g, &n, g == n, "==");
    }
    let sp = grid_spec(&[4, 4], &[2, 2]);
    let (patterns, bound) = (momor_selection_patterns(&sp, opts)?, gamma_momor_bound(&sp));
    report.exact("momor_selection_patterns<=gamma_momor_bound s=[4, 4] f=[2, 2]".into(), &patterns, &bound, patterns <= bound, "<=");
    let (m, st, g) = (gamma_momor_bound(&sp), gamma_smore_star(&sp), gamma_smore(&sp));
    report.exact(
        "gamma_momor_bound<=gamma_star<=gamma_smore s=[4, 4] f=[2, 2]".into(),
        format!("{m}<={st}"),
        &g,
        m <= st && st <= g,
        "<=",
    );
    let mut shared = ArchitectureSpec::uniform(3, 4, 1, 2, 4);
    shared.variant = Variant::SmoreShared;
    let gs = gamma_smore_shared(&shared)?;
    report.exact("gamma_shared s=4 f=2 L=3".into(), &gs, 279_936, gs == 279_936u64.into(), "==");

    let rows = flexibility_table(4, 2, 5)?;
    let growing = rows[1..].windows(2).all(|w| {
        &w[1].gamma_smore * &w[0].gamma_momor_bound > &w[0].gamma_smore * &w[1].gamma_momor_bound
    });
    report.exact("gamma_smore/gamma_momor_bound increasing L=2..5".into(), growing, true, growing, "==");

    let mut rng = RngState::new(seed + 3);
    let mut mlp = ArchitectureSpec::uniform(2, 4, 1, 2, 4);
    mlp.activation = Activation::Mlp { hidden: None };
    mlp.bias = true;
    let bank = construct_distinctness_params(&mlp, &mut rng)?;
    let rep = distinctness_report(&bank, &mut rng, opts)?;
    report.exact("distinct outputs==classes s=[4, 4] f=[2, 2]".into(), rep.distinct_outputs, rep.classes, rep.distinct_outputs == rep.classes, "==");
    report.above("distinctness min inter-class gap", rep.min_inter_class, FIG5_DISTINCT_TOL);
    report.exact("distinctness max intra-class gap".into(), rep.max_intra_class, 0, rep.max_intra_class == 0.0, "==");

    let mut ident = ArchitectureSpec::uniform(2, 4, 1, 2, 6);
    ident.activation = Activation::Identity;
    let mut bank = ExpertBank::init(&ident, &mut rng)?;
    bank.randomize(&mut rng, 0.7);
    let counts = collapsed_output_counts(&bank, &mut rng, opts)?;
    let bound = gamma_momor_bound(&ident);
    report.exact(
        "identity activation, binary coefficients: distinct outputs<=gamma_momor_bound".into(),
        counts.binary_coefficients,
        &bound,
        bound >= counts.binary_coefficients.into(),
        "<=",
    );
    let g = gamma_smore(&ident);
    report.exact(
        "identity activation, path-count coefficients: distinct outputs<=gamma_smore".into(),
        counts.with_multiplicity,
        &g,
        g >= counts.with_multiplicity.into(),
        "<=",
    );
    Ok(())
}

pub fn fig5_trees() -> [RoutingTree; 3] {
    [
        RoutingTree::from_leaf_paths(2, &[vec![0, 0], vec![0, 2], vec![1, 1], vec![1, 3]]),
        RoutingTree::from_leaf_paths(2, &[vec![0, 0], vec![0, 1], vec![1, 2], vec![1, 3]]),
        RoutingTree::from_leaf_paths(2, &[vec![1, 0], vec![1, 1], vec![0, 2], vec![0, 3]]),
    ]
}

/// Output gaps on the three trees for each architecture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig5Gaps {
    /// Identity activation: max pairwise gap.
    pub identity_max: f64,
    /// Outer activation: gap between trees (b) and (c).
    pub star_bc: f64,
    /// Outer activation: gap between trees (a) and (b).
    pub star_ab: f64,
    /// Inner activation with distinctness parameters: min pairwise gap.
    pub smore_min: f64,
}

pub fn fig5_gaps(seed: u64) -> Result<Fig5Gaps> {
    let mut rng = RngState::new(seed);
    let trees = fig5_trees();
    let x = random_vec(&mut rng, 6);
    let pairwise = |outs: &[Vec<f64>]| -> Vec<f64> {
        vec![max_abs_diff(&outs[0], &outs[1]), max_abs_diff(&outs[0], &outs[2]), max_abs_diff(&outs[1], &outs[2])]
    };
    let eval = |bank: &ExpertBank| -> Result<Vec<Vec<f64>>> {
        trees.iter().map(|t| Ok(forward(&x, t, bank)?.0.into_inner())).collect()
    };

    let mut ident = ArchitectureSpec::uniform(2, 4, 2, 2, 6);
    ident.activation = Activation::Identity;
    let mut bank = ExpertBank::init(&ident, &mut rng)?;
    bank.randomize(&mut rng, 0.5);
    let identity_max = pairwise(&eval(&bank)?).into_iter().fold(0.0, f64::max);

    let mut star = ArchitectureSpec::uniform(2, 4, 2, 2, 6);
    star.variant = Variant::SmoreStar;
    star.bias = true;
    let mut bank = ExpertBank::init(&star, &mut rng)?;
    bank.randomize(&mut rng, 0.5);
    let outs: Vec<Vec<f64>> = trees
        .iter()
        .map(|t| Ok(forward_smore_star(&x, t, &bank)?.0.into_inner()))
        .collect::<Result<_>>()?;
    let (star_ab, star_bc) = (max_abs_diff(&outs[0], &outs[1]), max_abs_diff(&outs[1], &outs[2]));

    let mut mlp = ArchitectureSpec::uniform(2, 4, 2, 2, 6);
    mlp.activation = Activation::Mlp { hidden: None };
    mlp.bias = true;
    let bank = construct_distinctness_params(&mlp, &mut rng)?;
    let smore_min = pairwise(&eval(&bank)?).into_iter().fold(f64::INFINITY, f64::min);
    Ok(Fig5Gaps {
        identity_max,
        star_bc,
        star_ab,
        smore_min,
    })
}

fn fig5(report: &mut Report, seed: u64) -> Result<()> {
    let g = fig5_gaps(seed + 4)?;
    report.below("fig5 identity activation: a = b = c", g.identity_max, FIG5_EQUAL_TOL);
    report.below("fig5 outer activation: b = c", g.star_bc, FIG5_EQUAL_TOL);
    report.above("fig5 outer activation: a != b", g.star_ab, FIG5_DISTINCT_TOL);
    report.above("fig5 inner activation: a, b, c pairwise distinct", g.smore_min, FIG5_DISTINCT_TOL);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSweep {
    pub seeds: usize,
    pub coordinates: usize,
    /// `|analytic - fd| / max(1, |analytic|, |fd|)`, maximized.
    pub max_rel_err: f64,
    /// Evaluation points redrawn for sitting near a kink or tie.
    pub redrawn: usize,
}

/// Small routed spec used by the gradient sweep; gates alternate between
/// noisy top-k and switch so router parameters receive gradient.
pub fn gradient_spec(seed: u64) -> ArchitectureSpec {
    let mut sp = ArchitectureSpec::uniform(2, 2, 2, 1, 6);
    sp.d_down = 3;
    sp.m = 4;
    sp.gate = if seed.is_multiple_of(2) { Gate::NoisyTopk } else { Gate::Switch };
    sp
}

/// Routed train-mode pass on every seed, loss `g . x' + aux`; compares the
/// full gradient (router included) with central differences.
pub fn gradient_sweep(base_seed: u64, seeds: usize) -> Result<GradientSweep> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut redrawn = 0;
    for k in 0..seeds as u64 {
        let seed = base_seed.wrapping_mul(1000).wrapping_add(k);
        let spec = gradient_spec(seed);
        let mut rng = RngState::new(seed);
        let mut bank = ExpertBank::init(&spec, &mut rng)?;
        bank.randomize(&mut rng, 0.6);
        let g = random_vec(&mut rng, spec.d_out());
        let route_seed = seed ^ 0x5eed;
        let (x, trace) = loop {
            let x = random_vec(&mut rng, spec.d);
            let (_, trace) = forward_routed(&x, &bank, &mut RngState::new(route_seed), Mode::Train)?;
            let gap = trace.stats().map_or(f64::INFINITY, |s| s.min_gap());
            if trace.min_kink_distance() > GRAD_MARGIN && gap > GRAD_MARGIN {
                break (x, trace);
            }
            redrawn += 1;
        };
        let analytic = backward_with_aux(&trace, &g, true, &bank)?.flatten(true);
        let theta = bank.flatten(true);
        let tree = trace.tree().clone();
        let loss = |t: &[f64]| -> f64 {
            let b = bank.unflatten(t, true).expect("same layout");
            let (out, tr) = forward_routed(&x, &b, &mut RngState::new(route_seed), Mode::Train).expect("valid token");
            if tr.tree().nodes().iter().map(|n| n.expert).ne(tree.nodes().iter().map(|n| n.expert)) {
                return f64::NAN;
            }
            out.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() + tr.aux_loss().unwrap_or(0.0)
        };
        let fd = finite_diff_grad(loss, &theta, GRAD_STEP)?;
        for (a, b) in analytic.iter().zip(fd.iter()) {
            worst = worst.max((a - b).abs() / 1f64.max(a.abs()).max(b.abs()));
        }
        coordinates += theta.len();
    }
    Ok(GradientSweep {
        seeds,
        coordinates,
        max_rel_err: worst,
        redrawn,
    })
}
