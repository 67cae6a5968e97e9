//! Acceptance criteria, one line per criterion. Expected values come from
//! closed forms and brute force written here, independent of the library's
//! own formulas.

use std::time::{Duration, Instant};

use smore_core::costmodel::{flop_count, param_count, router_cost_ratio};
use smore_core::experts::{construct_equivalent_molre, construct_equivalent_momor, BaselineParams, ExpertBank};
use smore_core::flexibility::{
    count_nonisomorphic, count_star_classes, gamma_momor_bound, gamma_smore, gamma_smore_star, tree_count, CountOptions, EnumMode,
};
use smore_core::numerics::RngState;
use smore_core::propagate::{backward_with_aux, forward_routed, forward_smore, realize_coefficients};
use smore_core::router::Mode;
use smore_core::trainer::{gen_synthetic, train, utilization_report, TrainConfig};
use smore_core::verify::{fig5_gaps, gradient_spec};
use smore_core::{ArchitectureSpec, Variant};

const TABLE_ROWS: [(usize, usize); 6] = [(8, 2), (8, 3), (8, 4), (16, 2), (16, 3), (16, 4)];
const EQUIV_TOL: f64 = 1e-10;
const FIG5_EQUAL_TOL: f64 = 1e-12;
const FIG5_DISTINCT_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-5;
const GRAD_STEP: f64 = 1e-5;
const GRAD_MARGIN: f64 = 1e-3;
const ROUTER_RATIO_MAX: f64 = 0.26;
const LOSS_RATIO_MAX: f64 = 0.2;
const UTIL_MIN: f64 = 0.05;
const ENUM_LIMIT: u64 = 100_000;

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn ok(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn table_text(main: u64, overhead: u64) -> (String, String, String) {
    (
        format!("{:.1}M", main as f64 / 1e6),
        format!("{:.3}M", overhead as f64 / 1e6),
        format!("{:.1}%", 100.0 * overhead as f64 / main as f64),
    )
}

fn c1_table_params() -> Outcome {
    let printed = [
        ("0.5M", "0.005M", "1.0%"),
        ("0.8M", "0.014M", "1.8%"),
        ("1.0M", "0.031M", "2.9%"),
        ("1.0M", "0.020M", "2.0%"),
        ("1.6M", "0.057M", "3.6%"),
        ("2.1M", "0.123M", "5.9%"),
    ];
    let d = 4096u64;
    let mut bad = Vec::new();
    for (&(r, depth), want) in TABLE_ROWS.iter().zip(printed) {
        let p = param_count(&ArchitectureSpec::uniform(depth, 4, r, 2, 4096));
        let dl = (depth * 4 * r) as u64;
        let delta: u64 = (1..=depth as u64).map(|l| (l * 4 * r as u64).pow(2)).sum();
        let (a, b, c) = table_text(p.main, p.delta);
        if p.main != 2 * d * dl || p.delta != delta || (a.as_str(), b.as_str(), c.as_str()) != want {
            bad.push(format!("r={r} L={depth}: {a} {b} {c}"));
        }
    }
    let p = param_count(&ArchitectureSpec::uniform(2, 4, 8, 2, 4096));
    ok(bad.is_empty() && p.main == 524_288 && p.delta == 5120, format!("r=8 L=2 -> {} {}; mismatches {bad:?}", p.main, p.delta))
}

fn c2_table_flops() -> Outcome {
    let printed = [
        ("0.5M", "0.006M", "1.2%"),
        ("0.8M", "0.026M", "3.3%"),
        ("1.0M", "0.079M", "7.5%"),
        ("1.0M", "0.025M", "2.3%"),
        ("1.6M", "0.104M", "6.6%"),
        ("2.1M", "0.315M", "15.0%"),
    ];
    let mut bad = Vec::new();
    for (&(r, depth), want) in TABLE_ROWS.iter().zip(printed) {
        let c = flop_count(&ArchitectureSpec::uniform(depth, 4, r, 2, 4096));
        let dim = |l: usize| (l * 4 * r) as u64;
        let delta: u64 = (0..depth).map(|l| 2u64.pow((depth - l) as u32) * dim(l + 1) * (dim(l) + r as u64)).sum();
        let (a, b, ct) = table_text(c.main, c.delta);
        if c.delta != delta || (a.as_str(), b.as_str(), ct.as_str()) != want {
            bad.push(format!("r={r} L={depth}: {a} {b} {ct}"));
        }
    }
    let c8 = flop_count(&ArchitectureSpec::uniform(2, 4, 8, 2, 4096)).delta;
    let c16 = flop_count(&ArchitectureSpec::uniform(2, 4, 16, 2, 4096)).delta;
    ok(
        bad.is_empty() && c8 == 6144 && c16 == 24576,
        format!("r=8 L=2 -> {c8}, r=16 L=2 -> {c16}; mismatches {bad:?}"),
    )
}

fn choose(n: u128, k: u128) -> u128 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Distinct subtrees rooted at one top-level expert, built bottom-up.
fn oracle_gamma(s: u128, f: u128, depth: usize) -> u128 {
    (0..depth).fold(1, |t, _| choose(s, f) * t.pow(f as u32))
}

/// Children of a node form a multiset of classes when the outer activation
/// cannot separate them.
fn oracle_gamma_star(s: u128, f: u128, depth: usize) -> u128 {
    (0..depth).fold(1, |g, _| choose(s, f) * choose(g + f - 1, f))
}

fn oracle_momor_bound(s: u128, f: u128, depth: usize) -> u128 {
    (1..depth).fold(choose(s, f), |acc, l| {
        let reach = f.pow((depth - l) as u32 + 1).min(s);
        acc * (f..=reach).map(|i| choose(s, i)).sum::<u128>()
    })
}

fn grid() -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for s in [2, 3, 4] {
        for f in [1, 2] {
            for depth in [2, 3] {
                out.push((s, f, depth));
            }
        }
    }
    out
}

fn enumerable(spec: &ArchitectureSpec) -> bool {
    tree_count(spec, EnumMode::Subsets) <= ENUM_LIMIT.into()
}

fn c3_theorem_grid() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for (s, f, depth) in grid() {
        let spec = ArchitectureSpec::uniform(depth, s, 1, f, 4);
        if !enumerable(&spec) {
            continue;
        }
        let brute = count_nonisomorphic(&spec, CountOptions::default()).unwrap();
        let closed = gamma_smore(&spec);
        let oracle = oracle_gamma(s as u128, f as u128, depth);
        if brute != closed || closed != oracle.into() {
            bad.push(format!("s={s} f={f} L={depth}: {brute} {closed} {oracle}"));
        }
        checked += 1;
    }
    let rep = count_nonisomorphic(&ArchitectureSpec::uniform(2, 4, 1, 2, 4), CountOptions::default()).unwrap();
    ok(bad.is_empty() && rep == 216u32.into(), format!("{checked} grid points equal; s=[4,4] f=[2,2] -> {rep}; {bad:?}"))
}

fn c4_star_and_chain() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for (s, f, depth) in grid() {
        let spec = ArchitectureSpec::uniform(depth, s, 1, f, 4);
        let (m, st, g) = (gamma_momor_bound(&spec), gamma_smore_star(&spec), gamma_smore(&spec));
        let (s128, f128) = (s as u128, f as u128);
        if m != oracle_momor_bound(s128, f128, depth).into() || st != oracle_gamma_star(s128, f128, depth).into() || !(m <= st && st <= g) {
            bad.push(format!("chain s={s} f={f} L={depth}: {m} {st} {g}"));
        }
        if enumerable(&spec) {
            let brute = count_star_classes(&spec, CountOptions::default()).unwrap();
            if brute != st {
                bad.push(format!("classes s={s} f={f} L={depth}: {brute} vs {st}"));
            }
            checked += 1;
        }
    }
    let spec = ArchitectureSpec::uniform(2, 4, 1, 2, 4);
    let rep = (gamma_momor_bound(&spec), count_star_classes(&spec, CountOptions::default()).unwrap(), gamma_smore(&spec));
    let pass = bad.is_empty() && rep.0 == 66u32.into() && rep.1 == 126u32.into() && rep.2 == 216u32.into();
    ok(pass, format!("{checked} grid points enumerated; {} <= {} <= {}; {bad:?}", rep.0, rep.1, rep.2))
}

fn c5_ratio_growth() -> Outcome {
    let ratios: Vec<(u128, u128)> = (2..=5)
        .map(|depth| {
            let spec = ArchitectureSpec::uniform(depth, 4, 1, 2, 4);
            let g: u128 = gamma_smore(&spec).try_into().unwrap();
            let m: u128 = gamma_momor_bound(&spec).try_into().unwrap();
            assert_eq!(g, oracle_gamma(4, 2, depth));
            (g, m)
        })
        .collect();
    // a/b < c/e  <=>  a e < c b; products stay below 2^100 at L=5
    let increasing = ratios.windows(2).all(|w| w[0].0 * w[1].1 < w[1].0 * w[0].1);
    let approx: Vec<String> = ratios.iter().map(|(g, m)| format!("{:.3e}", *g as f64 / *m as f64)).collect();
    ok(increasing, format!("ratio L=2..5: {}", approx.join(", ")))
}

fn mixture(x: &[f64], alphas: &[Vec<f64>], base: &BaselineParams) -> Vec<f64> {
    let mut out = vec![0.0; base.d_out];
    for (pool, coeffs) in base.orders.iter().zip(alphas) {
        for (pair, &a) in pool.iter().zip(coeffs) {
            let (down, up) = (&pair.down, &pair.up);
            let z: Vec<f64> = (0..down.rows()).map(|i| (0..down.cols()).map(|j| down.get(i, j) * x[j]).sum()).collect();
            for (i, o) in out.iter_mut().enumerate() {
                *o += a * (0..up.cols()).map(|j| up.get(i, j) * z[j]).sum::<f64>();
            }
        }
    }
    out
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn c6_equivalence() -> Outcome {
    let mut rng = RngState::new(6);
    let (mut worst1, mut worst2) = (0.0f64, 0.0f64);
    for instance in 0..100 {
        let multi = instance >= 50;
        let depth = if multi { 2 + rng.below(2) } else { 1 };
        let d = 4 + rng.below(13);
        let counts: Vec<usize> = (0..depth).map(|_| 1 + rng.below(3)).collect();
        let ranks: Vec<usize> = (0..depth).map(|_| 1 + rng.below(3)).collect();
        let base = BaselineParams::random(d, d, &counts, &ranks, &mut rng);
        let bank = if multi {
            construct_equivalent_momor(&base, &mut rng).unwrap()
        } else {
            construct_equivalent_molre(&base, &mut rng).unwrap()
        };
        let alphas: Vec<Vec<f64>> = counts
            .iter()
            .map(|&s| {
                let mut a: Vec<f64> = (0..s).map(|_| if rng.uniform() < 0.3 { 0.0 } else { 0.1 + rng.uniform() }).collect();
                let keep = rng.below(s);
                a[keep] = 0.1 + rng.uniform();
                a
            })
            .collect();
        let tree = realize_coefficients(&alphas).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let got = forward_smore(&x, &tree, &bank).unwrap().0.into_inner();
            let e = rel(&got, &mixture(&x, &alphas, &base));
            if multi {
                worst2 = worst2.max(e);
            } else {
                worst1 = worst1.max(e);
            }
        }
    }
    ok(
        worst1 <= EQUIV_TOL && worst2 <= EQUIV_TOL,
        format!("single-order max rel err {worst1:.2e}, multi-order {worst2:.2e} (tol {EQUIV_TOL:e})"),
    )
}

fn c7_fig5() -> Outcome {
    let g = fig5_gaps(7).unwrap();
    let pass = g.identity_max <= FIG5_EQUAL_TOL && g.star_bc <= FIG5_EQUAL_TOL && g.star_ab > FIG5_DISTINCT_TOL && g.smore_min > FIG5_DISTINCT_TOL;
    ok(
        pass,
        format!(
            "identity max gap {:.1e}; outer b-c {:.1e}, a-b {:.3e}; inner min gap {:.3e}",
            g.identity_max, g.star_bc, g.star_ab, g.smore_min
        ),
    )
}

fn c8_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in 0..20u64 {
        let spec = gradient_spec(seed);
        assert_eq!((spec.d, spec.depth, spec.expert_counts.clone(), spec.fanouts.clone()), (6, 2, vec![2, 2], vec![1, 1]));
        let mut rng = RngState::new(100 + seed);
        let mut bank = ExpertBank::init(&spec, &mut rng).unwrap();
        bank.randomize(&mut rng, 0.6);
        let g: Vec<f64> = (0..spec.d_out()).map(|_| rng.normal()).collect();
        let route = 7000 + seed;
        let (x, trace) = loop {
            let x: Vec<f64> = (0..spec.d).map(|_| rng.normal()).collect();
            let (_, trace) = forward_routed(&x, &bank, &mut RngState::new(route), Mode::Train).unwrap();
            let gap = trace.stats().map_or(f64::INFINITY, |s| s.min_gap());
            if trace.min_kink_distance() > GRAD_MARGIN && gap > GRAD_MARGIN {
                break (x, trace);
            }
        };
        let analytic = backward_with_aux(&trace, &g, true, &bank).unwrap().flatten(true);
        let theta = bank.flatten(true);
        let loss = |t: &[f64]| {
            let b = bank.unflatten(t, true).unwrap();
            let (out, tr) = forward_routed(&x, &b, &mut RngState::new(route), Mode::Train).unwrap();
            assert_eq!(tr.tree().nodes().len(), trace.tree().nodes().len());
            out.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() + tr.aux_loss().unwrap_or(0.0)
        };
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] = theta[i] + GRAD_STEP;
            let up = loss(&t);
            t[i] = theta[i] - GRAD_STEP;
            let down = loss(&t);
            let fd = (up - down) / (2.0 * GRAD_STEP);
            let a = analytic[i];
            worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
        }
        coords += theta.len();
    }
    ok(worst < GRAD_TOL, format!("20 seeds, {coords} coordinates, max rel err {worst:.2e} (tol {GRAD_TOL:e})"))
}

fn c9_router_ratio() -> Outcome {
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for r in [8usize, 16, 32, 64] {
        for depth in [2usize, 3, 4] {
            let mut spec = ArchitectureSpec::uniform(depth, 4, r, 2, 2048);
            spec.d_down = 24;
            spec.m = 16;
            let got = router_cost_ratio(&spec);
            let dim = |l: usize| (l * 4 * r) as f64;
            let fan = |l: usize| 2f64.powi((depth - l) as i32);
            let router: f64 = 2048.0 * 24.0
                + (0..depth)
                    .map(|l| fan(l + 1) * (16.0 * (24.0 + 16.0 * (depth - l - 1) as f64) + 256.0 + 2.0 * 4.0 * 16.0))
                    .sum::<f64>();
            let experts = 2.0 * 2048.0 * dim(depth) + (0..depth).map(|l| fan(l) * dim(l + 1) * (dim(l) + r as f64)).sum::<f64>();
            let want = router / experts;
            if (got - want).abs() > 1e-12 || got >= ROUTER_RATIO_MAX {
                bad.push(format!("r={r} L={depth}: {got:.4} vs {want:.4}"));
            }
            worst = worst.max(got);
        }
    }
    ok(bad.is_empty(), format!("max ratio {worst:.4} over r in 8..64, L in 2..4; {bad:?}"))
}

fn c10_training() -> Outcome {
    let mut spec = ArchitectureSpec::uniform(2, 4, 2, 2, 16);
    spec.gamma = 0.01;
    spec.variant = Variant::Smore;
    let task = gen_synthetic(10, 256, 4, 16, 0.05).unwrap();
    let config = TrainConfig {
        steps: 2000,
        lr: 0.1,
        batch: 16,
        optimizer: Default::default(),
    };
    let run = train(&spec, &task, &config, &mut RngState::new(10)).unwrap();
    let n_coords = (task.len() * 16) as f64;
    let initial = task.targets.iter().flatten().map(|v| v * v).sum::<f64>() / n_coords;
    let bank = run.bank.as_ref().unwrap();
    let final_loss = task
        .inputs
        .iter()
        .zip(&task.targets)
        .map(|(x, y)| {
            let (out, _) = forward_routed(x, bank, &mut RngState::new(0), Mode::Eval).unwrap();
            out.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / n_coords;
    let agree = (initial - run.initial_eval).abs() <= 1e-9 * initial && (final_loss - run.final_eval).abs() <= 1e-9 * initial;
    let ratio = final_loss / initial;
    let util = utilization_report(&run);
    let min_util = util.iter().map(|p| p.min).fold(f64::INFINITY, f64::min);
    ok(
        agree && ratio <= LOSS_RATIO_MAX && util.len() == 2 && min_util > UTIL_MIN,
        format!("loss {initial:.4e} -> {final_loss:.4e} (ratio {ratio:.4}); min pool utilization {min_util:.3}"),
    )
}

fn c11_permutation_and_noop() -> Outcome {
    let mut rng = RngState::new(11);
    let mut spec = ArchitectureSpec::uniform(3, 4, 2, 2, 8);
    spec.bias = true;
    let mut bank = ExpertBank::init(&spec, &mut rng).unwrap();
    bank.randomize(&mut rng, 0.5);
    let mut identical = 0;
    for _ in 0..200 {
        let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let (_, trace) = forward_routed(&x, &bank, &mut rng, Mode::Train).unwrap();
        let a = forward_smore(&x, trace.tree(), &bank).unwrap().0.into_inner();
        let b = forward_smore(&x, &trace.tree().permuted(&mut rng), &bank).unwrap().0.into_inner();
        let bits = |v: &[f64]| v.iter().map(|z| z.to_bits()).collect::<Vec<_>>();
        identical += (bits(&a) == bits(&b)) as usize;
    }
    let fresh = ExpertBank::init(&ArchitectureSpec::uniform(3, 4, 2, 2, 8), &mut rng).unwrap();
    let mut zero = 0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let (out, _) = forward_routed(&x, &fresh, &mut rng, Mode::Train).unwrap();
        zero += out.iter().all(|v| *v == 0.0) as usize;
    }
    ok(identical == 200 && zero == 1000, format!("{identical}/200 permuted trees bit-identical; {zero}/1000 zero outputs"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 parameter overhead table", Duration::from_secs(1), c1_table_params),
        ("2 computation overhead table", Duration::from_secs(1), c2_table_flops),
        ("3 nonisomorphic tree count", Duration::from_secs(60), c3_theorem_grid),
        ("4 outer-activation classes and ordering", Duration::from_secs(60), c4_star_and_chain),
        ("5 flexibility ratio growth", Duration::from_secs(1), c5_ratio_growth),
        ("6 single/multi-order equivalence", Duration::from_secs(30), c6_equivalence),
        ("7 three-tree discrimination", Duration::from_secs(5), c7_fig5),
        ("8 gradient agreement", Duration::from_secs(60), c8_gradients),
        ("9 router cost ratio", Duration::from_secs(1), c9_router_ratio),
        ("10 synthetic training", Duration::from_secs(300), c10_training),
        ("11 permutation invariance and no-op start", Duration::from_secs(5), c11_permutation_and_noop),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let pass = outcome.pass && took < limit;
        failed += (!pass) as usize;
        println!(
            "criterion {name}: {} [{:.3}s, limit {}s] {}",
            outcome.detail,
            took.as_secs_f64(),
            limit.as_secs(),
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("{}/11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
