//! Closed-form parameter and multiply-accumulate counts.
//!
//! A `p x q` matrix-vector product costs `p * q`; activations and additions
//! are free.

use serde::{Deserialize, Serialize};

use crate::config::{Activation, ArchitectureSpec, Gate, RoutingDirection, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// `A` and `B` factors (stored once for the shared variant).
    pub experts: u64,
    pub mixers: u64,
    pub proj: u64,
    pub bias: u64,
    pub sigma: u64,
    pub router: u64,
    /// `(d + d_out) d_L`.
    pub main: u64,
    /// `experts + mixers + proj - main`; `sum_l d_l^2` for the tree variants.
    pub delta: u64,
}

impl ParamCount {
    /// Everything the adapter stores except the router.
    pub fn adapter(&self) -> u64 {
        self.experts + self.mixers + self.proj + self.bias + self.sigma
    }

    pub fn total(&self) -> u64 {
        self.adapter() + self.router
    }

    pub fn ratio(&self) -> f64 {
        ratio(self.delta, self.main)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// `(d + d_out) d_L`: every down-projection plus the final projection.
    pub main: u64,
    /// `sum_l F_l d_{l+1} (d_l + r_l)`.
    pub delta: u64,
    pub router: u64,
}

impl FlopCount {
    pub fn experts(&self) -> u64 {
        self.main + self.delta
    }

    pub fn ratio(&self) -> f64 {
        ratio(self.delta, self.main)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: ParamCount,
    pub flops: FlopCount,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    pub router_ratio: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

fn router_params(spec: &ArchitectureSpec) -> u64 {
    let (m, dd) = (u(spec.m), u(spec.d_down));
    let dims = spec.dimension_schedule();
    let big_f = spec.total_fanouts();
    let noisy = u((spec.gate == Gate::NoisyTopk) as usize);
    let mut total = u(spec.d) * dd;
    match spec.routing {
        RoutingDirection::TopDown => {
            for l in 0..spec.depth {
                let s = u(spec.expert_counts[l]);
                total += m * u(spec.query_input(l)) + m * m + s * m * (1 + noisy);
            }
        }
        RoutingDirection::BottomUp => {
            let s0 = u(spec.expert_counts[0]);
            total += u(big_f[1]) * s0 * dd + noisy * s0 * dd;
            for l in 1..spec.depth {
                let s = u(spec.expert_counts[l]);
                total += u(big_f[l]) * dd + m * u(dims.get(l) + spec.d_down) + s * m * (1 + noisy);
            }
        }
    }
    total
}

pub fn param_count(spec: &ArchitectureSpec) -> ParamCount {
    let dims = spec.dimension_schedule();
    let (d, d_out, d_l) = (u(spec.d), u(spec.d_out()), u(dims.last()));
    let depth = spec.depth;
    if spec.variant == Variant::Momor {
        let experts: u64 = (0..depth).map(|l| u(spec.expert_counts[l] * spec.ranks[l]) * (d + d_out)).sum();
        return ParamCount {
            experts,
            mixers: 0,
            proj: 0,
            bias: 0,
            sigma: 0,
            router: 0,
            main: experts,
            delta: 0,
        };
    }
    let stored = if spec.variant == Variant::SmoreShared { 1 } else { depth };
    let experts = (0..stored)
        .map(|l| u(spec.expert_counts[l] * spec.ranks[l]) * (d + u(dims.get(l + 1))))
        .sum();
    let mixers = (0..depth).map(|l| u(dims.get(l + 1) * dims.get(l))).sum();
    let proj = d_out * d_l;
    let bias = if spec.bias {
        (0..depth).map(|l| u(spec.expert_counts[l] * dims.get(l + 1))).sum()
    } else {
        0
    };
    let sigma = match spec.activation {
        Activation::Mlp { .. } => (0..depth)
            .map(|l| 2 * u(spec.sigma_width(l)) * u(spec.sigma_hidden(l).unwrap_or(0)))
            .sum(),
        _ => 0,
    };
    let main = (d + d_out) * d_l;
    ParamCount {
        experts,
        mixers,
        proj,
        bias,
        sigma,
        router: router_params(spec),
        main,
        delta: (experts + mixers + proj).saturating_sub(main),
    }
}

/// Router multiply-accumulates for one token, summed over every gate
/// evaluation the tree requires.
pub fn router_flops(spec: &ArchitectureSpec) -> u64 {
    let (m, dd) = (u(spec.m), u(spec.d_down));
    let dims = spec.dimension_schedule();
    let big_f = spec.total_fanouts();
    let noisy = u((spec.gate == Gate::NoisyTopk) as usize);
    let mut total = u(spec.d) * dd;
    match spec.routing {
        RoutingDirection::TopDown => {
            for l in 0..spec.depth {
                let s = u(spec.expert_counts[l]);
                let per_query = m * u(spec.query_input(l)) + m * m + s * m * (1 + noisy);
                total += u(big_f[l + 1]) * per_query;
            }
        }
        RoutingDirection::BottomUp => {
            let s0 = u(spec.expert_counts[0]);
            total += u(big_f[1]) * s0 * dd + noisy * s0 * dd;
            for l in 1..spec.depth {
                let s = u(spec.expert_counts[l]);
                total += u(big_f[l]) * (m * u(dims.get(l) + spec.d_down) + s * m * (1 + noisy));
            }
        }
    }
    total
}

pub fn flop_count(spec: &ArchitectureSpec) -> FlopCount {
    let dims = spec.dimension_schedule();
    let big_f = spec.total_fanouts();
    let d_l = u(dims.last());
    let delta = (0..spec.depth)
        .map(|l| u(big_f[l]) * u(dims.get(l + 1)) * u(dims.get(l) + spec.ranks[l]))
        .sum();
    FlopCount {
        main: (u(spec.d) + u(spec.d_out())) * d_l,
        delta,
        router: router_flops(spec),
    }
}

/// Router cost relative to expert propagation (down-projections, tree
/// propagation and the final projection).
pub fn router_cost_ratio(spec: &ArchitectureSpec) -> f64 {
    let flops = flop_count(spec);
    if spec.d_down == 0 && spec.m == 0 {
        return 0.0;
    }
    ratio(flops.router, flops.experts())
}

pub fn cost_report(spec: &ArchitectureSpec) -> CostReport {
    let params = param_count(spec);
    let flops = flop_count(spec);
    CostReport {
        param_ratio: params.ratio(),
        flop_ratio: flops.ratio(),
        router_ratio: router_cost_ratio(spec),
        params,
        flops,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableKind {
    /// Parameter overhead `Delta`.
    Params,
    /// Computation overhead `Delta'`.
    Flops,
}

/// Uniform `(r, L)` grid over `s` experts with fanout `f` at width `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostGrid {
    pub d: usize,
    pub s: usize,
    pub f: usize,
    pub rows: Vec<(usize, usize)>,
}

impl Default for CostGrid {
    fn default() -> Self {
        CostGrid {
            d: 4096,
            s: 4,
            f: 2,
            rows: vec![(8, 2), (8, 3), (8, 4), (16, 2), (16, 3), (16, 4)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub r: usize,
    pub depth: usize,
    pub d_l: usize,
    pub main: u64,
    pub overhead: u64,
}

impl CostRow {
    pub fn ratio(&self) -> f64 {
        ratio(self.overhead, self.main)
    }

    /// `(main, overhead, ratio)` at table precision.
    pub fn formatted(&self) -> (String, String, String) {
        (
            format!("{:.1}M", self.main as f64 / 1e6),
            format!("{:.3}M", self.overhead as f64 / 1e6),
            format!("{:.1}%", 100.0 * self.ratio()),
        )
    }
}

pub fn cost_table(grid: &CostGrid, kind: TableKind) -> Vec<CostRow> {
    grid.rows
        .iter()
        .map(|&(r, depth)| {
            let spec = ArchitectureSpec::uniform(depth, grid.s, r, grid.f, grid.d);
            let (main, overhead) = match kind {
                TableKind::Params => {
                    let p = param_count(&spec);
                    (p.main, p.delta)
                }
                TableKind::Flops => {
                    let c = flop_count(&spec);
                    (c.main, c.delta)
                }
            };
            CostRow {
                r,
                depth,
                d_l: spec.dimension_schedule().last(),
                main,
                overhead,
            }
        })
        .collect()
}

pub const COST_CSV_HEADER: &str = "r,L,d_L,main,delta,ratio";

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let (main, delta, ratio) = row.formatted();
        out.push_str(&format!("{},{},{},{main},{delta},{ratio}\n", row.r, row.depth, row.d_l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ExpertBank;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    #[test]
    fn params_at_table_shapes() {
        let p = param_count(&ArchitectureSpec::uniform(2, 4, 8, 2, 4096));
        assert_eq!((p.main, p.delta), (524_288, 5120));
        let p = param_count(&ArchitectureSpec::uniform(2, 4, 16, 2, 4096));
        assert_eq!((p.main, p.delta), (1_048_576, 20_480));
        let p = param_count(&ArchitectureSpec::uniform(1, 1, 1, 1, 4));
        assert_eq!((p.main, p.delta), (8, 1));
    }

    #[test]
    fn flops_at_table_shapes() {
        let c = flop_count(&ArchitectureSpec::uniform(2, 4, 8, 2, 4096));
        assert_eq!(c.delta, 4 * 32 * 8 + 2 * 64 * 40);
        let c = flop_count(&ArchitectureSpec::uniform(2, 4, 16, 2, 4096));
        assert_eq!(c.delta, 24_576);
        let sp = ArchitectureSpec::uniform(1, 4, 8, 3, 64);
        assert_eq!(flop_count(&sp).delta, 3 * 32 * 8);
    }

    #[test]
    fn dense_gate_uses_pool_products() {
        let mut sp = ArchitectureSpec::uniform(2, 4, 8, 2, 4096);
        sp.gate = Gate::Dense;
        assert_eq!(flop_count(&sp).delta, 16 * 32 * 8 + 4 * 64 * 40);
    }

    #[test]
    fn table_formatting() {
        let rows = cost_table(&CostGrid::default(), TableKind::Params);
        assert_eq!(rows[0].formatted(), ("0.5M".into(), "0.005M".into(), "1.0%".into()));
        let csv = cost_csv(&cost_table(&CostGrid::default(), TableKind::Flops));
        assert_eq!(csv.lines().nth(6).unwrap(), "16,4,256,2.1M,0.315M,15.0%");
        let empty = CostGrid {
            rows: vec![],
            ..CostGrid::default()
        };
        assert!(cost_table(&empty, TableKind::Params).is_empty());
        assert_eq!(cost_csv(&[]), format!("{COST_CSV_HEADER}\n"));
    }

    fn router_grid_spec(r: usize, depth: usize) -> ArchitectureSpec {
        let mut sp = ArchitectureSpec::uniform(depth, 4, r, 2, 2048);
        sp.d_down = 24;
        sp.m = 16;
        sp
    }

    #[test]
    fn router_ratio_decreases_with_rank() {
        for depth in 1..=4 {
            let ratios: Vec<f64> = [8, 16, 32, 64].iter().map(|&r| router_cost_ratio(&router_grid_spec(r, depth))).collect();
            assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
        }
        let mut sp = router_grid_spec(8, 2);
        sp.d_down = 0;
        sp.m = 0;
        assert_eq!(router_cost_ratio(&sp), 0.0);
    }

    #[test]
    fn router_flops_by_hand() {
        let sp = router_grid_spec(8, 2);
        // token projection, one top query on 24 inputs, two pool-0 queries on 24 + 16
        let top = 16 * 24 + 16 * 16 + 2 * 4 * 16;
        let bottom = 16 * 40 + 16 * 16 + 2 * 4 * 16;
        assert_eq!(router_flops(&sp), 2048 * 24 + top + 2 * bottom);
    }

    #[test]
    fn shared_and_baseline_counts() {
        let mut sp = ArchitectureSpec::uniform(3, 4, 8, 2, 64);
        sp.variant = Variant::SmoreShared;
        let p = param_count(&sp);
        assert_eq!(p.experts, 32 * (64 + 32));
        assert_eq!(p.mixers, 32 * 32 * 2);
        sp.variant = Variant::Momor;
        let p = param_count(&sp);
        assert_eq!((p.experts, p.delta), (3 * 32 * 128, 0));
    }

    fn arb_spec() -> impl Strategy<Value = ArchitectureSpec> {
        (
            1usize..4,
            prop::collection::vec((1usize..5, 1usize..4, 1usize..4), 3),
            2usize..12,
            prop::sample::select(vec![Gate::Dense, Gate::NoisyTopk, Gate::Switch]),
            prop::sample::select(vec![Variant::Smore, Variant::SmoreStar, Variant::SmoreShared]),
            any::<bool>(),
            any::<bool>(),
            any::<bool>(),
        )
            .prop_map(|(depth, layers, d, gate, variant, bias, mlp, bottom_up)| {
                let mut sp = ArchitectureSpec::uniform(depth, 1, 1, 1, d);
                let first = layers[0];
                for l in 0..depth {
                    let (s, r, f) = if variant == Variant::SmoreShared { first } else { layers[l] };
                    sp.expert_counts[l] = s;
                    sp.ranks[l] = r;
                    sp.fanouts[l] = f.min(s);
                }
                sp.gate = gate;
                sp.variant = variant;
                sp.bias = bias;
                sp.d_out = Some(d + 1);
                sp.d_down = 3;
                sp.m = 2;
                if mlp {
                    sp.activation = Activation::Mlp { hidden: None };
                }
                if bottom_up && gate != Gate::Dense {
                    sp.routing = RoutingDirection::BottomUp;
                }
                sp
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn counts_match_bank_layout(sp in arb_spec()) {
            let bank = ExpertBank::init(&sp, &mut RngState::new(0)).unwrap();
            let p = param_count(&sp);
            prop_assert_eq!(bank.flat_len(false) as u64, p.adapter());
            prop_assert_eq!((bank.flat_len(true) - bank.flat_len(false)) as u64, p.router);
        }

        #[test]
        fn telescoping_and_overhead_regime(r in 1usize..65, depth in 1usize..6, s in 1usize..9) {
            let sp = ArchitectureSpec::uniform(depth, s, r, 1, 4096);
            let dims = sp.dimension_schedule();
            prop_assert_eq!(dims.last(), depth * s * r);
            let p = param_count(&sp);
            let squares: u64 = dims.as_slice()[1..].iter().map(|&v| (v * v) as u64).sum();
            prop_assert_eq!(p.delta, squares);
            if dims.last() <= 4096 / 4 {
                prop_assert!(p.delta < p.main);
            }
        }
    }
}
