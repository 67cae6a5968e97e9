//! Parameter storage and the constructive parameter settings.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::config::{Activation, ArchitectureSpec, DimensionSchedule, Gate, RoutingDirection, Variant};
use crate::error::{Error, Result};
use crate::numerics::{fill, InitScheme, Matrix, RngState};

/// Identifies one tensor of an [`ExpertBank`].
///
/// `layer` always means pool index `0..depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// `A_l^i`, `r_l x d`.
    Down { layer: usize, expert: usize },
    /// `B_l^i`, `d_{l+1} x r_l`.
    Up { layer: usize, expert: usize },
    /// `W_l`, `d_{l+1} x d_l`.
    Mixer { layer: usize },
    /// `d_out x d_L`.
    Proj,
    /// `d_{l+1} x 1`.
    Bias { layer: usize, expert: usize },
    SigmaIn { layer: usize },
    SigmaOut { layer: usize },
    /// `d_down x d`.
    TokenDown,
    Query1 { layer: usize },
    Query2 { layer: usize },
    /// One key per row, `s_l x m`.
    Keys { layer: usize },
    NoiseKeys { layer: usize },
    /// Bottom-up position keys. Pool 0 stacks one `s_0 x d_down` block per
    /// pool-1 position; higher pools hold one `d_down` row per position.
    PosKeys { layer: usize },
    BuQuery1 { layer: usize },
    BuQuery2 { layer: usize },
    BuNoise { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Down/up projections, mixers and the final projection.
    Experts,
    Bias,
    Sigma,
    Router,
}

impl Role {
    pub fn group(self) -> ParamGroup {
        match self {
            Role::Down { .. } | Role::Up { .. } | Role::Mixer { .. } | Role::Proj => ParamGroup::Experts,
            Role::Bias { .. } => ParamGroup::Bias,
            Role::SigmaIn { .. } | Role::SigmaOut { .. } => ParamGroup::Sigma,
            _ => ParamGroup::Router,
        }
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// All learnable tensors of one adapter.
///
/// Tensors live in a flat `Vec<Matrix>` in layout order:
/// per pool `l`, every `Down` then every `Up` then `Mixer`; then `Proj`;
/// then biases, sigma perceptrons and router tensors. The shared variant
/// stores `Down`/`Up` for pool 0 only and resolves every layer to it.
/// [`flatten`](ExpertBank::flatten) concatenates tensors in this order, each
/// row-major.
///
/// The stamp changes on every mutation so traces can detect staleness.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    spec: ArchitectureSpec,
    dims: DimensionSchedule,
    roles: Vec<Role>,
    index: HashMap<Role, usize>,
    params: Vec<Matrix>,
    stamp: u64,
}

impl PartialEq for ExpertBank {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.roles == other.roles && self.params == other.params
    }
}

fn layout(spec: &ArchitectureSpec) -> Vec<(Role, usize, usize, InitScheme)> {
    use InitScheme::*;
    let dims = spec.dimension_schedule();
    let big_f = spec.total_fanouts();
    let shared = spec.variant == Variant::SmoreShared;
    let mut out = Vec::new();
    for l in 0..spec.depth {
        if !shared || l == 0 {
            for i in 0..spec.expert_counts[l] {
                out.push((Role::Down { layer: l, expert: i }, spec.ranks[l], spec.d, UniformScaled));
            }
            for i in 0..spec.expert_counts[l] {
                out.push((Role::Up { layer: l, expert: i }, dims.get(l + 1), spec.ranks[l], Zeros));
            }
        }
        out.push((Role::Mixer { layer: l }, dims.get(l + 1), dims.get(l), UniformScaled));
    }
    out.push((Role::Proj, spec.d_out(), dims.last(), UniformScaled));
    if spec.bias {
        for l in 0..spec.depth {
            for i in 0..spec.expert_counts[l] {
                out.push((Role::Bias { layer: l, expert: i }, dims.get(l + 1), 1, Zeros));
            }
        }
    }
    if let Activation::Mlp { .. } = spec.activation {
        for l in 0..spec.depth {
            let w = spec.sigma_width(l);
            let h = spec.sigma_hidden(l).unwrap_or(0);
            out.push((Role::SigmaIn { layer: l }, h, w, UniformScaled));
            out.push((Role::SigmaOut { layer: l }, w, h, UniformScaled));
        }
    }
    let (m, dd) = (spec.m, spec.d_down);
    out.push((Role::TokenDown, dd, spec.d, UniformScaled));
    let noisy = spec.gate == Gate::NoisyTopk;
    match spec.routing {
        RoutingDirection::TopDown => {
            for l in 0..spec.depth {
                out.push((Role::Query1 { layer: l }, m, spec.query_input(l), UniformScaled));
                out.push((Role::Query2 { layer: l }, m, m, UniformScaled));
                out.push((Role::Keys { layer: l }, spec.expert_counts[l], m, NormalScaled));
                if noisy {
                    out.push((Role::NoiseKeys { layer: l }, spec.expert_counts[l], m, Zeros));
                }
            }
        }
        RoutingDirection::BottomUp => {
            let s0 = spec.expert_counts[0];
            out.push((Role::PosKeys { layer: 0 }, big_f[1] * s0, dd, NormalScaled));
            if noisy {
                out.push((Role::BuNoise { layer: 0 }, s0, dd, Zeros));
            }
            for l in 1..spec.depth {
                out.push((Role::PosKeys { layer: l }, big_f[l], dd, NormalScaled));
                out.push((Role::BuQuery1 { layer: l }, m, dims.get(l) + dd, UniformScaled));
                out.push((Role::BuQuery2 { layer: l }, spec.expert_counts[l], m, UniformScaled));
                if noisy {
                    out.push((Role::BuNoise { layer: l }, spec.expert_counts[l], m, Zeros));
                }
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ArchitectureSpec,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    role: Role,
    rows: usize,
    cols: usize,
}

impl ExpertBank {
    /// Allocates every tensor at schedule shapes. `B`, biases and noise keys
    /// start at zero, so the adapter output is exactly zero before training.
    pub fn init(spec: &ArchitectureSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        if !spec.variant.is_smore_family() && spec.variant != Variant::Molre {
            return Err(Error::Unsupported(
                "momor variant has no tree-structured bank; use BaselineParams".into(),
            ));
        }
        if spec.routing == RoutingDirection::BottomUp && spec.gate == Gate::Dense {
            return Err(Error::Unsupported("bottom-up routing is undefined for the dense gate".into()));
        }
        let entries = layout(spec);
        let mut roles = Vec::with_capacity(entries.len());
        let mut params = Vec::with_capacity(entries.len());
        for (role, rows, cols, scheme) in entries {
            roles.push(role);
            params.push(fill(rows, cols, scheme, rng));
        }
        Ok(Self::assemble(spec.clone(), roles, params))
    }

    fn assemble(spec: ArchitectureSpec, roles: Vec<Role>, params: Vec<Matrix>) -> Self {
        let index = roles.iter().enumerate().map(|(k, r)| (*r, k)).collect();
        ExpertBank {
            dims: spec.dimension_schedule(),
            spec,
            roles,
            index,
            params,
            stamp: fresh_stamp(),
        }
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn dims(&self) -> &DimensionSchedule {
        &self.dims
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    fn resolve(&self, role: Role) -> Role {
        if self.spec.variant == Variant::SmoreShared {
            match role {
                Role::Down { expert, .. } => return Role::Down { layer: 0, expert },
                Role::Up { expert, .. } => return Role::Up { layer: 0, expert },
                _ => {}
            }
        }
        role
    }

    /// Storage slot of `role`, after shared-variant resolution.
    pub fn slot(&self, role: Role) -> Option<usize> {
        self.index.get(&self.resolve(role)).copied()
    }

    pub(crate) fn slot_of(&self, role: Role) -> usize {
        self.slot(role).unwrap_or_else(|| panic!("bank has no tensor {role:?}"))
    }

    pub fn get(&self, role: Role) -> Option<&Matrix> {
        self.slot(role).map(|k| &self.params[k])
    }

    pub fn tensor(&self, role: Role) -> &Matrix {
        &self.params[self.slot_of(role)]
    }

    /// Replaces one tensor; the shape must match.
    pub fn set(&mut self, role: Role, value: Matrix) -> Result<()> {
        let k = self
            .slot(role)
            .ok_or_else(|| Error::Unsupported(format!("bank has no tensor {role:?}")))?;
        if self.params[k].shape() != value.shape() {
            return Err(Error::dim(
                format!("{role:?}"),
                self.params[k].len(),
                value.len(),
            ));
        }
        self.params[k] = value;
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// Mutable access to every tensor; counts as a mutation.
    pub fn update(&mut self, f: impl FnOnce(&[Role], &mut [Matrix])) {
        f(&self.roles, &mut self.params);
        self.stamp = fresh_stamp();
    }

    /// Overwrites every tensor with `U[-scale, scale]` draws, in layout order.
    pub fn randomize(&mut self, rng: &mut RngState, scale: f64) {
        self.update(|_, ps| {
            for p in ps {
                for v in p.as_mut_slice() {
                    *v = rng.uniform_range(-scale, scale);
                }
            }
        });
    }

    /// `theta <- theta - lr * grad`, tensor by tensor.
    pub fn sgd_step(&mut self, grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::ParamLength {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.add_scaled(g, -lr);
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// Same layout carrying other values (gradients, for instance).
    pub(crate) fn with_params(&self, params: Vec<Matrix>) -> ExpertBank {
        debug_assert!(params.iter().zip(&self.params).all(|(a, b)| a.shape() == b.shape()));
        ExpertBank {
            params,
            stamp: fresh_stamp(),
            ..self.clone()
        }
    }

    /// Number of stored expert pairs (shared variant counts each once).
    pub fn expert_pairs(&self) -> usize {
        self.roles.iter().filter(|r| matches!(r, Role::Down { .. })).count()
    }

    fn included(role: Role, include_router: bool) -> bool {
        include_router || role.group() != ParamGroup::Router
    }

    pub fn flat_len(&self, include_router: bool) -> usize {
        self.roles
            .iter()
            .zip(&self.params)
            .filter(|(r, _)| Self::included(**r, include_router))
            .map(|(_, p)| p.len())
            .sum()
    }

    /// Layout-order concatenation of every tensor (router tensors only when
    /// asked).
    pub fn flatten(&self, include_router: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len(include_router));
        for (r, p) in self.roles.iter().zip(&self.params) {
            if Self::included(*r, include_router) {
                out.extend_from_slice(p.as_slice());
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten): a copy of `self` with the
    /// included tensors overwritten from `flat`.
    pub fn unflatten(&self, flat: &[f64], include_router: bool) -> Result<ExpertBank> {
        let expected = self.flat_len(include_router);
        if flat.len() != expected {
            return Err(Error::ParamLength {
                expected,
                got: flat.len(),
            });
        }
        let mut bank = self.clone();
        let mut at = 0;
        for (r, p) in bank.roles.iter().zip(bank.params.iter_mut()) {
            if Self::included(*r, include_router) {
                let n = p.len();
                p.as_mut_slice().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        bank.stamp = fresh_stamp();
        Ok(bank)
    }

    /// Writes `<path>.bin` (little-endian f64, layout order, router included)
    /// and `<path>.json` (spec plus tensor shapes).
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            spec: self.spec.clone(),
            tensors: self
                .roles
                .iter()
                .zip(&self.params)
                .map(|(r, p)| ManifestEntry {
                    role: *r,
                    rows: p.rows(),
                    cols: p.cols(),
                })
                .collect(),
        };
        let mut bytes = Vec::with_capacity(self.flat_len(true) * 8);
        for v in self.flatten(true) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path.with_extension("bin"), bytes)?;
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExpertBank> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
        manifest.spec.validate()?;
        let bytes = fs::read(path.with_extension("bin"))?;
        let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
        if bytes.len() != expected * 8 {
            return Err(Error::ParamLength {
                expected,
                got: bytes.len() / 8,
            });
        }
        let layout_roles: Vec<Role> = layout(&manifest.spec).into_iter().map(|e| e.0).collect();
        let roles: Vec<Role> = manifest.tensors.iter().map(|t| t.role).collect();
        if layout_roles != roles {
            return Err(Error::Unsupported("manifest tensors do not match the architecture layout".into()));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut params = Vec::with_capacity(roles.len());
        for t in &manifest.tensors {
            let data: Vec<f64> = values.by_ref().take(t.rows * t.cols).collect();
            params.push(Matrix::from_vec(t.rows, t.cols, data)?);
        }
        Ok(Self::assemble(manifest.spec, roles, params))
    }
}

/// One low-rank pair `B A` with `A: r x d`, `B: d_out x r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankPair {
    pub down: Matrix,
    pub up: Matrix,
}

impl LowRankPair {
    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.up.matvec(&self.down.matvec(x))
    }
}

/// Single-layer baselines. A mixture of low-rank experts is the one-order
/// case; a mixture of multi-order residues has one pool per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub d: usize,
    pub d_out: usize,
    pub orders: Vec<Vec<LowRankPair>>,
}

impl BaselineParams {
    /// Random baseline with `counts[l]` experts of rank `ranks[l]` per order.
    pub fn random(d: usize, d_out: usize, counts: &[usize], ranks: &[usize], rng: &mut RngState) -> Self {
        let orders = counts
            .iter()
            .zip(ranks)
            .map(|(&s, &r)| {
                (0..s)
                    .map(|_| LowRankPair {
                        down: fill(r, d, InitScheme::UniformScaled, rng),
                        up: fill(d_out, r, InitScheme::UniformScaled, rng),
                    })
                    .collect()
            })
            .collect();
        BaselineParams { d, d_out, orders }
    }

    pub fn depth(&self) -> usize {
        self.orders.len()
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        self.orders.iter().map(Vec::len).collect()
    }

    /// Per-order rank; errors when experts within an order disagree.
    pub fn ranks(&self) -> Result<Vec<usize>> {
        self.orders
            .iter()
            .enumerate()
            .map(|(l, pool)| {
                let r = pool.first().map(LowRankPair::rank).unwrap_or(0);
                if pool.iter().any(|p| p.rank() != r) {
                    return Err(Error::RankMismatch(format!("order {l} mixes ranks")));
                }
                Ok(r)
            })
            .collect()
    }

    fn check_shapes(&self) -> Result<()> {
        for pool in &self.orders {
            for p in pool {
                if p.down.cols() != self.d {
                    return Err(Error::dim("baseline down-projection input", self.d, p.down.cols()));
                }
                if p.up.rows() != self.d_out {
                    return Err(Error::dim("baseline up-projection output", self.d_out, p.up.rows()));
                }
                if p.up.cols() != p.down.rows() {
                    return Err(Error::RankMismatch(format!(
                        "up has {} columns, down has {} rows",
                        p.up.cols(),
                        p.down.rows()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tree-structured spec that the equivalence constructions target:
    /// identity activation, no biases, fanout 1.
    pub fn equivalent_spec(&self) -> Result<ArchitectureSpec> {
        let ranks = self.ranks()?;
        let depth = self.depth();
        let mut spec = ArchitectureSpec::uniform(depth, 1, 1, 1, self.d);
        spec.expert_counts = self.expert_counts();
        spec.ranks = ranks;
        spec.fanouts = vec![1; depth];
        spec.d_out = Some(self.d_out);
        spec.activation = Activation::Identity;
        spec.variant = if depth == 1 { Variant::Molre } else { Variant::Smore };
        spec.gate = Gate::NoisyTopk;
        spec.validate()?;
        Ok(spec)
    }
}

/// `P_{a x b}`: zero block on top of a `b x b` identity (`a >= b`).
pub fn binary_projection(a: usize, b: usize) -> Matrix {
    assert!(a >= b, "binary projection needs a >= b");
    Matrix::from_fn(a, b, |i, j| if i == a - b + j { 1.0 } else { 0.0 })
}

fn block_identity(rows: usize, r: usize, offset: usize) -> Matrix {
    Matrix::from_fn(rows, r, |i, j| if i == offset + j { 1.0 } else { 0.0 })
}

/// Bank whose single tree layer reproduces a mixture of low-rank experts:
/// `A^i` copied, `B^i` a block identity and `W_proj = [B^1 .. B^s]`.
pub fn construct_equivalent_molre(base: &BaselineParams, rng: &mut RngState) -> Result<ExpertBank> {
    if base.depth() != 1 {
        return Err(Error::Unsupported(format!(
            "expected a single-order baseline, got {} orders",
            base.depth()
        )));
    }
    construct_stacked(base, rng)
}

/// Bank whose tree layers reproduce a mixture of multi-order residues.
///
/// Layer `l` writes expert `i`'s rank-`r_l` code into rows `i r_l ..` of the
/// top block of `x_{l+1}`; the mixers `W_l = P` shift everything below it.
/// Hence in `x_L` the pool-`l` block starts at `d_L - d_{l+1}`, and
/// `W_proj` places `B_l^i` there.
pub fn construct_equivalent_momor(base: &BaselineParams, rng: &mut RngState) -> Result<ExpertBank> {
    construct_stacked(base, rng)
}

fn construct_stacked(base: &BaselineParams, rng: &mut RngState) -> Result<ExpertBank> {
    base.check_shapes()?;
    let spec = base.equivalent_spec()?;
    let mut bank = ExpertBank::init(&spec, rng)?;
    let dims = spec.dimension_schedule();
    let d_l = dims.last();
    let mut proj = Matrix::zeros(base.d_out, d_l);
    for (l, pool) in base.orders.iter().enumerate() {
        let r = spec.ranks[l];
        let rows = dims.get(l + 1);
        for (i, pair) in pool.iter().enumerate() {
            bank.set(Role::Down { layer: l, expert: i }, pair.down.clone())?;
            bank.set(Role::Up { layer: l, expert: i }, block_identity(rows, r, i * r))?;
            proj.place(0, d_l - rows + i * r, &pair.up);
        }
        bank.set(Role::Mixer { layer: l }, binary_projection(rows, dims.get(l)))?;
    }
    bank.set(Role::Proj, proj)?;
    Ok(bank)
}

/// Bank whose output depends only on the isomorphism class of the routing
/// tree: `A = B = 0`, bias of expert `i` is `(i + 1) e_1`, mixers are `P`, and
/// sigma is a fixed random perceptron.
pub fn construct_distinctness_params(spec: &ArchitectureSpec, rng: &mut RngState) -> Result<ExpertBank> {
    if !matches!(spec.activation, Activation::Mlp { .. }) {
        return Err(Error::Unsupported("distinctness construction requires nonlinear σ".into()));
    }
    if !spec.bias {
        return Err(Error::Unsupported("distinctness construction requires biases".into()));
    }
    let mut bank = ExpertBank::init(spec, rng)?;
    let dims = bank.dims().clone();
    bank.update(|roles, params| {
        for (role, p) in roles.iter().zip(params.iter_mut()) {
            match *role {
                Role::Down { .. } | Role::Up { .. } => *p = Matrix::zeros(p.rows(), p.cols()),
                Role::Mixer { layer } => *p = binary_projection(dims.get(layer + 1), dims.get(layer)),
                Role::Bias { expert, .. } => {
                    let mut b = Matrix::zeros(p.rows(), 1);
                    b.set(0, 0, (expert + 1) as f64);
                    *p = b;
                }
                Role::SigmaIn { .. } | Role::SigmaOut { .. } => {
                    let cols = p.cols();
                    let scale = 3.0 / (cols.max(1) as f64).sqrt();
                    *p = Matrix::from_fn(p.rows(), cols, |_, _| rng.uniform_range(-scale, scale));
                }
                _ => {}
            }
        }
    });
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn spec64() -> ArchitectureSpec {
        ArchitectureSpec::uniform(2, 4, 8, 2, 64)
    }

    #[test]
    fn init_shapes_follow_schedule() {
        let bank = ExpertBank::init(&spec64(), &mut RngState::new(0)).unwrap();
        assert_eq!(bank.expert_pairs(), 8);
        assert_eq!(bank.tensor(Role::Mixer { layer: 1 }).shape(), (64, 32));
        assert_eq!(bank.tensor(Role::Mixer { layer: 0 }).shape(), (32, 0));
        assert_eq!(bank.tensor(Role::Proj).shape(), (64, 64));
        assert_eq!(bank.tensor(Role::Down { layer: 1, expert: 3 }).shape(), (8, 64));
        assert_eq!(bank.tensor(Role::Up { layer: 1, expert: 3 }).shape(), (64, 8));
        assert_eq!(bank.tensor(Role::Up { layer: 0, expert: 0 }).max_abs(), 0.0);
        assert_eq!(bank.tensor(Role::Query1 { layer: 0 }).shape(), (8, 16));
        assert_eq!(bank.tensor(Role::Query1 { layer: 1 }).shape(), (8, 8));
    }

    #[test]
    fn init_is_deterministic() {
        let a = ExpertBank::init(&spec64(), &mut RngState::new(3)).unwrap();
        let b = ExpertBank::init(&spec64(), &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.stamp(), b.stamp());
    }

    #[test]
    fn shared_bank_stores_one_pool() {
        let mut spec = ArchitectureSpec::uniform(4, 3, 2, 1, 16);
        spec.variant = Variant::SmoreShared;
        let bank = ExpertBank::init(&spec, &mut RngState::new(0)).unwrap();
        assert_eq!(bank.expert_pairs(), 3);
        assert_eq!(
            bank.slot(Role::Up { layer: 3, expert: 2 }),
            bank.slot(Role::Up { layer: 0, expert: 2 })
        );
    }

    #[test]
    fn flatten_round_trip_and_empty_mixer() {
        let mut spec = spec64();
        spec.bias = true;
        spec.activation = Activation::Mlp { hidden: Some(5) };
        let bank = ExpertBank::init(&spec, &mut RngState::new(1)).unwrap();
        let mut rng = RngState::new(2);
        let flat: Vec<f64> = (0..bank.flat_len(true)).map(|_| rng.normal()).collect();
        let other = bank.unflatten(&flat, true).unwrap();
        assert_eq!(other.flatten(true), flat);
        let partial = bank.unflatten(&bank.flatten(false), false).unwrap();
        assert_eq!(partial, bank);
        assert!(matches!(bank.unflatten(&flat[1..], true), Err(Error::ParamLength { .. })));
        assert_eq!(bank.tensor(Role::Mixer { layer: 0 }).len(), 0);
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec64();
        spec.routing = RoutingDirection::BottomUp;
        let mut bank = ExpertBank::init(&spec, &mut RngState::new(9)).unwrap();
        let mut rng = RngState::new(10);
        bank.update(|_, ps| {
            for p in ps {
                for v in p.as_mut_slice() {
                    *v = rng.normal() * 1e-3 + std::f64::consts::PI;
                }
            }
        });
        let path = dir.path().join("bank");
        bank.save(&path).unwrap();
        let back = ExpertBank::load(&path).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn projection_composition() {
        for (a, b, c) in [(5, 3, 1), (8, 8, 4), (12, 6, 0), (7, 7, 7)] {
            let lhs = binary_projection(a, b).matmul(&binary_projection(b, c));
            assert_eq!(lhs, binary_projection(a, c));
        }
    }

    #[test]
    fn molre_rank_mismatch() {
        let mut base = BaselineParams::random(8, 8, &[3], &[2], &mut RngState::new(0));
        base.orders[0][1] = LowRankPair {
            down: Matrix::zeros(3, 8),
            up: Matrix::zeros(8, 3),
        };
        let err = construct_equivalent_molre(&base, &mut RngState::new(0)).unwrap_err();
        assert!(matches!(err, Error::RankMismatch(_)));
    }

    #[test]
    fn distinctness_requires_mlp() {
        let mut spec = ArchitectureSpec::uniform(2, 2, 1, 1, 4);
        spec.bias = true;
        spec.activation = Activation::Identity;
        let err = construct_distinctness_params(&spec, &mut RngState::new(0)).unwrap_err();
        assert_eq!(err.to_string(), "distinctness construction requires nonlinear σ");
    }

    #[test]
    fn dense_bottom_up_rejected() {
        let mut spec = spec64();
        spec.gate = Gate::Dense;
        spec.routing = RoutingDirection::BottomUp;
        assert!(ExpertBank::init(&spec, &mut RngState::new(0)).is_err());
    }
}
