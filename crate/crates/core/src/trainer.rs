//! Toy regression training of a routed adapter on clustered synthetic data.
//!
//! The objective is `mse + gamma * balance`, where `mse` is the mean over
//! tokens and output coordinates of the squared error.

use serde::{Deserialize, Serialize};

use crate::config::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::numerics::{Matrix, RngState};
use crate::propagate::record_batch;
use crate::router::Mode;

/// Losses above this abort the run.
pub const DIVERGENCE_LOSS: f64 = 1e6;

pub const OBJECTIVE: &str = "mse + gamma * balance";

/// Inputs drawn around `k` centers, targets `M_c x` for the sample's cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub d: usize,
    pub noise: f64,
    pub centers: Vec<Vec<f64>>,
    pub maps: Vec<Matrix>,
    pub clusters: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Smallest distance between two centers.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.centers.len() {
            for j in i + 1..self.centers.len() {
                best = best.min(dist(&self.centers[i], &self.centers[j]));
            }
        }
        best
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Center separation is at least `4 * noise * sqrt(d)`; cluster sizes
/// differ by at most one.
pub fn gen_synthetic(seed: u64, n: usize, k: usize, d: usize, noise: f64) -> Result<SyntheticTask> {
    if k < 2 {
        return Err(Error::InvalidTask(format!("need at least 2 clusters, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidTask(format!("need n >= k, got n={n}, k={k}")));
    }
    if d == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidTask(format!("invalid d={d} or noise={noise}")));
    }
    let mut rng = RngState::new(seed);
    let mut centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let needed = 4.0 * noise * (d as f64).sqrt();
    let mut sep = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            sep = sep.min(dist(&centers[i], &centers[j]));
        }
    }
    if sep < needed {
        let scale = needed / sep.max(f64::MIN_POSITIVE);
        for c in &mut centers {
            c.iter_mut().for_each(|v| *v *= scale);
        }
    }
    let bound = 1.0 / (d as f64).sqrt();
    let maps: Vec<Matrix> = (0..k)
        .map(|_| Matrix::from_fn(d, d, |_, _| rng.uniform_range(-bound, bound) * 3f64.sqrt()))
        .collect();
    let mut clusters: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut clusters);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for &c in &clusters {
        let x: Vec<f64> = centers[c].iter().map(|v| v + noise * rng.normal()).collect();
        targets.push(maps[c].matvec(&x));
        inputs.push(x);
    }
    Ok(SyntheticTask {
        d,
        noise,
        centers,
        maps,
        clusters,
        inputs,
        targets,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Tokens per step; `>= n` means full batch in dataset order.
    pub batch: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub grad_norm: f64,
    /// Per pool, per expert: selections per gate event in this batch.
    pub utilization: Vec<Vec<f64>>,
}

impl StepRecord {
    pub fn util_min(&self) -> f64 {
        self.utilization.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn util_max(&self) -> f64 {
        self.utilization.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub spec: ArchitectureSpec,
    pub config: TrainConfig,
    /// Full-dataset task loss in eval mode before the first step.
    pub initial_eval: f64,
    /// Full-dataset task loss in eval mode after the last step.
    pub final_eval: f64,
    pub records: Vec<StepRecord>,
    #[serde(skip)]
    pub bank: Option<ExpertBank>,
}

struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

/// Eval-mode mean squared error over the whole task.
pub fn evaluate(bank: &ExpertBank, task: &SyntheticTask, rng: &RngState) -> Result<f64> {
    let xs: Vec<&[f64]> = task.inputs.iter().map(|v| v.as_slice()).collect();
    let rec = record_batch(bank, &xs, rng, 0, Mode::Eval)?;
    let d_out = bank.spec().d_out();
    let mut total = 0.0;
    for (out, y) in rec.outs.iter().zip(&task.targets) {
        total += rec.tape.value(*out).iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (task.len() * d_out) as f64)
}

/// Trains a freshly initialized bank; `rng` seeds the initialization, batch
/// sampling (parent stream) and routing noise (token substreams).
pub fn train(spec: &ArchitectureSpec, task: &SyntheticTask, config: &TrainConfig, rng: &mut RngState) -> Result<TrainRun> {
    let bank = ExpertBank::init(spec, rng)?;
    train_bank(bank, task, config, rng)
}

pub fn train_bank(mut bank: ExpertBank, task: &SyntheticTask, config: &TrainConfig, rng: &mut RngState) -> Result<TrainRun> {
    let spec = bank.spec().clone();
    if config.steps == 0 {
        return Err(Error::InvalidTask("steps must be at least 1".into()));
    }
    if config.batch == 0 || task.is_empty() {
        return Err(Error::InvalidTask("empty batch".into()));
    }
    if task.d != spec.d || spec.d_out() != task.d {
        return Err(Error::dim("task width", spec.d, task.d));
    }
    let d_out = spec.d_out();
    let n = task.len();
    let batch = config.batch.min(n);
    let eval_rng = rng.substream(u64::MAX - 1);
    let initial_eval = evaluate(&bank, task, &eval_rng)?;
    let mut adam = match config.optimizer {
        Optimizer::Adam { .. } => Some(AdamState {
            m: bank.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: bank.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<usize> = if batch == n { (0..n).collect() } else { (0..batch).map(|_| rng.below(n)).collect() };
        let xs: Vec<&[f64]> = idx.iter().map(|&i| task.inputs[i].as_slice()).collect();
        let rec = record_batch(&bank, &xs, rng, (step * batch) as u64, Mode::Train)?;
        let scale = 1.0 / (batch * d_out) as f64;
        let mut task_loss = 0.0;
        let mut seeds = Vec::with_capacity(batch + 1);
        for (&out, &i) in rec.outs.iter().zip(&idx) {
            let err: Vec<f64> = rec.tape.value(out).iter().zip(&task.targets[i]).map(|(a, b)| a - b).collect();
            task_loss += err.iter().map(|e| e * e).sum::<f64>() * scale;
            seeds.push((out, err.iter().map(|e| 2.0 * scale * e).collect()));
        }
        let aux_loss = rec.aux.map(|a| rec.tape.scalar(a)).unwrap_or(0.0);
        if let Some(a) = rec.aux {
            seeds.push((a, vec![1.0]));
        }
        let total = task_loss + aux_loss;
        if !(total.is_finite() && total <= DIVERGENCE_LOSS) {
            return Err(Error::Diverged { step, loss: total });
        }
        let grads = rec.tape.backward(bank.params(), &seeds);
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.as_slice().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        match (&mut adam, config.optimizer) {
            (Some(state), Optimizer::Adam { beta1, beta2, eps }) => {
                state.t += 1;
                let (c1, c2) = (1.0 - beta1.powi(state.t), 1.0 - beta2.powi(state.t));
                let lr = config.lr;
                let (ms, vs) = (&mut state.m, &mut state.v);
                bank.update(|_, params| {
                    for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                        let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
                        for j in 0..p.len() {
                            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        }
                    }
                });
            }
            _ => bank.sgd_step(&grads, config.lr)?,
        }
        records.push(StepRecord {
            step,
            task_loss,
            aux_loss,
            grad_norm,
            utilization: rec.stats.pools.iter().map(|p| p.utilization()).collect(),
        });
    }
    let final_eval = evaluate(&bank, task, &eval_rng)?;
    Ok(TrainRun {
        spec,
        config: *config,
        initial_eval,
        final_eval,
        records,
        bank: Some(bank),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolUtilization {
    pub pool: usize,
    /// Per-expert selections per gate event, averaged over the window.
    pub experts: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Per-pool utilization over the last 10% of steps (at least one step).
pub fn utilization_report(run: &TrainRun) -> Vec<PoolUtilization> {
    let n = run.records.len();
    if n == 0 {
        return Vec::new();
    }
    let window = &run.records[n - (n / 10).max(1)..];
    let pools = window[0].utilization.len();
    (0..pools)
        .map(|pool| {
            let s = window[0].utilization[pool].len();
            let experts: Vec<f64> = (0..s)
                .map(|i| window.iter().map(|r| r.utilization[pool][i]).sum::<f64>() / window.len() as f64)
                .collect();
            let min = experts.iter().copied().fold(f64::INFINITY, f64::min);
            let max = experts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = experts.iter().sum::<f64>() / s as f64;
            PoolUtilization {
                pool,
                experts,
                min,
                max,
                mean,
            }
        })
        .collect()
}

/// Largest within-pool spread `max - min` of the utilization report.
pub fn utilization_imbalance(report: &[PoolUtilization]) -> f64 {
    report.iter().map(|p| p.max - p.min).fold(0.0, f64::max)
}

pub const TRAIN_CSV_HEADER: &str = "step,task_loss,aux_loss,grad_norm,util_min,util_max";

pub fn run_csv(run: &TrainRun) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for r in &run.records {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{},{}\n",
            r.step,
            r.task_loss,
            r.aux_loss,
            r.grad_norm,
            r.util_min(),
            r.util_max()
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: String,
    pub steps: usize,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub loss_ratio: f64,
    pub final_task_loss: f64,
    pub final_aux_loss: f64,
    pub utilization: Vec<PoolUtilization>,
}

pub fn run_summary(run: &TrainRun) -> RunSummary {
    let last = run.records.last();
    RunSummary {
        objective: OBJECTIVE.into(),
        steps: run.records.len(),
        initial_eval: run.initial_eval,
        final_eval: run.final_eval,
        loss_ratio: if run.initial_eval > 0.0 { run.final_eval / run.initial_eval } else { 0.0 },
        final_task_loss: last.map_or(0.0, |r| r.task_loss),
        final_aux_loss: last.map_or(0.0, |r| r.aux_loss),
        utilization: utilization_report(run),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Activation, Gate};

    fn small_spec(d: usize) -> ArchitectureSpec {
        let mut sp = ArchitectureSpec::uniform(2, 2, 2, 1, d);
        sp.d_down = 4;
        sp.m = 4;
        sp
    }

    #[test]
    fn synthetic_examples() {
        let t = gen_synthetic(1, 256, 4, 16, 0.05).unwrap();
        assert_eq!(t.len(), 256);
        for c in 0..4 {
            assert_eq!(t.clusters.iter().filter(|&&x| x == c).count(), 64);
        }
        assert!(t.min_separation() >= 4.0 * 0.05 * 4.0);
        let exact = gen_synthetic(2, 10, 3, 5, 0.0).unwrap();
        for (x, &c) in exact.inputs.iter().zip(&exact.clusters) {
            assert_eq!(x, &exact.centers[c]);
        }
        let counts: Vec<usize> = (0..3).map(|c| exact.clusters.iter().filter(|&&x| x == c).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(gen_synthetic(1, 256, 4, 16, 0.05).unwrap(), t);
        assert!(gen_synthetic(1, 3, 4, 16, 0.1).is_err());
        assert!(gen_synthetic(1, 8, 1, 16, 0.1).is_err());
    }

    #[test]
    fn large_noise_forces_separation() {
        let t = gen_synthetic(3, 40, 5, 4, 10.0).unwrap();
        assert!(t.min_separation() >= 4.0 * 10.0 * 2.0 - 1e-9);
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let task = gen_synthetic(4, 16, 2, 6, 0.05).unwrap();
        let mut sp = small_spec(6);
        sp.gate = Gate::Dense;
        let cfg = TrainConfig {
            steps: 5,
            lr: 0.0,
            batch: 16,
            optimizer: Optimizer::Sgd,
        };
        let run = train(&sp, &task, &cfg, &mut RngState::new(0)).unwrap();
        let first = run.records[0].task_loss;
        assert!(run.records.iter().all(|r| r.task_loss == first));
        assert_eq!(run.initial_eval, run.final_eval);
    }

    #[test]
    fn no_op_start() {
        let task = gen_synthetic(5, 8, 2, 6, 0.05).unwrap();
        let bank = ExpertBank::init(&small_spec(6), &mut RngState::new(1)).unwrap();
        let xs: Vec<&[f64]> = task.inputs.iter().map(|v| v.as_slice()).collect();
        let rec = record_batch(&bank, &xs, &RngState::new(2), 0, Mode::Train).unwrap();
        assert!(rec.outs.iter().all(|&o| rec.tape.value(o).iter().all(|&v| v == 0.0)));
        let mean_sq = task.targets.iter().map(|y| y.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / (task.len() * task.d) as f64;
        assert_eq!(evaluate(&bank, &task, &RngState::new(2)).unwrap(), mean_sq);
    }

    #[test]
    fn runs_are_reproducible() {
        let task = gen_synthetic(6, 32, 2, 6, 0.05).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            lr: 0.05,
            batch: 8,
            optimizer: Optimizer::Sgd,
        };
        let a = train(&small_spec(6), &task, &cfg, &mut RngState::new(9)).unwrap();
        let b = train(&small_spec(6), &task, &cfg, &mut RngState::new(9)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(run_csv(&a), run_csv(&b));
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let task = gen_synthetic(7, 24, 3, 6, 0.05).unwrap();
        let mut sp = small_spec(6);
        sp.gate = Gate::Dense;
        sp.activation = Activation::Mlp { hidden: None };
        let cfg = TrainConfig {
            steps: 100,
            lr: 1e-3,
            batch: 24,
            optimizer: Optimizer::Sgd,
        };
        let run = train(&sp, &task, &cfg, &mut RngState::new(3)).unwrap();
        for w in run.records.windows(2) {
            assert!(w[1].task_loss <= w[0].task_loss + 1e-9, "step {}", w[1].step);
        }
        assert!(run.records.last().unwrap().task_loss < run.records[0].task_loss);
    }

    #[test]
    fn dense_utilization_is_one() {
        let task = gen_synthetic(8, 16, 2, 6, 0.05).unwrap();
        let mut sp = small_spec(6);
        sp.gate = Gate::Dense;
        let cfg = TrainConfig {
            steps: 10,
            lr: 0.01,
            batch: 4,
            optimizer: Optimizer::Sgd,
        };
        let run = train(&sp, &task, &cfg, &mut RngState::new(4)).unwrap();
        for pool in utilization_report(&run) {
            assert!(pool.experts.iter().all(|&u| u == 1.0));
        }
    }

    #[test]
    fn single_token_utilization_is_indicator() {
        let task = gen_synthetic(9, 2, 2, 6, 0.05).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            lr: 0.01,
            batch: 1,
            optimizer: Optimizer::Sgd,
        };
        let run = train(&small_spec(6), &task, &cfg, &mut RngState::new(5)).unwrap();
        let report = utilization_report(&run);
        assert_eq!(report[1].experts.iter().sum::<f64>(), 1.0);
        assert!(report[1].experts.iter().all(|&u| u == 0.0 || u == 1.0));
    }

    #[test]
    fn divergence_names_the_step() {
        let task = gen_synthetic(10, 16, 2, 6, 1.0).unwrap();
        let mut sp = small_spec(6);
        sp.gate = Gate::Dense;
        let cfg = TrainConfig {
            steps: 200,
            lr: 1e4,
            batch: 16,
            optimizer: Optimizer::Sgd,
        };
        match train(&sp, &task, &cfg, &mut RngState::new(6)) {
            Err(Error::Diverged { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.final_eval)),
        }
    }

    #[test]
    fn adam_reduces_loss() {
        let task = gen_synthetic(11, 32, 2, 6, 0.05).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            lr: 0.01,
            batch: 32,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        };
        let run = train(&small_spec(6), &task, &cfg, &mut RngState::new(7)).unwrap();
        assert!(run.final_eval < run.initial_eval);
    }
}
