//! Gradient descent, gradient flow (RK4) and Adam over the free parameters of
//! a linear RNN, with per-step instrumentation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lds::{ImpulseResponse, LinearRnnParams, Structure};
use crate::losses::{self, Gradients, SequenceDataset};
use crate::seeds::{derive_seed, stream};

pub const DIVERGENCE_LOSS: f64 = 1e12;
pub const DIVERGENCE_PARAM: f64 = 1e6;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Conservation drift that triggers the one-time GF step halving.
pub const GF_DRIFT_HALVE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gd,
    Gf,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Population,
    Empirical,
    Accumulating,
}

impl LossKind {
    pub fn default_early_stop(self) -> f64 {
        match self {
            LossKind::Population | LossKind::Accumulating => 1e-12,
            LossKind::Empirical => 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    /// `B` random, `C = Bᵀ`, `A` symmetric random; all at the given scale.
    BalancedRandom { scale: f64 },
    /// ε-normal: every free entry `~ N(0, ε²/n)`, `n` the number of entries
    /// in the owning block.
    GaussianScaled { eps: f64 },
    Explicit { theta: LinearRnnParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: Method,
    /// Step size for GD and Adam, integration step for GF.
    pub lr: f64,
    pub max_steps: usize,
    pub loss_kind: LossKind,
    pub early_stop_loss: f64,
    /// `(step, multiplier)`: from `step` on, the rate is scaled by `multiplier`.
    #[serde(default)]
    pub lr_milestones: Vec<(usize, f64)>,
    /// Mini-batch size for empirical losses; 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub init: InitKind,
    pub seed: u64,
    pub record_every: usize,
}

impl TrainingConfig {
    pub fn new(method: Method, lr: f64, max_steps: usize, loss_kind: LossKind, init: InitKind) -> Self {
        Self {
            method,
            lr,
            max_steps,
            loss_kind,
            early_stop_loss: loss_kind.default_early_stop(),
            lr_milestones: Vec::new(),
            batch_size: 0,
            init,
            seed: 0,
            record_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(LabError::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_steps == 0 {
            return Err(LabError::InvalidArgument("max_steps must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(LabError::InvalidArgument("record_every must be at least 1".into()));
        }
        if self.lr_milestones.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(LabError::InvalidArgument("lr milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Step size in effect at `step`.
pub fn lr_schedule_apply(config: &TrainingConfig, step: usize) -> f64 {
    config
        .lr_milestones
        .iter()
        .filter(|(at, _)| step >= *at)
        .fold(config.lr, |lr, (_, mult)| lr * mult)
}

/// The multi-step schedule used for the init-scale experiments.
pub fn paper_milestones() -> Vec<(usize, f64)> {
    [5000, 10000, 15000, 30000].iter().map(|&s| (s, 0.1)).collect()
}

pub fn init_student(d: usize, structure: Structure, kind: &InitKind, seed: u64) -> Result<LinearRnnParams> {
    if d == 0 {
        return Err(LabError::InvalidArgument("d must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |std: f64| -> f64 {
        let n = Normal::new(0.0, std).expect("finite std");
        n.sample(&mut rng)
    };
    match kind {
        InitKind::Explicit { theta } => {
            if theta.d() != d || theta.structure() != structure {
                return Err(LabError::InvalidArgument("explicit init does not match student shape".into()));
            }
            Ok(theta.clone())
        }
        InitKind::GaussianScaled { eps } => {
            let a_std = eps / a_block_len(d, structure).sqrt();
            let v_std = eps / (d as f64).sqrt();
            let template = LinearRnnParams::zeros(d, structure);
            let n_a = template.n_free() - 2 * d;
            let mut free: Vec<f64> = (0..n_a).map(|_| normal(a_std)).collect();
            free.extend((0..2 * d).map(|_| normal(v_std)));
            Ok(template.with_free_params(&free))
        }
        InitKind::BalancedRandom { scale } => {
            let v_std = scale / (d as f64).sqrt();
            let a_std = scale / a_block_len(d, structure).sqrt();
            let template = LinearRnnParams::zeros(d, structure);
            let n_a = template.n_free() - 2 * d;
            let mut free: Vec<f64> = match structure {
                // General students still start from a symmetric A so that the
                // initialization is balanced in the gradient-flow sense.
                Structure::General => {
                    let mut a = vec![0.0; d * d];
                    for i in 0..d {
                        for j in i..d {
                            let v = normal(a_std);
                            a[i * d + j] = v;
                            a[j * d + i] = v;
                        }
                    }
                    a
                }
                _ => (0..n_a).map(|_| normal(a_std)).collect(),
            };
            let b: Vec<f64> = (0..d).map(|_| normal(v_std)).collect();
            free.extend_from_slice(&b);
            free.extend_from_slice(&b);
            Ok(template.with_free_params(&free))
        }
    }
}

fn a_block_len(d: usize, structure: Structure) -> f64 {
    match structure {
        Structure::Diagonal => d as f64,
        Structure::General | Structure::Symmetric => (d * d) as f64,
    }
}

/// What the student is fitted to.
#[derive(Debug, Clone)]
pub enum Target {
    /// Teacher impulse response of length `k` (population / accumulating).
    Teacher(ImpulseResponse),
    Data(SequenceDataset),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxSteps,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    /// Gradient-flow time; absent for discrete methods.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub time: Option<f64>,
    pub loss: f64,
    /// `None` when `B + Cᵀ = 0`.
    pub balancedness_ratio: Option<f64>,
    pub norm_gap: f64,
    pub balance_gap: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrajectory {
    pub records: Vec<Record>,
    pub final_theta: LinearRnnParams,
    pub stop_reason: StopReason,
    /// Final GF integration step (after any halving).
    #[serde(default)]
    pub final_step_size: f64,
}

impl TrainingTrajectory {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn min_balancedness_ratio(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.balancedness_ratio)
            .min_by(f64::total_cmp)
    }
}

/// Adam with bias correction over a flat parameter vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
}

struct Objective<'a> {
    target: &'a Target,
    kind: LossKind,
}

impl Objective<'_> {
    /// Loss over the whole target, and the gradient over `batch` (all rows
    /// when `None`).
    fn eval(&self, theta: &LinearRnnParams, batch: Option<&[usize]>) -> Result<(f64, Gradients)> {
        match (self.target, self.kind) {
            (Target::Teacher(ir), LossKind::Population) => losses::population_loss_and_grad(theta, ir, false),
            (Target::Teacher(ir), LossKind::Accumulating) => losses::population_loss_and_grad(theta, ir, true),
            (Target::Data(data), LossKind::Empirical) => match batch {
                None => {
                    let rows: Vec<usize> = (0..data.len()).collect();
                    losses::empirical_loss_and_grad_conv(theta, data, &rows)
                }
                Some(rows) => {
                    let (_, g) = losses::empirical_loss_and_grad_conv(theta, data, rows)?;
                    Ok((losses::empirical_loss_conv(theta, data)?, g))
                }
            },
            _ => Err(LabError::InvalidArgument(format!(
                "loss kind {:?} does not match the supplied target",
                self.kind
            ))),
        }
    }
}

struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl BatchSampler {
    fn next(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        out
    }
}

fn record(step: usize, time: Option<f64>, loss: f64, theta: &LinearRnnParams, grad: &[f64]) -> Record {
    Record {
        step,
        time,
        loss,
        balancedness_ratio: theta.balancedness_ratio().ok(),
        norm_gap: theta.norm_gap(),
        balance_gap: theta.balance_gap(),
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    }
}

fn diverged(loss: f64, theta: &LinearRnnParams) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS || theta.max_abs_param() > DIVERGENCE_PARAM
}

/// Runs the configured optimizer from `student_init`.
///
/// Instrumentation is recorded at step 0, every `record_every` steps and at
/// the final step. A non-finite or exploding loss ends the run with
/// [`StopReason::Diverged`]; `final_theta` is then the last finite iterate.
pub fn train(target: &Target, student_init: &LinearRnnParams, config: &TrainingConfig) -> Result<TrainingTrajectory> {
    config.validate()?;
    let objective = Objective {
        target,
        kind: config.loss_kind,
    };
    // Fail eagerly on a target/loss mismatch.
    if let (Target::Teacher(_), LossKind::Empirical) | (Target::Data(_), LossKind::Population | LossKind::Accumulating) =
        (target, config.loss_kind)
    {
        objective.eval(student_init, None)?;
    }
    let mut sampler = match (target, config.method) {
        (Target::Data(data), Method::Gd | Method::Adam) if config.batch_size > 0 && config.batch_size < data.len() => {
            Some(BatchSampler {
                rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::BATCH)),
                order: (0..data.len()).collect(),
                pos: usize::MAX / 2,
                size: config.batch_size,
            })
        }
        _ => None,
    };

    let mut theta = student_init.clone();
    let mut records = Vec::new();
    let n = theta.n_free();
    let mut adam = Adam::new(n);
    let mut h = config.lr;
    let mut halved = false;
    let gap0 = theta.norm_gap();
    let balanced0 = theta.balance_gap();
    let mut step = 0usize;
    let mut tau = 0.0;

    let stop_reason = loop {
        let batch = sampler.as_mut().map(|s| s.next().to_vec());
        let (loss, grad) = match objective.eval(&theta, batch.as_deref()) {
            Ok(v) => v,
            Err(LabError::NonFinite { .. }) => break StopReason::Diverged,
            Err(e) => return Err(e),
        };
        if diverged(loss, &theta) {
            break StopReason::Diverged;
        }
        let g = grad.free_vector();
        let time = (config.method == Method::Gf).then_some(tau);
        if loss <= config.early_stop_loss {
            records.push(record(step, time, loss, &theta, &g));
            break StopReason::Converged;
        }
        if step == config.max_steps {
            records.push(record(step, time, loss, &theta, &g));
            break StopReason::MaxSteps;
        }
        if step % config.record_every == 0 {
            records.push(record(step, time, loss, &theta, &g));
        }

        let x = theta.free_params();
        let next = match config.method {
            Method::Gd => {
                let lr = lr_schedule_apply(config, step);
                let upd: Vec<f64> = x.iter().zip(&g).map(|(p, gi)| p - lr * gi).collect();
                theta.with_free_params(&upd)
            }
            Method::Adam => {
                let mut upd = x.clone();
                adam.step(&mut upd, &g, lr_schedule_apply(config, step));
                theta.with_free_params(&upd)
            }
            Method::Gf => match rk4_step(&objective, &theta, &g, h) {
                Some(t) => t,
                None => break StopReason::Diverged,
            },
        };
        theta = next;
        step += 1;
        if config.method == Method::Gf {
            tau += h;
        }

        if config.method == Method::Gf && !halved {
            let drift = (theta.norm_gap() - gap0).abs();
            let bal_drift = if balanced0 == 0.0 { theta.balance_gap() } else { 0.0 };
            if drift.max(bal_drift) > GF_DRIFT_HALVE {
                h *= 0.5;
                halved = true;
            }
        }
    };

    Ok(TrainingTrajectory {
        records,
        final_theta: theta,
        stop_reason,
        final_step_size: h,
    })
}

/// One classical RK4 step of `θ' = −∇L(θ)`, with `g0 = ∇L(θ)` precomputed.
fn rk4_step(objective: &Objective<'_>, theta: &LinearRnnParams, g0: &[f64], h: f64) -> Option<LinearRnnParams> {
    let x = theta.free_params();
    let shifted = |k: &[f64], scale: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi - scale * ki).collect() };
    let grad_at = |p: &[f64]| -> Option<Vec<f64>> {
        let t = theta.with_free_params(p);
        objective.eval(&t, None).ok().filter(|(l, _)| l.is_finite()).map(|(_, g)| g.free_vector())
    };
    let k1 = g0;
    let k2 = grad_at(&shifted(k1, 0.5 * h))?;
    let k3 = grad_at(&shifted(&k2, 0.5 * h))?;
    let k4 = grad_at(&shifted(&k3, h))?;
    let upd: Vec<f64> = (0..x.len())
        .map(|i| x[i] - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    Some(theta.with_free_params(&upd))
}
