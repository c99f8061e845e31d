//! Scalar-input GRU with a bias-free linear readout, trained by
//! backpropagation through time.
//!
//! Cell, with `σ` the logistic function:
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! y  = c_out · h'
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg;
use crate::losses::{gaussian_inputs, SequenceDataset};
use crate::optim::{Adam, StopReason};
use crate::seeds::{derive_seed, stream};

/// One gate's weights: input column, recurrent matrix (row-major), bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
}

impl GateWeights {
    fn zeros(d: usize) -> Self {
        Self {
            w: vec![0.0; d],
            u: vec![0.0; d * d],
            b: vec![0.0; d],
        }
    }

    /// `W x + U h + b`.
    fn preact(&self, x: f64, h: &[f64], out: &mut [f64]) {
        let d = h.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = row_dot(&self.u[i * d..(i + 1) * d], h) + self.w[i] * x + self.b[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub d_g: usize,
    pub update: GateWeights,
    pub reset: GateWeights,
    pub candidate: GateWeights,
    pub c_out: Vec<f64>,
}

impl GruParams {
    pub fn zeros(d_g: usize) -> Self {
        Self {
            d_g,
            update: GateWeights::zeros(d_g),
            reset: GateWeights::zeros(d_g),
            candidate: GateWeights::zeros(d_g),
            c_out: vec![0.0; d_g],
        }
    }

    /// Every entry iid `N(0, scale²)`.
    pub fn random(d_g: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let free: Vec<f64> = (0..Self::n_params(d_g)).map(|_| normal.sample(&mut rng)).collect();
        Self::zeros(d_g).with_flat(&free)
    }

    pub fn n_params(d_g: usize) -> usize {
        3 * (2 * d_g + d_g * d_g) + d_g
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_g;
        let shapes_ok = [&self.update, &self.reset, &self.candidate]
            .iter()
            .all(|g| g.w.len() == d && g.b.len() == d && g.u.len() == d * d)
            && self.c_out.len() == d;
        if !shapes_ok || d == 0 {
            return Err(LabError::InvalidArgument("GRU weight shapes inconsistent with d_g".into()));
        }
        if let Some(index) = self.flat().iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { index });
        }
        Ok(())
    }

    /// Flattened in the order update, reset, candidate (each `w, u, b`), then
    /// `c_out`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::n_params(self.d_g));
        for g in [&self.update, &self.reset, &self.candidate] {
            out.extend_from_slice(&g.w);
            out.extend_from_slice(&g.u);
            out.extend_from_slice(&g.b);
        }
        out.extend_from_slice(&self.c_out);
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let d = self.d_g;
        assert_eq!(flat.len(), Self::n_params(d), "flat GRU parameter length mismatch");
        let mut pos = 0;
        let mut take = |n: usize| {
            let v = flat[pos..pos + n].to_vec();
            pos += n;
            v
        };
        let mut gate = || GateWeights {
            w: take(d),
            u: take(d * d),
            b: take(d),
        };
        let update = gate();
        let reset = gate();
        let candidate = gate();
        let c_out = take(d);
        Self {
            d_g: d,
            update,
            reset,
            candidate,
            c_out,
        }
    }
}

/// Dot product with four independent partial sums.
fn row_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable logistic function.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-step activations kept for the backward pass.
struct StepCache {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

struct ForwardPass {
    steps: Vec<StepCache>,
    outputs: Vec<f64>,
    h_last: Vec<f64>,
}

fn forward_cached(params: &GruParams, x: &[f64], keep: bool) -> Result<ForwardPass> {
    let d = params.d_g;
    let mut h = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut r = vec![0.0; d];
    let mut rh = vec![0.0; d];
    let mut cand = vec![0.0; d];
    let mut steps = Vec::with_capacity(if keep { x.len() } else { 0 });
    let mut outputs = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        params.update.preact(xt, &h, &mut z);
        params.reset.preact(xt, &h, &mut r);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        for i in 0..d {
            rh[i] = r[i] * h[i];
        }
        params.candidate.preact(xt, &rh, &mut cand);
        cand.iter_mut().for_each(|v| *v = v.tanh());
        let h_next: Vec<f64> = (0..d).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
        let y = linalg::dot(&params.c_out, &h_next);
        if !y.is_finite() {
            return Err(LabError::NonFinite { index: t });
        }
        outputs.push(y);
        if keep {
            steps.push(StepCache {
                h_prev: std::mem::replace(&mut h, h_next),
                z: z.clone(),
                r: r.clone(),
                cand: cand.clone(),
            });
        } else {
            h = h_next;
        }
    }
    Ok(ForwardPass {
        steps,
        outputs,
        h_last: h,
    })
}

/// Outputs `y_t` for every step, from `h₀ = 0`.
pub fn gru_forward(params: &GruParams, x: &[f64]) -> Result<Vec<f64>> {
    forward_cached(params, x, false).map(|f| f.outputs)
}

/// Accumulates into `grad` (flat layout) the gradient of a loss whose
/// derivative with respect to output `y_t` is `dy[t]`.
fn backward(params: &GruParams, x: &[f64], fwd: &ForwardPass, dy: &[f64], grad: &mut [f64]) {
    let d = params.d_g;
    let gate_len = 2 * d + d * d;
    let (gz, rest) = grad.split_at_mut(gate_len);
    let (gr, rest) = rest.split_at_mut(gate_len);
    let (gh, gc) = rest.split_at_mut(gate_len);
    let mut lam = vec![0.0; d];
    let mut da_z = vec![0.0; d];
    let mut da_r = vec![0.0; d];
    let mut da_h = vec![0.0; d];
    let mut dq = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut h_next = fwd.h_last.clone();
    for t in (0..x.len()).rev() {
        let s = &fwd.steps[t];
        let xt = x[t];
        if dy[t] != 0.0 {
            for i in 0..d {
                gc[i] += dy[t] * h_next[i];
                lam[i] += dy[t] * params.c_out[i];
            }
        }
        let mut rh = vec![0.0; d];
        for i in 0..d {
            let dz = lam[i] * (s.cand[i] - s.h_prev[i]);
            let dcand = lam[i] * s.z[i];
            da_h[i] = dcand * (1.0 - s.cand[i] * s.cand[i]);
            da_z[i] = dz * s.z[i] * (1.0 - s.z[i]);
            rh[i] = s.r[i] * s.h_prev[i];
        }
        linalg::matvec_t(&params.candidate.u, &da_h, &mut dq);
        for i in 0..d {
            let dr = dq[i] * s.h_prev[i];
            da_r[i] = dr * s.r[i] * (1.0 - s.r[i]);
        }
        accumulate_gate(gh, &da_h, xt, &rh, d);
        accumulate_gate(gz, &da_z, xt, &s.h_prev, d);
        accumulate_gate(gr, &da_r, xt, &s.h_prev, d);
        let mut lam_prev: Vec<f64> = (0..d).map(|i| lam[i] * (1.0 - s.z[i]) + dq[i] * s.r[i]).collect();
        linalg::matvec_t(&params.update.u, &da_z, &mut tmp);
        lam_prev.iter_mut().zip(&tmp).for_each(|(l, v)| *l += v);
        linalg::matvec_t(&params.reset.u, &da_r, &mut tmp);
        lam_prev.iter_mut().zip(&tmp).for_each(|(l, v)| *l += v);
        lam = lam_prev;
        h_next = s.h_prev.clone();
    }
}

fn accumulate_gate(g: &mut [f64], da: &[f64], x: f64, h: &[f64], d: usize) {
    let (gw, rest) = g.split_at_mut(d);
    let (gu, gb) = rest.split_at_mut(d * d);
    for i in 0..d {
        let a = da[i];
        if a == 0.0 {
            continue;
        }
        gw[i] += a * x;
        gb[i] += a;
        let row = &mut gu[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] += a * h[j];
        }
    }
}

/// Mean last-step square loss over `rows` and its flat gradient.
pub fn gru_loss_and_grad(params: &GruParams, data: &SequenceDataset, rows: &[usize]) -> Result<(f64, Vec<f64>)> {
    if rows.is_empty() {
        return Err(LabError::InvalidArgument("empty batch".into()));
    }
    let k = data.k();
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; GruParams::n_params(params.d_g)];
    let mut loss = 0.0;
    let mut dy = vec![0.0; k];
    for &row in rows {
        let x = data.row(row);
        let fwd = forward_cached(params, x, true)?;
        let r = fwd.outputs[k - 1] - data.label(row);
        loss += r * r;
        dy[k - 1] = 2.0 * r * scale;
        backward(params, x, &fwd, &dy, &mut grad);
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(LabError::NonFinite { index });
    }
    Ok((loss * scale, grad))
}

/// Gradient of the mean last-step square loss over the whole dataset.
pub fn gru_grad(params: &GruParams, data: &SequenceDataset) -> Result<GruParams> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let (_, g) = gru_loss_and_grad(params, data, &rows)?;
    Ok(params.with_flat(&g))
}

pub fn gru_loss(params: &GruParams, data: &SequenceDataset) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..data.len() {
        let y = gru_forward(params, data.row(i))?;
        let r = y[data.k() - 1] - data.label(i);
        acc += r * r;
    }
    Ok(acc / data.len() as f64)
}

/// Mean per-step square error of the unit-impulse response against `target`,
/// and its gradient.
pub fn impulse_fit_loss_and_grad(params: &GruParams, target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = target.len();
    let mut x = vec![0.0; n];
    x[0] = 1.0;
    let fwd = forward_cached(params, &x, true)?;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let dy: Vec<f64> = fwd
        .outputs
        .iter()
        .zip(target)
        .map(|(y, t)| {
            loss += (y - t) * (y - t);
            2.0 * (y - t) * scale
        })
        .collect();
    let mut grad = vec![0.0; GruParams::n_params(params.d_g)];
    backward(params, &x, &fwd, &dy, &mut grad);
    Ok((loss * scale, grad))
}

/// Output sequence for the unit impulse `(1, 0, 0, …)`.
pub fn gru_impulse_response(params: &GruParams, horizon: usize) -> Result<Vec<f64>> {
    let mut x = vec![0.0; horizon];
    if horizon > 0 {
        x[0] = 1.0;
    }
    gru_forward(params, &x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruTrainConfig {
    pub k_g: usize,
    pub n_train: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub early_stop_loss: f64,
    /// Per-entry standard deviation of the student initialization.
    pub init_scale: f64,
    pub seed: u64,
    pub record_every: usize,
}

impl GruTrainConfig {
    pub fn new(k_g: usize, seed: u64) -> Self {
        Self {
            k_g,
            n_train: 10_000,
            batch_size: 100,
            lr: 1e-3,
            max_steps: 50_000,
            early_stop_loss: 1e-8,
            init_scale: 1e-4,
            seed,
            record_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruTrajectory {
    pub records: Vec<GruRecord>,
    pub final_params: GruParams,
    pub stop_reason: StopReason,
}

impl GruTrajectory {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// Builds the training set: Gaussian sequences of length `k_g` labelled by
/// the teacher's last output.
pub fn gru_dataset(teacher: &GruParams, k_g: usize, n: usize, seed: u64) -> Result<SequenceDataset> {
    let inputs = gaussian_inputs(k_g, n, seed);
    let labels = inputs
        .chunks(k_g)
        .map(|x| gru_forward(teacher, x).map(|y| y[k_g - 1]))
        .collect::<Result<Vec<_>>>()?;
    SequenceDataset::new(k_g, inputs, labels)
}

/// Fits a student GRU of dimension `d_g` to `teacher` with Adam on
/// mini-batches of the last-step loss.
pub fn gru_train(teacher: &GruParams, d_g: usize, config: &GruTrainConfig) -> Result<GruTrajectory> {
    let student = GruParams::random(d_g, config.init_scale, derive_seed(config.seed, stream::INIT));
    gru_train_from(teacher, student, config)
}

pub fn gru_train_from(teacher: &GruParams, student: GruParams, config: &GruTrainConfig) -> Result<GruTrajectory> {
    teacher.validate()?;
    student.validate()?;
    if config.k_g == 0 || config.n_train == 0 || config.max_steps == 0 || config.record_every == 0 || !(config.lr > 0.0) {
        return Err(LabError::InvalidArgument("invalid GRU training configuration".into()));
    }
    let data = gru_dataset(teacher, config.k_g, config.n_train, derive_seed(config.seed, stream::DATA))?;
    let batch = config.batch_size.clamp(1, data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::BATCH));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = data.len();
    let mut x = student.flat();
    let mut adam = Adam::new(x.len());
    let mut params = student;
    let mut records = Vec::new();
    let mut step = 0;
    let stop_reason = loop {
        if pos + batch > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let rows = &order[pos..pos + batch];
        pos += batch;
        let (loss, g) = match gru_loss_and_grad(&params, &data, rows) {
            Ok(v) => v,
            Err(LabError::NonFinite { .. }) => break StopReason::Diverged,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > crate::optim::DIVERGENCE_LOSS {
            break StopReason::Diverged;
        }
        let rec = GruRecord {
            step,
            loss,
            grad_norm: linalg::norm2(&g),
        };
        if loss <= config.early_stop_loss {
            records.push(rec);
            break StopReason::Converged;
        }
        if step == config.max_steps {
            records.push(rec);
            break StopReason::MaxSteps;
        }
        if step % config.record_every == 0 {
            records.push(rec);
        }
        adam.step(&mut x, &g, config.lr);
        params = params.with_flat(&x);
        step += 1;
    };
    Ok(GruTrajectory {
        records,
        final_params: params,
        stop_reason,
    })
}

/// Mean over `n_inputs` Gaussian sequences of `max_{k_g ≤ t < horizon}
/// |y_t(student) − y_t(teacher)|`.
pub fn gru_extrapolation_error(
    student: &GruParams,
    teacher: &GruParams,
    n_inputs: usize,
    k_g: usize,
    horizon: usize,
    seed: u64,
) -> Result<f64> {
    if horizon <= k_g || n_inputs == 0 {
        return Err(LabError::InvalidArgument(format!(
            "need horizon > k_g and at least one input (horizon={horizon}, k_g={k_g})"
        )));
    }
    let inputs = gaussian_inputs(horizon, n_inputs, seed);
    let mut total = 0.0;
    for x in inputs.chunks(horizon) {
        let ys = gru_forward(student, x)?;
        let yt = gru_forward(teacher, x)?;
        let worst = (k_g..horizon).fold(0.0_f64, |m, t| m.max((ys[t] - yt[t]).abs()));
        total += worst;
    }
    Ok(total / n_inputs as f64)
}

/// Mean over inputs of the per-step gap on the first `k_g` steps.
pub fn gru_prefix_gap(student: &GruParams, teacher: &GruParams, n_inputs: usize, k_g: usize, seed: u64) -> Result<f64> {
    let inputs = gaussian_inputs(k_g, n_inputs, seed);
    let mut total = 0.0;
    for x in inputs.chunks(k_g) {
        let ys = gru_forward(student, x)?;
        let yt = gru_forward(teacher, x)?;
        total += ys.iter().zip(&yt).map(|(a, b)| (a - b).abs()).sum::<f64>() / k_g as f64;
    }
    Ok(total / n_inputs as f64)
}
