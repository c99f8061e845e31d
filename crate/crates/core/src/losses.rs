//! Square losses of a student linear RNN against a teacher, with analytic
//! gradients.
//!
//! Gradients include the chain-rule factor 2 from the square.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lds::{ImpulseResponse, LinearRnnParams, Structure};
use crate::linalg;

pub const FD_STEP: f64 = 1e-6;

/// Loss gradient with respect to `(A, B, C)`.
///
/// For `Symmetric` parameters `g_a` is the symmetrized matrix `(G + Gᵀ)/2`;
/// the derivative with respect to the free upper-triangle variable `(i, j)`,
/// `i < j`, is `2·g_a[i][j]`, and `g_a[i][i]` on the diagonal. See
/// [`Gradients::free_vector`]. For `Diagonal` parameters the off-diagonal of
/// `g_a` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d: usize,
    pub structure: Structure,
    pub g_a: Vec<f64>,
    pub g_b: Vec<f64>,
    pub g_c: Vec<f64>,
}

impl Gradients {
    pub fn zeros(d: usize, structure: Structure) -> Self {
        Self {
            d,
            structure,
            g_a: vec![0.0; d * d],
            g_b: vec![0.0; d],
            g_c: vec![0.0; d],
        }
    }

    /// Projects a raw `∂L/∂A` onto the structural parameterization.
    fn from_raw(structure: Structure, d: usize, mut g_a: Vec<f64>, g_b: Vec<f64>, g_c: Vec<f64>) -> Self {
        match structure {
            Structure::General => {}
            Structure::Symmetric => {
                for i in 0..d {
                    for j in i + 1..d {
                        let s = 0.5 * (g_a[i * d + j] + g_a[j * d + i]);
                        g_a[i * d + j] = s;
                        g_a[j * d + i] = s;
                    }
                }
            }
            Structure::Diagonal => {
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            g_a[i * d + j] = 0.0;
                        }
                    }
                }
            }
        }
        Self {
            d,
            structure,
            g_a,
            g_b,
            g_c,
        }
    }

    /// Gradient with respect to the free variables, laid out like
    /// [`LinearRnnParams::free_params`].
    pub fn free_vector(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = Vec::with_capacity(crate::lds::n_free(d, self.structure));
        match self.structure {
            Structure::General => out.extend_from_slice(&self.g_a),
            Structure::Symmetric => {
                for i in 0..d {
                    out.push(self.g_a[i * d + i]);
                    for j in i + 1..d {
                        out.push(2.0 * self.g_a[i * d + j]);
                    }
                }
            }
            Structure::Diagonal => out.extend((0..d).map(|i| self.g_a[i * d + i])),
        }
        out.extend_from_slice(&self.g_b);
        out.extend_from_slice(&self.g_c);
        out
    }

    /// Inverse of [`free_vector`](Self::free_vector).
    pub fn from_free(d: usize, structure: Structure, free: &[f64]) -> Self {
        let mut g_a = vec![0.0; d * d];
        let mut it = free.iter().copied();
        match structure {
            Structure::General => g_a.iter_mut().for_each(|v| *v = it.next().unwrap()),
            Structure::Symmetric => {
                for i in 0..d {
                    g_a[i * d + i] = it.next().unwrap();
                    for j in i + 1..d {
                        let v = 0.5 * it.next().unwrap();
                        g_a[i * d + j] = v;
                        g_a[j * d + i] = v;
                    }
                }
            }
            Structure::Diagonal => (0..d).for_each(|i| g_a[i * d + i] = it.next().unwrap()),
        }
        let g_b = it.by_ref().take(d).collect();
        let g_c = it.collect();
        Self {
            d,
            structure,
            g_a,
            g_b,
            g_c,
        }
    }

    pub fn norm(&self) -> f64 {
        linalg::norm2(&self.free_vector())
    }
}

/// `Σ_{j<k} (C AʲB − w_j)²`.
pub fn population_loss(theta: &LinearRnnParams, teacher_ir: &ImpulseResponse) -> Result<f64> {
    let ir = theta.impulse_response(teacher_ir.horizon())?;
    Ok(ir
        .values
        .iter()
        .zip(&teacher_ir.values)
        .map(|(s, t)| (s - t) * (s - t))
        .sum())
}

pub fn population_grad(theta: &LinearRnnParams, teacher_ir: &ImpulseResponse) -> Result<Gradients> {
    weighted_grad(theta, teacher_ir, |_| 1.0).map(|(_, g)| g)
}

/// `Σ_{i<k} (k − i)(C AⁱB − w_i)²`.
pub fn accumulating_loss(theta: &LinearRnnParams, teacher_ir: &ImpulseResponse) -> Result<f64> {
    let k = teacher_ir.horizon();
    let ir = theta.impulse_response(k)?;
    Ok(ir
        .values
        .iter()
        .zip(&teacher_ir.values)
        .enumerate()
        .map(|(i, (s, t))| (k - i) as f64 * (s - t) * (s - t))
        .sum())
}

pub fn accumulating_grad(theta: &LinearRnnParams, teacher_ir: &ImpulseResponse) -> Result<Gradients> {
    let k = teacher_ir.horizon();
    weighted_grad(theta, teacher_ir, |i| (k - i) as f64).map(|(_, g)| g)
}

/// Loss and gradient for the per-index weighted population loss, sharing one
/// pass over the forward states.
pub fn population_loss_and_grad(
    theta: &LinearRnnParams,
    teacher_ir: &ImpulseResponse,
    accumulating: bool,
) -> Result<(f64, Gradients)> {
    let k = teacher_ir.horizon();
    if accumulating {
        weighted_grad(theta, teacher_ir, |i| (k - i) as f64)
    } else {
        weighted_grad(theta, teacher_ir, |_| 1.0)
    }
}

/// Gradient of `Σ_i weight(i)·(CAⁱB − w_i)²`.
fn weighted_grad(
    theta: &LinearRnnParams,
    teacher_ir: &ImpulseResponse,
    weight: impl Fn(usize) -> f64,
) -> Result<(f64, Gradients)> {
    let k = teacher_ir.horizon();
    if k == 0 {
        return Err(LabError::InvalidArgument("teacher horizon must be at least 1".into()));
    }
    let states = ResponseStates::new(theta, k)?;
    let mut loss = 0.0;
    let mut e = vec![0.0; k];
    for i in 0..k {
        let r = states.ir[i] - teacher_ir.values[i];
        let w = weight(i);
        loss += w * r * r;
        e[i] = w * r;
    }
    Ok((loss, states.grad(theta, &e)?))
}

/// Forward states `u_j = AʲB`, adjoint states `v_j = (Aᵀ)ʲCᵀ` and the
/// impulse response `C u_j`, for `j < k`.
struct ResponseStates {
    k: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    ir: Vec<f64>,
}

impl ResponseStates {
    fn new(theta: &LinearRnnParams, k: usize) -> Result<Self> {
        let d = theta.d();
        let (a, b, c) = (theta.a(), theta.b(), theta.c());
        let mut u = vec![0.0; k * d];
        let mut v = vec![0.0; k * d];
        u[..d].copy_from_slice(b);
        v[..d].copy_from_slice(c);
        for j in 1..k {
            let (prev, cur) = u.split_at_mut(j * d);
            linalg::matvec(a, &prev[(j - 1) * d..], &mut cur[..d]);
            let (prev, cur) = v.split_at_mut(j * d);
            linalg::matvec_t(a, &prev[(j - 1) * d..], &mut cur[..d]);
        }
        let mut ir = Vec::with_capacity(k);
        for j in 0..k {
            let uj = &u[j * d..(j + 1) * d];
            let y = linalg::dot(c, uj);
            if !y.is_finite() || uj.iter().any(|x| !x.is_finite()) {
                return Err(LabError::NonFinite { index: j });
            }
            ir.push(y);
        }
        Ok(Self { k, u, v, ir })
    }

    /// Gradient of a loss whose derivative with respect to `ir[i]` is
    /// `2·e[i]`:
    /// `g_b = 2 Σ e_i v_i`, `g_c = 2 Σ e_i u_i`, and
    /// `g_a = 2 Σ_{r=0}^{k−2} v_r z_rᵀ` where `z_r = Σ_{i>r} e_i A^{i−1−r} B`
    /// obeys `z_{k−2} = e_{k−1} B`, `z_r = e_{r+1} B + A z_{r+1}`.
    fn grad(&self, theta: &LinearRnnParams, e: &[f64]) -> Result<Gradients> {
        let k = self.k;
        let d = theta.d();
        let (a, b) = (theta.a(), theta.b());
        let (u, v) = (&self.u, &self.v);
        let mut g_b = vec![0.0; d];
        let mut g_c = vec![0.0; d];
        for i in 0..k {
            let ei = 2.0 * e[i];
            for p in 0..d {
                g_b[p] += ei * v[i * d + p];
                g_c[p] += ei * u[i * d + p];
            }
        }
        let mut g_a = vec![0.0; d * d];
        if k >= 2 {
            let mut z: Vec<f64> = b.iter().map(|x| e[k - 1] * x).collect();
            let mut next = vec![0.0; d];
            for r in (0..k - 1).rev() {
                let vr = &v[r * d..(r + 1) * d];
                for p in 0..d {
                    let s = 2.0 * vr[p];
                    if s == 0.0 {
                        continue;
                    }
                    let row = &mut g_a[p * d..(p + 1) * d];
                    for q in 0..d {
                        row[q] += s * z[q];
                    }
                }
                if r > 0 {
                    linalg::matvec(a, &z, &mut next);
                    for q in 0..d {
                        next[q] += e[r] * b[q];
                    }
                    std::mem::swap(&mut z, &mut next);
                }
            }
        }
        if g_a.iter().chain(&g_b).chain(&g_c).any(|x| !x.is_finite()) {
            return Err(LabError::NonFinite { index: k - 1 });
        }
        Ok(Gradients::from_raw(theta.structure(), d, g_a, g_b, g_c))
    }
}

/// Input sequences with last-step teacher labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct SequenceDataset {
    k: usize,
    n: usize,
    /// Row-major `n×k`.
    inputs: Vec<f64>,
    labels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    k: usize,
    n: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl TryFrom<RawDataset> for SequenceDataset {
    type Error = LabError;

    fn try_from(raw: RawDataset) -> Result<Self> {
        if raw.inputs.len() != raw.n || raw.inputs.iter().any(|r| r.len() != raw.k) {
            return Err(LabError::InvalidArgument("dataset shape mismatch".into()));
        }
        SequenceDataset::new(raw.k, raw.inputs.concat(), raw.labels)
    }
}

impl From<SequenceDataset> for RawDataset {
    fn from(ds: SequenceDataset) -> Self {
        RawDataset {
            k: ds.k,
            n: ds.n,
            inputs: ds.inputs.chunks(ds.k).map(<[f64]>::to_vec).collect(),
            labels: ds.labels,
        }
    }
}

impl SequenceDataset {
    pub fn new(k: usize, inputs: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if k == 0 || n == 0 || inputs.len() != n * k {
            return Err(LabError::InvalidArgument(format!(
                "dataset needs k ≥ 1, n ≥ 1 and n·k inputs (k={k}, n={n}, inputs={})",
                inputs.len()
            )));
        }
        if let Some(index) = inputs.iter().chain(&labels).position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { index });
        }
        Ok(Self { k, n, inputs, labels })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.k..(i + 1) * self.k]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

/// `N` standard-normal sequences of length `k`, labelled by the teacher's
/// last-step output. Deterministic in `seed`.
pub fn make_dataset(teacher: &LinearRnnParams, k: usize, n: usize, seed: u64) -> Result<SequenceDataset> {
    let inputs = gaussian_inputs(k, n, seed);
    let labels = inputs
        .chunks(k)
        .map(|x| teacher.forward_last(x))
        .collect::<Result<Vec<_>>>()?;
    SequenceDataset::new(k, inputs, labels)
}

pub(crate) fn gaussian_inputs(k: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * k).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn empirical_loss(theta: &LinearRnnParams, data: &SequenceDataset) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..data.len() {
        let r = theta.forward_last(data.row(i))? - data.label(i);
        acc += r * r;
    }
    Ok(acc / data.len() as f64)
}

pub fn empirical_grad(theta: &LinearRnnParams, data: &SequenceDataset) -> Result<Gradients> {
    let rows: Vec<usize> = (0..data.len()).collect();
    empirical_loss_and_grad(theta, data, &rows).map(|(_, g)| g)
}

/// Mean last-step square loss over `rows` and its gradient by
/// backpropagation through the state recurrence.
pub fn empirical_loss_and_grad(
    theta: &LinearRnnParams,
    data: &SequenceDataset,
    rows: &[usize],
) -> Result<(f64, Gradients)> {
    if rows.is_empty() {
        return Err(LabError::InvalidArgument("empty batch".into()));
    }
    let d = theta.d();
    let k = data.k();
    let (a, b, c) = (theta.a(), theta.b(), theta.c());
    let scale = 1.0 / rows.len() as f64;
    let mut g_a = vec![0.0; d * d];
    let mut g_b = vec![0.0; d];
    let mut g_c = vec![0.0; d];
    let mut states = vec![0.0; (k + 1) * d];
    let mut lam = vec![0.0; d];
    let mut lam_next = vec![0.0; d];
    let mut loss = 0.0;
    for &row in rows {
        let x = data.row(row);
        for t in 0..k {
            let (prev, cur) = states.split_at_mut((t + 1) * d);
            let next = &mut cur[..d];
            linalg::matvec(a, &prev[t * d..], next);
            for q in 0..d {
                next[q] += b[q] * x[t];
            }
        }
        let s_k = &states[k * d..];
        let r = linalg::dot(c, s_k) - data.label(row);
        if !r.is_finite() {
            return Err(LabError::NonFinite { index: row });
        }
        loss += r * r;
        let dy = 2.0 * r * scale;
        for q in 0..d {
            g_c[q] += dy * s_k[q];
            lam[q] = dy * c[q];
        }
        for t in (0..k).rev() {
            let s_t = &states[t * d..(t + 1) * d];
            for p in 0..d {
                let lp = lam[p];
                g_b[p] += lp * x[t];
                if lp == 0.0 || t == 0 {
                    continue;
                }
                let row_g = &mut g_a[p * d..(p + 1) * d];
                for q in 0..d {
                    row_g[q] += lp * s_t[q];
                }
            }
            if t > 0 {
                linalg::matvec_t(a, &lam, &mut lam_next);
                std::mem::swap(&mut lam, &mut lam_next);
            }
        }
    }
    if g_a.iter().chain(&g_b).chain(&g_c).any(|x| !x.is_finite()) {
        return Err(LabError::NonFinite { index: k });
    }
    Ok((loss * scale, Gradients::from_raw(theta.structure(), d, g_a, g_b, g_c)))
}

/// Same value and gradient as [`empirical_loss_and_grad`], computed through
/// the convolution identity `y = Σ_j x_j·ir[k−1−j]`.
///
/// Costs `O(|rows|·k + k·d²)` instead of `O(|rows|·k·d²)`; used by the
/// training loop.
pub fn empirical_loss_and_grad_conv(
    theta: &LinearRnnParams,
    data: &SequenceDataset,
    rows: &[usize],
) -> Result<(f64, Gradients)> {
    if rows.is_empty() {
        return Err(LabError::InvalidArgument("empty batch".into()));
    }
    let k = data.k();
    let states = ResponseStates::new(theta, k)?;
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut e = vec![0.0; k];
    for &row in rows {
        let x = data.row(row);
        let y: f64 = (0..k).map(|j| x[j] * states.ir[k - 1 - j]).sum();
        let r = y - data.label(row);
        loss += r * r;
        for m in 0..k {
            e[m] += scale * r * x[k - 1 - m];
        }
    }
    if !loss.is_finite() {
        return Err(LabError::NonFinite { index: k });
    }
    Ok((loss * scale, states.grad(theta, &e)?))
}

/// Full-dataset empirical loss through the convolution identity.
pub fn empirical_loss_conv(theta: &LinearRnnParams, data: &SequenceDataset) -> Result<f64> {
    let k = data.k();
    let ir = theta.impulse_response(k)?.values;
    let mut acc = 0.0;
    for i in 0..data.len() {
        let x = data.row(i);
        let y: f64 = (0..k).map(|j| x[j] * ir[k - 1 - j]).sum();
        let r = y - data.label(i);
        acc += r * r;
    }
    Ok(acc / data.len() as f64)
}

/// Central differences over every free variable of `theta`.
pub fn finite_diff_grad(loss_fn: impl Fn(&LinearRnnParams) -> f64, theta: &LinearRnnParams, h: f64) -> Gradients {
    let base = theta.free_params();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = loss_fn(&theta.with_free_params(&probe));
        probe[i] = base[i] - h;
        let down = loss_fn(&theta.with_free_params(&probe));
        probe[i] = base[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Gradients::from_free(theta.d(), theta.structure(), &grad)
}
