//! Single-input single-output linear recurrent networks
//! `s_{t+1} = A s_t + B x_t`, `y_t = C s_t`, and their impulse responses.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg;

/// Structural tolerance for balancedness and symmetry checks.
pub const TOL_BALANCE: f64 = 1e-9;
/// Residual bound accepted from the Vandermonde solve.
pub const VANDERMONDE_TOL: f64 = 1e-8;
/// Minimum gap between requested student eigenvalues.
pub const DEDUPE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    General,
    Symmetric,
    Diagonal,
}

/// The triple `(A, B, C)` of a linear RNN with state dimension `d`.
///
/// `a` is row-major `d×d`, `b` is the input column, `c` is the output row
/// (stored as a plain vector). Construct through [`LinearRnnParams::new`] so
/// the structural invariants are checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct LinearRnnParams {
    d: usize,
    structure: Structure,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Deserialize)]
struct RawParams {
    d: usize,
    structure: Structure,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl TryFrom<RawParams> for LinearRnnParams {
    type Error = LabError;

    fn try_from(raw: RawParams) -> Result<Self> {
        let p = LinearRnnParams::new(raw.structure, raw.a, raw.b, raw.c)?;
        if p.d != raw.d {
            return Err(LabError::InvalidArgument(format!(
                "declared d={} but vectors have length {}",
                raw.d, p.d
            )));
        }
        Ok(p)
    }
}

impl LinearRnnParams {
    pub fn new(structure: Structure, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let d = b.len();
        if d == 0 {
            return Err(LabError::InvalidArgument("state dimension must be positive".into()));
        }
        if c.len() != d || a.len() != d * d {
            return Err(LabError::InvalidArgument(format!(
                "inconsistent shapes: |a|={}, |b|={}, |c|={}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        if let Some(index) = a.iter().chain(&b).chain(&c).position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { index });
        }
        match structure {
            Structure::General => {}
            Structure::Symmetric => {
                for i in 0..d {
                    for j in i + 1..d {
                        if a[i * d + j] != a[j * d + i] {
                            return Err(LabError::NotSymmetric);
                        }
                    }
                }
            }
            Structure::Diagonal => {
                for i in 0..d {
                    for j in 0..d {
                        if i != j && a[i * d + j] != 0.0 {
                            return Err(LabError::NotDiagonal);
                        }
                    }
                }
            }
        }
        Ok(Self {
            d,
            structure,
            a,
            b,
            c,
        })
    }

    /// Diagonal system with `A = diag(diag)`.
    pub fn diagonal(diag: &[f64], b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, v) in diag.iter().enumerate() {
            a[i * d + i] = *v;
        }
        Self::new(Structure::Diagonal, a, b, c)
    }

    pub fn zeros(d: usize, structure: Structure) -> Self {
        Self {
            d,
            structure,
            a: vec![0.0; d * d],
            b: vec![0.0; d],
            c: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn a_entry(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.d + j]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.d).map(|i| self.a[i * self.d + i]).collect()
    }

    /// `CB`, the first impulse-response entry.
    pub fn cb(&self) -> f64 {
        linalg::dot(&self.c, &self.b)
    }

    /// `‖B − Cᵀ‖∞`.
    pub fn balance_gap(&self) -> f64 {
        self.b
            .iter()
            .zip(&self.c)
            .fold(0.0_f64, |m, (b, c)| m.max((b - c).abs()))
    }

    pub fn max_abs_param(&self) -> f64 {
        self.a
            .iter()
            .chain(&self.b)
            .chain(&self.c)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Number of free variables under the structural parameterization.
    pub fn n_free(&self) -> usize {
        n_free(self.d, self.structure)
    }

    /// Free variables in a fixed order: A (full row-major, upper triangle
    /// row-major, or diagonal), then B, then C.
    pub fn free_params(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = Vec::with_capacity(self.n_free());
        match self.structure {
            Structure::General => out.extend_from_slice(&self.a),
            Structure::Symmetric => {
                for i in 0..d {
                    for j in i..d {
                        out.push(self.a[i * d + j]);
                    }
                }
            }
            Structure::Diagonal => out.extend((0..d).map(|i| self.a[i * d + i])),
        }
        out.extend_from_slice(&self.b);
        out.extend_from_slice(&self.c);
        out
    }

    /// Inverse of [`free_params`](Self::free_params). Symmetric entries are
    /// mirrored from the upper triangle, so the structure holds exactly.
    pub fn with_free_params(&self, free: &[f64]) -> Self {
        assert_eq!(free.len(), self.n_free(), "free parameter length mismatch");
        let d = self.d;
        let mut a = vec![0.0; d * d];
        let mut it = free.iter().copied();
        match self.structure {
            Structure::General => {
                for v in a.iter_mut() {
                    *v = it.next().unwrap();
                }
            }
            Structure::Symmetric => {
                for i in 0..d {
                    for j in i..d {
                        let v = it.next().unwrap();
                        a[i * d + j] = v;
                        a[j * d + i] = v;
                    }
                }
            }
            Structure::Diagonal => {
                for i in 0..d {
                    a[i * d + i] = it.next().unwrap();
                }
            }
        }
        let b: Vec<f64> = it.by_ref().take(d).collect();
        let c: Vec<f64> = it.collect();
        Self {
            d,
            structure: self.structure,
            a,
            b,
            c,
        }
    }

    /// `(CB, CAB, CA²B, …)` up to horizon `n`, via `v ← A v` (never matrix
    /// powers).
    pub fn impulse_response(&self, n: usize) -> Result<ImpulseResponse> {
        if n == 0 {
            return Err(LabError::InvalidArgument("horizon must be at least 1".into()));
        }
        let mut values = Vec::with_capacity(n);
        let mut v = self.b.clone();
        let mut next = vec![0.0; self.d];
        for j in 0..n {
            let y = linalg::dot(&self.c, &v);
            if !y.is_finite() || v.iter().any(|x| !x.is_finite()) {
                return Err(LabError::NonFinite { index: j });
            }
            values.push(y);
            if j + 1 < n {
                linalg::matvec(&self.a, &v, &mut next);
                std::mem::swap(&mut v, &mut next);
            }
        }
        Ok(ImpulseResponse { values })
    }

    /// Output at the last step of input sequence `x`, through the state
    /// recurrence from `s₀ = 0`.
    pub fn forward_last(&self, x: &[f64]) -> Result<f64> {
        if x.is_empty() {
            return Err(LabError::InvalidArgument("input sequence is empty".into()));
        }
        let mut s = vec![0.0; self.d];
        let mut next = vec![0.0; self.d];
        for (t, &xt) in x.iter().enumerate() {
            linalg::matvec(&self.a, &s, &mut next);
            for (ni, bi) in next.iter_mut().zip(&self.b) {
                *ni += bi * xt;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite { index: t });
            }
            std::mem::swap(&mut s, &mut next);
        }
        let y = linalg::dot(&self.c, &s);
        if !y.is_finite() {
            return Err(LabError::NonFinite { index: x.len() - 1 });
        }
        Ok(y)
    }

    /// Orthogonally diagonalizes a balanced symmetric system:
    /// `A' = Λ`, `B' = UᵀB`, `C' = CU`, eigenvalues descending.
    pub fn diagonalize_balanced(&self) -> Result<Self> {
        if self.structure == Structure::General {
            return Err(LabError::NotSymmetric);
        }
        let gap = self.balance_gap();
        if gap > TOL_BALANCE {
            return Err(LabError::NotBalanced { gap });
        }
        let d = self.d;
        let eig = linalg::jacobi_eigen(&self.a, d)?;
        let u = &eig.vectors;
        let mut b = vec![0.0; d];
        let mut c = vec![0.0; d];
        linalg::matvec_t(u, &self.b, &mut b);
        linalg::matvec_t(u, &self.c, &mut c);
        Self::diagonal(&eig.values, b, c)
    }

    /// `‖B − Cᵀ‖ / ‖B + Cᵀ‖`.
    pub fn balancedness_ratio(&self) -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (b, c) in self.b.iter().zip(&self.c) {
            num += (b - c) * (b - c);
            den += (b + c) * (b + c);
        }
        if den == 0.0 {
            return Err(LabError::DegenerateDenominator);
        }
        Ok((num / den).sqrt())
    }

    /// `‖B‖² − ‖C‖²`, conserved along gradient flow.
    pub fn norm_gap(&self) -> f64 {
        linalg::dot(&self.b, &self.b) - linalg::dot(&self.c, &self.c)
    }
}

pub(crate) fn n_free(d: usize, structure: Structure) -> usize {
    let a = match structure {
        Structure::General => d * d,
        Structure::Symmetric => d * (d + 1) / 2,
        Structure::Diagonal => d,
    };
    a + 2 * d
}

/// Finite prefix of an impulse response. Serializes as a flat array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImpulseResponse {
    pub values: Vec<f64>,
}

impl ImpulseResponse {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn prefix(&self, n: usize) -> ImpulseResponse {
        ImpulseResponse {
            values: self.values[..n.min(self.values.len())].to_vec(),
        }
    }
}

/// Builds a diagonal student that matches `teacher_ir` on its first `k`
/// entries and follows `tail` on entries `k..d`.
///
/// The coefficients `g_i = C_i B_i` solve the Vandermonde system
/// `Σ_i g_i eigs_iʲ = r_j`, `j < d`, and are split as
/// `B_i = sign(g_i)·√|g_i|`, `C_i = √|g_i|`.
pub fn construct_nonextrapolating_student(
    teacher_ir: &ImpulseResponse,
    d: usize,
    tail: &[f64],
    eigs: &[f64],
) -> Result<LinearRnnParams> {
    let k = teacher_ir.horizon();
    if d <= k {
        return Err(LabError::InvalidArgument(format!("need d > k, got d={d}, k={k}")));
    }
    if tail.len() != d - k || eigs.len() != d {
        return Err(LabError::InvalidArgument(format!(
            "expected {} tail values and {d} eigenvalues, got {} and {}",
            d - k,
            tail.len(),
            eigs.len()
        )));
    }
    let mut sorted = eigs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[1] - w[0] <= DEDUPE_TOL) {
        return Err(LabError::InvalidArgument("eigenvalues are not pairwise distinct".into()));
    }
    let target: Vec<f64> = teacher_ir.values.iter().chain(tail).copied().collect();
    let mut v = vec![0.0; d * d];
    for (i, &lam) in eigs.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..d {
            v[j * d + i] = p;
            p *= lam;
        }
    }
    let g = linalg::solve(&v, &target, 0.0).map_err(|_| LabError::IllConditionedVandermonde {
        residual: f64::INFINITY,
    })?;
    let mut fitted = vec![0.0; d];
    linalg::matvec(&v, &g, &mut fitted);
    let residual = fitted
        .iter()
        .zip(&target)
        .fold(0.0_f64, |m, (f, t)| m.max((f - t).abs()));
    if !(residual <= VANDERMONDE_TOL) {
        return Err(LabError::IllConditionedVandermonde { residual });
    }
    let b = g.iter().map(|gi| gi.signum() * gi.abs().sqrt()).collect();
    let c = g.iter().map(|gi| gi.abs().sqrt()).collect();
    LinearRnnParams::diagonal(eigs, b, c)
}

/// Tail extrapolation error together with the trivial-baseline flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationError {
    pub error: f64,
    /// True when the error strictly exceeds that of the all-zero response.
    pub non_extrapolating: bool,
}

/// `max_{start ≤ j < end} |student[j] − teacher[j]|`.
pub fn extrapolation_error(
    student_ir: &ImpulseResponse,
    teacher_ir: &ImpulseResponse,
    tail_start: usize,
    tail_end: usize,
) -> Result<ExtrapolationError> {
    let available = student_ir.horizon().min(teacher_ir.horizon());
    if tail_start >= tail_end || tail_end > available {
        return Err(LabError::WindowOutOfRange {
            start: tail_start,
            end: tail_end,
            available,
        });
    }
    let s = &student_ir.values[tail_start..tail_end];
    let t = &teacher_ir.values[tail_start..tail_end];
    let error = s
        .iter()
        .zip(t)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let baseline = linalg::max_abs(t);
    Ok(ExtrapolationError {
        error,
        non_extrapolating: error > baseline,
    })
}

/// Default tail window `[k, max(4k, 200))` for training length `k`.
pub fn default_tail_window(k: usize) -> (usize, usize) {
    (k, (4 * k).max(200))
}
