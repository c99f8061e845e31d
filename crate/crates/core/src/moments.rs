//! Atomic distributions on the real line and the moment problem.
//!
//! A balanced diagonal system `(diag(a), b, b)` with `CB = Σ bᵢ² > 0` maps to
//! the distribution with atoms `aᵢ` and weights `bᵢ²/CB`; its `j`-th moment
//! is `CAʲB / CB`, so impulse responses are moment sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lds::{LinearRnnParams, Structure, TOL_BALANCE};
use crate::linalg;

pub const DEDUPE_TOL: f64 = 1e-8;
pub const WEIGHT_TOL: f64 = 1e-10;
pub const CB_ZERO_TOL: f64 = 1e-12;
/// Relative pivot threshold for the Hankel rank check.
pub const HANKEL_RANK_TOL: f64 = 1e-10;
const SUM_TOL: f64 = 1e-10;

/// Finitely supported probability distribution. Atoms are kept sorted
/// ascending and pairwise separated by more than [`DEDUPE_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDist")]
pub struct AtomicDistribution {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDist {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawDist> for AtomicDistribution {
    type Error = LabError;

    fn try_from(raw: RawDist) -> Result<Self> {
        AtomicDistribution::new(raw.atoms, raw.weights)
    }
}

impl AtomicDistribution {
    /// Sorts atoms, merges near-duplicates (summing weights) and clamps
    /// weights within [`WEIGHT_TOL`] of zero.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(LabError::InvalidArgument(format!(
                "need matching non-empty atoms/weights, got {} and {}",
                atoms.len(),
                weights.len()
            )));
        }
        if let Some(index) = atoms.iter().chain(&weights).position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { index });
        }
        if let Some((index, &weight)) = weights.iter().enumerate().find(|(_, w)| **w < -WEIGHT_TOL) {
            return Err(LabError::NegativeWeight { index, weight });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(LabError::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(weights.into_iter().map(|w| w.max(0.0))).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match atoms.last() {
                Some(&last) if a - last <= DEDUPE_TOL => *weights.last_mut().unwrap() += w,
                _ => {
                    atoms.push(a);
                    weights.push(w);
                }
            }
        }
        Ok(Self { atoms, weights })
    }

    pub fn point_mass(a: f64) -> Self {
        Self {
            atoms: vec![a],
            weights: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// `(m₀, m₁, …)` with `m₀ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    #[serde(rename = "moments")]
    pub values: Vec<f64>,
}

impl MomentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match values.first() {
            Some(&m0) if (m0 - 1.0).abs() <= SUM_TOL => Ok(Self { values }),
            _ => Err(LabError::InvalidArgument("moment vector must start with m0 = 1".into())),
        }
    }

    pub fn order(&self) -> usize {
        self.values.len()
    }
}

/// Maps a balanced diagonal system to its atomic distribution.
///
/// Atoms with normalized weight `CᵢBᵢ/CB ≤ WEIGHT_TOL` are dropped.
pub fn dist_from_balanced(theta: &LinearRnnParams) -> Result<AtomicDistribution> {
    let d = theta.d();
    if theta.structure() != Structure::Diagonal {
        let off_diag = (0..d).any(|i| (0..d).any(|j| i != j && theta.a_entry(i, j) != 0.0));
        if off_diag {
            return Err(LabError::NotDiagonal);
        }
    }
    let gap = theta.balance_gap();
    if gap > TOL_BALANCE {
        return Err(LabError::NotBalanced { gap });
    }
    let cb = theta.cb();
    if cb.abs() <= CB_ZERO_TOL {
        return Err(LabError::ZeroSystem { cb });
    }
    let diag = theta.diag();
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for i in 0..d {
        let p = theta.c()[i] * theta.b()[i] / cb;
        if p > WEIGHT_TOL {
            atoms.push(diag[i]);
            weights.push(p);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    AtomicDistribution::new(atoms, weights)
}

/// `values[j] = Σᵢ wᵢ aᵢʲ` for `j < order`.
pub fn moments(dist: &AtomicDistribution, order: usize) -> MomentVector {
    let mut values = vec![0.0; order];
    for (&a, &w) in dist.atoms.iter().zip(&dist.weights) {
        let mut p = w;
        for v in values.iter_mut() {
            *v += p;
            p *= a;
        }
    }
    if let Some(m0) = values.first_mut() {
        *m0 = 1.0;
    }
    MomentVector { values }
}

/// Recovers an `n`-atomic distribution from moments `m₀ … m_{2n−1}`.
///
/// The monic polynomial with the atoms as roots has coefficients solving the
/// Hankel system `Σ_j m_{i+j} c_j = −m_{i+n}`. Its real roots are bracketed
/// by sign changes on a grid over the Cauchy bound, bisected and Newton
/// polished; weights then solve the Vandermonde system on `m₀ … m_{n−1}`.
///
/// Rank deficiency is detected from `m₀ … m_{2n−2}` alone, so a sequence one
/// moment short still reports [`LabError::RankDeficientHankel`] when the true
/// atom count is below `n`.
pub fn recover_atomic(m: &MomentVector, n: usize) -> Result<AtomicDistribution> {
    if n == 0 {
        return Err(LabError::InvalidArgument("atom count must be at least 1".into()));
    }
    let order = m.order();
    if order < 2 * n - 1 {
        return Err(LabError::InvalidArgument(format!(
            "need at least {} moments for {n} atoms, got {order}",
            2 * n
        )));
    }
    let mv = &m.values;
    let scale = linalg::max_abs(mv).max(1.0);
    let mut hankel = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            hankel[i * n + j] = mv[i + j];
        }
    }
    let rhs: Vec<f64> = (0..n).map(|i| -mv.get(i + n).copied().unwrap_or(0.0)).collect();
    let coeffs = linalg::solve(&hankel, &rhs, HANKEL_RANK_TOL * scale).map_err(|e| match e {
        LabError::SingularMatrix { column, pivot } => LabError::RankDeficientHankel { column, pivot },
        other => other,
    })?;
    if order < 2 * n {
        return Err(LabError::InvalidArgument(format!(
            "need {} moments for {n} atoms, got {order}",
            2 * n
        )));
    }
    let atoms = real_roots_monic(&coeffs)?;
    let mut vander = vec![0.0; n * n];
    for (i, &a) in atoms.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..n {
            vander[j * n + i] = p;
            p *= a;
        }
    }
    let weights = linalg::solve(&vander, &mv[..n], 0.0)
        .map_err(|_| LabError::ComplexOrOutOfRangeRoots {
            found: atoms.len(),
            expected: n,
            lo: f64::NAN,
            hi: f64::NAN,
        })?;
    let (atoms, weights) = polish(&mv[..2 * n], atoms, weights);
    AtomicDistribution::new(atoms, weights)
}

fn moment_residual(m: &[f64], atoms: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = m.iter().map(|v| -v).collect();
    for (&a, &w) in atoms.iter().zip(weights) {
        let mut p = w;
        for rp in r.iter_mut() {
            *rp += p;
            p *= a;
        }
    }
    r
}

/// Newton iterations on `Σ_i w_i a_iᵖ = m_p`, `p < 2n`, starting from the
/// Prony estimate. A step is kept only if it shrinks the residual.
fn polish(m: &[f64], mut atoms: Vec<f64>, mut weights: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = atoms.len();
    let dim = 2 * n;
    let mut res = moment_residual(m, &atoms, &weights);
    let mut res_norm = linalg::max_abs(&res);
    for _ in 0..8 {
        if res_norm == 0.0 {
            break;
        }
        let mut jac = vec![0.0; dim * dim];
        for i in 0..n {
            let (a, w) = (atoms[i], weights[i]);
            let mut pow = 1.0;
            let mut dpow = 0.0;
            for p in 0..dim {
                jac[p * dim + i] = w * dpow;
                jac[p * dim + n + i] = pow;
                dpow = (p + 1) as f64 * pow;
                pow *= a;
            }
        }
        let Ok(delta) = linalg::solve(&jac, &res, 0.0) else {
            break;
        };
        let next_atoms: Vec<f64> = atoms.iter().zip(&delta[..n]).map(|(a, d)| a - d).collect();
        let next_weights: Vec<f64> = weights.iter().zip(&delta[n..]).map(|(w, d)| w - d).collect();
        let next_res = moment_residual(m, &next_atoms, &next_weights);
        let next_norm = linalg::max_abs(&next_res);
        if !(next_norm < res_norm) {
            break;
        }
        atoms = next_atoms;
        weights = next_weights;
        res = next_res;
        res_norm = next_norm;
    }
    (atoms, weights)
}

/// Tries [`recover_atomic`] with `n_max, n_max − 1, …, 1` atoms and returns
/// the first success.
pub fn recover_atomic_auto(m: &MomentVector, n_max: usize) -> Result<AtomicDistribution> {
    let mut last = LabError::InvalidArgument("n_max must be at least 1".into());
    for n in (1..=n_max).rev() {
        match recover_atomic(m, n) {
            Ok(d) => return Ok(d),
            Err(e @ (LabError::RankDeficientHankel { .. } | LabError::ComplexOrOutOfRangeRoots { .. } | LabError::NegativeWeight { .. })) => {
                last = e
            }
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

fn eval_monic(coeffs: &[f64], x: f64) -> (f64, f64) {
    // Horner for p and p'.
    let mut p = 1.0;
    let mut dp = 0.0;
    for &c in coeffs.iter().rev() {
        dp = dp * x + p;
        p = p * x + c;
    }
    (p, dp)
}

const ROOT_GRID: usize = 200_000;

/// All `n` real roots of `xⁿ + c_{n−1}xⁿ⁻¹ + … + c₀`, ascending.
fn real_roots_monic(coeffs: &[f64]) -> Result<Vec<f64>> {
    let n = coeffs.len();
    let bound = 1.0 + linalg::max_abs(coeffs);
    let (lo, hi) = (-bound - 0.1, bound + 0.1);
    let step = (hi - lo) / ROOT_GRID as f64;
    let mut roots = Vec::with_capacity(n);
    let mut x0 = lo;
    let mut p0 = eval_monic(coeffs, x0).0;
    for g in 1..=ROOT_GRID {
        let x1 = lo + g as f64 * step;
        let p1 = eval_monic(coeffs, x1).0;
        if p0 == 0.0 {
            roots.push(x0);
        } else if p0.signum() != p1.signum() && p1 != 0.0 {
            roots.push(refine_root(coeffs, x0, x1));
        }
        x0 = x1;
        p0 = p1;
    }
    if roots.len() != n {
        return Err(LabError::ComplexOrOutOfRangeRoots {
            found: roots.len(),
            expected: n,
            lo,
            hi,
        });
    }
    Ok(roots)
}

fn refine_root(coeffs: &[f64], mut a: f64, mut b: f64) -> f64 {
    let mut pa = eval_monic(coeffs, a).0;
    while b - a > 1e-12 {
        let mid = 0.5 * (a + b);
        let pm = eval_monic(coeffs, mid).0;
        if pm == 0.0 {
            return mid;
        }
        if pm.signum() == pa.signum() {
            a = mid;
            pa = pm;
        } else {
            b = mid;
        }
    }
    let mut x = 0.5 * (a + b);
    for _ in 0..3 {
        let (p, dp) = eval_monic(coeffs, x);
        if dp == 0.0 {
            break;
        }
        let nx = x - p / dp;
        if !(nx >= a - 1e-12 && nx <= b + 1e-12) {
            break;
        }
        x = nx;
    }
    x
}

/// Exact 1-D `W_p` by the quantile (monotone) coupling.
pub fn wasserstein_p(d1: &AtomicDistribution, d2: &AtomicDistribution, p: f64) -> f64 {
    assert!(p >= 1.0, "Wasserstein order must be at least 1");
    let cost = quantile_coupling_cost(d1, d2, |x| x.powf(p));
    let w = cost.powf(1.0 / p);
    if p == 1.0 {
        debug_assert!(
            (w - wasserstein_1_cdf(d1, d2)).abs() <= 1e-12 * w.max(1.0),
            "W1 coupling and CDF-area disagree"
        );
    }
    w
}

fn quantile_coupling_cost(d1: &AtomicDistribution, d2: &AtomicDistribution, cost: impl Fn(f64) -> f64) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut r1, mut r2) = (d1.weights[0], d2.weights[0]);
    let mut total = 0.0;
    loop {
        let mass = r1.min(r2);
        if mass > 0.0 {
            total += mass * cost((d1.atoms[i] - d2.atoms[j]).abs());
        }
        r1 -= mass;
        r2 -= mass;
        if r1 <= 0.0 {
            i += 1;
            if i == d1.len() {
                break;
            }
            r1 = d1.weights[i];
        }
        if r2 <= 0.0 {
            j += 1;
            if j == d2.len() {
                break;
            }
            r2 = d2.weights[j];
        }
    }
    total
}

/// `W₁ = ∫ |F₁(x) − F₂(x)| dx`, integrated exactly over the merged atoms.
pub fn wasserstein_1_cdf(d1: &AtomicDistribution, d2: &AtomicDistribution) -> f64 {
    let mut pts: Vec<f64> = d1.atoms.iter().chain(&d2.atoms).copied().collect();
    pts.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0, 0);
    let (mut f1, mut f2) = (0.0, 0.0);
    let mut area = 0.0;
    for w in pts.windows(2) {
        while i < d1.len() && d1.atoms[i] <= w[0] {
            f1 += d1.weights[i];
            i += 1;
        }
        while j < d2.len() && d2.atoms[j] <= w[0] {
            f2 += d2.weights[j];
            j += 1;
        }
        area += (f1 - f2).abs() * (w[1] - w[0]);
    }
    area
}

/// Diagnostic comparison of a student against a teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    /// `|CAʲB − ĈÂʲB̂|` for `j < horizon`; `inf` once either response overflows.
    pub gaps: Vec<f64>,
    pub max_gap: f64,
    pub first_k_match: bool,
    pub extrapolates: bool,
    pub student_dist: Option<AtomicDistribution>,
    pub teacher_dist: Option<AtomicDistribution>,
    pub w1: Option<f64>,
}

fn lossy_impulse_response(theta: &LinearRnnParams, n: usize) -> Vec<f64> {
    let d = theta.d();
    let mut v = theta.b().to_vec();
    let mut next = vec![0.0; d];
    let mut out = Vec::with_capacity(n);
    let mut dead = false;
    for _ in 0..n {
        let y = linalg::dot(theta.c(), &v);
        dead |= !y.is_finite();
        out.push(if dead { f64::INFINITY } else { y });
        if !dead {
            linalg::matvec(theta.a(), &v, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
    }
    out
}

fn balanced_dist(theta: &LinearRnnParams) -> Option<AtomicDistribution> {
    let diag = match theta.structure() {
        Structure::Diagonal => theta.clone(),
        Structure::Symmetric => theta.diagonalize_balanced().ok()?,
        Structure::General => {
            let d = theta.d();
            let symmetric = (0..d).all(|i| (0..d).all(|j| theta.a_entry(i, j) == theta.a_entry(j, i)));
            if !symmetric {
                return None;
            }
            LinearRnnParams::new(Structure::Symmetric, theta.a().to_vec(), theta.b().to_vec(), theta.c().to_vec())
                .ok()?
                .diagonalize_balanced()
                .ok()?
        }
    };
    dist_from_balanced(&diag).ok()
}

pub fn verify_extrapolation(
    student: &LinearRnnParams,
    teacher: &LinearRnnParams,
    k: usize,
    horizon: usize,
    eps: f64,
) -> ExtrapolationReport {
    let s = lossy_impulse_response(student, horizon);
    let t = lossy_impulse_response(teacher, horizon);
    let gaps: Vec<f64> = s
        .iter()
        .zip(&t)
        .map(|(a, b)| {
            let g = (a - b).abs();
            if g.is_nan() {
                f64::INFINITY
            } else {
                g
            }
        })
        .collect();
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    let first_k_match = gaps.iter().take(k).all(|g| *g <= eps);
    let extrapolates = gaps.iter().all(|g| *g <= eps);
    let student_dist = balanced_dist(student);
    let teacher_dist = balanced_dist(teacher);
    let w1 = match (&student_dist, &teacher_dist) {
        (Some(a), Some(b)) => Some(wasserstein_p(a, b, 1.0)),
        _ => None,
    };
    ExtrapolationReport {
        gaps,
        max_gap,
        first_k_match,
        extrapolates,
        student_dist,
        teacher_dist,
        w1,
    }
}

const CONFOUND_GAP: f64 = 1e-3;
const CONFOUND_MATCH: f64 = 1e-9;
const NEWTON_ITERS: usize = 50;
const MAX_RESTARTS: usize = 20;
const CONTINUATION_ARC: f64 = 0.02;
const CONTINUATION_STEPS: usize = 1000;

/// Two `dh`-atomic distributions on `[−1, 1]` that agree on moments
/// `0 … 2dh−2` but differ at moment `2dh−1`.
///
/// Starting from a random well-spread distribution, the pair is found by
/// continuation along the one-dimensional solution set of the `2dh−1`
/// moment equations in the `2dh` unknowns (atoms, weights): a tangent
/// predictor followed by damped minimum-norm Newton correction. If walking
/// one way does not move the last moment far enough, the two ends of the
/// family are paired instead.
pub fn construct_moment_confounders(
    dh: usize,
    seed: u64,
) -> Result<(AtomicDistribution, AtomicDistribution, f64)> {
    if dh == 0 {
        return Err(LabError::InvalidArgument("dh must be at least 1".into()));
    }
    if dh == 1 {
        return Ok((AtomicDistribution::point_mass(0.5), AtomicDistribution::point_mass(-0.5), 1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESTARTS {
        let base = sample_separated(&mut rng, dh);
        if let Some((first, second, gap)) = continue_family(&base, dh) {
            let d1 = AtomicDistribution::new(first.0, first.1)?;
            let d2 = AtomicDistribution::new(second.0, second.1)?;
            return Ok((d1, d2, gap));
        }
    }
    Err(LabError::SearchFailed(format!("no confounder pair for dh={dh} after {MAX_RESTARTS} restarts")))
}

/// Jittered Chebyshev nodes on `[−0.95, 0.95]` with weights from
/// `U[0.5, 1.5]`, normalized. Spreading atoms this way keeps the reachable
/// range of the top moment as wide as possible.
fn sample_separated(rng: &mut ChaCha8Rng, n: usize) -> Candidate {
    let spacing = std::f64::consts::PI / n as f64;
    let mut atoms: Vec<f64> = (0..n)
        .map(|i| {
            let angle = spacing * (i as f64 + 0.5) + rng.random_range(-0.2..0.2) * spacing;
            0.95 * angle.cos()
        })
        .collect();
    atoms.sort_by(f64::total_cmp);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    (atoms, raw.iter().map(|w| w / total).collect())
}

/// Moment residuals `Σ vᵢ yᵢʲ − target_j` for `j < q` and their Jacobian
/// (row-major `q × 2n`, columns: atoms then weights).
fn moment_system(atoms: &[f64], weights: &[f64], target: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = atoms.len();
    let q = target.len();
    let mut f = vec![0.0; q];
    let mut jac = vec![0.0; q * 2 * n];
    for i in 0..n {
        let (y, v) = (atoms[i], weights[i]);
        let mut pow = 1.0;
        let mut pow_prev = 0.0;
        for j in 0..q {
            f[j] += v * pow;
            jac[j * 2 * n + i] = v * j as f64 * pow_prev;
            jac[j * 2 * n + n + i] = pow;
            pow_prev = pow;
            pow *= y;
        }
    }
    for j in 0..q {
        f[j] -= target[j];
    }
    (f, jac)
}

/// Unit null vector of a full-row-rank `(m−1) × m` matrix, sign-fixed by
/// `orient`.
fn null_vector(jac: &[f64], m: usize, orient: &[f64]) -> Option<Vec<f64>> {
    let mut aug = jac.to_vec();
    aug.extend_from_slice(orient);
    let mut rhs = vec![0.0; m];
    rhs[m - 1] = 1.0;
    let t = linalg::solve(&aug, &rhs, 1e-14).ok()?;
    let norm = linalg::norm2(&t);
    Some(t.iter().map(|x| x / norm).collect())
}

fn newton_correct(atoms: &mut [f64], weights: &mut [f64], target: &[f64]) -> bool {
    let n = atoms.len();
    let q = target.len();
    let m = 2 * n;
    for _ in 0..NEWTON_ITERS {
        let (f, jac) = moment_system(atoms, weights, target);
        let res = linalg::max_abs(&f);
        if res <= 1e-14 {
            return true;
        }
        // Minimum-norm step: Δ = −Jᵀ (J Jᵀ)⁻¹ f.
        let mut jjt = vec![0.0; q * q];
        for r in 0..q {
            for c in 0..q {
                jjt[r * q + c] = linalg::dot(&jac[r * m..(r + 1) * m], &jac[c * m..(c + 1) * m]);
            }
        }
        let Ok(y) = linalg::solve(&jjt, &f, 1e-300) else {
            return false;
        };
        let mut delta = vec![0.0; m];
        for r in 0..q {
            for c in 0..m {
                delta[c] -= jac[r * m + c] * y[r];
            }
        }
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand_a: Vec<f64> = (0..n).map(|i| (atoms[i] + damping * delta[i]).clamp(-1.0, 1.0)).collect();
            let cand_w: Vec<f64> = (0..n).map(|i| (weights[i] + damping * delta[n + i]).max(0.0)).collect();
            let (cf, _) = moment_system(&cand_a, &cand_w, target);
            if linalg::max_abs(&cf) < res {
                atoms.copy_from_slice(&cand_a);
                weights.copy_from_slice(&cand_w);
                accepted = true;
                break;
            }
            damping *= 0.5;
        }
        if !accepted {
            return res <= 1e-12;
        }
    }
    let (f, _) = moment_system(atoms, weights, target);
    linalg::max_abs(&f) <= 1e-12
}

type Candidate = (Vec<f64>, Vec<f64>);

/// Walks the solution family from `base` in both directions. Returns the
/// pair of valid points whose top moments differ most, once that difference
/// clears the threshold.
fn continue_family(base: &Candidate, dh: usize) -> Option<(Candidate, Candidate, f64)> {
    let q = 2 * dh - 1;
    let all = moments_raw(&base.0, &base.1, 2 * dh);
    let target = &all[..q];
    let (up, up_top) = walk_family(base, target, all[q], 1.0);
    if (up_top - all[q]).abs() >= 2.0 * CONFOUND_GAP {
        return Some((base.clone(), up, (up_top - all[q]).abs()));
    }
    let (down, down_top) = walk_family(base, target, all[q], -1.0);
    let gap = (up_top - down_top).abs();
    (gap >= CONFOUND_GAP).then_some((down, up, gap))
}

/// Follows the family in one direction until it leaves the admissible
/// region or the top moment has moved far enough. Returns the last valid
/// point and its top moment.
fn walk_family(base: &Candidate, target: &[f64], top_base: f64, sign: f64) -> (Candidate, f64) {
    let n = base.0.len();
    let m = 2 * n;
    let q = target.len();
    let (mut atoms, mut weights) = base.clone();
    let mut last = (base.clone(), top_base);
    let mut orient = vec![sign; m];
    for _ in 0..CONTINUATION_STEPS {
        let (_, jac) = moment_system(&atoms, &weights, target);
        let Some(tangent) = null_vector(&jac, m, &orient) else {
            break;
        };
        orient = tangent.clone();
        for i in 0..n {
            atoms[i] = (atoms[i] + CONTINUATION_ARC * tangent[i]).clamp(-1.0, 1.0);
            weights[i] = (weights[i] + CONTINUATION_ARC * tangent[n + i]).max(0.0);
        }
        if !newton_correct(&mut atoms, &mut weights, target) || weights.iter().any(|w| *w < 1e-3) {
            break;
        }
        let mut sorted = atoms.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] < 1e-3) {
            break;
        }
        let cur = moments_raw(&atoms, &weights, q + 1);
        if cur[..q].iter().zip(target).any(|(a, b)| (a - b).abs() > CONFOUND_MATCH * 0.1) {
            break;
        }
        last = ((atoms.clone(), weights.clone()), cur[q]);
        if (cur[q] - top_base).abs() >= 2.0 * CONFOUND_GAP {
            break;
        }
    }
    last
}

fn moments_raw(atoms: &[f64], weights: &[f64], order: usize) -> Vec<f64> {
    let mut out = vec![0.0; order];
    for (&a, &w) in atoms.iter().zip(weights) {
        let mut p = w;
        for v in out.iter_mut() {
            *v += p;
            p *= a;
        }
    }
    out
}
