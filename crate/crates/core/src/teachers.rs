//! Teacher generators: balanced diagonal, delay line, random upper-bidiagonal,
//! and a GRU fitted to a prescribed impulse response.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gru::{self, GruParams};
use crate::lds::{ImpulseResponse, LinearRnnParams, Structure};
use crate::optim::Adam;

pub const GRU_TEACHER_INIT_SCALE: f64 = 1e-6;
pub const GRU_TEACHER_STEPS: usize = 1000;
pub const GRU_TEACHER_LR: f64 = 1e-3;
pub const GRU_TEACHER_HORIZON: usize = 32;
const DEGENERATE_TAIL: f64 = 1e-3;

/// Diagonal `A` with eigenvalues iid `U[0.6, 1.05]`, `B = Cᵀ` with entries
/// `N(0.5, 1)` rescaled so that `CB = 1`.
pub fn gen_balanced_teacher(dh: usize, seed: u64) -> Result<LinearRnnParams> {
    check_dim(dh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag: Vec<f64> = (0..dh).map(|_| rng.random_range(0.6..=1.05)).collect();
    let normal = Normal::new(0.5, 1.0).expect("valid normal");
    let b = loop {
        let b: Vec<f64> = (0..dh).map(|_| normal.sample(&mut rng)).collect();
        if b.iter().map(|x| x * x).sum::<f64>() >= 1e-6 {
            break b;
        }
    };
    let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b: Vec<f64> = b.iter().map(|x| x / norm).collect();
    LinearRnnParams::diagonal(&diag, b.clone(), b)
}

fn shift_with_readout(diag: &[f64], superdiag: &[f64]) -> Result<LinearRnnParams> {
    let dh = diag.len();
    let mut a = vec![0.0; dh * dh];
    for i in 0..dh {
        a[i * dh + i] = diag[i];
        if i + 1 < dh {
            a[i * dh + i + 1] = superdiag[i];
        }
    }
    let mut b = vec![0.0; dh];
    b[dh - 1] = 1.0;
    let mut c = vec![0.0; dh];
    c[0] = 1.0;
    LinearRnnParams::new(Structure::General, a, b, c)
}

/// Nilpotent shift `A`, `B = e_dh`, `C = e_1ᵀ`: the impulse response is 1 at
/// index `dh − 1` and 0 elsewhere.
pub fn gen_delay_teacher(dh: usize) -> Result<LinearRnnParams> {
    check_dim(dh)?;
    shift_with_readout(&vec![0.0; dh], &vec![1.0; dh.saturating_sub(1)])
}

/// Upper-bidiagonal `A` with diagonal `N(0, 0.1²)` and superdiagonal
/// `N(0.7, 0.1²)`, read out like the delay teacher.
pub fn gen_random_unbalanced_teacher(dh: usize, seed: u64) -> Result<LinearRnnParams> {
    check_dim(dh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag_dist = Normal::new(0.0, 0.1).expect("valid normal");
    let sup_dist = Normal::new(0.7, 0.1).expect("valid normal");
    let diag: Vec<f64> = (0..dh).map(|_| diag_dist.sample(&mut rng)).collect();
    let sup: Vec<f64> = (0..dh.saturating_sub(1)).map(|_| sup_dist.sample(&mut rng)).collect();
    shift_with_readout(&diag, &sup)
}

fn check_dim(dh: usize) -> Result<()> {
    if dh == 0 {
        return Err(LabError::InvalidArgument("teacher dimension must be at least 1".into()));
    }
    Ok(())
}

/// The default GRU teacher target: `0.8ʲ·cos(0.7 j)` for `j < horizon`.
pub fn default_gru_target(horizon: usize) -> ImpulseResponse {
    ImpulseResponse {
        values: (0..horizon).map(|j| 0.8f64.powi(j as i32) * (0.7 * j as f64).cos()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruTeacher {
    pub params: GruParams,
    /// Root-mean-square error of the fitted impulse response.
    pub fit_error: f64,
}

/// Fits a GRU with state dimension `dhg`, initialized at scale `1e-6`, to
/// `target_ir` as its unit-impulse output, with 1000 Adam steps.
///
/// Fails with [`LabError::DegenerateTeacher`] if the fitted response has
/// decayed below `1e-3` over the second half of the horizon.
pub fn gen_gru_teacher(dhg: usize, target_ir: &ImpulseResponse, seed: u64) -> Result<GruTeacher> {
    check_dim(dhg)?;
    let target = &target_ir.values;
    if target.iter().all(|v| *v == 0.0) {
        return Err(LabError::DegenerateTeacher { tail_max: 0.0 });
    }
    let mut params = GruParams::random(dhg, GRU_TEACHER_INIT_SCALE, seed);
    let mut x = params.flat();
    let mut adam = Adam::new(x.len());
    for _ in 0..GRU_TEACHER_STEPS {
        let (_, g) = gru::impulse_fit_loss_and_grad(&params, target)?;
        adam.step(&mut x, &g, GRU_TEACHER_LR);
        params = params.with_flat(&x);
    }
    let (loss, _) = gru::impulse_fit_loss_and_grad(&params, target)?;
    let horizon = target.len();
    let response = gru::gru_impulse_response(&params, horizon)?;
    let tail_max = response[horizon / 2..].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if tail_max < DEGENERATE_TAIL {
        return Err(LabError::DegenerateTeacher { tail_max });
    }
    Ok(GruTeacher {
        params,
        fit_error: loss.sqrt(),
    })
}
