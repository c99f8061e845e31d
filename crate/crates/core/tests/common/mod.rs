#![allow(dead_code)]

use extrapolab_core::{LinearRnnParams, Structure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random system with `A` entries `N(0, a_scale²/d)`.
pub fn random_params(rng: &mut ChaCha8Rng, d: usize, structure: Structure, a_scale: f64) -> LinearRnnParams {
    let s = a_scale / (d as f64).sqrt();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let v = s * normal(rng);
            match structure {
                Structure::General => a[i * d + j] = v,
                Structure::Symmetric if j >= i => {
                    a[i * d + j] = v;
                    a[j * d + i] = v;
                }
                Structure::Diagonal if i == j => a[i * d + i] = v,
                _ => {}
            }
        }
    }
    let b: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let c: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    LinearRnnParams::new(structure, a, b, c).unwrap()
}

pub fn balanced(p: &LinearRnnParams) -> LinearRnnParams {
    LinearRnnParams::new(p.structure(), p.a().to_vec(), p.b().to_vec(), p.b().to_vec()).unwrap()
}

pub fn random_structure(rng: &mut ChaCha8Rng) -> Structure {
    match rng.random_range(0..3) {
        0 => Structure::General,
        1 => Structure::Symmetric,
        _ => Structure::Diagonal,
    }
}

/// Brute-force `C Aʲ B` with explicit dense matrix powers.
pub fn matrix_power_ir(p: &LinearRnnParams, n: usize) -> Vec<f64> {
    let d = p.d();
    let mut pow = extrapolab_core::linalg::identity(d);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += p.c()[i] * pow[i * d + j] * p.b()[j];
            }
        }
        out.push(s);
        pow = extrapolab_core::linalg::matmul(&pow, p.a(), d);
    }
    out
}

/// Largest deviation after allowing an absolute floor: entries pass when
/// `|a − f| ≤ abs_floor` or `|a − f| / max(|a|, |f|) ≤ rel`.
pub fn worst_relative(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| {
            let diff = (a - f).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(f.abs())
            }
        })
        .fold(0.0, f64::max)
}
