mod common;

use common::{balanced, random_params, rng};
use extrapolab_core::losses::{self, finite_diff_grad, FD_STEP};
use extrapolab_core::optim::{
    init_student, lr_schedule_apply, paper_milestones, train, InitKind, LossKind, Method, StopReason, Target,
    TrainingConfig,
};
use extrapolab_core::teachers::{gen_balanced_teacher, gen_delay_teacher};
use extrapolab_core::{LinearRnnParams, Structure};

fn teacher_target(dh: usize, k: usize, seed: u64) -> Target {
    Target::Teacher(gen_balanced_teacher(dh, seed).unwrap().impulse_response(k).unwrap())
}

#[test]
fn scalar_gd_follows_hand_recursion() {
    let init = LinearRnnParams::diagonal(&[0.0], vec![0.1], vec![0.1]).unwrap();
    let target = Target::Teacher(extrapolab_core::ImpulseResponse::new(vec![1.0]).unwrap());
    let mut config = TrainingConfig::new(Method::Gd, 0.1, 200, LossKind::Population, InitKind::Explicit { theta: init.clone() });
    config.record_every = 1;
    config.early_stop_loss = 1e-10;
    let traj = train(&target, &init, &config).unwrap();
    assert_eq!(traj.stop_reason, StopReason::Converged);
    assert!(traj.final_loss() < 1e-10);
    // With b = c and a frozen at 0 (its gradient is 0 at k = 1), each GD step
    // is b ← b − 0.1·2(b² − 1)·b.
    let mut b = 0.1f64;
    for rec in &traj.records {
        assert!((rec.loss - (b * b - 1.0).powi(2)).abs() <= 1e-14, "step {}", rec.step);
        b -= 0.1 * 2.0 * (b * b - 1.0) * b;
    }
    for w in traj.records.windows(2) {
        assert!(w[1].loss < w[0].loss);
    }
}

#[test]
fn gf_preserves_balancedness_and_norm_gap() {
    for seed in 0..3u64 {
        let mut r = rng(seed);
        let target = teacher_target(3, 8, seed);
        let balanced_init = balanced(&random_params(&mut r, 6, Structure::Symmetric, 0.5)).with_free_params(
            &balanced(&random_params(&mut r, 6, Structure::Symmetric, 0.5))
                .free_params()
                .iter()
                .map(|x| 0.3 * x)
                .collect::<Vec<_>>(),
        );
        let mut config = TrainingConfig::new(Method::Gf, 1e-3, 2000, LossKind::Population, InitKind::Explicit {
            theta: balanced_init.clone(),
        });
        config.record_every = 50;
        config.early_stop_loss = 0.0;
        let traj = train(&target, &balanced_init, &config).unwrap();
        for rec in &traj.records {
            assert!(rec.balance_gap < 1e-7, "seed {seed} step {}", rec.step);
            assert!(rec.balancedness_ratio.unwrap() <= 1e-8);
        }
        assert!((traj.records.last().unwrap().time.unwrap() - 2.0).abs() < 1e-9);

        let free = random_params(&mut r, 6, Structure::General, 0.5);
        let free = free.with_free_params(&free.free_params().iter().map(|x| 0.3 * x).collect::<Vec<_>>());
        let traj = train(&target, &free, &config).unwrap();
        let gap0 = traj.records[0].norm_gap;
        for rec in &traj.records {
            assert!((rec.norm_gap - gap0).abs() < 1e-8, "seed {seed} step {}", rec.step);
        }
    }
}

#[test]
fn balanced_adam_stays_balanced() {
    let init = init_student(10, Structure::Symmetric, &InitKind::BalancedRandom { scale: 0.05 }, 4).unwrap();
    let mut config = TrainingConfig::new(Method::Adam, 1e-3, 300, LossKind::Population, InitKind::Explicit { theta: init.clone() });
    config.record_every = 25;
    let traj = train(&teacher_target(3, 8, 1), &init, &config).unwrap();
    assert!(traj.records.iter().all(|r| r.balancedness_ratio == Some(0.0)));
}

fn estimate_smoothness(theta: &LinearRnnParams, ir: &extrapolab_core::ImpulseResponse) -> f64 {
    // Power iteration on finite-difference Hessian-vector products.
    let base = theta.free_params();
    let g0 = losses::population_grad(theta, ir).unwrap().free_vector();
    let mut v: Vec<f64> = (0..base.len()).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
    let mut lambda = 0.0;
    for _ in 0..30 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let h = 1e-5;
        let probe: Vec<f64> = base.iter().zip(&v).map(|(b, d)| b + h * d).collect();
        let g1 = losses::population_grad(&theta.with_free_params(&probe), ir).unwrap().free_vector();
        v = g1.iter().zip(&g0).map(|(a, b)| (a - b) / h).collect();
        lambda = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    lambda
}

/// GD iterates, one `train` call per step (GD carries no optimizer state).
fn gd_path(theta: &LinearRnnParams, ir: &extrapolab_core::ImpulseResponse, lr: f64, steps: usize) -> Vec<LinearRnnParams> {
    let mut path = vec![theta.clone()];
    for _ in 0..steps {
        let cur = path.last().unwrap().clone();
        let mut config = TrainingConfig::new(Method::Gd, lr, 1, LossKind::Population, InitKind::Explicit { theta: cur.clone() });
        config.early_stop_loss = 0.0;
        path.push(train(&Target::Teacher(ir.clone()), &cur, &config).unwrap().final_theta);
    }
    path
}

#[test]
fn gd_descends_below_inverse_path_smoothness() {
    // The step is shrunk until it sits below 1/(2L) for the largest local
    // smoothness met along its own 100-step path.
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let ir = gen_balanced_teacher(3, seed).unwrap().impulse_response(10).unwrap();
        let theta = random_params(&mut r, 5, Structure::General, 0.5);
        let theta = theta.with_free_params(&theta.free_params().iter().map(|x| 0.3 * x).collect::<Vec<_>>());
        let mut lr = 0.5 / estimate_smoothness(&theta, &ir);
        let path = loop {
            let path = gd_path(&theta, &ir, lr, 100);
            let l_max = path.iter().map(|p| estimate_smoothness(p, &ir)).fold(0.0, f64::max);
            if lr * l_max <= 0.5 {
                break path;
            }
            lr = 0.25 / l_max;
        };
        let losses: Vec<f64> = path.iter().map(|p| losses::population_loss(p, &ir).unwrap()).collect();
        for t in 1..losses.len() {
            assert!(losses[t] <= losses[t - 1], "seed {seed} step {t}");
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let teacher = gen_delay_teacher(3).unwrap();
    let data = losses::make_dataset(&teacher, 6, 200, 9).unwrap();
    let init = init_student(8, Structure::General, &InitKind::GaussianScaled { eps: 1e-2 }, 3).unwrap();
    let mut config = TrainingConfig::new(Method::Adam, 1e-2, 150, LossKind::Empirical, InitKind::Explicit { theta: init.clone() });
    config.batch_size = 32;
    config.seed = 77;
    config.record_every = 10;
    let a = train(&Target::Data(data.clone()), &init, &config).unwrap();
    let b = train(&Target::Data(data), &init, &config).unwrap();
    assert_eq!(a, b);
    let ja = serde_json::to_string(&a).unwrap();
    assert_eq!(ja, serde_json::to_string(&b).unwrap());
}

#[test]
fn records_cover_first_and_last_step() {
    let init = init_student(4, Structure::Diagonal, &InitKind::GaussianScaled { eps: 0.1 }, 1).unwrap();
    let mut config = TrainingConfig::new(Method::Adam, 1e-3, 37, LossKind::Accumulating, InitKind::Explicit { theta: init.clone() });
    config.record_every = 10;
    let traj = train(&teacher_target(2, 5, 2), &init, &config).unwrap();
    let steps: Vec<usize> = traj.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 30, 37]);
    assert_eq!(traj.stop_reason, StopReason::MaxSteps);
    assert!(traj.records.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn explosive_student_is_marked_diverged() {
    let init = LinearRnnParams::diagonal(&[3.0, -2.5], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
    let config = TrainingConfig::new(Method::Gd, 1e-3, 50, LossKind::Population, InitKind::Explicit { theta: init.clone() });
    let traj = train(&teacher_target(2, 40, 3), &init, &config).unwrap();
    assert_eq!(traj.stop_reason, StopReason::Diverged);
}

#[test]
fn invalid_configs_are_rejected_eagerly() {
    let init = LinearRnnParams::zeros(2, Structure::General);
    let target = teacher_target(2, 4, 0);
    let mut config = TrainingConfig::new(Method::Gd, 0.0, 10, LossKind::Population, InitKind::Explicit { theta: init.clone() });
    assert!(train(&target, &init, &config).is_err());
    config.lr = 1e-3;
    config.lr_milestones = vec![(10, 0.1), (10, 0.1)];
    assert!(train(&target, &init, &config).is_err());
    config.lr_milestones.clear();
    config.max_steps = 0;
    assert!(train(&target, &init, &config).is_err());
}

#[test]
fn schedule_examples() {
    let mut config = TrainingConfig::new(Method::Adam, 1e-3, 1, LossKind::Population, InitKind::GaussianScaled { eps: 1.0 });
    config.lr_milestones = paper_milestones();
    assert_eq!(lr_schedule_apply(&config, 0), 1e-3);
    assert_eq!(lr_schedule_apply(&config, 4999), 1e-3);
    assert!((lr_schedule_apply(&config, 5000) - 1e-4).abs() < 1e-18);
    assert!((lr_schedule_apply(&config, 30001) - 1e-7).abs() < 1e-20);
}

#[test]
fn scaled_normal_init_norm_concentrates() {
    let n = 20;
    let eps = 0.3;
    let draws = 10_000;
    let inside = (0..draws)
        .filter(|&s| {
            let theta = init_student(n, Structure::General, &InitKind::GaussianScaled { eps }, s).unwrap();
            let norm = theta.b().iter().map(|x| x * x).sum::<f64>().sqrt();
            eps / 2.0 < norm && norm < 1.5 * eps
        })
        .count();
    let bound = 1.0 - 2.0 * (-9.0 * n as f64 / 64.0).exp();
    assert!(inside as f64 / draws as f64 >= bound, "{inside} / {draws} < {bound}");
}

#[test]
fn init_contracts() {
    for s in [Structure::General, Structure::Symmetric, Structure::Diagonal] {
        let a = init_student(7, s, &InitKind::BalancedRandom { scale: 0.1 }, 5).unwrap();
        assert_eq!(a.balancedness_ratio().unwrap(), 0.0);
        assert_eq!(a, init_student(7, s, &InitKind::BalancedRandom { scale: 0.1 }, 5).unwrap());
        let g = init_student(7, s, &InitKind::GaussianScaled { eps: 0.1 }, 5).unwrap();
        assert_eq!(g, init_student(7, s, &InitKind::GaussianScaled { eps: 0.1 }, 5).unwrap());
        assert_ne!(g, init_student(7, s, &InitKind::GaussianScaled { eps: 0.1 }, 6).unwrap());
    }
}

#[test]
fn finite_difference_is_exact_on_quadratics() {
    let theta = LinearRnnParams::new(Structure::Symmetric, vec![0.3, -0.2, -0.2, 0.5], vec![1.0, 2.0], vec![-1.0, 0.5]).unwrap();
    let g = finite_diff_grad(|p| p.free_params().iter().enumerate().map(|(i, x)| (i + 1) as f64 * x * x).sum(), &theta, FD_STEP);
    let expected: Vec<f64> = theta.free_params().iter().enumerate().map(|(i, x)| 2.0 * (i + 1) as f64 * x).collect();
    for (a, b) in g.free_vector().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-8);
    }
}
