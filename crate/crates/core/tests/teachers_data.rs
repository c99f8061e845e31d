mod common;

use extrapolab_core::gru::{self, GruParams, GruTrainConfig};
use extrapolab_core::linalg;
use extrapolab_core::losses::{self, SequenceDataset};
use extrapolab_core::moments::dist_from_balanced;
use extrapolab_core::teachers::{
    default_gru_target, gen_balanced_teacher, gen_delay_teacher, gen_gru_teacher, gen_random_unbalanced_teacher,
    GRU_TEACHER_HORIZON,
};
use extrapolab_core::{ImpulseResponse, LabError};

#[test]
fn balanced_teacher_invariants() {
    for seed in 0..50 {
        let t = gen_balanced_teacher(5, seed).unwrap();
        assert!((t.cb() - 1.0).abs() < 1e-12);
        assert_eq!(t.b(), t.c());
        assert!(t.diag().iter().all(|e| (0.6..=1.05).contains(e)));
        let dist = dist_from_balanced(&t).unwrap();
        assert_eq!(dist.len(), 5);
        assert!(dist.weights().iter().all(|w| *w > 0.0));
        assert!((dist.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t, gen_balanced_teacher(5, seed).unwrap());
    }
}

#[test]
fn delay_teacher_is_a_pure_delay() {
    let t = gen_delay_teacher(10).unwrap();
    let ir = t.impulse_response(30).unwrap().values;
    for (j, v) in ir.iter().enumerate() {
        assert_eq!(*v, if j == 9 { 1.0 } else { 0.0 });
    }
    let mut pow = linalg::identity(10);
    for _ in 0..10 {
        pow = linalg::matmul(&pow, t.a(), 10);
    }
    assert!(pow.iter().all(|x| *x == 0.0));
    assert_eq!(t.balancedness_ratio().unwrap(), 1.0);
}

#[test]
fn unbalanced_teacher_is_revealed_after_dh_steps() {
    for dh in 1..8 {
        for seed in 0..5 {
            let t = gen_random_unbalanced_teacher(dh, seed).unwrap();
            let ir = t.impulse_response(dh + 3).unwrap().values;
            assert!(ir[..dh - 1].iter().all(|v| *v == 0.0));
            assert_ne!(ir[dh - 1], 0.0);
            assert_eq!(t, gen_random_unbalanced_teacher(dh, seed).unwrap());
        }
    }
}

#[test]
fn dataset_moments_match_white_noise() {
    let n = 10_000;
    let k = 6;
    let data = losses::make_dataset(&gen_delay_teacher(3).unwrap(), k, n, 42).unwrap();
    let bound = 4.0 / (n as f64).sqrt();
    for a in 0..k {
        let mean = (0..n).map(|i| data.row(i)[a]).sum::<f64>() / n as f64;
        assert!(mean.abs() < bound, "mean[{a}] = {mean}");
        for b in 0..k {
            let cov = (0..n).map(|i| data.row(i)[a] * data.row(i)[b]).sum::<f64>() / n as f64;
            let expected = if a == b { 1.0 } else { 0.0 };
            let tol = if a == b { 0.1 } else { bound };
            assert!((cov - expected).abs() < tol, "cov[{a}][{b}] = {cov}");
        }
    }
    // Labels of a delay teacher read back the input dh−1 steps before the end.
    for i in 0..n {
        assert_eq!(data.label(i), data.row(i)[k - 3]);
    }
}

#[test]
fn empirical_loss_concentrates_on_population_loss() {
    let teacher = gen_balanced_teacher(3, 8).unwrap();
    let k = 8;
    let data = losses::make_dataset(&teacher, k, 10_000, 1).unwrap();
    for seed in 0..5 {
        let mut r = common::rng(seed);
        let student = common::random_params(&mut r, 4, extrapolab_core::Structure::General, 0.7);
        let emp = losses::empirical_loss(&student, &data).unwrap();
        let pop = losses::population_loss(&student, &teacher.impulse_response(k).unwrap()).unwrap();
        assert!((emp - pop).abs() < 0.05 * (1.0 + pop), "emp {emp} pop {pop}");
    }
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let t = gen_balanced_teacher(2, 0).unwrap();
    let a = losses::make_dataset(&t, 5, 7, 3).unwrap();
    assert_eq!(a, losses::make_dataset(&t, 5, 7, 3).unwrap());
    assert_ne!(a, losses::make_dataset(&t, 5, 7, 4).unwrap());
    let json = serde_json::to_value(&a).unwrap();
    assert_eq!(json["k"], 5);
    assert_eq!(json["n"], 7);
    assert_eq!(json["inputs"].as_array().unwrap().len(), 7);
    let back: SequenceDataset = serde_json::from_value(json).unwrap();
    assert_eq!(back, a);
    let bad = r#"{"k":2,"n":1,"inputs":[[1.0]],"labels":[0.0]}"#;
    assert!(serde_json::from_str::<SequenceDataset>(bad).is_err());
}

#[test]
fn gru_teacher_fits_the_default_target() {
    let target = default_gru_target(GRU_TEACHER_HORIZON);
    let t = gen_gru_teacher(4, &target, 1).unwrap();
    assert!(t.fit_error.is_finite());
    let response = gru::gru_impulse_response(&t.params, GRU_TEACHER_HORIZON).unwrap();
    let tail = response[GRU_TEACHER_HORIZON / 2..].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    assert!(tail >= 1e-3);
    assert_eq!(t, gen_gru_teacher(4, &target, 1).unwrap());
    let zero = ImpulseResponse { values: vec![0.0; 4] };
    assert!(matches!(gen_gru_teacher(4, &zero, 1), Err(LabError::DegenerateTeacher { .. })));
}

#[test]
fn gru_training_reduces_loss_deterministically() {
    let teacher = GruParams::random(2, 0.5, 3);
    let mut config = GruTrainConfig::new(6, 11);
    config.n_train = 200;
    config.batch_size = 50;
    config.max_steps = 300;
    config.lr = 1e-2;
    config.init_scale = 0.1;
    config.record_every = 50;
    let a = gru::gru_train(&teacher, 4, &config).unwrap();
    let b = gru::gru_train(&teacher, 4, &config).unwrap();
    assert_eq!(a, b);
    assert!(a.final_loss() < a.records[0].loss);
    let err = gru::gru_extrapolation_error(&a.final_params, &teacher, 20, 6, 24, 5).unwrap();
    assert!(err.is_finite());
    assert!(gru::gru_extrapolation_error(&a.final_params, &teacher, 20, 6, 6, 5).is_err());
}

#[test]
fn gru_params_layout_and_serde() {
    let p = GruParams::random(3, 0.2, 9);
    assert_eq!(p.flat().len(), GruParams::n_params(3));
    assert_eq!(GruParams::n_params(3), 3 * (2 * 3 + 9) + 3);
    assert_eq!(p.with_flat(&p.flat()), p);
    let back: GruParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(back, p);
    assert_eq!(gru::gru_forward(&GruParams::zeros(3), &[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
}
