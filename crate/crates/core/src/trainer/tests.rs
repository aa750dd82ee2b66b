use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::control::{ControlNet, ControlNetSpec};
use crate::oracle::TargetSet;
use crate::pde::OperatorSpec;
use crate::rom::ParamVector;

fn uniform(model: &ModelSpec, n: usize, seed: u64) -> XBatch {
    XSampler::UniformBox { half_width: 1.0 }
        .sample(model, None, n, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
}

fn one_mode(width: usize, depth: usize) -> Dynamics {
    let model = ModelSpec::sine_series(1, 1);
    let res = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
    Dynamics::new(res, ControlNet::new(ControlNetSpec::new(1, width, depth))).unwrap()
}

/// `ξ` with an open gate, zero sub-networks and expansion output bias `b`,
/// so that `V(θ) = b ⊙ θ`.
fn linear_field(dynamics: &Dynamics, b: f64) -> Vec<f64> {
    let n = dynamics.net.n_params();
    let m = dynamics.dim();
    let mut xi = vec![0.0; n];
    dynamics.net.set_gate_bias(&mut xi, 40.0);
    for v in &mut xi[n - m..] {
        *v = b;
    }
    xi
}

fn small_system(seed: u64) -> (Dynamics, Vec<f64>, Vec<f64>, XBatch) {
    let model = ModelSpec::sine_series(1, 2);
    let res = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
    let net = ControlNet::new(ControlNetSpec::new(2, 4, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = net.init_params(&mut rng);
    for v in &mut xi {
        *v += 0.1 * rng.random_range(-1.0..1.0);
    }
    let dynamics = Dynamics::new(res, net).unwrap();
    let theta0 = vec![0.8, -0.4];
    let batch = uniform(&model, 32, seed + 1);
    (dynamics, xi, theta0, batch)
}

fn rollout_loss(d: &Dynamics, xi: &[f64], th: &[f64], b: &XBatch, solver: &SolverSpec, t: f64) -> f64 {
    *d.rollout(xi, th, b, t, solver, true).unwrap().last().last().unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

#[test]
fn zero_horizon_gives_zero_gradient() {
    let (d, xi, th, batch) = small_system(1);
    let solver = SolverSpec::rk4(5);
    let traj = d.rollout(&xi, &th, &batch, 0.0, &solver, true).unwrap();
    let (g, _) = d.adjoint_gradient(&xi, &traj, &batch, &solver, &[0.0, 0.0], 1.0).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn closed_gate_and_zero_state_stay_put() {
    let model = ModelSpec::sine_series(1, 3);
    let res = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
    let net = ControlNet::new(ControlNetSpec::new(3, 8, 2));
    let mut xi = net.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    net.set_gate_bias(&mut xi, -1e3);
    let d = Dynamics::new(res, net).unwrap();
    let th = vec![0.0; 3];
    let traj = d
        .rollout(&xi, &th, &uniform(&model, 16, 2), 0.5, &SolverSpec::rk4(10), true)
        .unwrap();
    let end = AugmentedState::from_flat(traj.last());
    assert_eq!(end.theta, th);
    assert_eq!(end.s, 0.0);
}

#[test]
fn exact_eigenmode_field_rollout() {
    let d = one_mode(4, 1);
    let xi = linear_field(&d, -PI * PI);
    let batch = uniform(&d.residual.model, 128, 3);
    let t = 0.1;
    let traj = d.rollout(&xi, &[1.3], &batch, t, &SolverSpec::rk4(40), true).unwrap();
    let end = AugmentedState::from_flat(traj.last());
    assert!(end.s < 1e-12, "s(T) = {}", end.s);
    let exact = 1.3 * (-PI * PI * t).exp();
    assert!((end.theta[0] - exact).abs() < 1e-7);
}

#[test]
fn accumulated_cost_is_nondecreasing_and_matches_trapezoid() {
    let (d, xi, th, batch) = small_system(5);
    let solver = SolverSpec::rk4(200);
    let traj = d.rollout(&xi, &th, &batch, 0.5, &solver, true).unwrap();
    let m = d.dim();
    for w in traj.states.windows(2) {
        assert!(w[1][m] >= w[0][m]);
    }
    let r: Vec<f64> = traj
        .states
        .iter()
        .map(|y| {
            let mut v = vec![0.0; m];
            d.velocity(&xi, &y[..m], &mut v);
            d.residual.cost(&y[..m], &v, &batch).unwrap()
        })
        .collect();
    let trap: f64 = traj
        .times
        .windows(2)
        .zip(r.windows(2))
        .map(|(t, r)| 0.5 * (t[1] - t[0]) * (r[0] + r[1]))
        .sum();
    let s_t = traj.last()[m];
    assert!((s_t - trap).abs() <= 1e-4 * s_t.max(1e-12), "{s_t} vs {trap}");
}

#[test]
fn adjoint_matches_finite_differences() {
    let (d, xi, th, batch) = small_system(7);
    let solver = SolverSpec::rk4(20);
    let t = 0.3;
    let traj = d.rollout(&xi, &th, &batch, t, &solver, true).unwrap();
    let (g, _) = d.adjoint_gradient(&xi, &traj, &batch, &solver, &[0.0, 0.0], 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..8 {
        let j = rng.random_range(0..xi.len());
        let h = 1e-5;
        let mut p = xi.clone();
        p[j] += h;
        let lp = rollout_loss(&d, &p, &th, &batch, &solver, t);
        p[j] -= 2.0 * h;
        let lm = rollout_loss(&d, &p, &th, &batch, &solver, t);
        let fd = (lp - lm) / (2.0 * h);
        let scale = norm(&g) / (g.len() as f64).sqrt();
        assert!(
            (g[j] - fd).abs() <= 1e-3 * fd.abs().max(scale),
            "coord {j}: adjoint {} fd {fd}",
            g[j]
        );
    }
}

#[test]
fn unrolled_matches_finite_differences_exactly() {
    let (d, xi, th, batch) = small_system(8);
    for solver in [SolverSpec::rk4(6), SolverSpec::euler(6)] {
        let t = 0.3;
        let traj = d.rollout(&xi, &th, &batch, t, &solver, true).unwrap();
        let (g, _) = d.unrolled_gradient(&xi, &traj, &batch, &solver, &[0.0, 0.0], 1.0).unwrap();
        for j in [0, 5, 17, xi.len() - 1] {
            let h = 1e-6;
            let mut p = xi.clone();
            p[j] += h;
            let lp = rollout_loss(&d, &p, &th, &batch, &solver, t);
            p[j] -= 2.0 * h;
            let lm = rollout_loss(&d, &p, &th, &batch, &solver, t);
            let fd = (lp - lm) / (2.0 * h);
            assert!((g[j] - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{:?} {j}: {} vs {fd}", solver.kind, g[j]);
        }
    }
}

#[test]
fn euler_adjoint_equals_unrolled() {
    let (d, xi, th, batch) = small_system(9);
    let solver = SolverSpec::euler(10);
    let traj = d.rollout(&xi, &th, &batch, 0.2, &solver, true).unwrap();
    let lam = [0.3, -0.2];
    let (a, la) = d.adjoint_gradient(&xi, &traj, &batch, &solver, &lam, 1.0).unwrap();
    let (u, lu) = d.unrolled_gradient(&xi, &traj, &batch, &solver, &lam, 1.0).unwrap();
    for (x, y) in a.iter().zip(&u).chain(la.iter().zip(&lu)) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}

#[test]
fn adjoint_and_unrolled_agree_in_direction() {
    let (d, xi, th, batch) = small_system(10);
    let solver = SolverSpec::rk4(20);
    let traj = d.rollout(&xi, &th, &batch, 0.5, &solver, true).unwrap();
    let (a, _) = d.adjoint_gradient(&xi, &traj, &batch, &solver, &[0.0, 0.0], 1.0).unwrap();
    let (u, _) = d.unrolled_gradient(&xi, &traj, &batch, &solver, &[0.0, 0.0], 1.0).unwrap();
    assert!(cosine(&a, &u) > 0.999);
}

#[test]
fn terminal_gradient_with_respect_to_initial_state() {
    let (d, xi, th, batch) = small_system(12);
    let solver = SolverSpec::rk4(10);
    let t = 0.2;
    let traj = d.rollout(&xi, &th, &batch, t, &solver, true).unwrap();
    let (_, g0) = d.unrolled_gradient(&xi, &traj, &batch, &solver, &[0.0, 0.0], 1.0).unwrap();
    let h = 1e-6;
    for i in 0..2 {
        let mut p = th.clone();
        p[i] += h;
        let lp = rollout_loss(&d, &xi, &p, &batch, &solver, t);
        p[i] -= 2.0 * h;
        let lm = rollout_loss(&d, &xi, &p, &batch, &solver, t);
        let fd = (lp - lm) / (2.0 * h);
        assert!((g0[i] - fd).abs() < 1e-6 * fd.abs().max(1e-3));
    }
}

#[test]
fn misfit_gradient_matches_finite_differences() {
    let model = ModelSpec::periodic_sine_tanh(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = model.n_params();
    let th: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tb: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = uniform(&model, 64, 14);
    let (f, g) = terminal_misfit(&model, &th, &tb, &batch);
    assert!(f > 0.0);
    for i in 0..m {
        let h = 1e-6;
        let mut p = th.clone();
        p[i] += h;
        let fp = terminal_misfit(&model, &p, &tb, &batch).0;
        p[i] -= 2.0 * h;
        let fm = terminal_misfit(&model, &p, &tb, &batch).0;
        assert!((g[i] - (fp - fm) / (2.0 * h)).abs() < 1e-6);
    }
    assert_eq!(terminal_misfit(&model, &tb, &tb, &batch).0, 0.0);
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        n_points: 16,
        horizon: 0.1,
        solver: SolverSpec::rk4(4),
        max_iters: 5,
        stop: StopRule::disabled(),
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let (d, xi, _, _) = small_system(15);
    let initials: Vec<Vec<f64>> = (0..6).map(|i| vec![0.1 * i as f64, -0.5]).collect();
    let mut seq = tiny_config();
    seq.exec = ExecMode::Sequential;
    let a = train(&seq, &d, xi.clone(), &initials, None, None).unwrap();
    let b = train(&seq, &d, xi.clone(), &initials, None, None).unwrap();
    let c = train(&tiny_config(), &d, xi, &initials, None, None).unwrap();
    assert_eq!(a.xi, b.xi);
    assert_eq!(a.xi, c.xi);
    assert_eq!(a.history.len(), 5);
    assert_eq!(a.stop, StopReason::MaxIters);
}

#[test]
fn empty_target_set_is_plain_trajectory_loss() {
    let (d, xi, _, _) = small_system(16);
    let initials: Vec<Vec<f64>> = (0..4).map(|i| vec![0.2 * i as f64, 0.3]).collect();
    let cfg = tiny_config();
    let a = train(&cfg, &d, xi.clone(), &initials, None, None).unwrap();
    let b = train(&cfg, &d, xi, &initials, Some(&TargetSet::default()), None).unwrap();
    assert_eq!(a.xi, b.xi);
    for (r, s) in a.history.iter().zip(&b.history) {
        assert_eq!(r.loss, s.loss);
        assert_eq!(r.aug_loss, 0.0);
    }
}

#[test]
fn augmentation_adds_misfit_term() {
    let (d, xi, _, _) = small_system(17);
    let model = d.residual.model;
    let initials = vec![vec![0.5, 0.1]];
    let targets = TargetSet {
        pairs: vec![(
            ParamVector::new(model, vec![0.5, 0.1]).unwrap(),
            ParamVector::new(model, vec![0.2, 0.0]).unwrap(),
        )],
    };
    let cfg = TrainConfig {
        max_iters: 1,
        ..tiny_config()
    };
    let r = train(&cfg, &d, xi, &initials, Some(&targets), None).unwrap();
    let row = &r.history[0];
    assert!(row.aug_loss > 0.0);
    assert_eq!(row.loss, row.traj_loss + row.aug_loss);
}

#[test]
fn stop_rule_detects_plateau() {
    let rule = StopRule::default();
    let flat = vec![1.0; 40];
    assert!(rule.triggered(&flat));
    let falling: Vec<f64> = (0..40).map(|i| 1.0 - 0.01 * i as f64).collect();
    assert!(!rule.triggered(&falling));
    assert!(!rule.triggered(&flat[..39]));
    assert!(!StopRule::disabled().triggered(&flat));
}

#[test]
fn cosine_schedule_endpoints() {
    let s = LrSchedule::Cosine { final_fraction: 0.1 };
    assert!((s.rate(1.0, 0, 100) - 1.0).abs() < 1e-15);
    assert!((s.rate(1.0, 100, 100) - 0.1).abs() < 1e-15);
    assert_eq!(LrSchedule::Constant.rate(0.3, 50, 100), 0.3);
}

#[test]
fn invalid_configs_are_rejected() {
    let (d, xi, _, _) = small_system(18);
    let init = vec![vec![0.0, 0.0]];
    let zero_k = TrainConfig {
        batch_size: 0,
        ..tiny_config()
    };
    assert!(matches!(train(&zero_k, &d, xi.clone(), &init, None, None), Err(Error::Config(_))));
    let no_t = TrainConfig {
        horizon: 0.0,
        ..tiny_config()
    };
    assert!(train(&no_t, &d, xi.clone(), &init, None, None).is_err());
    assert!(train(&tiny_config(), &d, xi, &[], None, None).is_err());
}

#[test]
fn training_one_mode_recovers_decay_rate() {
    let d = one_mode(16, 1);
    let mut xi = d.net.init_params(&mut ChaCha8Rng::seed_from_u64(3));
    d.net.set_gate_bias(&mut xi, 4.0);
    let initials: Vec<Vec<f64>> = (0..16).map(|i| vec![0.5 + 1.5 * i as f64 / 15.0]).collect();
    let cfg = TrainConfig {
        batch_size: 8,
        n_points: 32,
        horizon: 0.05,
        solver: SolverSpec::rk4(5),
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        schedule: LrSchedule::Cosine { final_fraction: 0.05 },
        max_iters: 600,
        stop: StopRule::disabled(),
        exec: ExecMode::Sequential,
        seed: 5,
        ..TrainConfig::default()
    };
    let r = train(&cfg, &d, xi, &initials, None, None).unwrap();
    assert_eq!(r.stop, StopReason::MaxIters);
    assert!(r.moving_average(20, r.iterations()).unwrap() < r.moving_average(20, 20).unwrap());
    for c in [0.6, 1.0, 1.5, 1.9] {
        let v = d.net.eval(&r.xi, &[c]).unwrap()[0];
        let rel = (v + PI * PI * c).abs() / (PI * PI * c);
        assert!(rel < 0.05, "c = {c}: V = {v}, rel {rel}");
    }
}

#[test]
fn nls_single_point_recovers_local_field() {
    let d = one_mode(8, 1);
    let xi = d.net.init_params(&mut ChaCha8Rng::seed_from_u64(6));
    let cfg = NlsConfig {
        batch_size: 1,
        n_points: 64,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        max_iters: 800,
        exec: ExecMode::Sequential,
        ..NlsConfig::default()
    };
    let c0 = 1.2;
    let r = nls_train(&cfg, &d, xi, &[vec![c0]], None).unwrap();
    let v = d.net.eval(&r.xi, &[c0]).unwrap()[0];
    assert!((v + PI * PI * c0).abs() / (PI * PI * c0) < 0.01, "V = {v}");
}

#[test]
fn nls_rejects_empty_inputs() {
    let d = one_mode(4, 1);
    let xi = vec![0.0; d.net.n_params()];
    assert!(nls_train(&NlsConfig::default(), &d, xi.clone(), &[], None).is_err());
    let cfg = NlsConfig {
        n_points: 0,
        ..NlsConfig::default()
    };
    assert!(matches!(nls_train(&cfg, &d, xi, &[vec![1.0]], None), Err(Error::EmptyBatch)));
}

#[test]
fn log_csv_has_header_and_rows() {
    let rows = vec![LogRow {
        iteration: 0,
        loss: 1.5,
        traj_loss: 1.0,
        aug_loss: 0.5,
        grad_norm: 2.0,
        wall_time: 0.1,
    }];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    write_log_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iteration,loss,traj_loss,aug_loss,grad_norm,wall_time");
    assert!(lines.next().unwrap().starts_with("0,1.5e0,"));
}
