use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use paramflow::control::{ControlNet, ControlNetSpec};
use paramflow::odesolve::{euler_maruyama, SdeSpec};
use paramflow::oracle::{relative_error, upwind_1d};
use paramflow::par::ExecMode;
use paramflow::rom::{sample_initials, InitSampler, ModelSpec};
use paramflow::sampling::XSampler;

fn models() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (1usize..=3, 1usize..=4).prop_map(|(d, n)| ModelSpec::periodic_sine_tanh(d, n)),
        (1usize..=3, 1usize..=4).prop_map(|(d, n)| ModelSpec::gaussian_mixture(d, n)),
        (1usize..=5).prop_map(|n| ModelSpec::sine_series(1, n)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_and_tape_parameter_gradients_agree(spec in models(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampler = match spec.family {
            paramflow::rom::ModelFamily::GaussianMixture => InitSampler::hjb_box(),
            _ => InitSampler::Gaussian { mean: 0.0, variance: 0.5 },
        };
        let theta = sample_initials(&sampler, &spec, 1, &mut rng).unwrap().remove(0).values;
        let x: Vec<f64> = (0..spec.dim).map(|i| 0.3 - 0.2 * i as f64).collect();
        let a = spec.grad_theta(&theta, &x).unwrap();
        let b = spec.grad_theta_tape(&theta, &x);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn relative_error_vanishes_on_itself(spec in models(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = sample_initials(&InitSampler::Gaussian { mean: 0.1, variance: 0.3 }, &spec, 1, &mut rng)
            .unwrap()
            .remove(0)
            .values;
        let batch = XSampler::UniformBox { half_width: 1.0 }.sample(&spec, None, 64, &mut rng).unwrap();
        let e = relative_error(&spec, &theta, &|x| spec.value(&theta, x), &batch);
        prop_assert!(e.is_none_or(|v| v == 0.0));
    }

    #[test]
    fn upwind_is_conservative_and_total_variation_diminishing(
        amps in prop::collection::vec(-2.0f64..2.0, 1..4),
        speed in -2.0f64..2.0,
    ) {
        let g = |y: f64| {
            amps.iter()
                .enumerate()
                .map(|(k, a)| a * (std::f64::consts::PI * (k + 1) as f64 * y).sin())
                .sum::<f64>()
        };
        let sol = upwind_1d(&g, speed, 0.2, 400, 200).unwrap();
        for w in sol.total_variation.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10);
        }
        let m0 = sol.mass[0];
        for m in &sol.mass {
            prop_assert!((m - m0).abs() < 1e-11);
        }
    }

    #[test]
    fn closed_gate_silences_the_field(width in 1usize..6, depth in 1usize..3, seed in 0u64..100) {
        let net = ControlNet::new(ControlNetSpec::new(4, width, depth));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xi = net.init_params(&mut rng);
        net.set_gate_bias(&mut xi, -60.0);
        let v = net.eval(&xi, &[0.2, -0.1, 0.4, 0.0]).unwrap();
        prop_assert!(v.iter().all(|c| c.abs() < 1e-20));
    }
}

#[test]
fn sde_paths_do_not_depend_on_scheduling() {
    let spec = SdeSpec {
        epsilon: 0.2,
        dt: 0.01,
        t_end: 0.5,
        n_paths: 16,
        record_paths: false,
    };
    let drift = |x: &[f64], t: f64, out: &mut [f64]| {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -v * (1.0 + t);
        }
    };
    let a = euler_maruyama(drift, &[0.3, -0.7], &spec, 5, ExecMode::Sequential).unwrap();
    let b = euler_maruyama(drift, &[0.3, -0.7], &spec, 5, ExecMode::Parallel).unwrap();
    assert_eq!(a, b);
}
