use proptest::prelude::*;

use pathway_cl::nn::{self, Activation, Head, LrSchedule, NetArch, Target};

// hand-unrolled 2-3-2 tanh net with softmax output
fn straight_line(p: &[f64], x: [f64; 2]) -> [f64; 2] {
    let (w1, b1) = (&p[0..6], &p[6..9]);
    let (w2, b2) = (&p[9..15], &p[15..17]);
    let h0 = (w1[0] * x[0] + w1[1] * x[1] + b1[0]).tanh();
    let h1 = (w1[2] * x[0] + w1[3] * x[1] + b1[1]).tanh();
    let h2 = (w1[4] * x[0] + w1[5] * x[1] + b1[2]).tanh();
    let z0 = w2[0] * h0 + w2[1] * h1 + w2[2] * h2 + b2[0];
    let z1 = w2[3] * h0 + w2[4] * h1 + w2[5] * h2 + b2[1];
    let e0 = 1.0 / (1.0 + (z1 - z0).exp());
    [e0, 1.0 - e0]
}

#[test]
fn forward_matches_straight_line_evaluator() {
    let arch = NetArch::new(vec![2, 3, 2], Activation::Tanh, Head::SoftmaxXent).unwrap();
    let mut params = arch.init_seeded(17);
    // init leaves biases at zero
    for (i, b) in [6, 7, 8, 15, 16].into_iter().enumerate() {
        params[b] = 0.1 * i as f64 - 0.2;
    }
    let (out, _) = nn::forward(&arch, &params, &[0.5, -0.5]).unwrap();
    let want = straight_line(&params, [0.5, -0.5]);
    for (a, b) in out.iter().zip(want) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn glorot_bounds_and_zero_biases() {
    let arch = NetArch::new(vec![4, 6, 3], Activation::Relu, Head::Mse).unwrap();
    let p = arch.init_seeded(3);
    assert_eq!(p.len(), 4 * 6 + 6 + 6 * 3 + 3);
    let s1 = (6.0f64 / 10.0).sqrt();
    let s2 = (6.0f64 / 9.0).sqrt();
    assert!(p[..24].iter().all(|w| w.abs() <= s1));
    assert!(p[24..30].iter().all(|b| *b == 0.0));
    assert!(p[30..48].iter().all(|w| w.abs() <= s2));
    assert!(p[48..].iter().all(|b| *b == 0.0));
    assert_eq!(p, arch.init_seeded(3));
}

#[test]
fn same_seed_gives_identical_trajectories() {
    let arch = NetArch::new(vec![3, 5, 2], Activation::Tanh, Head::SoftmaxXent).unwrap();
    let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.1, -0.3, 0.7 - i as f64 * 0.05]).collect();
    let ts: Vec<Target> = (0..8).map(|i| Target::Class(i % 2)).collect();
    let sched = LrSchedule::inverse_t(0.5, 0.1);
    let trajectory = || {
        let mut p = arch.init_seeded(11);
        let mut out = Vec::new();
        for t in 1..=20 {
            let (_, g) = nn::batch_loss_grad(&arch, &p, &xs, &ts).unwrap();
            nn::sgd_step(&mut p, &g, &sched, t).unwrap();
            out.push(p.clone());
        }
        out
    };
    assert_eq!(trajectory(), trajectory());
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let arch = NetArch::new(vec![2, 4, 2], Activation::Tanh, Head::SoftmaxXent).unwrap();
    let xs = vec![vec![1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0], vec![-1.0, 1.0]];
    let ts = vec![Target::Class(0), Target::Class(0), Target::Class(1), Target::Class(1)];
    let mut p = arch.init_seeded(5);
    let (first, _) = nn::batch_loss_grad(&arch, &p, &xs, &ts).unwrap();
    let sched = LrSchedule::constant(0.5);
    for t in 1..=500 {
        let (_, g) = nn::batch_loss_grad(&arch, &p, &xs, &ts).unwrap();
        nn::sgd_step(&mut p, &g, &sched, t).unwrap();
    }
    let (last, _) = nn::batch_loss_grad(&arch, &p, &xs, &ts).unwrap();
    assert!(last < 0.1 * first, "{first} -> {last}");
}

fn arch_strategy() -> impl Strategy<Value = (NetArch, Vec<f64>, Vec<f64>, Target)> {
    (
        prop::collection::vec(1usize..5, 2..5),
        prop::sample::select(vec![Activation::Tanh, Activation::Identity]),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(mut widths, act, softmax, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let head = if softmax { Head::SoftmaxXent } else { Head::Mse };
            let out = widths.last_mut().unwrap();
            if softmax && *out < 2 {
                *out = 2;
            }
            let out = *out;
            let arch = NetArch::new(widths.clone(), act, head).unwrap();
            let params = (0..arch.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = if softmax {
                Target::Class(rng.random_range(0..out))
            } else {
                Target::Values((0..out).map(|_| rng.random_range(-1.0..1.0)).collect())
            };
            (arch, params, x, target)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_central_differences((arch, params, x, target) in arch_strategy()) {
        let (_, cache) = nn::forward(&arch, &params, &x).unwrap();
        let grad = nn::backward(&arch, &params, &cache, &target).unwrap();
        let eps = 1e-5;
        let f = |p: &[f64]| {
            let (_, c) = nn::forward(&arch, p, &x).unwrap();
            nn::loss(&arch, &c, &target).unwrap()
        };
        let mut p = params.clone();
        for j in 0..params.len() {
            p[j] = params[j] + eps;
            let up = f(&p);
            p[j] = params[j] - eps;
            let down = f(&p);
            p[j] = params[j];
            let num = (up - down) / (2.0 * eps);
            let err = (grad[j] - num).abs() / grad[j].abs().max(num.abs()).max(1e-3);
            prop_assert!(err < 1e-4, "param {j}: analytic {} numeric {num}", grad[j]);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let p = nn::head_output(Head::SoftmaxXent, &logits);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_step_is_identity(
        params in prop::collection::vec(-10.0f64..10.0, 1..20),
        eta in 0.0f64..5.0,
        t in 1u64..1000,
    ) {
        let mut p = params.clone();
        let zero = vec![0.0; p.len()];
        nn::sgd_step(&mut p, &zero, &LrSchedule::inverse_t(eta, 0.3), t).unwrap();
        prop_assert_eq!(p, params);
    }
}
