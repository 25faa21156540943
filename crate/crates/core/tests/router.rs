use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pathway_cl::energy::{Counter, EnergyLedger, Phase};
use pathway_cl::nn::LrSchedule;
use pathway_cl::router::{self, Router, RouterConfig, RouterSample};

fn linear() -> RouterConfig {
    RouterConfig {
        hidden: vec![],
        ..RouterConfig::default()
    }
}

fn samples(n: usize, width: usize, n_tasks: usize, seed: u64) -> Vec<RouterSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| RouterSample {
            h: (0..width).map(|_| rng.random_range(-2.0..2.0)).collect(),
            task: i % n_tasks,
            target: 0,
        })
        .collect()
}

fn decisions(r: &Router, set: &[RouterSample]) -> Vec<usize> {
    set.iter()
        .map(|s| r.decide(&s.h, &r.task_embedding(s.task)).unwrap().pathway)
        .collect()
}

#[test]
fn embeddings_differ_across_ids() {
    let mut r = Router::new(3, 4, RouterConfig::default(), 21).unwrap();
    let rows: Vec<Vec<f64>> = (0..10).map(|t| r.embed_task(t)).collect();
    for a in 0..10 {
        for b in a + 1..10 {
            assert_ne!(rows[a], rows[b]);
        }
    }
    assert_eq!(r.embed_task(4), rows[4]);
    assert_eq!(r.registered_tasks().count(), 10);
}

#[test]
fn scaling_the_final_layer_keeps_every_decision() {
    let set = samples(300, 5, 4, 1);
    for cfg in [linear(), RouterConfig::default()] {
        let r = Router::new(4, 5, cfg, 8).unwrap();
        let before = decisions(&r, &set);
        let (m, n) = r.arch().layers().last().unwrap();
        for lambda in [2.0, 0.3, 17.0] {
            let mut s = r.clone();
            let len = s.psi().len();
            s.psi_mut()[len - (m * n + n)..].iter_mut().for_each(|p| *p *= lambda);
            assert_eq!(decisions(&s, &set), before);
        }
    }
}

#[test]
fn loss_falls_on_a_separable_fixed_batch() {
    let mut r = Router::new(2, 3, RouterConfig::default(), 4).unwrap();
    let mut batch = samples(40, 3, 2, 9);
    for s in &mut batch {
        s.target = s.task;
    }
    let mut ledger = EnergyLedger::new();
    let sched = LrSchedule::constant(0.5);
    let losses: Vec<f64> = (1..=50)
        .map(|t| r.train_step(&batch, &sched, t, &mut ledger).unwrap())
        .collect();
    let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls >= 45, "{losses:?}");
    assert!(losses[49] < 0.2 * losses[0], "{} -> {}", losses[0], losses[49]);
    assert_eq!(router::routing_accuracy(&r, &batch).unwrap(), 1.0);
}

#[test]
fn half_disagreement_gives_one() {
    let a = Router::new(3, 4, linear(), 1).unwrap();
    let b = Router::new(3, 4, linear(), 2).unwrap();
    let pool = samples(2000, 4, 3, 5);
    let (da, db) = (decisions(&a, &pool), decisions(&b, &pool));
    let agree: Vec<_> = pool.iter().zip(da.iter().zip(&db)).filter(|(_, (x, y))| x == y).map(|(s, _)| s.clone()).collect();
    let differ: Vec<_> = pool.iter().zip(da.iter().zip(&db)).filter(|(_, (x, y))| x != y).map(|(s, _)| s.clone()).collect();
    let n = agree.len().min(differ.len()).min(100);
    assert!(n >= 20);
    let mut set: Vec<RouterSample> = agree[..n].to_vec();
    set.extend_from_slice(&differ[..n]);
    assert_eq!(router::routing_discrepancy(&a, &b, &set).unwrap(), 1.0);
    assert_eq!(router::routing_discrepancy(&a, &b, &differ[..n]).unwrap(), 2.0);
    assert_eq!(router::routing_discrepancy(&a, &b, &agree[..n]).unwrap(), 0.0);
}

#[test]
fn discrepancy_needs_matching_k_and_points() {
    let a = Router::new(3, 4, linear(), 1).unwrap();
    let b = Router::new(2, 4, linear(), 1).unwrap();
    assert!(router::routing_discrepancy(&a, &b, &samples(4, 4, 2, 0)).is_err());
    assert!(router::routing_discrepancy(&a, &a, &[]).is_err());
    assert!(router::routing_accuracy(&a, &[]).is_err());
}

#[test]
fn route_books_message_and_scorer_pass() {
    let mut r = Router::new(4, 6, RouterConfig::default(), 3).unwrap();
    let tau = r.embed_task(0);
    let mut ledger = EnergyLedger::new();
    for _ in 0..5 {
        r.route(&[0.1; 6], &tau, &mut ledger).unwrap();
    }
    let c = ledger.phase(Phase::Routing);
    assert_eq!(c.get(Counter::Messages), 5);
    // 14 -> 16 -> 4
    assert_eq!(c.get(Counter::Flops), 5 * ((2 * 14 * 16 + 16) + (2 * 16 * 4 + 4)));
    assert!(r.route(&[0.1; 5], &tau, &mut ledger).is_err());
}

#[test]
fn router_survives_json_round_trip() {
    let mut r = Router::new(3, 2, RouterConfig::default(), 6).unwrap();
    r.embed_task(0);
    r.embed_task(7);
    let text = serde_json::to_string(&r).unwrap();
    let back: Router = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn discrepancy_is_twice_disagreement(sa in any::<u64>(), sb in any::<u64>(), sd in any::<u64>()) {
        let a = Router::new(3, 4, RouterConfig::default(), sa).unwrap();
        let b = Router::new(3, 4, RouterConfig::default(), sb).unwrap();
        let set = samples(64, 4, 3, sd);
        let (da, db) = (decisions(&a, &set), decisions(&b, &set));
        let agree = da.iter().zip(&db).filter(|(x, y)| x == y).count() as f64 / set.len() as f64;
        let d_ab = router::routing_discrepancy(&a, &b, &set).unwrap();
        prop_assert_eq!(d_ab, 2.0 * (1.0 - agree));
        prop_assert_eq!(d_ab, router::routing_discrepancy(&b, &a, &set).unwrap());
        prop_assert_eq!(router::routing_discrepancy(&a, &a, &set).unwrap(), 0.0);
        // b as the oracle: its decisions become the labels
        let labeled: Vec<RouterSample> = set.iter().zip(&db).map(|(s, k)| RouterSample { target: *k, ..s.clone() }).collect();
        let acc = router::routing_accuracy(&a, &labeled).unwrap();
        prop_assert!((acc - (1.0 - d_ab / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn positive_rescaling_of_a_linear_scorer_keeps_argmax(seed in any::<u64>(), lambda in 0.01f64..100.0) {
        let r = Router::new(5, 3, linear(), seed).unwrap();
        let set = samples(50, 3, 4, seed ^ 1);
        let mut s = r.clone();
        s.psi_mut().iter_mut().for_each(|p| *p *= lambda);
        prop_assert_eq!(decisions(&s, &set), decisions(&r, &set));
    }
}
