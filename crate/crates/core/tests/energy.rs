mod common;

use proptest::prelude::*;

use pathway_cl::energy::{self, CostModel, Counter, EnergyLedger, Phase};
use pathway_cl::harness::{self, Method};

use common::{config, disjoint, quick, rotated_stream};

fn ledger_from(ops: &[(u8, u8, u32)]) -> EnergyLedger {
    let mut l = EnergyLedger::new();
    for &(p, c, n) in ops {
        l.record(Phase::ALL[p as usize % 3], Counter::ALL[c as usize % 3], n as u64).unwrap();
    }
    l
}

fn ops() -> impl Strategy<Value = Vec<(u8, u8, u32)>> {
    prop::collection::vec((any::<u8>(), any::<u8>(), 0u32..1_000_000), 0..40)
}

proptest! {
    #[test]
    fn counters_never_decrease(ops in ops()) {
        let mut l = EnergyLedger::new();
        for &(p, c, n) in &ops {
            let before = l.clone();
            l.record(Phase::ALL[p as usize % 3], Counter::ALL[c as usize % 3], n as u64).unwrap();
            for ph in Phase::ALL {
                for ct in Counter::ALL {
                    prop_assert!(l.phase(ph).get(ct) >= before.phase(ph).get(ct));
                }
            }
        }
    }

    #[test]
    fn energy_is_linear_in_each_coefficient(ops in ops(), scale in 0.01f64..100.0, which in 0usize..3) {
        let l = ledger_from(&ops);
        let base = CostModel::default();
        let mut scaled = base;
        let b0 = l.breakdown(&base, &Phase::ALL);
        let want = match which {
            0 => { scaled.joules_per_flop *= scale; b0.compute * (scale - 1.0) }
            1 => { scaled.joules_per_param_access *= scale; b0.memory * (scale - 1.0) }
            _ => { scaled.joules_per_routing_msg *= scale; b0.communication * (scale - 1.0) }
        };
        let got = energy::total_energy(&l, &scaled, &Phase::ALL) - energy::total_energy(&l, &base, &Phase::ALL);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn phases_partition_and_merge_adds(a in ops(), b in ops()) {
        let (la, lb) = (ledger_from(&a), ledger_from(&b));
        let cost = CostModel::default();
        let parts: f64 = Phase::ALL.iter().map(|p| energy::total_energy(&la, &cost, &[*p])).sum();
        prop_assert!((parts - energy::total_energy(&la, &cost, &Phase::ALL)).abs() < 1e-6);
        let mut m = la.clone();
        m.merge(&lb).unwrap();
        let sum = energy::total_energy(&la, &cost, &Phase::ALL) + energy::total_energy(&lb, &cost, &Phase::ALL);
        prop_assert!((energy::total_energy(&m, &cost, &Phase::ALL) - sum).abs() <= 1e-9 * sum.max(1.0));
    }
}

#[test]
fn budget_boundary_is_closed() {
    let mut l = EnergyLedger::new();
    l.record(Phase::Train, Counter::Flops, 100).unwrap();
    let cost = CostModel {
        joules_per_flop: 2.0,
        ..CostModel::default()
    };
    let at = energy::check_budget(&l, &cost, 200.0).unwrap();
    assert!(at.ok && at.margin == 0.0);
    let under = energy::check_budget(&l, &cost, 100.0).unwrap();
    assert!(!under.ok && under.margin == -100.0);
    assert!(energy::check_budget(&l, &cost, 0.0).is_err());
}

#[test]
fn four_pathway_run_meets_the_bound() {
    let stream = rotated_stream(4, 2);
    let papi = harness::run_method(&quick(config(Method::Papi, stream.clone(), disjoint(16), 4, 2))).unwrap();
    let mono = harness::run_method(&quick(config(Method::Naive, stream, disjoint(16), 1, 2))).unwrap();
    let delta = papi.energy(&[Phase::Routing]);
    assert!(delta > 0.0);
    let b = energy::verify_energy_bound(papi.energy(&[Phase::Train]), mono.energy(&[Phase::Train]), 4, delta).unwrap();
    assert!(b.holds, "slack {}", b.slack);

    let r = energy::active_ratio_check(&papi.ledger, &mono.ledger, &papi.state.store.store, &papi.config.cost_model)
        .unwrap();
    assert_eq!(r.param_ratio, 0.25);
    assert!(r.relative_gap() <= 0.10, "{r:?}");
}

#[test]
fn single_pathway_ratios_are_one() {
    let stream = rotated_stream(2, 3);
    let papi = harness::run_method(&quick(config(Method::PapiOracleRouting, stream.clone(), disjoint(8), 1, 3))).unwrap();
    let mono = harness::run_method(&quick(config(Method::Naive, stream, disjoint(8), 1, 3))).unwrap();
    let r = energy::active_ratio_check(&papi.ledger, &mono.ledger, &papi.state.store.store, &CostModel::default())
        .unwrap();
    assert_eq!(r.param_ratio, 1.0);
    assert!((r.energy_ratio - 1.0).abs() < 1e-12);
}

#[test]
fn mismatched_call_counts_are_rejected() {
    let mut a = EnergyLedger::new();
    a.record_pass(Phase::Inference, 10, 5).unwrap();
    let b = EnergyLedger::new();
    let stream = rotated_stream(1, 0);
    let report = harness::run_method(&quick(config(Method::Naive, stream, disjoint(4), 1, 0))).unwrap();
    assert!(energy::active_ratio_check(&a, &b, &report.state.store.store, &CostModel::default()).is_err());
}
