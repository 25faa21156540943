mod common;

use proptest::prelude::*;

use pathway_cl::energy::Phase;
use pathway_cl::harness::{self, Check, Method, RunConfig};
use pathway_cl::metrics::MetricsReport;
use pathway_cl::nn::LrSchedule;
use pathway_cl::Error;

use common::{config, disjoint, quick, rotated_stream};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn agem_examples() {
    // aligned gradients pass through
    assert_eq!(harness::agem_project(&[1.0, 2.0], &[1.0, 0.0]).unwrap(), vec![1.0, 2.0]);
    // conflicting component removed
    assert_eq!(harness::agem_project(&[-1.0, 2.0], &[1.0, 0.0]).unwrap(), vec![0.0, 2.0]);
    assert_eq!(harness::agem_project(&[-1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![-1.0, 1.0]);
    assert!(harness::agem_project(&[1.0], &[1.0, 0.0]).is_err());
}

proptest! {
    #[test]
    fn agem_projection_matches_formula(
        g in prop::collection::vec(-5.0f64..5.0, 1..12),
        seed in prop::collection::vec(-5.0f64..5.0, 12),
    ) {
        let r = &seed[..g.len()];
        let p = harness::agem_project(&g, r).unwrap();
        let (gr, rr) = (dot(&g, r), dot(r, r));
        for j in 0..g.len() {
            let want = if gr < 0.0 && rr > 0.0 { g[j] - gr / rr * r[j] } else { g[j] };
            prop_assert!((p[j] - want).abs() < 1e-9);
        }
        prop_assert!(dot(&p, r) >= -1e-9 * rr.max(1.0));
    }
}

#[test]
fn oracle_routing_on_disjoint_pathways_never_forgets() {
    let stream = rotated_stream(3, 4);
    let report = harness::run_method(&quick(config(Method::PapiOracleRouting, stream.clone(), disjoint(24), 3, 4))).unwrap();
    assert_eq!(report.metrics.pairs.len(), 3);
    for p in &report.metrics.pairs {
        assert_eq!(p.forgetting, 0.0, "task {} after {}", p.i, p.t);
        assert_eq!(p.losses.loss_current, p.losses.loss_snapshot);
    }
    // block 0 after one task equals block 0 after three
    let mut short = stream;
    short.n_tasks = 1;
    let first = harness::run_method(&quick(config(Method::PapiOracleRouting, short, disjoint(24), 3, 4))).unwrap();
    let (a, b) = (&first.state.store.store, &report.state.store.store);
    let r0 = a.pathway_range(0).unwrap();
    assert_eq!(a.theta()[r0.clone()], b.theta()[r0]);
    for k in 1..3 {
        let r = a.pathway_range(k).unwrap();
        assert_ne!(a.theta()[r.clone()], b.theta()[r]);
    }
}

#[test]
fn ewc_forgets_less_than_naive() {
    let stream = rotated_stream(2, 3);
    let f = |m| {
        let r = harness::run_method(&config(m, stream.clone(), disjoint(16), 1, 3)).unwrap();
        r.metrics.pairs[0].forgetting
    };
    let (naive, ewc) = (f(Method::Naive), f(Method::EwcMono));
    assert!(ewc < naive, "ewc {ewc} vs naive {naive}");
}

#[test]
fn config_errors() {
    let base = config(Method::Naive, rotated_stream(2, 0), disjoint(8), 1, 0);
    let bad = [
        RunConfig { k: 2, ..base.clone() },
        RunConfig { k: 2, method: Method::EwcMono, ..base.clone() },
        RunConfig { k: 0, method: Method::Papi, ..base.clone() },
        RunConfig { method: Method::AgemLite, memory_per_task: 0, ..base.clone() },
        RunConfig { lambda: -1.0, ..base.clone() },
        RunConfig { energy_budget: Some(0.0), ..base.clone() },
        RunConfig { schedule: LrSchedule::constant(f64::INFINITY), ..base.clone() },
        // 8 hidden units do not split three ways
        RunConfig { k: 3, method: Method::Papi, ..base.clone() },
    ];
    for cfg in &bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        assert!(matches!(harness::run_method(cfg), Err(Error::Config(_))));
    }
    let text = base.to_json().unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), base);
    let unknown = text.replacen('{', "{\"learning_rate\": 0.1,", 1);
    assert!(matches!(RunConfig::from_json(&unknown), Err(Error::Config(_))));
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("seed");
    assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
}

#[test]
fn diverging_learning_rate_is_a_numeric_error() {
    let mut cfg = quick(config(Method::Naive, rotated_stream(1, 0), disjoint(8), 1, 0));
    cfg.schedule = LrSchedule::constant(f64::MAX);
    assert!(matches!(harness::run_method(&cfg), Err(Error::Numeric(_))));
}

#[test]
fn budget_violation_is_flagged_not_fatal() {
    let mut cfg = quick(config(Method::Naive, rotated_stream(3, 1), disjoint(8), 1, 1));
    cfg.energy_budget = Some(1.0);
    let r = harness::run_method(&cfg).unwrap();
    assert_eq!(r.metrics.steps.len(), 3);
    for s in &r.metrics.steps {
        assert_eq!(s.budget_ok, Some(false));
        assert!(s.budget_margin.unwrap() < 0.0);
    }
    cfg.energy_budget = Some(1e15);
    let r = harness::run_method(&cfg).unwrap();
    assert!(r.metrics.steps.iter().all(|s| s.budget_ok == Some(true)));
}

#[test]
fn runs_are_deterministic() {
    let cfg = quick(config(Method::Papi, rotated_stream(2, 6), disjoint(16), 2, 6));
    assert_eq!(harness::run_method(&cfg).unwrap(), harness::run_method(&cfg).unwrap());
}

#[test]
fn comparison_rows_and_self_ties() {
    let stream = rotated_stream(2, 2);
    let cfgs: Vec<RunConfig> = [(Method::Papi, 2), (Method::EwcMono, 1), (Method::Naive, 1)]
        .into_iter()
        .map(|(m, k)| quick(config(m, stream.clone(), disjoint(16), k, 2)))
        .collect();
    let (cmp, reports) = harness::compare(&cfgs).unwrap();
    assert_eq!(cmp.runs.len(), 3);
    assert_eq!(cmp.rows.len(), 3 * 3);
    assert!(cmp.row(Check::Energy, Method::Papi, Method::EwcMono).is_some());

    let same = harness::compare_reports(&[reports[0].clone(), reports[0].clone()]).unwrap();
    assert_eq!(same.rows.len(), 3);
    for r in &same.rows {
        assert_eq!(r.left_value, r.right_value);
        assert_eq!(r.holds, None);
    }

    let mut other = cfgs[1].clone();
    other.stream.seed += 1;
    assert!(matches!(harness::compare(&[cfgs[0].clone(), other]), Err(Error::Config(_))));
    assert!(harness::compare(&[]).is_err());
}

#[test]
fn emitted_files_are_reproducible_and_round_trip() {
    let cfg = quick(config(Method::Papi, rotated_stream(2, 9), disjoint(16), 2, 9));
    let report = harness::run_method(&cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = harness::emit_report(&report, a.path()).unwrap();
    let pb = harness::emit_report(&report, b.path()).unwrap();
    assert_eq!(pa.len(), 4);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let summary = pa.iter().find(|p| p.to_str().unwrap().ends_with("-summary.json")).unwrap();
    assert_eq!(harness::read_summary(summary).unwrap(), report);

    let index = harness::index_dir(a.path()).unwrap();
    let text = std::fs::read_to_string(index).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().contains(",papi,2,2,"));
}

#[test]
fn empty_report_emits_headers_only() {
    let cfg = quick(config(Method::Naive, rotated_stream(1, 0), disjoint(8), 1, 0));
    let mut report = harness::run_method(&cfg).unwrap();
    report.metrics = MetricsReport::default();
    let dir = tempfile::tempdir().unwrap();
    for p in harness::emit_report(&report, dir.path()).unwrap() {
        let name = p.to_str().unwrap().to_string();
        if name.ends_with(".csv") {
            assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1, "{name}");
        }
    }
}

#[test]
fn sweep_sorts_rows_and_keeps_failures() {
    let base = quick(config(Method::PapiOracleRouting, rotated_stream(2, 5), disjoint(24), 1, 5));
    let table = harness::sweep_k(&base, &[4, 1, 2, 2, 5]).unwrap();
    let ks: Vec<usize> = table.rows.iter().map(|r| r.k).collect();
    assert_eq!(ks, vec![1, 2, 4, 5]);
    // 24 hidden units do not split five ways
    let bad = table.rows.iter().find(|r| r.k == 5).unwrap();
    assert!(bad.error.is_some() && bad.stability.is_none());
    let ok: Vec<_> = table.rows.iter().filter(|r| r.error.is_none()).collect();
    assert_eq!(ok.len(), 3);
    for w in ok.windows(2) {
        assert!(w[1].inference_per_sample.unwrap() < w[0].inference_per_sample.unwrap());
        assert!(w[1].active_fraction.unwrap() < w[0].active_fraction.unwrap());
    }
    assert_eq!(table.to_csv().lines().count(), 5);
    assert!(harness::sweep_k(&RunConfig { method: Method::Naive, ..base.clone() }, &[1]).is_err());
    assert!(harness::sweep_k(&base, &[]).is_err());
}

#[test]
fn inference_energy_per_sample_falls_with_k() {
    let stream = rotated_stream(2, 1);
    let per_sample = |k| {
        let r = harness::run_method(&quick(config(Method::PapiOracleRouting, stream.clone(), disjoint(32), k, 1))).unwrap();
        r.energy(&[Phase::Inference]) / r.ledger.phase(Phase::Inference).passes as f64
    };
    let e: Vec<f64> = [1, 2, 4, 8].into_iter().map(per_sample).collect();
    assert!(e.windows(2).all(|w| w[1] < w[0]), "{e:?}");
}
