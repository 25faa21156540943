use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::run::{run_method, RunReport};
use crate::energy::{EnergyLedger, Phase};
use crate::error::{Error, Result};
use crate::nn::{Activation, LrSchedule};
use crate::router::{self, Router, RouterConfig, RouterSample};
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub stability: Option<f64>,
    pub plasticity: Option<f64>,
    pub energy_total: Option<f64>,
    /// Inference-phase energy per evaluated sample.
    pub inference_per_sample: Option<f64>,
    /// Mean active parameters over the store size.
    pub active_fraction: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub base: RunConfig,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of final stability against K over successful rows.
    pub gain_per_pathway: Option<f64>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,stability,plasticity,energy_total,inference_per_sample,active_fraction,error\n");
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.k,
                f(r.stability),
                f(r.plasticity),
                f(r.energy_total),
                f(r.inference_per_sample),
                f(r.active_fraction),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        out
    }
}

fn sweep_row(k: usize, result: Result<RunReport>) -> SweepRow {
    match result {
        Ok(r) => {
            let inf = r.ledger.phase(Phase::Inference);
            let store = &r.state.store.store;
            let mean_active = (0..store.n_pathways())
                .map(|p| store.active_len(p).unwrap_or(0))
                .sum::<usize>() as f64
                / store.n_pathways() as f64;
            SweepRow {
                k,
                stability: r.metrics.final_stability(),
                plasticity: r.metrics.mean_plasticity(),
                energy_total: Some(r.energy_total()),
                inference_per_sample: (inf.passes > 0).then(|| r.energy(&[Phase::Inference]) / inf.passes as f64),
                active_fraction: Some(mean_active / store.len() as f64),
                error: None,
            }
        }
        Err(e) => SweepRow {
            k,
            stability: None,
            plasticity: None,
            energy_total: None,
            inference_per_sample: None,
            active_fraction: None,
            error: Some(e.to_string()),
        },
    }
}

/// One pathway run per `K` (in parallel), with the head budget held fixed.
/// Failed runs become rows carrying the error.
pub fn sweep_k(base: &RunConfig, ks: &[usize]) -> Result<SweepTable> {
    if ks.is_empty() {
        return Err(Error::Config("K list is empty".into()));
    }
    if !base.method.is_pathway() {
        return Err(Error::Config(format!(
            "sweep_k needs a pathway method, got {}",
            base.method.name()
        )));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let configs: Vec<RunConfig> = ks
        .iter()
        .map(|&k| RunConfig { k, ..base.clone() })
        .collect();
    let results = run_parallel(&configs);
    let rows: Vec<SweepRow> = ks.iter().zip(results).map(|(&k, r)| sweep_row(k, r)).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.stability.map(|s| (r.k as f64, s)))
        .unzip();
    let gain_per_pathway = (xs.len() >= 2 && xs.iter().any(|x| *x != xs[0])).then(|| util::ols_slope(&xs, &ys));
    Ok(SweepTable {
        base: base.clone(),
        rows,
        gain_per_pathway,
    })
}

/// Runs every config on its own thread.
pub fn run_parallel(configs: &[RunConfig]) -> Vec<Result<RunReport>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_method(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("run panicked".into()))))
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Forgetting,
    Energy,
    FinalLoss,
}

impl Check {
    pub const ALL: [Check; 3] = [Check::Forgetting, Check::Energy, Check::FinalLoss];

    pub fn name(self) -> &'static str {
        match self {
            Check::Forgetting => "forgetting",
            Check::Energy => "energy",
            Check::FinalLoss => "final_loss",
        }
    }

    fn value(self, r: &RunReport) -> f64 {
        match self {
            Check::Forgetting => r.metrics.final_forgetting().unwrap_or(0.0),
            Check::Energy => r.energy_total(),
            Check::FinalLoss => r.metrics.final_mean_loss().unwrap_or(f64::NAN),
        }
    }

    /// Expected position of a method in the ordering, smaller is lower.
    fn rank(self, m: Method) -> Option<u8> {
        match (self, m) {
            (Check::Forgetting, Method::Papi | Method::PapiOracleRouting) => Some(0),
            (Check::Forgetting, Method::EwcMono) => Some(1),
            (Check::Forgetting, Method::Naive) => Some(2),
            (Check::Energy, Method::Papi | Method::PapiOracleRouting) => Some(0),
            (Check::Energy, Method::EwcMono) => Some(1),
            (Check::Energy, Method::AgemLite) => Some(2),
            _ => None,
        }
    }

    /// Forgetting is a weak ordering, energy a strict one.
    fn strict(self) -> bool {
        self == Check::Energy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Less,
    Equal,
    Greater,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub check: Check,
    pub left: usize,
    pub right: usize,
    pub left_method: Method,
    pub right_method: Method,
    pub left_value: f64,
    pub right_value: f64,
    pub relation: Relation,
    /// Whether the expected ordering holds; `None` without an expectation.
    pub holds: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub config_hash: String,
    pub forgetting: f64,
    pub energy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<RunSummary>,
    /// One row per check and unordered pair of runs.
    pub rows: Vec<TrendRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("check,left,right,left_method,right_method,left_value,right_value,relation,holds\n");
        for r in &self.rows {
            let rel = match r.relation {
                Relation::Less => "less",
                Relation::Equal => "equal",
                Relation::Greater => "greater",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.check.name(),
                r.left,
                r.right,
                r.left_method.name(),
                r.right_method.name(),
                r.left_value,
                r.right_value,
                rel,
                r.holds.map(|h| h.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn row(&self, check: Check, left: Method, right: Method) -> Option<&TrendRow> {
        self.rows
            .iter()
            .find(|r| r.check == check && r.left_method == left && r.right_method == right)
    }
}

/// Builds trend rows from finished runs of one stream and seed.
pub fn compare_reports(reports: &[RunReport]) -> Result<Comparison> {
    let Some(first) = reports.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    for r in reports {
        if r.config.stream != first.config.stream || r.config.seed != first.config.seed {
            return Err(Error::Config(format!(
                "{} run does not share the stream and seed of the {} run",
                r.config.method.name(),
                first.config.method.name()
            )));
        }
    }
    let runs: Vec<RunSummary> = reports
        .iter()
        .map(|r| RunSummary {
            method: r.config.method,
            config_hash: r.config.hash(),
            forgetting: Check::Forgetting.value(r),
            energy: Check::Energy.value(r),
            final_loss: Check::FinalLoss.value(r),
        })
        .collect();
    let mut rows = Vec::new();
    for check in Check::ALL {
        for a in 0..reports.len() {
            for b in a + 1..reports.len() {
                let (ma, mb) = (reports[a].config.method, reports[b].config.method);
                let (va, vb) = (check.value(&reports[a]), check.value(&reports[b]));
                let relation = match va.partial_cmp(&vb) {
                    Some(std::cmp::Ordering::Less) => Relation::Less,
                    Some(std::cmp::Ordering::Greater) => Relation::Greater,
                    _ => Relation::Equal,
                };
                let holds = match (check.rank(ma), check.rank(mb)) {
                    (Some(ra), Some(rb)) if ra != rb => {
                        let (lo, hi) = if ra < rb { (va, vb) } else { (vb, va) };
                        Some(if check.strict() { lo < hi } else { lo <= hi })
                    }
                    _ => None,
                };
                rows.push(TrendRow {
                    check,
                    left: a,
                    right: b,
                    left_method: ma,
                    right_method: mb,
                    left_value: va,
                    right_value: vb,
                    relation,
                    holds,
                });
            }
        }
    }
    Ok(Comparison { runs, rows })
}

/// Runs all configs in parallel and compares them.
pub fn compare(configs: &[RunConfig]) -> Result<(Comparison, Vec<RunReport>)> {
    let Some(first) = configs.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    if let Some(c) = configs
        .iter()
        .find(|c| c.stream != first.stream || c.seed != first.seed)
    {
        return Err(Error::Config(format!(
            "{} config does not share the stream and seed of the first config",
            c.method.name()
        )));
    }
    let reports = run_parallel(configs).into_iter().collect::<Result<Vec<_>>>()?;
    Ok((compare_reports(&reports)?, reports))
}

/// Stochastic router training on a strongly convex surrogate: a linear
/// scorer with fixed task embeddings and weight decay, trained on a fixed
/// labelled set with `eta_t = eta0 / (1 + beta t)` and single-sample steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub n_points: usize,
    pub feature_dim: usize,
    pub n_tasks: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub weight_decay: f64,
    pub eta0: f64,
    pub beta: f64,
    /// Fraction of labels flipped to a random pathway.
    pub label_noise: f64,
    pub checkpoints: Vec<u64>,
    pub n_seeds: usize,
    pub reference_iters: usize,
    pub reference_rate: f64,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            n_points: 512,
            feature_dim: 4,
            n_tasks: 4,
            k: 4,
            embed_dim: 4,
            weight_decay: 0.1,
            eta0: 1.0,
            beta: 0.1,
            label_noise: 0.2,
            checkpoints: vec![100, 178, 316, 562, 1000, 1778, 3162, 5623, 10_000],
            n_seeds: 16,
            reference_iters: 3000,
            reference_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub checkpoints: Vec<u64>,
    /// Seed-averaged `|psi_t - psi*|^2`.
    pub sq_distance: Vec<f64>,
    /// Seed-averaged routing discrepancy to the reference router.
    pub discrepancy: Vec<f64>,
    /// Log-log slope of `sq_distance` against `t`.
    pub slope: f64,
    /// Log-log slope of the discrepancy over checkpoints where it is positive.
    pub discrepancy_slope: Option<f64>,
    pub reference_loss: f64,
}

impl ConvergenceReport {
    /// Discrepancy averaged over consecutive windows of `width` checkpoints.
    pub fn windowed_discrepancy(&self, width: usize) -> Vec<f64> {
        self.discrepancy
            .chunks(width.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

pub fn routing_convergence(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if cfg.checkpoints.is_empty() || cfg.checkpoints.windows(2).any(|w| w[0] >= w[1]) || cfg.checkpoints[0] == 0 {
        return Err(Error::Config("checkpoints must be positive and strictly increasing".into()));
    }
    if cfg.n_points == 0 || cfg.n_seeds == 0 || cfg.n_tasks == 0 {
        return Err(Error::Config("n_points, n_seeds and n_tasks must be >= 1".into()));
    }
    if cfg.weight_decay <= 0.0 {
        return Err(Error::Config("the surrogate needs weight_decay > 0".into()));
    }
    let rc = RouterConfig {
        embed_dim: cfg.embed_dim,
        hidden: Vec::new(),
        activation: Activation::Identity,
        weight_decay: cfg.weight_decay,
        train_embeddings: false,
    };
    let mut base = Router::new(cfg.k, cfg.feature_dim, rc, util::mix_seed(cfg.seed, 1))?;
    for task in 0..cfg.n_tasks {
        base.embed_task(task);
    }
    let mut rng = util::rng(cfg.seed, 0xc0de);
    let teacher: Vec<Vec<f64>> = (0..cfg.k)
        .map(|_| (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let data: Vec<RouterSample> = (0..cfg.n_points)
        .map(|i| {
            let h: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let task = i % cfg.n_tasks;
            let scores: Vec<f64> = teacher
                .iter()
                .enumerate()
                .map(|(k, w)| util::dot(w, &h) + if k == task % cfg.k { 1.0 } else { 0.0 })
                .collect();
            let target = if rng.random::<f64>() < cfg.label_noise {
                rng.random_range(0..cfg.k)
            } else {
                router::argmax(&scores)
            };
            RouterSample { h, task, target }
        })
        .collect();

    let mut scratch = EnergyLedger::new();
    let mut reference = base.clone();
    let full = LrSchedule::constant(cfg.reference_rate);
    let mut reference_loss = f64::NAN;
    for it in 1..=cfg.reference_iters {
        reference_loss = reference.train_step(&data, &full, it as u64, &mut scratch)?;
    }

    let schedule = LrSchedule::inverse_t(cfg.eta0, cfg.beta);
    let last = *cfg.checkpoints.last().expect("nonempty");
    let mut sq = vec![0.0; cfg.checkpoints.len()];
    let mut disc = vec![0.0; cfg.checkpoints.len()];
    for s in 0..cfg.n_seeds {
        let mut r = base.clone();
        let mut pick = util::rng(cfg.seed, util::mix_seed(0x5eed, s as u64));
        let mut c = 0;
        for t in 1..=last {
            let i = pick.random_range(0..data.len());
            r.train_step(std::slice::from_ref(&data[i]), &schedule, t, &mut scratch)?;
            if t == cfg.checkpoints[c] {
                sq[c] += r
                    .psi()
                    .iter()
                    .zip(reference.psi())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                disc[c] += router::routing_discrepancy(&r, &reference, &data)?;
                c += 1;
            }
        }
        scratch = EnergyLedger::new();
    }
    let n = cfg.n_seeds as f64;
    sq.iter_mut().for_each(|v| *v /= n);
    disc.iter_mut().for_each(|v| *v /= n);
    let lx: Vec<f64> = cfg.checkpoints.iter().map(|&t| (t as f64).ln()).collect();
    let ly: Vec<f64> = sq.iter().map(|v| v.ln()).collect();
    let slope = util::ols_slope(&lx, &ly);
    let (dx, dy): (Vec<f64>, Vec<f64>) = lx
        .iter()
        .zip(&disc)
        .filter(|(_, d)| **d > 0.0)
        .map(|(x, d)| (*x, d.ln()))
        .unzip();
    let discrepancy_slope = (dx.len() >= 2).then(|| util::ols_slope(&dx, &dy));
    Ok(ConvergenceReport {
        checkpoints: cfg.checkpoints.clone(),
        sq_distance: sq,
        discrepancy: disc,
        slope,
        discrepancy_slope,
        reference_loss,
    })
}
