use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::config::{FisherKind, Method, RunConfig};
use crate::energy::{self, EnergyLedger, Phase};
use crate::error::{Error, Result};
use crate::metrics::{self, LossTriple, MetricsReport, PairMetrics, StepMetrics};
use crate::nn::{self, Target};
use crate::pathway::{self, ParamStore, PathwayLayout};
use crate::regularization::{self, FisherInfo, TaskSnapshot};
use crate::router::{self, Router, RouterSample, RoutingRecord};
use crate::snapshot::{RunState, StoreDump};
use crate::tasks::{self, Batch, TaskSpec};
use crate::util;

/// Routing decisions recorded on one task's router inputs after training it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRouting {
    pub t: usize,
    pub task_id: usize,
    pub assigned_pathway: usize,
    pub records: Vec<RoutingRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    /// Generator ids of the tasks in training order.
    pub task_order: Vec<usize>,
    pub metrics: MetricsReport,
    pub ledger: EnergyLedger,
    pub routing: Vec<TaskRouting>,
    pub state: RunState,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.task_order == other.task_order
            && self.metrics == other.metrics
            && self.ledger == other.ledger
            && self.routing == other.routing
            && self.state == other.state
    }
}

impl RunReport {
    pub fn energy(&self, phases: &[Phase]) -> f64 {
        energy::total_energy(&self.ledger, &self.config.cost_model, phases)
    }

    pub fn energy_total(&self) -> f64 {
        self.energy(&Phase::ALL)
    }

    /// Accuracy of stream position `i` after training position `t`.
    pub fn accuracy(&self, i: usize, t: usize) -> Option<f64> {
        if i == t {
            return self.metrics.steps.iter().find(|s| s.t == t).map(|s| s.accuracy);
        }
        self.metrics.pairs.iter().find(|p| p.i == i && p.t == t).map(|p| p.accuracy)
    }
}

/// Removes the component of `grad` that conflicts with `ref_grad`.
pub fn agem_project(grad: &[f64], ref_grad: &[f64]) -> Result<Vec<f64>> {
    if grad.len() != ref_grad.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, reference {}",
            grad.len(),
            ref_grad.len()
        )));
    }
    let gr = util::dot(grad, ref_grad);
    let rr = util::dot(ref_grad, ref_grad);
    if gr >= 0.0 || rr == 0.0 {
        return Ok(grad.to_vec());
    }
    let c = gr / rr;
    Ok(grad.iter().zip(ref_grad).map(|(g, r)| g - c * r).collect())
}

struct TaskData {
    spec: TaskSpec,
    train: Batch,
    eval: Batch,
    eval_seed: u64,
    loss_random: Option<f64>,
    loss_snapshot: f64,
}

struct Eval {
    loss: f64,
    accuracy: f64,
    routed: usize,
    routed_right: usize,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    layout: PathwayLayout,
    store: ParamStore,
    router: Option<Router>,
    ledger: EnergyLedger,
    snapshots: Vec<TaskSnapshot>,
    fishers: Vec<FisherInfo>,
    memory: Vec<(Vec<f64>, Target)>,
    step: u64,
    router_step: u64,
}

/// Quadratic penalties folded into per-coordinate curvature `a` and
/// `b = a * anchor`, so the penalty gradient is `a * theta - b`.
struct Penalty {
    a: Vec<f64>,
    b: Vec<f64>,
    terms: u64,
}

impl<'a> Runner<'a> {
    fn assigned(&self, t: usize) -> usize {
        t % self.cfg.k
    }

    fn penalty(&self, k: usize) -> Result<Penalty> {
        let n = self.store.len();
        let mut p = Penalty {
            a: vec![0.0; n],
            b: vec![0.0; n],
            terms: 0,
        };
        let active = self.store.active_params(k)?;
        let cfg = self.cfg;
        if cfg.method.is_pathway() && cfg.pathway_reg_weight > 0.0 {
            for s in &self.snapshots {
                for j in active.iter() {
                    let c = 2.0 * cfg.pathway_reg_weight * s.usage[j];
                    if c > 0.0 {
                        p.a[j] += c;
                        p.b[j] += c * s.theta[j];
                        p.terms += 1;
                    }
                }
            }
        }
        if cfg.uses_fisher() && cfg.lambda > 0.0 {
            for f in &self.fishers {
                let diag = f.diagonal();
                let anchor = &self.snapshots[f.task].theta;
                for j in active.iter() {
                    let c = cfg.lambda * diag[j];
                    if c > 0.0 {
                        p.a[j] += c;
                        p.b[j] += c * anchor[j];
                        p.terms += 1;
                    }
                }
            }
        }
        Ok(p)
    }

    /// `theta <- argmin_x <g, x> + |x - theta|^2 / (2 eta) + penalty(x)` on the
    /// active coordinates; exact for the quadratic penalties at any step size.
    fn apply_step(&mut self, k: usize, grad: &[f64], pen: &Penalty) -> Result<()> {
        if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient entry {j} is {}", grad[j])));
        }
        let eta = self.cfg.schedule.rate(self.step);
        let active = self.store.active_params(k)?;
        let theta = self.store.theta_mut();
        for j in active.iter() {
            theta[j] = (theta[j] - eta * grad[j] + eta * pen.b[j]) / (1.0 + eta * pen.a[j]);
        }
        if pen.terms > 0 {
            self.ledger.record_work(Phase::Train, 4 * pen.terms, pen.terms)?;
        }
        Ok(())
    }

    fn train_task(&mut self, t: usize, data: &TaskData) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let k = self.assigned(t);
        let pen = self.penalty(k)?;
        let targets = data.train.targets();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut mem_rng = util::rng(cfg.seed, util::mix_seed(0x6e6d, t as u64));
        let mut epoch_losses = Vec::with_capacity(cfg.epochs_per_task);
        for epoch in 0..cfg.epochs_per_task {
            order.shuffle(&mut util::rng(cfg.seed, util::mix_seed(0xe0c0 + t as u64, epoch as u64)));
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| data.train.xs[i].clone()).collect();
                let ts: Vec<Target> = chunk.iter().map(|&i| targets[i].clone()).collect();
                let g = pathway::pathway_batch_grad(&self.store, &self.layout, k, &xs, &ts, &mut self.ledger, Phase::Train)?;
                if !g.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "task {t}, epoch {epoch}: training loss is {}",
                        g.loss
                    )));
                }
                total += g.loss * chunk.len() as f64;
                let mut grad = g.grad;
                if cfg.method == Method::AgemLite && !self.memory.is_empty() {
                    let m = cfg.batch_size.min(self.memory.len());
                    let picks: Vec<&(Vec<f64>, Target)> =
                        self.memory.choose_multiple(&mut mem_rng, m).collect();
                    let mx: Vec<Vec<f64>> = picks.iter().map(|p| p.0.clone()).collect();
                    let mt: Vec<Target> = picks.iter().map(|p| p.1.clone()).collect();
                    let r = pathway::pathway_batch_grad(&self.store, &self.layout, k, &mx, &mt, &mut self.ledger, Phase::Train)?;
                    grad = agem_project(&grad, &r.grad)?;
                    let n = grad.len() as u64;
                    self.ledger.record_work(Phase::Train, 6 * n, 2 * n)?;
                }
                self.step += 1;
                self.apply_step(k, &grad, &pen)?;
            }
            epoch_losses.push(total / data.train.len() as f64);
        }
        Ok(epoch_losses)
    }

    fn router_inputs(&mut self, j: usize, data: &TaskData) -> Result<Vec<RouterSample>> {
        let n = self.cfg.router_samples_per_task.min(data.train.len());
        let target = self.assigned(j);
        data.train.xs[..n]
            .iter()
            .map(|x| {
                let h = pathway::encode(&self.store, &self.layout, x, &mut self.ledger, Phase::Routing)?;
                Ok(RouterSample { h, task: j, target })
            })
            .collect()
    }

    fn train_router(&mut self, t: usize, tasks: &[TaskData]) -> Result<()> {
        let mut samples = Vec::new();
        for (j, d) in tasks.iter().enumerate().take(t + 1) {
            samples.extend(self.router_inputs(j, d)?);
        }
        let cfg = self.cfg;
        let router = self.router.as_mut().expect("learned routing has a router");
        router.embed_task(t);
        for epoch in 0..cfg.router_epochs {
            samples.shuffle(&mut util::rng(cfg.seed, util::mix_seed(0x7e00 + t as u64, epoch as u64)));
            for chunk in samples.chunks(cfg.batch_size) {
                self.router_step += 1;
                let loss = router.train_step(chunk, &cfg.router_schedule, self.router_step, &mut self.ledger)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("task {t}: router loss is {loss}")));
                }
            }
        }
        Ok(())
    }

    /// Usage snapshot for task `t` plus its routing records.
    fn usage(&mut self, t: usize, data: &TaskData) -> Result<(TaskSnapshot, Vec<RoutingRecord>)> {
        let k = self.assigned(t);
        if self.router.is_none() {
            let mut counts = vec![0u64; self.cfg.k];
            counts[k] = 1;
            return Ok((TaskSnapshot::from_counts(t, &self.store, &counts)?, Vec::new()));
        }
        let inputs = self.router_inputs(t, data)?;
        let router = self.router.as_ref().expect("checked above");
        let tau = router.task_embedding(t);
        let mut records = Vec::with_capacity(inputs.len());
        for (idx, s) in inputs.iter().enumerate() {
            let d = router.route(&s.h, &tau, &mut self.ledger)?;
            records.push(RoutingRecord {
                input: idx,
                task: t,
                pathway: d.pathway,
                alpha: d.alpha,
            });
        }
        Ok((TaskSnapshot::from_routing(t, &self.store, &records)?, records))
    }

    /// Mean loss and accuracy on task `i`'s evaluation set. With `route` set
    /// and a router present each input goes where the router sends it.
    fn evaluate(&mut self, i: usize, data: &TaskData, route: bool) -> Result<Eval> {
        let assigned = self.assigned(i);
        let head = self.layout.head(assigned).head;
        let mut loss = 0.0;
        let mut hits = 0usize;
        let mut routed_right = 0usize;
        let tau = match (&self.router, route) {
            (Some(r), true) => Some(r.task_embedding(i)),
            _ => None,
        };
        for (x, &y) in data.eval.xs.iter().zip(&data.eval.labels) {
            let k = match (&self.router, &tau) {
                (Some(r), Some(tau)) => {
                    let h = pathway::encode(&self.store, &self.layout, x, &mut self.ledger, Phase::Routing)?;
                    let k = r.route(&h, tau, &mut self.ledger)?.pathway;
                    if k == assigned {
                        routed_right += 1;
                    }
                    k
                }
                _ => assigned,
            };
            let (probs, cache) =
                pathway::pathway_forward(&self.store, &self.layout, k, x, &mut self.ledger, Phase::Inference)?;
            loss += nn::head_loss_grad(head, cache.logits(), &Target::Class(y))?.0;
            if router::argmax(&probs) == y {
                hits += 1;
            }
        }
        let n = data.eval.len() as f64;
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("evaluation loss on task {i} is {loss}")));
        }
        Ok(Eval {
            loss,
            accuracy: hits as f64 / n,
            routed: if tau.is_some() { data.eval.len() } else { 0 },
            routed_right,
        })
    }

    fn random_loss(&self, i: usize, data: &mut TaskData) -> Result<f64> {
        if let Some(v) = data.loss_random {
            return Ok(v);
        }
        let rb = tasks::random_baseline_loss(
            &data.spec,
            &self.layout,
            self.cfg.k,
            self.assigned(i),
            self.cfg.baseline_inits,
            data.eval.len(),
            data.eval_seed,
        )?;
        data.loss_random = Some(rb.mean);
        Ok(rb.mean)
    }

    fn estimate_fisher(&mut self, t: usize, data: &TaskData) -> Result<FisherInfo> {
        let k = self.assigned(t);
        let seed = util::mix_seed(self.cfg.seed, 0xf000 + t as u64);
        let n = self.cfg.fisher_samples;
        match self.cfg.fisher_kind {
            FisherKind::Diagonal => regularization::estimate_fisher_diag(
                &self.store, &self.layout, k, t, &data.train.xs, n, seed, &mut self.ledger,
            ),
            FisherKind::Full => regularization::estimate_fisher_full(
                &self.store, &self.layout, k, t, &data.train.xs, n, seed, &mut self.ledger,
            ),
        }
    }
}

/// Runs `cfg.method` over the configured stream.
pub fn run_method(cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let layout = cfg.build_layout()?;
    let stream = tasks::make_stream(&cfg.stream)?;
    let store = ParamStore::build(&layout, cfg.k, util::mix_seed(cfg.seed, 0x5701))?;
    let router = if cfg.method.learned_routing() {
        Some(Router::new(
            cfg.k,
            layout.feature_width(),
            cfg.router.clone(),
            util::mix_seed(cfg.seed, 0x2047),
        )?)
    } else {
        None
    };
    let mut runner = Runner {
        cfg,
        layout,
        store,
        router,
        ledger: EnergyLedger::new(),
        snapshots: Vec::new(),
        fishers: Vec::new(),
        memory: Vec::new(),
        step: 0,
        router_step: 0,
    };
    let mut data: Vec<TaskData> = Vec::with_capacity(stream.len());
    let mut report = MetricsReport::default();
    let mut routing = Vec::new();
    for spec in &stream.tasks {
        let train = spec.sample_batch(cfg.stream.n_train, util::mix_seed(cfg.stream.seed, 0x7a1))?;
        let eval_seed = util::mix_seed(cfg.stream.seed, 0xe7a1);
        let eval = spec.sample_batch(cfg.stream.n_eval, eval_seed)?;
        data.push(TaskData {
            spec: spec.clone(),
            train,
            eval,
            eval_seed,
            loss_random: None,
            loss_snapshot: f64::NAN,
        });
    }

    for t in 0..data.len() {
        let before = runner.evaluate(t, &data[t], false)?;
        let loss_random_t = runner.random_loss(t, &mut data[t])?;
        let train_loss = runner.train_task(t, &data[t])?;

        if cfg.method.learned_routing() {
            runner.train_router(t, &data)?;
        }
        let (snap, records) = runner.usage(t, &data[t])?;
        runner.snapshots.push(snap);
        if cfg.uses_fisher() {
            let f = runner.estimate_fisher(t, &data[t])?;
            runner.fishers.push(f);
        }
        if cfg.method == Method::AgemLite {
            let m = cfg.memory_per_task.min(data[t].train.len());
            for i in 0..m {
                runner
                    .memory
                    .push((data[t].train.xs[i].clone(), Target::Class(data[t].train.labels[i])));
            }
        }
        routing.push(TaskRouting {
            t,
            task_id: data[t].spec.task_id,
            assigned_pathway: runner.assigned(t),
            records,
        });

        let mut routed = 0usize;
        let mut routed_right = 0usize;
        let mut stabilities = Vec::new();
        let mut current = None;
        for i in 0..=t {
            let e = runner.evaluate(i, &data[i], true)?;
            routed += e.routed;
            routed_right += e.routed_right;
            if i == t {
                data[t].loss_snapshot = e.loss;
                current = Some(e);
                continue;
            }
            let losses = LossTriple {
                loss_current: e.loss,
                loss_snapshot: data[i].loss_snapshot,
                loss_random: runner.random_loss(i, &mut data[i])?,
            };
            let stability = metrics::stability_ratio(&losses)?;
            stabilities.push(stability.clamped);
            let (predicted, bound) = match runner.fishers.iter().find(|f| f.task == i) {
                Some(f) => {
                    let delta: Vec<f64> = runner
                        .store
                        .theta()
                        .iter()
                        .zip(&runner.snapshots[i].theta)
                        .map(|(a, b)| a - b)
                        .collect();
                    let p = regularization::predict_forgetting(&delta, f)?;
                    (Some(p.quadratic), Some(p.bound))
                }
                None => (None, None),
            };
            report.pairs.push(PairMetrics {
                i,
                t,
                losses,
                accuracy: e.accuracy,
                stability,
                forgetting: metrics::forgetting(e.loss, losses.loss_snapshot),
                predicted_forgetting: predicted,
                forgetting_bound: bound,
            });
        }
        let current = current.expect("task t is evaluated");
        let budget = match cfg.energy_budget {
            Some(b) => Some(energy::check_budget(&runner.ledger, &cfg.cost_model, b)?),
            None => None,
        };
        report.steps.push(StepMetrics {
            t,
            loss: current.loss,
            accuracy: current.accuracy,
            loss_before: before.loss,
            loss_random: loss_random_t,
            stability: if t == 0 { None } else { Some(metrics::average_stability(&stabilities)?) },
            plasticity: if t == 0 {
                None
            } else {
                Some(metrics::plasticity_ratio(loss_random_t, current.loss, before.loss)?)
            },
            routing_accuracy: (routed > 0).then(|| routed_right as f64 / routed as f64),
            train_loss,
            energy_total: energy::total_energy(&runner.ledger, &cfg.cost_model, &Phase::ALL),
            budget_ok: budget.map(|b| b.ok),
            budget_margin: budget.map(|b| b.margin),
        });
    }

    runner.ledger.seal();
    let state = RunState {
        store: StoreDump::new(&runner.layout, &runner.store)?,
        router: runner.router,
        fishers: runner.fishers,
        snapshots: runner.snapshots,
    };
    Ok(RunReport {
        config: cfg.clone(),
        task_order: stream.tasks.iter().map(|s| s.task_id).collect(),
        metrics: report,
        ledger: runner.ledger,
        routing,
        state,
        wall_time: started.elapsed(),
    })
}
