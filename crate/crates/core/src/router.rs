//! Meta-network pathway selection.
//!
//! Each task id owns a learned embedding `tau`. The router concatenates the
//! shared encoder features with `tau`, scores the `K` pathways with a small
//! dense network and picks the arg-max (lowest index on ties).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{Counter, EnergyLedger, Phase};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Head, LrSchedule, NetArch, Target};
use crate::util;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    /// Task embedding width `d`.
    pub embed_dim: usize,
    /// Hidden widths of the scorer; empty gives a linear scorer.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// L2 coefficient on the scorer parameters.
    pub weight_decay: f64,
    pub train_embeddings: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            embed_dim: 8,
            hidden: vec![16],
            activation: Activation::Tanh,
            weight_decay: 0.0,
            train_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    config: RouterConfig,
    n_pathways: usize,
    feature_width: usize,
    seed: u64,
    arch: NetArch,
    psi: Vec<f64>,
    embed: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub pathway: usize,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub input: usize,
    pub task: usize,
    pub pathway: usize,
    pub alpha: Vec<f64>,
}

/// Features, task id and (for training and accuracy) the target pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterSample {
    pub h: Vec<f64>,
    pub task: usize,
    pub target: usize,
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl Router {
    pub fn new(n_pathways: usize, feature_width: usize, config: RouterConfig, seed: u64) -> Result<Self> {
        if n_pathways == 0 {
            return Err(Error::Config("router needs K >= 1".into()));
        }
        if config.embed_dim == 0 {
            return Err(Error::Config("task embedding width must be >= 1".into()));
        }
        if !(config.weight_decay.is_finite() && config.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "router weight decay must be >= 0, got {}",
                config.weight_decay
            )));
        }
        let mut widths = vec![feature_width + config.embed_dim];
        widths.extend(&config.hidden);
        widths.push(n_pathways);
        let arch = NetArch::new(widths, config.activation, Head::SoftmaxXent)?;
        let psi = arch.init_params(&mut util::rng(seed, 0x7073_69));
        Ok(Router {
            config,
            n_pathways,
            feature_width,
            seed,
            arch,
            psi,
            embed: BTreeMap::new(),
        })
    }

    pub fn n_pathways(&self) -> usize {
        self.n_pathways
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn psi_mut(&mut self) -> &mut [f64] {
        &mut self.psi
    }

    fn fresh_embedding(&self, task: usize) -> Vec<f64> {
        let mut rng = util::rng(self.seed, 0xe3b0_0000 ^ task as u64);
        (0..self.config.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Embedding for `task`, allocating a seeded row on first use.
    pub fn embed_task(&mut self, task: usize) -> Vec<f64> {
        if let Some(row) = self.embed.get(&task) {
            return row.clone();
        }
        let row = self.fresh_embedding(task);
        self.embed.insert(task, row.clone());
        row
    }

    /// Embedding for `task` without registering it.
    pub fn task_embedding(&self, task: usize) -> Vec<f64> {
        self.embed
            .get(&task)
            .cloned()
            .unwrap_or_else(|| self.fresh_embedding(task))
    }

    pub fn registered_tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.embed.keys().copied()
    }

    /// Scorer FLOPs of one routing decision.
    pub fn decision_flops(&self) -> u64 {
        self.arch.forward_flops()
    }

    fn input(&self, h: &[f64], tau: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.feature_width || tau.len() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "router expects features {} + embedding {}, got {} + {}",
                self.feature_width,
                self.config.embed_dim,
                h.len(),
                tau.len()
            )));
        }
        Ok(h.iter().chain(tau).copied().collect())
    }

    /// Raw scores `alpha` for `z = [h, tau]`.
    pub fn scores(&self, h: &[f64], tau: &[f64]) -> Result<Vec<f64>> {
        let z = self.input(h, tau)?;
        let cache = nn::propagate(&self.arch, &self.psi, &z, false, 0)?;
        Ok(cache.logits().to_vec())
    }

    /// Routing decision without any bookkeeping.
    pub fn decide(&self, h: &[f64], tau: &[f64]) -> Result<RoutingDecision> {
        let alpha = self.scores(h, tau)?;
        Ok(RoutingDecision {
            pathway: argmax(&alpha),
            alpha,
        })
    }

    /// Routing decision booked onto the routing phase: one message plus the
    /// scorer pass.
    pub fn route(&self, h: &[f64], tau: &[f64], ledger: &mut EnergyLedger) -> Result<RoutingDecision> {
        ledger.ensure_open()?;
        let d = self.decide(h, tau)?;
        ledger.record(Phase::Routing, Counter::Messages, 1)?;
        ledger.record_pass(
            Phase::Routing,
            self.decision_flops(),
            (self.psi.len() + self.config.embed_dim) as u64,
        )?;
        Ok(d)
    }

    /// One SGD step on the scorer (and embeddings when enabled) against the
    /// target pathways. Returns the batch cross-entropy before the step.
    pub fn train_step(
        &mut self,
        batch: &[RouterSample],
        schedule: &LrSchedule,
        t: u64,
        ledger: &mut EnergyLedger,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("router batch".into()));
        }
        ledger.ensure_open()?;
        let d = self.config.embed_dim;
        let mut grad = vec![0.0; self.psi.len()];
        let mut emb_grad: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut loss = 0.0;
        for s in batch {
            if s.target >= self.n_pathways {
                return Err(Error::Contract(format!(
                    "target pathway {} out of range 0..{}",
                    s.target, self.n_pathways
                )));
            }
            let tau = self.embed_task(s.task);
            let z = self.input(&s.h, &tau)?;
            let cache = nn::propagate(&self.arch, &self.psi, &z, false, 0)?;
            let (l, g_out) = nn::head_loss_grad(Head::SoftmaxXent, cache.logits(), &Target::Class(s.target))?;
            loss += l;
            let g_z = nn::backprop(&self.arch, &self.psi, &cache, &g_out, &mut grad);
            if self.config.train_embeddings {
                let acc = emb_grad.entry(s.task).or_insert_with(|| vec![0.0; d]);
                for (a, g) in acc.iter_mut().zip(&g_z[self.feature_width..]) {
                    *a += g;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("router loss is {loss}")));
        }
        let wd = self.config.weight_decay;
        for (g, p) in grad.iter_mut().zip(&self.psi) {
            *g = *g * inv + wd * p;
        }
        nn::sgd_step(&mut self.psi, &grad, schedule, t)?;
        let eta = schedule.rate(t);
        for (task, g) in emb_grad {
            let row = self.embed.get_mut(&task).expect("registered above");
            for (e, gv) in row.iter_mut().zip(g) {
                *e -= eta * gv * inv;
            }
        }
        let n = batch.len() as u64;
        ledger.record_work(
            Phase::Routing,
            3 * self.decision_flops() * n,
            2 * self.psi.len() as u64 * n,
        )?;
        Ok(loss)
    }
}

/// Mean of `||e_a - e_b||^2` over the points: twice the disagreement rate.
/// Sample targets are ignored.
pub fn routing_discrepancy(a: &Router, b: &Router, eval_set: &[RouterSample]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Empty("discrepancy evaluation set".into()));
    }
    if a.n_pathways != b.n_pathways {
        return Err(Error::Contract(format!(
            "routers disagree on K: {} vs {}",
            a.n_pathways, b.n_pathways
        )));
    }
    let mut disagree = 0usize;
    for s in eval_set {
        let ka = a.decide(&s.h, &a.task_embedding(s.task))?.pathway;
        let kb = b.decide(&s.h, &b.task_embedding(s.task))?.pathway;
        if ka != kb {
            disagree += 1;
        }
    }
    Ok(2.0 * disagree as f64 / eval_set.len() as f64)
}

/// Fraction of points routed to their target pathway.
pub fn routing_accuracy(router: &Router, labeled: &[RouterSample]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::Empty("routing accuracy set".into()));
    }
    let mut hits = 0usize;
    for s in labeled {
        if s.target >= router.n_pathways {
            return Err(Error::Contract(format!("label {} out of range", s.target)));
        }
        if router.decide(&s.h, &router.task_embedding(s.task))?.pathway == s.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / labeled.len() as f64)
}
