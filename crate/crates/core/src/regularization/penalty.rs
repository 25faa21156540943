use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathway::{IndexSet, ParamStore};
use crate::router::RoutingRecord;

/// Parameters after a task plus how often each parameter's pathway was
/// routed while that task's data passed through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSnapshot {
    pub task: usize,
    pub theta: Vec<f64>,
    pub usage: Vec<f64>,
}

impl TaskSnapshot {
    pub fn new(task: usize, theta: Vec<f64>, usage: Vec<f64>) -> Result<Self> {
        if theta.len() != usage.len() {
            return Err(Error::Shape(format!(
                "snapshot has {} parameters and {} usage weights",
                theta.len(),
                usage.len()
            )));
        }
        if let Some(u) = usage.iter().find(|u| !(u.is_finite() && **u >= 0.0)) {
            return Err(Error::Contract(format!("usage weight {u} is not >= 0")));
        }
        Ok(TaskSnapshot { task, theta, usage })
    }

    /// Usage from per-pathway routing counts: the shared block gets weight 1,
    /// block `k` the fraction of inputs routed to `k`.
    pub fn from_counts(task: usize, store: &ParamStore, counts: &[u64]) -> Result<Self> {
        if counts.len() != store.n_pathways() {
            return Err(Error::Shape(format!(
                "{} routing counts for {} pathways",
                counts.len(),
                store.n_pathways()
            )));
        }
        let total: u64 = counts.iter().sum();
        let mut usage = vec![0.0; store.len()];
        if total > 0 {
            usage[store.shared_range()].iter_mut().for_each(|u| *u = 1.0);
            for (k, &c) in counts.iter().enumerate() {
                let w = c as f64 / total as f64;
                usage[store.pathway_range(k)?].iter_mut().for_each(|u| *u = w);
            }
        }
        TaskSnapshot::new(task, store.theta().to_vec(), usage)
    }

    pub fn from_routing(task: usize, store: &ParamStore, records: &[RoutingRecord]) -> Result<Self> {
        let mut counts = vec![0u64; store.n_pathways()];
        for r in records.iter().filter(|r| r.task == task) {
            *counts
                .get_mut(r.pathway)
                .ok_or_else(|| Error::Contract(format!("record routed to pathway {}", r.pathway)))? += 1;
        }
        TaskSnapshot::from_counts(task, store, &counts)
    }

    /// Number of coordinates with nonzero usage.
    pub fn weighted_len(&self) -> usize {
        self.usage.iter().filter(|u| **u > 0.0).count()
    }
}

/// `sum_i sum_j usage_i[j] * (theta[j] - theta_i[j])^2`.
pub fn pathway_reg_loss(theta: &[f64], snapshots: &[TaskSnapshot]) -> Result<f64> {
    let mut total = 0.0;
    for s in snapshots {
        check_len(theta, &s.theta)?;
        total += theta
            .iter()
            .zip(&s.theta)
            .zip(&s.usage)
            .map(|((t, a), u)| u * (t - a) * (t - a))
            .sum::<f64>();
    }
    Ok(total)
}

/// Adds `weight * d/dtheta pathway_reg_loss` into `grad`, restricted to
/// `active` when given. Returns the number of coordinates touched.
pub fn add_pathway_reg_grad(
    theta: &[f64],
    snapshots: &[TaskSnapshot],
    weight: f64,
    active: Option<&IndexSet>,
    grad: &mut [f64],
) -> Result<usize> {
    check_len(theta, grad)?;
    let mut touched = 0;
    for s in snapshots {
        check_len(theta, &s.theta)?;
        let mut apply = |j: usize| {
            let u = s.usage[j];
            if u > 0.0 {
                grad[j] += weight * 2.0 * u * (theta[j] - s.theta[j]);
                touched += 1;
            }
        };
        match active {
            Some(set) => set.iter().for_each(&mut apply),
            None => (0..theta.len()).for_each(&mut apply),
        }
    }
    Ok(touched)
}

fn check_fisher(fisher_diag: &[f64]) -> Result<()> {
    if let Some((j, f)) = fisher_diag.iter().enumerate().find(|(_, f)| !(f.is_finite() && **f >= 0.0)) {
        return Err(Error::Contract(format!("Fisher entry {j} is {f}, expected >= 0")));
    }
    Ok(())
}

/// `(lambda / 2) * sum_j F_jj * (theta[j] - anchor[j])^2`.
pub fn ewc_penalty(theta: &[f64], anchor: &[f64], fisher_diag: &[f64], lambda: f64) -> Result<f64> {
    check_len(theta, anchor)?;
    check_len(theta, fisher_diag)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be >= 0, got {lambda}")));
    }
    check_fisher(fisher_diag)?;
    let s: f64 = theta
        .iter()
        .zip(anchor)
        .zip(fisher_diag)
        .map(|((t, a), f)| f * (t - a) * (t - a))
        .sum();
    Ok(0.5 * lambda * s)
}

/// Adds the EWC gradient `lambda * F_jj * (theta[j] - anchor[j])`, restricted
/// to `active` when given. Returns the number of coordinates touched.
pub fn add_ewc_grad(
    theta: &[f64],
    anchor: &[f64],
    fisher_diag: &[f64],
    lambda: f64,
    active: Option<&IndexSet>,
    grad: &mut [f64],
) -> Result<usize> {
    check_len(theta, anchor)?;
    check_len(theta, fisher_diag)?;
    check_len(theta, grad)?;
    check_fisher(fisher_diag)?;
    let mut touched = 0;
    let mut apply = |j: usize| {
        let f = fisher_diag[j];
        if f > 0.0 {
            grad[j] += lambda * f * (theta[j] - anchor[j]);
            touched += 1;
        }
    };
    match active {
        Some(set) => set.iter().for_each(&mut apply),
        None => (0..theta.len()).for_each(&mut apply),
    }
    Ok(touched)
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}
