//! Stability, plasticity and forgetting instrumentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Losses of one earlier task at three parameter states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub loss_current: f64,
    pub loss_snapshot: f64,
    pub loss_random: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub raw: f64,
    /// `raw` clamped to `[0, 1]`.
    pub clamped: f64,
    /// Set when the random baseline is not worse than the snapshot, so the
    /// normalization runs backwards.
    pub inverted: bool,
}

/// `1 - (current - snapshot) / (random - snapshot)`.
pub fn stability_ratio(t: &LossTriple) -> Result<Stability> {
    let denom = t.loss_random - t.loss_snapshot;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "random-baseline loss {} equals snapshot loss {}",
            t.loss_random, t.loss_snapshot
        )));
    }
    let raw = 1.0 - (t.loss_current - t.loss_snapshot) / denom;
    Ok(Stability {
        raw,
        clamped: raw.clamp(0.0, 1.0),
        inverted: denom < 0.0,
    })
}

/// Mean of the per-task stabilities of tasks before `t`.
pub fn average_stability(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("stability is undefined before the second task".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `(random - after) / (random - before)`, reported raw. Values above 1 mean
/// the warm start already beat the random baseline.
pub fn plasticity_ratio(loss_random: f64, loss_after: f64, loss_before: f64) -> Result<f64> {
    let denom = loss_random - loss_before;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "random-baseline loss {loss_random} equals pre-training loss {loss_before}"
        )));
    }
    Ok((loss_random - loss_after) / denom)
}

/// Loss increase on an earlier task; negative values are backward transfer.
pub fn forgetting(loss_after_t: f64, loss_at_snapshot: f64) -> f64 {
    loss_after_t - loss_at_snapshot
}

/// Squared Pearson correlation.
pub fn pearson_r2(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Shape(format!(
            "correlation needs two equal series of length >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant series has no correlation".into()));
    }
    Ok(sxy * sxy / (sxx * syy))
}

/// True when every point of `other` is weakly dominated (both coordinates
/// `>=`) by some point of `points`.
pub fn pareto_weakly_dominates(points: &[(f64, f64)], other: &[(f64, f64)]) -> bool {
    other
        .iter()
        .all(|&(s, p)| points.iter().any(|&(s2, p2)| s2 >= s && p2 >= p))
}

/// Measurements for an earlier task `i` after training through task `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub i: usize,
    pub t: usize,
    pub losses: LossTriple,
    pub accuracy: f64,
    pub stability: Stability,
    pub forgetting: f64,
    /// `0.5 dTheta^T F_i dTheta` when a Fisher estimate for task `i` exists.
    pub predicted_forgetting: Option<f64>,
    pub forgetting_bound: Option<f64>,
}

/// Measurements after training task `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub loss_before: f64,
    pub loss_random: f64,
    /// Undefined for the first task.
    pub stability: Option<f64>,
    pub plasticity: Option<f64>,
    pub routing_accuracy: Option<f64>,
    pub train_loss: Vec<f64>,
    pub energy_total: f64,
    pub budget_ok: Option<bool>,
    pub budget_margin: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub steps: Vec<StepMetrics>,
}

impl MetricsReport {
    /// Stability after the final task.
    pub fn final_stability(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.stability)
    }

    /// Mean forgetting over earlier tasks after the final task.
    pub fn final_forgetting(&self) -> Option<f64> {
        let t = self.steps.last()?.t;
        let v: Vec<f64> = self.pairs.iter().filter(|p| p.t == t).map(|p| p.forgetting).collect();
        average_stability(&v).ok()
    }

    pub fn mean_plasticity(&self) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter_map(|s| s.plasticity).collect();
        average_stability(&v).ok()
    }

    pub fn final_mean_loss(&self) -> Option<f64> {
        let last = self.steps.last()?;
        let mut v: Vec<f64> = self
            .pairs
            .iter()
            .filter(|p| p.t == last.t)
            .map(|p| p.losses.loss_current)
            .collect();
        v.push(last.loss);
        average_stability(&v).ok()
    }

    /// Long format: `run,method,i,t,metric,value`. Per-step metrics leave
    /// `i` empty.
    pub fn to_csv(&self, run: &str, method: &str) -> String {
        let mut out = String::from("run,method,i,t,metric,value\n");
        let mut row = |i: Option<usize>, t: usize, metric: &str, value: f64| {
            let i = i.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{run},{method},{i},{t},{metric},{value}\n"));
        };
        for s in &self.steps {
            row(None, s.t, "loss", s.loss);
            row(None, s.t, "accuracy", s.accuracy);
            row(None, s.t, "loss_before", s.loss_before);
            row(None, s.t, "loss_random", s.loss_random);
            if let Some(v) = s.stability {
                row(None, s.t, "stability", v);
            }
            if let Some(v) = s.plasticity {
                row(None, s.t, "plasticity", v);
            }
            if let Some(v) = s.routing_accuracy {
                row(None, s.t, "routing_accuracy", v);
            }
            row(None, s.t, "energy_total", s.energy_total);
            if let Some(v) = s.budget_margin {
                row(None, s.t, "budget_margin", v);
            }
        }
        for p in &self.pairs {
            row(Some(p.i), p.t, "loss_current", p.losses.loss_current);
            row(Some(p.i), p.t, "loss_snapshot", p.losses.loss_snapshot);
            row(Some(p.i), p.t, "loss_random", p.losses.loss_random);
            row(Some(p.i), p.t, "accuracy", p.accuracy);
            row(Some(p.i), p.t, "stability_raw", p.stability.raw);
            row(Some(p.i), p.t, "stability", p.stability.clamped);
            row(Some(p.i), p.t, "forgetting", p.forgetting);
            if let Some(v) = p.predicted_forgetting {
                row(Some(p.i), p.t, "predicted_forgetting", v);
            }
            if let Some(v) = p.forgetting_bound {
                row(Some(p.i), p.t, "forgetting_bound", v);
            }
        }
        out
    }
}
