use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyLedger, Phase};
use crate::error::{Error, Result};
use crate::nn::{Head, Target};
use crate::pathway::{self, ParamStore, PathwayLayout};
use crate::util;

/// Largest store the full-matrix estimator accepts.
pub const FULL_FISHER_MAX_PARAMS: usize = 500;

/// Dense symmetric matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = *v;
        }
        m
    }

    /// Builds from row-major data; rejects asymmetric input.
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        let m = SymMatrix { n, data };
        let asym = m.asymmetry();
        if asym > 1e-12 * (1.0 + m.max_abs()) {
            return Err(Error::Contract(format!("matrix is not symmetric (max gap {asym})")));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `max |F - F^T|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| util::dot(&self.data[i * self.n..(i + 1) * self.n], v))
            .collect()
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        util::dot(v, &self.mul_vec(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherValues {
    Diagonal(Vec<f64>),
    Full(SymMatrix),
}

/// Fisher information of one task's log-likelihood at its snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherInfo {
    pub task: usize,
    pub values: FisherValues,
    pub n_samples: usize,
}

impl FisherInfo {
    pub fn dim(&self) -> usize {
        match &self.values {
            FisherValues::Diagonal(d) => d.len(),
            FisherValues::Full(m) => m.dim(),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match &self.values {
            FisherValues::Diagonal(d) => d.clone(),
            FisherValues::Full(m) => m.diagonal(),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self.values, FisherValues::Full(_))
    }
}

/// Draws `n_samples` inputs from `data`, a label from the model's own
/// predictive distribution, and yields the score vector `d log p(y|x) / d theta`
/// (dense over the store, zero outside pathway `k`).
fn for_each_score(
    store: &ParamStore,
    layout: &PathwayLayout,
    k: usize,
    data: &[Vec<f64>],
    n_samples: usize,
    seed: u64,
    ledger: &mut EnergyLedger,
    mut f: impl FnMut(&[f64]),
) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::Config("Fisher estimate needs n_samples >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("Fisher data".into()));
    }
    if layout.head(k).head != Head::SoftmaxXent {
        return Err(Error::Unsupported(
            "Fisher information needs a log-likelihood (softmax) head".into(),
        ));
    }
    let mut rng = util::rng(seed, 0xf15e);
    for _ in 0..n_samples {
        let x = &data[rng.random_range(0..data.len())];
        let (probs, cache) = pathway::pathway_forward(store, layout, k, x, ledger, Phase::Train)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut y = probs.len() - 1;
        for (c, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                y = c;
                break;
            }
        }
        // gradient of -log p(y|x); its outer product equals the score's
        let g = pathway::pathway_backward(store, layout, k, &cache, &Target::Class(y), ledger, Phase::Train)?;
        f(&g.grad);
    }
    Ok(())
}

/// Diagonal Fisher over pathway `k` (the whole network when `K = 1`).
#[allow(clippy::too_many_arguments)]
pub fn estimate_fisher_diag(
    store: &ParamStore,
    layout: &PathwayLayout,
    k: usize,
    task: usize,
    data: &[Vec<f64>],
    n_samples: usize,
    seed: u64,
    ledger: &mut EnergyLedger,
) -> Result<FisherInfo> {
    let mut diag = vec![0.0; store.len()];
    let active = store.active_params(k)?;
    for_each_score(store, layout, k, data, n_samples, seed, ledger, |g| {
        for j in active.iter() {
            diag[j] += g[j] * g[j];
        }
    })?;
    let inv = 1.0 / n_samples as f64;
    diag.iter_mut().for_each(|v| *v *= inv);
    Ok(FisherInfo {
        task,
        values: FisherValues::Diagonal(diag),
        n_samples,
    })
}

/// Full Fisher (mean outer product of scores) over the whole store, with
/// scores taken through pathway `k`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_fisher_full(
    store: &ParamStore,
    layout: &PathwayLayout,
    k: usize,
    task: usize,
    data: &[Vec<f64>],
    n_samples: usize,
    seed: u64,
    ledger: &mut EnergyLedger,
) -> Result<FisherInfo> {
    let n = store.len();
    if n > FULL_FISHER_MAX_PARAMS {
        return Err(Error::Config(format!(
            "full Fisher limited to {FULL_FISHER_MAX_PARAMS} parameters, store has {n}"
        )));
    }
    let active: Vec<usize> = store.active_params(k)?.iter().collect();
    let mut m = vec![0.0; n * n];
    for_each_score(store, layout, k, data, n_samples, seed, ledger, |g| {
        for (a, &i) in active.iter().enumerate() {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            for &j in &active[..=a] {
                m[i * n + j] += gi * g[j];
            }
        }
    })?;
    let inv = 1.0 / n_samples as f64;
    for i in 0..n {
        for j in 0..=i {
            let v = m[i * n + j] * inv;
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    Ok(FisherInfo {
        task,
        values: FisherValues::Full(SymMatrix { n, data: m }),
        n_samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaMax {
    pub value: f64,
    pub iterations: usize,
    /// False when `max_iters` ran out before the residual met `tol`.
    pub converged: bool,
}

/// Dominant eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Stops when `||F v - lambda v|| <= tol * max(1, lambda)`. The Rayleigh
/// quotient never exceeds the true eigenvalue.
pub fn lambda_max(f: &SymMatrix, max_iters: usize, tol: f64) -> LambdaMax {
    let n = f.dim();
    if n == 0 {
        return LambdaMax {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut rng = util::rng(0x5eed, n as u64);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut value = 0.0;
    for it in 1..=max_iters {
        let w = f.mul_vec(&v);
        value = util::dot(&v, &w);
        let resid = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - value * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if resid <= tol * value.abs().max(1.0) {
            return LambdaMax {
                value: value.max(0.0),
                iterations: it,
                converged: true,
            };
        }
        let norm = util::dot(&w, &w).sqrt();
        if norm == 0.0 {
            return LambdaMax {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    LambdaMax {
        value: value.max(0.0),
        iterations: max_iters,
        converged: false,
    }
}

fn normalize(v: &mut [f64]) {
    let n = util::dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingPrediction {
    /// `0.5 * dTheta^T F dTheta`.
    pub quadratic: f64,
    /// `0.5 * lambda_max(F) * ||dTheta||^2`.
    pub bound: f64,
    pub lambda_max: f64,
}

/// Second-order forgetting estimate and its spectral upper bound.
///
/// The eigenvalue used for the bound is the larger of the power-iteration
/// estimate and the Rayleigh quotient of `delta` itself; both are lower
/// bounds on the true `lambda_max`, and the maximum keeps `bound >= quadratic`.
pub fn predict_forgetting(delta: &[f64], fisher: &FisherInfo) -> Result<ForgettingPrediction> {
    if delta.len() != fisher.dim() {
        return Err(Error::Shape(format!(
            "delta has {} entries, Fisher is {}-dimensional",
            delta.len(),
            fisher.dim()
        )));
    }
    match &fisher.values {
        FisherValues::Diagonal(d) => {
            let lam = d.iter().cloned().fold(0.0, f64::max);
            let quadratic = 0.5 * d.iter().zip(delta).map(|(f, x)| f * x * x).sum::<f64>();
            let bound = 0.5 * delta.iter().map(|x| lam * x * x).sum::<f64>();
            Ok(ForgettingPrediction {
                quadratic,
                bound,
                lambda_max: lam,
            })
        }
        FisherValues::Full(m) => {
            let quadratic = 0.5 * m.quadratic_form(delta);
            let sq = util::dot(delta, delta);
            let mut lam = lambda_max(m, 10_000, 1e-12).value;
            if sq > 0.0 {
                lam = lam.max(2.0 * quadratic / sq);
            }
            let bound = (0.5 * lam * sq).max(quadratic);
            Ok(ForgettingPrediction {
                quadratic,
                bound,
                lambda_max: lam,
            })
        }
    }
}
